// Acceptance suite: one pass/fail line per criterion, exit 0 only if all pass.
// Each criterion is self-contained and ordered cheap-to-expensive except the
// training smoke, which runs second to last so its output lands near the end.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "hvae/evaldis.hpp"
#include "hvae/manipulate.hpp"
#include "hvae/trainer.hpp"

using namespace hvae;
using model::ModelConfig;
using objective::Branch;
using objective::ObjectiveKind;
using objective::ScheduleState;

namespace {

struct Outcome {
    bool ok = true;
    std::string detail;

    void fail(const std::string& why) {
        ok = false;
        if (!detail.empty()) detail += "; ";
        detail += why;
    }
    void require(bool cond, const std::string& why) {
        if (!cond) fail(why);
    }
};

ModelConfig tiny_config(uint64_t seed) {
    ModelConfig cfg;
    cfg.n1 = cfg.n2 = cfg.n3 = 2;
    cfg.z_size = 2;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.vocab_size = 20;
    cfg.max_len = 16;
    cfg.seed = seed;
    return cfg;
}

std::vector<int> random_sentence(const ModelConfig& cfg, int interior, Rng& rng) {
    std::vector<int> ids{corpus::kBos};
    for (int t = 0; t < interior; ++t)
        ids.push_back(corpus::kNumReserved +
                      static_cast<int>(rng.uniform_int(cfg.vocab_size - corpus::kNumReserved)));
    ids.push_back(corpus::kEos);
    return ids;
}

// ---- 1: closed-form KL against a Monte-Carlo oracle ----

Outcome criterion_kl_oracle() {
    Outcome out;
    Rng rng(101);
    const long N = 1000000;
    for (int pair = 0; pair < 50; ++pair) {
        const int dim = 1 + static_cast<int>(rng.uniform_int(8));
        std::vector<double> mq(dim), sq(dim), mp(dim), sp(dim);
        for (int i = 0; i < dim; ++i) {
            mq[i] = 4 * rng.uniform() - 2;
            mp[i] = 4 * rng.uniform() - 2;
            sq[i] = 0.3 + 1.7 * rng.uniform();
            sp[i] = 0.3 + 1.7 * rng.uniform();
        }
        const double closed = objective::kl_diag_gauss(mq, sq, mp, sp);

        // sample x ~ q, average log q(x) - log p(x); constants cancel
        double sum = 0, sum2 = 0;
        for (long n = 0; n < N; ++n) {
            double f = 0;
            for (int i = 0; i < dim; ++i) {
                const double x = mq[i] + sq[i] * rng.gauss();
                const double dq = (x - mq[i]) / sq[i];
                const double dp = (x - mp[i]) / sp[i];
                f += 0.5 * (dp * dp - dq * dq) + std::log(sp[i] / sq[i]);
            }
            sum += f;
            sum2 += f * f;
        }
        const double mean = sum / N;
        const double var = std::max(0.0, sum2 / N - mean * mean);
        const double se = std::sqrt(var / N);
        if (std::abs(mean - closed) > 3 * se) {
            std::ostringstream os;
            os << "pair " << pair << ": closed " << closed << " vs MC " << mean << " (3se "
               << 3 * se << ")";
            out.fail(os.str());
        }
    }
    return out;
}

// ---- 2: analytic gradients vs central finite differences ----

Outcome criterion_gradcheck() {
    Outcome out;
    // seed chosen so no ReLU preactivation sits within the FD step of its kink
    auto cfg = tiny_config(257);
    auto ps = model::build_model<double>(cfg);
    const std::vector<int> ids = {1, 5, 9, 7, 12, 6, 14, 2};
    Tensor<double> eps[4];
    Rng noise(55);
    for (int level = 1; level <= 3; ++level) {
        eps[level] = Tensor<double>(cfg.n_of(level), cfg.z_size);
        train::fill_gauss(eps[level], noise);
    }

    struct Scenario {
        ObjectiveKind kind;
        double beta;
        Branch expected;
        const char* name;
    };
    // beta chosen so the untrained losses (recon ~ 21, kl ~ a few nats) land
    // firmly on each side of the mobile threshold
    const Scenario scenarios[] = {
        {ObjectiveKind::EQ2_LITERAL, 0.5, Branch::KL, "eq2/KL"},
        {ObjectiveKind::EQ2_LITERAL, 200.0, Branch::RECON, "eq2/RECON"},
        {ObjectiveKind::GATED_ADDITIVE, 200.0, Branch::KL, "gated/KL"},
        {ObjectiveKind::GATED_ADDITIVE, 0.5, Branch::RECON, "gated/RECON"},
    };
    const double alpha = 1.0, h = 1e-4;

    auto loss_value = [&](ObjectiveKind kind, double beta) {
        Graph<double> g;
        model::Binder<double> b(g, ps, nullptr);
        auto ex = train::example_loss<double>(b, cfg, ids, eps, alpha, beta, kind);
        return std::pair(g.val(ex.loss).v[0], ex.breakdown.selected_branch);
    };

    for (const auto& sc : scenarios) {
        auto grads = ps.zero_like();
        Branch got;
        {
            Graph<double> g;
            model::Binder<double> b(g, ps, &grads);
            auto ex = train::example_loss<double>(b, cfg, ids, eps, alpha, sc.beta, sc.kind);
            got = ex.breakdown.selected_branch;
            g.backward(ex.loss);
        }
        if (got != sc.expected) {
            out.fail(std::string(sc.name) + ": forced branch not obtained");
            continue;
        }
        double worst = 0;
        std::string worst_at;
        for (size_t p = 0; p < ps.values.size(); ++p)
            for (size_t i = 0; i < ps.values[p].v.size(); ++i) {
                double& w = ps.values[p].v[i];
                const double keep = w;
                w = keep + h;
                const double up = loss_value(sc.kind, sc.beta).first;
                w = keep - h;
                const double dn = loss_value(sc.kind, sc.beta).first;
                w = keep;
                const double numeric = (up - dn) / (2 * h);
                const double analytic = grads[p].v[i];
                const double rel = std::abs(analytic - numeric) /
                                   std::max({std::abs(analytic), std::abs(numeric), 1e-4});
                if (rel > worst) {
                    worst = rel;
                    worst_at = ps.paths[p] + "[" + std::to_string(i) + "]";
                }
            }
        if (worst > 1e-3) {
            std::ostringstream os;
            os << sc.name << ": max rel err " << worst << " at " << worst_at;
            out.fail(os.str());
        }
    }
    return out;
}

// ---- 3: decoder causality ----

Outcome criterion_causality() {
    Outcome out;
    auto cfg = tiny_config(7);
    auto ps = model::build_model<float>(cfg);
    Rng rng(77);
    for (int trial = 0; trial < 100; ++trial) {
        auto targets = random_sentence(cfg, 3 + static_cast<int>(rng.uniform_int(9)), rng);
        const int L = static_cast<int>(targets.size());
        Tensor<float> lat(cfg.total_latents(), cfg.z_size);
        train::fill_gauss(lat, rng);

        auto logits_for = [&](const std::vector<int>& t) {
            Graph<float> g;
            model::Binder<float> b(g, ps, nullptr);
            auto src = model::identify_latents(b, g.input(lat));
            return g.val(model::decode_logits(b, cfg, src, t));
        };
        auto base = logits_for(targets);

        const int k = 1 + static_cast<int>(rng.uniform_int(L - 1));
        auto perturbed = targets;
        perturbed[k] = corpus::kNumReserved +
                       static_cast<int>((perturbed[k] + 1 - corpus::kNumReserved) %
                                        (cfg.vocab_size - corpus::kNumReserved));
        auto mod = logits_for(perturbed);

        for (int r = 0; r < k && out.ok; ++r)
            for (int c = 0; c < base.cols; ++c)
                if (std::abs(base(r, c) - mod(r, c)) > 1e-6f) {
                    std::ostringstream os;
                    os << "trial " << trial << ": logits[" << r << "," << c
                       << "] moved before perturbed position " << k;
                    out.fail(os.str());
                    break;
                }
        if (!out.ok) break;
    }
    return out;
}

// ---- 4: fixed-arity posterior contract ----

Outcome criterion_fixed_arity() {
    Outcome out;
    ModelConfig cfg;  // defaults: n_k = 16, z_size 8
    cfg.vocab_size = 30;
    cfg.seed = 11;
    auto ps = model::build_model<float>(cfg);
    Rng rng(13);
    for (int len = 4; len <= 14; ++len) {
        auto ids = random_sentence(cfg, len - 2, rng);
        Graph<float> g;
        model::Binder<float> b(g, ps, nullptr);
        Tensor<float> eps[4];
        for (int level = 1; level <= 3; ++level)
            eps[level] = Tensor<float>(cfg.n_of(level), cfg.z_size);
        auto post = model::infer_posteriors(b, cfg, ids, eps);
        for (int level = 1; level <= 3; ++level) {
            const auto& m = g.val(post.level[level].mean);
            const auto& s = g.val(post.level[level].std);
            const auto& v = g.val(post.value[level]);
            const bool shape_ok = m.rows == cfg.n_of(level) && m.cols == cfg.z_size &&
                                  s.rows == cfg.n_of(level) && s.cols == cfg.z_size &&
                                  v.rows == cfg.n_of(level) && v.cols == cfg.z_size;
            if (!shape_ok) {
                std::ostringstream os;
                os << "length " << len << " level " << level << ": posterior shape "
                   << m.rows << "x" << m.cols;
                out.fail(os.str());
            }
        }
    }
    return out;
}

// ---- 5: mobile-threshold branch semantics and gradient gating ----

Outcome criterion_branch_semantics() {
    Outcome out;
    const std::array<double, 3> kl_grids[] = {
        {0.0, 0.0, 0.0}, {1.0, 1.0, 1.0}, {2.0, 1.0, 2.0}, {0.3, 4.0, 0.1}, {5.0, 0.2, 5.0}};
    for (double recon : {0.0, 0.5, 5.0, 30.0})
        for (const auto& kls : kl_grids)
            for (double alpha : {0.0, 0.3, 1.0})
                for (double beta : {3.0, 6.0})
                    for (auto kind : {ObjectiveKind::EQ2_LITERAL, ObjectiveKind::GATED_ADDITIVE}) {
                        auto b = objective::mobile_threshold_loss(recon, kls, alpha, beta, kind);
                        // ties go to the lowest level
                        int expect_level = 0;
                        for (int i = 1; i < 3; ++i)
                            if (kls[i] > kls[expect_level]) expect_level = i;
                        out.require(b.kl_max_level == expect_level + 1, "kl_max tie break");
                        out.require(b.kl_max == kls[expect_level], "kl_max value");
                        const double threshold = alpha * beta * b.kl_max;
                        if (alpha == 0.0) {
                            out.require(b.selected_branch == Branch::RECON &&
                                            b.total_loss == recon,
                                        "alpha=0 must be pure reconstruction");
                        } else if (kind == ObjectiveKind::EQ2_LITERAL) {
                            if (threshold > recon)
                                out.require(b.selected_branch == Branch::RECON &&
                                                b.total_loss == recon,
                                            "eq2 above threshold");
                            else
                                out.require(b.selected_branch == Branch::KL &&
                                                b.total_loss == threshold,
                                            "eq2 below threshold");
                        } else {
                            if (threshold >= recon)
                                out.require(b.selected_branch == Branch::KL &&
                                                b.total_loss == recon + threshold,
                                            "gated penalized");
                            else
                                out.require(b.selected_branch == Branch::RECON &&
                                                b.total_loss == recon,
                                            "gated below threshold");
                        }
                    }

    // gradient gating on 1x1 scalar leaves: the non-selected quantity and the
    // non-argmax KL layers receive exactly zero gradient
    auto gate = [&](ObjectiveKind kind, double recon, std::array<double, 3> kls, double alpha,
                    double beta, const std::array<double, 4>& expect, const char* name) {
        Graph<double> g;
        Tensor<double> sinks[4];
        for (auto& s : sinks) s = Tensor<double>(1, 1);
        Tensor<double> rv(1, 1), k1(1, 1), k2(1, 1), k3(1, 1);
        rv.v[0] = recon;
        k1.v[0] = kls[0];
        k2.v[0] = kls[1];
        k3.v[0] = kls[2];
        auto r = g.leaf(rv, &sinks[0]);
        std::array<Graph<double>::Ref, 3> kr{g.leaf(k1, &sinks[1]), g.leaf(k2, &sinks[2]),
                                             g.leaf(k3, &sinks[3])};
        auto loss = objective::mobile_threshold_loss_graph<double>(g, r, kr, alpha, beta, kind);
        g.backward(loss);
        for (int i = 0; i < 4; ++i)
            if (sinks[i].v[0] != expect[i]) {
                std::ostringstream os;
                os << name << ": grad[" << i << "] = " << sinks[i].v[0] << ", want "
                   << expect[i];
                out.fail(os.str());
            }
    };
    // alpha*beta = 0.5*6 = 3 below; kl argmax is layer 2 (index 1)
    gate(ObjectiveKind::EQ2_LITERAL, 20.0, {1, 2, 1}, 0.5, 6, {0, 0, 3, 0}, "eq2 KL branch");
    gate(ObjectiveKind::EQ2_LITERAL, 1.0, {1, 2, 1}, 0.5, 6, {1, 0, 0, 0}, "eq2 RECON branch");
    gate(ObjectiveKind::GATED_ADDITIVE, 1.0, {1, 2, 1}, 0.5, 6, {1, 0, 3, 0}, "gated penalized");
    gate(ObjectiveKind::GATED_ADDITIVE, 20.0, {1, 2, 1}, 0.5, 6, {1, 0, 0, 0}, "gated below");
    gate(ObjectiveKind::EQ2_LITERAL, 20.0, {1, 2, 1}, 0.0, 6, {1, 0, 0, 0}, "eq2 warmup");
    gate(ObjectiveKind::GATED_ADDITIVE, 20.0, {1, 2, 1}, 0.0, 6, {1, 0, 0, 0}, "gated warmup");
    return out;
}

// ---- 6: annealing schedule ----

Outcome criterion_schedule() {
    Outcome out;
    ScheduleState st;
    st.step = 2999;
    out.require(objective::alpha_at(st) == 0.0, "alpha at step 2999");
    st.step = 4500;
    out.require(objective::alpha_at(st) == 0.5, "alpha at step 4500");
    st.step = 6000;
    out.require(objective::alpha_at(st) == 1.0, "alpha at step 6000");

    ScheduleState bs;
    const double perps[] = {40, 35, 36, 33, 33};
    const double expect[] = {6, 6, 5, 5, 4};
    for (int e = 0; e < 5; ++e) {
        const bool halt = objective::update_beta(bs, e + 1, perps[e]);
        out.require(!halt, "halt fired before the floor");
        if (bs.beta != expect[e]) {
            std::ostringstream os;
            os << "beta after perplexity " << perps[e] << " is " << bs.beta << ", want "
               << expect[e];
            out.fail(os.str());
        }
    }
    // keep plateauing: one more decrement to the floor, improvement does not
    // halt there, and the next plateau at the floor does
    out.require(!objective::update_beta(bs, 6, 33) && bs.beta == 3, "decrement to floor");
    out.require(!objective::update_beta(bs, 7, 20), "improvement at floor must not halt");
    out.require(objective::update_beta(bs, 8, 20) && bs.beta == 3, "plateau at floor halts");
    out.require(bs.beta >= 3, "beta below floor");
    return out;
}

// ---- 7: latent manipulation algebra ----

Outcome criterion_manipulation() {
    Outcome out;
    auto cfg = tiny_config(19);
    auto ps = model::build_model<float>(cfg);
    Rng rng(23);

    for (int trial = 0; trial < 1000 && out.ok; ++trial) {
        auto base = manip::sample_prior_chain(ps, cfg, rng);
        const int lv = static_cast<int>(rng.uniform_int(cfg.total_latents()));
        auto mod = manip::resample_single_lv(ps, cfg, base, lv, rng);
        for (int r = 0; r < base.values.rows; ++r)
            for (int c = 0; c < base.values.cols; ++c)
                if (r != lv && mod.values(r, c) != base.values(r, c))
                    out.fail("resample touched LV " + std::to_string(r));
    }

    for (int trial = 0; trial < 1000 && out.ok; ++trial) {
        auto a = manip::sample_prior_chain(ps, cfg, rng);
        auto b = manip::sample_prior_chain(ps, cfg, rng);
        const int lv = static_cast<int>(rng.uniform_int(cfg.total_latents()));
        auto [a1, b1] = manip::swap_lv(a, b, lv);
        for (int r = 0; r < a.values.rows; ++r)
            for (int c = 0; c < a.values.cols; ++c) {
                const float ea = r == lv ? b.values(r, c) : a.values(r, c);
                const float eb = r == lv ? a.values(r, c) : b.values(r, c);
                if (a1.values(r, c) != ea || b1.values(r, c) != eb)
                    out.fail("swap locality violated at LV " + std::to_string(r));
            }
        auto [a2, b2] = manip::swap_lv(a1, b1, lv);
        if (a2.values.v != a.values.v || b2.values.v != b.values.v)
            out.fail("swap is not an involution");
    }

    for (int trial = 0; trial < 1000 && out.ok; ++trial) {
        auto lat = manip::sample_prior_chain(ps, cfg, rng);
        auto g1 = manip::greedy_generate(ps, cfg, lat, cfg.max_len);
        auto g2 = manip::greedy_generate(ps, cfg, lat, cfg.max_len);
        if (g1.sequence.ids != g2.sequence.ids) out.fail("greedy generation not deterministic");
    }
    return out;
}

// ---- 8: protocol bookkeeping ----

Outcome criterion_protocol_bookkeeping() {
    Outcome out;
    auto spec = corpus::load_grammar("data/default_grammar.json");
    // n_k = 16 per level -> 48 LVs; 100 bases x 10 resamples x 48 LVs
    evaldis::WiredGenerator gen(spec, {{"ARG0", 2}, {"V", 9}, {"ARG1", 20}, {"ARG2", 33}}, 48, 8);
    auto records = evaldis::run_influence_experiment(gen, spec, 100, 10, 31);
    if (records.size() != 48000) {
        out.fail("expected 48000 couples, got " + std::to_string(records.size()));
    }

    auto parse = [&](const std::vector<std::string>& toks) {
        return evaldis::parse_roles(toks, spec);
    };
    const std::vector<std::string> trans = {"a", "dog", "is", "chasing", "a", "ball"};
    const std::vector<std::string> intrans = {"a", "dog", "is", "running"};
    auto d = evaldis::diff_statistics(parse(trans), parse(intrans), trans, intrans);
    out.require(d.dep_alter_abstain, "DEP_ALTER must abstain on unequal lengths");
    out.require(d.oie_alter_abstain, "OIE_ALTER must abstain on unequal predicate structure");
    out.require(d.dep_appear.count("dobj") == 1, "dobj must appear in the symmetric diff");

    const std::vector<std::string> trans2 = {"a", "cat", "is", "chasing", "a", "ball"};
    auto same = evaldis::diff_statistics(parse(trans), parse(trans2), trans, trans2);
    out.require(!same.dep_alter_abstain && !same.oie_alter_abstain,
                "equal-structure pair must not abstain");
    out.require(same.dep_alter == std::vector<std::string>{"nsubj"}, "nsubj alteration");
    return out;
}

// ---- 9: harness soundness via the wired decoder ----

Outcome criterion_wired_harness() {
    Outcome out;
    auto spec = corpus::load_grammar("data/default_grammar.json");
    auto report = evaldis::wired_decoder_check(spec, 123);
    out.require(report.record_count == 48000, "record count");
    for (const auto& [role, planted] : report.wiring) {
        auto it = report.top_by_role.find(role);
        if (it == report.top_by_role.end()) {
            out.fail("no top influencer for " + role);
            continue;
        }
        if (it->second.first != planted)
            out.fail(role + ": top LV " + std::to_string(it->second.first) + ", planted " +
                     std::to_string(planted));
        if (it->second.second < 0.9)
            out.fail(role + ": top probability " + std::to_string(it->second.second) + " < 0.9");
    }
    if (report.max_inert_cell > 0.1)
        out.fail("inert LV cell " + std::to_string(report.max_inert_cell) + " > 0.1");
    out.require(report.passed, "report.passed");
    return out;
}

// ---- 10: checkpoint round-trip ----

Outcome criterion_checkpoint() {
    Outcome out;
    auto cfg = tiny_config(43);
    Rng rng(47);
    std::vector<corpus::TokenSequence> batch;
    for (int i = 0; i < 8; ++i) batch.push_back({random_sentence(cfg, 6, rng)});

    auto ps = model::build_model<float>(cfg);
    ScheduleState st;
    train::AdamState adam;
    adam.init(ps);
    train::TrainOptions opt;
    opt.batch_size = 8;
    opt.seed = 53;
    for (int i = 0; i < 5; ++i) train::train_step(ps, cfg, batch, st, adam, opt);

    train::Checkpoint ckpt;
    ckpt.config = cfg;
    ckpt.schedule = st;
    ckpt.vocab_words = {"<pad>", "<bos>", "<eos>", "<unk>", "w"};
    ckpt.params = ps;
    ckpt.adam = adam;
    ckpt.rng_state = Rng(opt.seed).serialize();

    const std::string path = "acceptance_ckpt_tmp.bin";
    train::save_checkpoint(path, ckpt);
    auto loaded = train::load_checkpoint(path);
    std::remove(path.c_str());

    out.require(loaded.params.paths == ps.paths, "parameter path set");
    for (size_t i = 0; i < ps.values.size() && out.ok; ++i)
        if (loaded.params.values[i].v != ps.values[i].v)
            out.fail("parameter tensor " + ps.paths[i] + " not bitwise equal");
    for (size_t i = 0; i < adam.m.size() && out.ok; ++i)
        if (loaded.adam.m[i].v != adam.m[i].v || loaded.adam.v[i].v != adam.v[i].v)
            out.fail("optimizer moments not bitwise equal");

    auto loss_on = [&](const model::ParameterStore<float>& params) {
        auto copy = params;
        ScheduleState s2 = st;
        train::AdamState a2;
        a2.init(copy);
        return train::train_step(copy, cfg, batch, s2, a2, opt).total_loss;
    };
    if (loss_on(ps) != loss_on(loaded.params)) out.fail("loss differs after round-trip");
    return out;
}

// ---- 11: training smoke on the desk configuration ----

Outcome criterion_training_smoke() {
    Outcome out;
    const auto t0 = std::chrono::steady_clock::now();

    auto spec = corpus::load_grammar("data/default_grammar.json");
    auto sentences = corpus::generate_corpus(spec, 5000, 61);
    auto vocab = corpus::build_vocab(sentences);
    auto [train_raw, test_raw] = corpus::split_corpus(sentences, 0.9, 67);
    std::vector<corpus::TokenSequence> train_set, test_set;
    for (const auto& s : train_raw) train_set.push_back(corpus::tokenize(s.tokens, vocab));
    for (const auto& s : test_raw) test_set.push_back(corpus::tokenize(s.tokens, vocab));

    ModelConfig cfg;
    cfg.n1 = cfg.n2 = cfg.n3 = 4;
    cfg.z_size = 8;
    cfg.d_model = 48;
    cfg.heads = 4;
    cfg.enc_layers = 2;
    cfg.dec_layers = 3;
    cfg.vocab_size = vocab.size();
    cfg.max_len = 16;
    cfg.seed = 71;
    auto ps = model::build_model<float>(cfg);

    ScheduleState sched;  // warmup 3000, anneal 3000, beta 6 -> 3
    train::TrainOptions opt;
    // batch 48 keeps the ~7000-step full schedule inside the 30-minute budget
    // on one core; beta plateau tracking begins once annealing completes
    opt.batch_size = 48;
    opt.log_every = 1;
    opt.eval_every_epochs = 3;
    opt.max_steps = 7200;
    opt.seed = 73;

    const std::string dir = "acceptance_smoke_tmp";
    auto report = train::run_training(ps, cfg, opt, sched, vocab, train_set, test_set, dir);
    std::filesystem::remove_all(dir);

    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (report.rows.empty()) {
        out.fail("no report rows");
        return out;
    }

    const long steps_per_epoch =
        static_cast<long>((train_set.size() + opt.batch_size - 1) / opt.batch_size);
    const long final_from = report.rows.back().step - steps_per_epoch;
    double final_recon = 0, final_klmax = 0;
    long final_n = 0;
    for (const auto& row : report.rows)
        if (row.step > final_from) {
            final_recon += row.recon_nll;
            final_klmax += row.kl_max;
            ++final_n;
        }
    final_recon /= final_n;
    final_klmax /= final_n;
    const double initial_recon = report.rows.front().recon_nll;

    std::ostringstream os;
    os << "steps " << report.rows.back().step << ", recon " << initial_recon << " -> "
       << final_recon << ", final-epoch kl_max " << final_klmax << ", " << secs << " s";
    out.detail = os.str();
    if (final_recon > 0.5 * initial_recon)
        out.fail("reconstruction NLL fell less than 50%");
    if (final_klmax <= 0.1) out.fail("mean kl_max over the final epoch <= 0.1 nats");
    if (secs > 1800) out.fail("runtime exceeded 30 minutes");
    return out;
}

// ---- 12: attention aggregation bookkeeping ----

Outcome criterion_attention() {
    Outcome out;
    ModelConfig cfg;  // defaults: n_k 16, z 8, d 48
    cfg.vocab_size = 30;
    cfg.seed = 83;
    auto ps = model::build_model<float>(cfg);
    Rng rng(89);
    auto ids = random_sentence(cfg, 8, rng);

    Graph<float> g;
    model::Binder<float> b(g, ps, nullptr);
    Tensor<float> eps[4];
    for (int level = 1; level <= 3; ++level)
        eps[level] = Tensor<float>(cfg.n_of(level), cfg.z_size);
    model::AttentionRecord record;
    model::infer_posteriors(b, cfg, ids, eps, &record);

    for (int lv = 0; lv < cfg.total_latents(); ++lv) {
        const int level = cfg.level_of(lv);
        const int row = lv - cfg.level_offset(level);
        const auto& layers = record.levels[level - 1];
        for (int layer = 0; layer < static_cast<int>(layers.size()); ++layer) {
            auto att = model::extract_attention(record, cfg, lv, layer);
            // aggregate equals the head-averaged sum over latent columns
            const auto& heads = layers[layer];
            double latent_sum = 0;
            for (const auto& h : heads)
                for (int j = record.token_count; j < h.cols; ++j) latent_sum += h(row, j);
            latent_sum /= static_cast<double>(heads.size());
            if (std::abs(att.latent_sum - latent_sum) > 1e-9)
                out.fail("latent aggregate mismatch at lv " + std::to_string(lv));

            double total = att.latent_sum;
            for (double w : att.token_weights) {
                total += w;
                if (w < 0) out.fail("negative attention weight");
            }
            if (std::abs(total - 1.0) > 1e-5)
                out.fail("row not stochastic at lv " + std::to_string(lv) + ": sum " +
                         std::to_string(total));
        }
    }
    return out;
}

}  // namespace

int main() {
    struct Entry {
        int number;
        const char* title;
        Outcome (*fn)();
    };
    const Entry entries[] = {
        {1, "Gaussian KL closed form matches the Monte-Carlo oracle", criterion_kl_oracle},
        {2, "analytic gradients match central finite differences", criterion_gradcheck},
        {3, "decoder logits are causal", criterion_causality},
        {4, "posterior arity is fixed across sentence lengths", criterion_fixed_arity},
        {5, "mobile-threshold branch semantics and gradient gating", criterion_branch_semantics},
        {6, "annealing schedule conformance", criterion_schedule},
        {7, "latent manipulation algebra", criterion_manipulation},
        {8, "influence-protocol bookkeeping and abstention guards", criterion_protocol_bookkeeping},
        {9, "wired-decoder oracle recovery", criterion_wired_harness},
        {10, "checkpoint round-trip is bitwise exact", criterion_checkpoint},
        {11, "training smoke: schedule completes without collapse", criterion_training_smoke},
        {12, "attention aggregation bookkeeping", criterion_attention},
    };

    int failures = 0;
    for (const auto& e : entries) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome out;
        try {
            out = e.fn();
        } catch (const std::exception& ex) {
            out.fail(std::string("exception: ") + ex.what());
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("[%s] criterion %2d: %s (%.1f s)%s%s\n", out.ok ? "PASS" : "FAIL", e.number,
                    e.title, secs, out.detail.empty() ? "" : " -- ", out.detail.c_str());
        std::fflush(stdout);
        if (!out.ok) ++failures;
    }
    if (failures) std::printf("%d of 12 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
