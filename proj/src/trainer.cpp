#include "hvae/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>

namespace hvae::train {

namespace {

struct ExampleResult {
    LossBreakdown breakdown;
};

// Forward/backward for a contiguous slice of the batch, accumulating into the
// slice's own gradient buffer in example order.
void run_slice(const ParameterStore<float>& ps, const ModelConfig& cfg,
               const std::vector<corpus::TokenSequence>& batch, size_t begin, size_t end,
               const std::vector<std::array<Tensor<float>, 4>>& eps, double alpha, double beta,
               ObjectiveKind kind, double inv_batch, std::vector<Tensor<float>>& grads,
               std::vector<ExampleResult>& results) {
    for (size_t i = begin; i < end; ++i) {
        Graph<float> g;
        Binder<float> b(g, ps, &grads);
        auto ex = example_loss<float>(b, cfg, batch[i].ids, eps[i].data(), alpha, beta, kind);
        if (!std::isfinite(ex.breakdown.total_loss)) {
            std::ostringstream os;
            os << "non-finite loss: recon=" << ex.breakdown.recon_nll << " kl=("
               << ex.breakdown.layer_kl[0] << "," << ex.breakdown.layer_kl[1] << ","
               << ex.breakdown.layer_kl[2] << ") alpha=" << alpha << " beta=" << beta;
            throw TrainerError(os.str());
        }
        g.backward(g.scale(ex.loss, static_cast<float>(inv_batch)));
        results[i].breakdown = ex.breakdown;
    }
}

void adam_update(ParameterStore<float>& ps, std::vector<Tensor<float>>& grads, AdamState& adam,
                 double clip) {
    double sq = 0;
    for (const auto& g : grads)
        for (float x : g.v) sq += static_cast<double>(x) * x;
    const double norm = std::sqrt(sq);
    const float scale = (clip > 0 && norm > clip) ? static_cast<float>(clip / norm) : 1.0f;

    ++adam.t;
    const double bc1 = 1.0 - std::pow(adam.beta1, adam.t);
    const double bc2 = 1.0 - std::pow(adam.beta2, adam.t);
    for (size_t p = 0; p < ps.values.size(); ++p) {
        auto& w = ps.values[p].v;
        auto& gm = adam.m[p].v;
        auto& gv = adam.v[p].v;
        const auto& gr = grads[p].v;
        for (size_t i = 0; i < w.size(); ++i) {
            const float g = gr[i] * scale;
            gm[i] = static_cast<float>(adam.beta1 * gm[i] + (1 - adam.beta1) * g);
            gv[i] = static_cast<float>(adam.beta2 * gv[i] + (1 - adam.beta2) * g * g);
            const double mhat = gm[i] / bc1;
            const double vhat = gv[i] / bc2;
            w[i] -= static_cast<float>(adam.lr * mhat / (std::sqrt(vhat) + adam.eps));
        }
    }
}

}  // namespace

LossBreakdown train_step(ParameterStore<float>& ps, const ModelConfig& cfg,
                         const std::vector<corpus::TokenSequence>& batch,
                         ScheduleState& state, AdamState& adam, const TrainOptions& opt) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    const double alpha = objective::alpha_at(state);
    const double beta = state.beta;
    const size_t B = batch.size();

    // Noise drawn up-front, keyed by (seed, step, sentence content).
    std::vector<std::array<Tensor<float>, 4>> eps(B);
    const uint64_t step_seed = Rng::mix(opt.seed, static_cast<uint64_t>(state.step) + 1);
    for (size_t i = 0; i < B; ++i) {
        Rng r(Rng::mix(step_seed, hash_ids(batch[i].ids)));
        for (int level = 1; level <= 3; ++level) {
            eps[i][level] = Tensor<float>(cfg.n_of(level), cfg.z_size);
            fill_gauss(eps[i][level], r);
        }
    }

    std::vector<ExampleResult> results(B);
    const int threads = std::max(1, std::min<int>(opt.threads, static_cast<int>(B)));
    std::vector<std::vector<Tensor<float>>> slice_grads;
    if (threads == 1) {
        slice_grads.push_back(ps.zero_like());
        run_slice(ps, cfg, batch, 0, B, eps, alpha, beta, opt.objective, 1.0 / B,
                  slice_grads[0], results);
    } else {
        slice_grads.assign(threads, ps.zero_like());
        std::vector<std::thread> pool;
        std::exception_ptr err;
        std::mutex err_mu;
        for (int t = 0; t < threads; ++t) {
            const size_t begin = B * t / threads, end = B * (t + 1) / threads;
            pool.emplace_back([&, t, begin, end] {
                try {
                    run_slice(ps, cfg, batch, begin, end, eps, alpha, beta, opt.objective,
                              1.0 / B, slice_grads[t], results);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mu);
                    if (!err) err = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        if (err) std::rethrow_exception(err);
        // Reduce in thread-index order to keep the sum deterministic.
        for (int t = 1; t < threads; ++t)
            for (size_t p = 0; p < slice_grads[0].size(); ++p)
                for (size_t i = 0; i < slice_grads[0][p].v.size(); ++i)
                    slice_grads[0][p].v[i] += slice_grads[t][p].v[i];
    }

    adam_update(ps, slice_grads[0], adam, opt.grad_clip);
    ++state.step;

    LossBreakdown mean;
    double recon_rate = 0;
    for (const auto& r : results) {
        mean.recon_nll += r.breakdown.recon_nll;
        for (int k = 0; k < 3; ++k) mean.layer_kl[k] += r.breakdown.layer_kl[k];
        mean.kl_max += r.breakdown.kl_max;
        mean.total_loss += r.breakdown.total_loss;
        recon_rate += r.breakdown.selected_branch == objective::Branch::RECON;
    }
    const double inv = 1.0 / static_cast<double>(B);
    mean.recon_nll *= inv;
    for (int k = 0; k < 3; ++k) mean.layer_kl[k] *= inv;
    mean.kl_max *= inv;
    mean.total_loss *= inv;
    mean.alpha = alpha;
    mean.beta = beta;
    mean.kl_max_level = objective::argmax_lowest(mean.layer_kl) + 1;
    // Branch of the batch mean, reported via the rate; keep majority label.
    mean.selected_branch =
        recon_rate * 2 >= static_cast<double>(B) ? objective::Branch::RECON
                                                 : objective::Branch::KL;
    return mean;
}

namespace {

double neg_elbo_sum(const ParameterStore<float>& ps, const ModelConfig& cfg,
                    const std::vector<corpus::TokenSequence>& set, size_t begin, size_t end) {
    double total = 0;
    for (size_t i = begin; i < end; ++i) {
        Graph<float> g;
        Binder<float> b(g, ps, nullptr);
        std::array<Tensor<float>, 4> eps;
        for (int level = 1; level <= 3; ++level)
            eps[level] = Tensor<float>(cfg.n_of(level), cfg.z_size);  // zeros: use means
        auto ex = example_loss<float>(b, cfg, set[i].ids, eps.data(), 0.0, 1.0,
                                      ObjectiveKind::EQ2_LITERAL);
        total += -objective::elbo(ex.breakdown.recon_nll, ex.breakdown.layer_kl);
    }
    return total;
}

}  // namespace

double evaluate_perplexity(const ParameterStore<float>& ps, const ModelConfig& cfg,
                           const std::vector<corpus::TokenSequence>& test, int threads) {
    if (test.empty()) return 1.0;
    long tokens = 0;
    for (const auto& s : test) tokens += s.length() - 1;  // predicted tokens, BOS excluded
    double total = 0;
    threads = std::max(1, std::min<int>(threads, static_cast<int>(test.size())));
    if (threads == 1) {
        total = neg_elbo_sum(ps, cfg, test, 0, test.size());
    } else {
        std::vector<double> partial(threads, 0);
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) {
            const size_t begin = test.size() * t / threads,
                         end = test.size() * (t + 1) / threads;
            pool.emplace_back(
                [&, t, begin, end] { partial[t] = neg_elbo_sum(ps, cfg, test, begin, end); });
        }
        for (auto& th : pool) th.join();
        for (double p : partial) total += p;
    }
    return std::exp(total / static_cast<double>(tokens));
}

void TrainReport::write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw TrainerError("cannot write report to " + path);
    out << "step,recon_nll,kl1,kl2,kl3,kl_max,branch_recon_rate,alpha,beta,perplexity\n";
    for (const auto& r : rows) {
        out << r.step << ',' << r.recon_nll << ',' << r.layer_kl[0] << ',' << r.layer_kl[1]
            << ',' << r.layer_kl[2] << ',' << r.kl_max << ',' << r.branch_recon_rate << ','
            << r.alpha << ',' << r.beta << ',';
        if (r.perplexity) out << *r.perplexity;
        out << '\n';
    }
}

TrainReport run_training(ParameterStore<float>& ps, const ModelConfig& cfg,
                         const TrainOptions& opt, const ScheduleState& schedule_init,
                         const corpus::Vocab& vocab,
                         const std::vector<corpus::TokenSequence>& train_set,
                         const std::vector<corpus::TokenSequence>& test_set,
                         const std::string& output_dir) {
    if (train_set.empty()) throw std::invalid_argument("run_training: empty training set");
    std::filesystem::create_directories(output_dir);

    ScheduleState sched = schedule_init;
    AdamState adam;
    adam.init(ps);
    TrainReport report;

    const size_t B = static_cast<size_t>(opt.batch_size);
    const long steps_per_epoch = static_cast<long>((train_set.size() + B - 1) / B);
    const long eval_every_steps = std::max<long>(1, opt.eval_every_epochs * steps_per_epoch);

    auto save = [&](const std::string& name) {
        Checkpoint ckpt;
        ckpt.config = cfg;
        ckpt.schedule = sched;
        ckpt.vocab_words = vocab.id_to_word;
        ckpt.params = ps;
        ckpt.adam = adam;
        ckpt.rng_state = Rng(opt.seed).serialize();
        save_checkpoint(output_dir + "/" + name, ckpt);
    };

    LossBreakdown window;
    double window_recon_rate = 0;
    long window_count = 0;
    bool halt = false;
    std::vector<size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);

    while (!halt && sched.step < opt.max_steps) {
        const long epoch = sched.step / steps_per_epoch;
        if (sched.step % steps_per_epoch == 0) {
            Rng shuffle_rng(Rng::mix(opt.seed, 0xe70c * (epoch + 1)));
            std::iota(order.begin(), order.end(), 0);
            for (size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);
        }
        const size_t pos = static_cast<size_t>(sched.step % steps_per_epoch) * B;
        std::vector<corpus::TokenSequence> batch;
        for (size_t i = pos; i < std::min(pos + B, train_set.size()); ++i)
            batch.push_back(train_set[order[i]]);

        LossBreakdown mean = train_step(ps, cfg, batch, sched, adam, opt);
        window.recon_nll += mean.recon_nll;
        for (int k = 0; k < 3; ++k) window.layer_kl[k] += mean.layer_kl[k];
        window.kl_max += mean.kl_max;
        window_recon_rate += mean.selected_branch == objective::Branch::RECON;
        ++window_count;

        std::optional<double> perp;
        if (sched.step % eval_every_steps == 0 && !test_set.empty()) {
            perp = evaluate_perplexity(ps, cfg, test_set, opt.threads);
            // beta has no effect while alpha < 1, and unpenalized KL inflates
            // perplexity during warmup; plateau tracking starts after the anneal
            if (sched.step >= sched.warmup_steps + sched.anneal_steps)
                halt = objective::update_beta(sched, sched.step / steps_per_epoch, *perp);
            save("ckpt_step" + std::to_string(sched.step) + ".bin");
        }

        if (sched.step % opt.log_every == 0 || perp || halt || sched.step >= opt.max_steps) {
            ReportRow row;
            row.step = sched.step;
            const double inv = 1.0 / window_count;
            row.recon_nll = window.recon_nll * inv;
            for (int k = 0; k < 3; ++k) row.layer_kl[k] = window.layer_kl[k] * inv;
            row.kl_max = window.kl_max * inv;
            row.branch_recon_rate = window_recon_rate * inv;
            row.alpha = mean.alpha;
            row.beta = mean.beta;
            row.perplexity = perp;
            report.rows.push_back(row);
            window = LossBreakdown{};
            window_recon_rate = 0;
            window_count = 0;
        }
    }
    save("checkpoint_final.bin");
    report.write_csv(output_dir + "/report.csv");
    return report;
}

}  // namespace hvae::train
