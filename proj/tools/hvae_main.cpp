#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hvae/corpus.hpp"
#include "hvae/evaldis.hpp"
#include "hvae/manipulate.hpp"
#include "hvae/model.hpp"
#include "hvae/objective.hpp"
#include "hvae/trainer.hpp"

namespace {

using namespace hvae;

struct RunConfig {
    model::ModelConfig model;  // vocab_size is derived from the corpus
    long warmup_steps = 3000;
    long anneal_steps = 3000;
    double beta_start = 6;
    double beta_floor = 3;
    int eval_every_epochs = 3;
    int batch_size = 64;
    double lr = 3e-4;
    double grad_clip = 1.0;
    int log_every = 50;
    long max_steps = 20000;
    int threads = 1;
    double train_fraction = 0.9;
    std::string objective = "gated_additive";
    std::string grammar = "data/default_grammar.json";
    std::string corpus;  // empty: synthesize from the grammar
    int corpus_count = 5000;
    std::string output_dir = "out";
    uint64_t seed = 0;
};

RunConfig load_run_config(const std::string& path) {
    RunConfig c;
    if (path.empty()) return c;
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open config " + path);
    nlohmann::json j;
    in >> j;
    for (const auto& [key, val] : j.items()) {
        if (key == "n1") c.model.n1 = val;
        else if (key == "n2") c.model.n2 = val;
        else if (key == "n3") c.model.n3 = val;
        else if (key == "n_k") c.model.n1 = c.model.n2 = c.model.n3 = val;
        else if (key == "z_size") c.model.z_size = val;
        else if (key == "d_model") c.model.d_model = val;
        else if (key == "heads") c.model.heads = val;
        else if (key == "enc_layers") c.model.enc_layers = val;
        else if (key == "dec_layers") c.model.dec_layers = val;
        else if (key == "max_len") c.model.max_len = val;
        else if (key == "warmup_steps") c.warmup_steps = val;
        else if (key == "anneal_steps") c.anneal_steps = val;
        else if (key == "beta_start") c.beta_start = val;
        else if (key == "beta_floor") c.beta_floor = val;
        else if (key == "eval_every_epochs") c.eval_every_epochs = val;
        else if (key == "batch_size") c.batch_size = val;
        else if (key == "lr") c.lr = val;
        else if (key == "grad_clip") c.grad_clip = val;
        else if (key == "log_every") c.log_every = val;
        else if (key == "max_steps") c.max_steps = val;
        else if (key == "threads") c.threads = val;
        else if (key == "train_fraction") c.train_fraction = val;
        else if (key == "objective") c.objective = val;
        else if (key == "grammar") c.grammar = val;
        else if (key == "corpus") c.corpus = val;
        else if (key == "corpus_count") c.corpus_count = val;
        else if (key == "output_dir") c.output_dir = val;
        else if (key == "seed") c.seed = val;
        else throw std::invalid_argument("unknown config key '" + key + "'");
    }
    return c;
}

std::string join(const std::vector<std::string>& words) {
    std::string s;
    for (size_t i = 0; i < words.size(); ++i) {
        if (i) s += ' ';
        s += words[i];
    }
    return s;
}

std::vector<std::string> split_ws(const std::string& text) {
    std::istringstream in(text);
    std::vector<std::string> words;
    std::string w;
    while (in >> w) words.push_back(w);
    return words;
}

corpus::Vocab vocab_from_checkpoint(const train::Checkpoint& ckpt) {
    corpus::Vocab v;
    v.id_to_word = ckpt.vocab_words;
    for (size_t i = corpus::kNumReserved; i < v.id_to_word.size(); ++i)
        v.word_to_id[v.id_to_word[i]] = static_cast<int>(i);
    return v;
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    return out;
}

int cmd_generate_corpus(const std::string& grammar, int count, uint64_t seed, int max_len,
                        const std::string& out_path) {
    auto spec = corpus::load_grammar(grammar);
    auto sentences = corpus::generate_corpus(spec, count, seed, max_len);
    corpus::save_corpus_jsonl(sentences, out_path);
    std::cerr << "wrote " << sentences.size() << " sentences to " << out_path << "\n";
    return 0;
}

int cmd_train(RunConfig cfg) {
    auto spec = corpus::load_grammar(cfg.grammar);
    std::vector<corpus::RoleAnnotatedSentence> sentences;
    if (cfg.corpus.empty()) {
        sentences = corpus::generate_corpus(spec, cfg.corpus_count, cfg.seed, cfg.model.max_len);
        std::cerr << "synthesized " << sentences.size() << " sentences from " << cfg.grammar
                  << "\n";
    } else if (cfg.corpus.size() > 6 && cfg.corpus.substr(cfg.corpus.size() - 6) == ".jsonl") {
        sentences = corpus::load_corpus_jsonl(cfg.corpus);
    } else {
        sentences = corpus::load_corpus_plain(cfg.corpus);
    }

    auto vocab = corpus::build_vocab(sentences);
    auto [train_raw, test_raw] = corpus::split_corpus(sentences, cfg.train_fraction, cfg.seed);
    std::vector<corpus::TokenSequence> train_set, test_set;
    for (const auto& s : train_raw) train_set.push_back(corpus::tokenize(s.tokens, vocab));
    for (const auto& s : test_raw) test_set.push_back(corpus::tokenize(s.tokens, vocab));

    cfg.model.vocab_size = vocab.size();
    cfg.model.seed = cfg.seed;
    auto ps = model::build_model<float>(cfg.model);
    std::cerr << "model: " << ps.total_size() << " parameters, vocab " << vocab.size() << "\n";

    train::TrainOptions opt;
    opt.batch_size = cfg.batch_size;
    opt.grad_clip = cfg.grad_clip;
    opt.log_every = cfg.log_every;
    opt.max_steps = cfg.max_steps;
    opt.eval_every_epochs = cfg.eval_every_epochs;
    opt.threads = cfg.threads;
    opt.objective = objective::objective_from_string(cfg.objective);
    opt.seed = cfg.seed;

    objective::ScheduleState sched;
    sched.warmup_steps = cfg.warmup_steps;
    sched.anneal_steps = cfg.anneal_steps;
    sched.beta = sched.beta_start = cfg.beta_start;
    sched.beta_floor = cfg.beta_floor;

    std::filesystem::create_directories(cfg.output_dir);
    auto report =
        train::run_training(ps, cfg.model, opt, sched, vocab, train_set, test_set, cfg.output_dir);
    report.write_csv(cfg.output_dir + "/report.csv");
    std::cerr << "finished after " << report.rows.back().step << " steps; report and checkpoints in "
              << cfg.output_dir << "\n";
    return 0;
}

int cmd_sample(const std::string& ckpt_path, int count, uint64_t seed, double temperature,
               const std::string& out_path) {
    auto ckpt = train::load_checkpoint(ckpt_path);
    auto vocab = vocab_from_checkpoint(ckpt);
    auto out = open_out(out_path);
    for (int i = 0; i < count; ++i) {
        Rng rng(Rng::mix(seed, i + 1));
        auto lat = manip::sample_prior_chain(ckpt.params, ckpt.config, rng);
        auto res = temperature < 1e-6
                       ? manip::greedy_generate(ckpt.params, ckpt.config, lat,
                                                ckpt.config.max_len)
                       : manip::ancestral_generate(ckpt.params, ckpt.config, lat,
                                                   ckpt.config.max_len, temperature, rng);
        out << join(corpus::detokenize(res.sequence, vocab))
            << (res.truncated ? "\t[truncated]" : "") << "\n";
    }
    std::cerr << "wrote " << count << " samples to " << out_path << "\n";
    return 0;
}

int cmd_resample(const std::string& ckpt_path, int lv, int count, int bases, uint64_t seed,
                 bool repropagate, const std::string& base_sentence,
                 const std::string& out_path) {
    auto ckpt = train::load_checkpoint(ckpt_path);
    auto vocab = vocab_from_checkpoint(ckpt);
    if (lv < 0 || lv >= ckpt.config.total_latents())
        throw std::invalid_argument("lv out of range 0.." +
                                    std::to_string(ckpt.config.total_latents() - 1));
    auto out = open_out(out_path);
    if (!base_sentence.empty()) bases = 1;
    for (int b = 0; b < bases; ++b) {
        Rng rng(Rng::mix(seed, b + 1));
        // Originals can come from the prior chain or from an encoded corpus
        // sentence; the output labels which one was used.
        auto base = base_sentence.empty()
                        ? manip::sample_prior_chain(ckpt.params, ckpt.config, rng)
                        : manip::encode_sentence_latents(
                              ckpt.params, ckpt.config,
                              corpus::tokenize(split_ws(base_sentence), vocab),
                              manip::EncodeMode::MEAN, rng);
        auto orig = manip::greedy_generate(ckpt.params, ckpt.config, base, ckpt.config.max_len);
        nlohmann::json row;
        row["base"] = join(corpus::detokenize(orig.sequence, vocab));
        row["base_source"] = base_sentence.empty() ? "prior-sampled" : "posterior-encoded";
        row["alv"] = lv;
        nlohmann::json variants = nlohmann::json::array();
        for (int k = 0; k < count; ++k) {
            Rng rk(Rng::mix(Rng::mix(seed, b + 1), k + 1));
            auto mod = manip::resample_single_lv(ckpt.params, ckpt.config, base, lv, rk,
                                                 repropagate);
            auto gen = manip::greedy_generate(ckpt.params, ckpt.config, mod, ckpt.config.max_len);
            variants.push_back(join(corpus::detokenize(gen.sequence, vocab)));
        }
        row["variants"] = variants;
        out << row.dump() << "\n";
    }
    std::cerr << "wrote " << bases << " resample groups to " << out_path << "\n";
    return 0;
}

int cmd_swap(const std::string& ckpt_path, int lv, const std::string& a, const std::string& b,
             const std::string& out_path) {
    auto ckpt = train::load_checkpoint(ckpt_path);
    auto vocab = vocab_from_checkpoint(ckpt);
    Rng rng(0);
    auto decode = [&](const manip::LatentAssignment& lat) {
        auto res = manip::greedy_generate(ckpt.params, ckpt.config, lat, ckpt.config.max_len);
        return join(corpus::detokenize(res.sequence, vocab));
    };
    auto la = manip::encode_sentence_latents(ckpt.params, ckpt.config,
                                             corpus::tokenize(split_ws(a), vocab),
                                             manip::EncodeMode::MEAN, rng);
    auto lb = manip::encode_sentence_latents(ckpt.params, ckpt.config,
                                             corpus::tokenize(split_ws(b), vocab),
                                             manip::EncodeMode::MEAN, rng);
    auto [sa, sb] = manip::swap_lv(la, lb, lv);
    nlohmann::json j;
    j["lv"] = lv;
    j["a"] = {{"input", a}, {"reconstruction", decode(la)}, {"swapped", decode(sa)}};
    j["b"] = {{"input", b}, {"reconstruction", decode(lb)}, {"swapped", decode(sb)}};
    open_out(out_path) << j.dump(2) << "\n";
    std::cerr << "wrote swap pair to " << out_path << "\n";
    return 0;
}

int cmd_evaluate(const std::string& ckpt_path, const std::string& grammar, int base_count,
                 int resamples, uint64_t seed, int threads, const std::string& out_dir) {
    auto ckpt = train::load_checkpoint(ckpt_path);
    auto vocab = vocab_from_checkpoint(ckpt);
    auto spec = corpus::load_grammar(grammar);
    std::filesystem::create_directories(out_dir);

    evaldis::NeuralGenerator gen(ckpt.params, ckpt.config, vocab);
    auto records =
        evaldis::run_influence_experiment(gen, spec, base_count, resamples, seed, threads);
    auto matrices = evaldis::aggregate_influence(records, ckpt.config.total_latents());

    long broken = 0;
    for (const auto& r : records) broken += r.structure_broken ? 1 : 0;
    std::cerr << records.size() << " couples, " << broken << " structure-broken ("
              << 100.0 * broken / records.size() << "%)\n";

    const std::map<std::string, std::string> files = {{"ROOT_DEP_APPEAR", "root_dep_appear.csv"},
                                                      {"DEP_APPEAR", "dep_appear.csv"},
                                                      {"OIE_APPEAR", "oie_appear.csv"},
                                                      {"DEP_ALTER", "dep_alter.csv"},
                                                      {"OIE_ALTER", "oie_alter.csv"}};
    for (const auto& m : matrices) m.write_csv(out_dir + "/" + files.at(m.metric));
    open_out(out_dir + "/top_influencers.json")
        << evaldis::top_influencers_json(evaldis::top_influencers(matrices)) << "\n";
    std::cerr << "influence matrices and top_influencers.json in " << out_dir << "\n";
    return 0;
}

int cmd_attention(const std::string& ckpt_path, const std::string& sentence,
                  const std::string& out_path) {
    auto ckpt = train::load_checkpoint(ckpt_path);
    auto vocab = vocab_from_checkpoint(ckpt);
    const auto& cfg = ckpt.config;
    auto seq = corpus::tokenize(split_ws(sentence), vocab);

    Graph<float> g;
    model::Binder<float> b(g, ckpt.params, nullptr);
    Tensor<float> eps[4];
    for (int level = 1; level <= 3; ++level)
        eps[level] = Tensor<float>(cfg.n_of(level), cfg.z_size);
    model::AttentionRecord record;
    model::infer_posteriors(b, cfg, seq.ids, eps, &record);

    nlohmann::json j;
    std::vector<std::string> toks = {"<bos>"};
    for (const auto& w : split_ws(sentence)) toks.push_back(w);
    toks.push_back("<eos>");
    j["tokens"] = toks;
    nlohmann::json lvs = nlohmann::json::array();
    for (int lv = 0; lv < cfg.total_latents(); ++lv) {
        const int level = cfg.level_of(lv);
        nlohmann::json layers = nlohmann::json::array();
        for (size_t layer = 0; layer < record.levels[level - 1].size(); ++layer) {
            auto row = model::extract_attention(record, cfg, lv, static_cast<int>(layer));
            layers.push_back(
                {{"layer", layer}, {"tokens", row.token_weights}, {"<latent>", row.latent_sum}});
        }
        lvs.push_back({{"lv", lv}, {"level", level}, {"layers", layers}});
    }
    j["attention"] = lvs;
    open_out(out_path) << j.dump(2) << "\n";
    std::cerr << "wrote attention map to " << out_path << "\n";
    return 0;
}

int cmd_selfcheck(const std::string& grammar, uint64_t seed, const std::string& out_path) {
    auto spec = corpus::load_grammar(grammar);
    auto report = evaldis::wired_decoder_check(spec, seed);
    std::cerr << "wired self-check: " << report.record_count << " couples\n";
    for (const auto& [role, pr] : report.top_by_role)
        std::cerr << "  " << role << " -> LV " << pr.first << " (p=" << pr.second << ")\n";
    std::cerr << "  max inert cell: " << report.max_inert_cell << "\n";
    if (!out_path.empty()) {
        nlohmann::json j;
        j["wiring"] = report.wiring;
        for (const auto& [role, pr] : report.top_by_role)
            j["top_by_role"][role] = {{"lv", pr.first}, {"probability", pr.second}};
        j["max_inert_cell"] = report.max_inert_cell;
        j["record_count"] = report.record_count;
        j["passed"] = report.passed;
        open_out(out_path) << j.dump(2) << "\n";
    }
    if (!report.passed) throw std::runtime_error("wired self-check failed to recover the mapping");
    std::cerr << "wired mapping recovered\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hierarchical sentence VAE: corpus, training, latent manipulation and "
                 "latent-influence evaluation"};
    app.require_subcommand(1);

    // generate-corpus
    auto* gen = app.add_subcommand("generate-corpus", "Sample a role-annotated corpus");
    std::string gen_grammar = "data/default_grammar.json", gen_out = "corpus.jsonl";
    int gen_count = 5000, gen_max_len = 16;
    uint64_t gen_seed = 0;
    gen->add_option("--grammar", gen_grammar);
    gen->add_option("--count", gen_count);
    gen->add_option("--seed", gen_seed);
    gen->add_option("--max-len", gen_max_len);
    gen->add_option("--out", gen_out);

    // train
    auto* tr = app.add_subcommand("train", "Train from a JSON config");
    std::string tr_config, tr_corpus, tr_grammar, tr_out, tr_objective;
    long tr_max_steps = -1;
    int tr_threads = -1, tr_batch = -1;
    uint64_t tr_seed = 0;
    bool tr_seed_set = false;
    tr->add_option("--config", tr_config);
    tr->add_option("--corpus", tr_corpus);
    tr->add_option("--grammar", tr_grammar);
    tr->add_option("--out", tr_out);
    tr->add_option("--objective", tr_objective);
    tr->add_option("--max-steps", tr_max_steps);
    tr->add_option("--threads", tr_threads);
    tr->add_option("--batch-size", tr_batch);
    tr->add_option("--seed", tr_seed)->each([&](const std::string&) { tr_seed_set = true; });

    // sample
    auto* sa = app.add_subcommand("sample", "Generate sentences from the prior chain");
    std::string sa_ckpt, sa_out = "samples.txt";
    int sa_count = 10;
    uint64_t sa_seed = 0;
    double sa_temp = 0.0;
    sa->add_option("--checkpoint", sa_ckpt)->required();
    sa->add_option("--count", sa_count);
    sa->add_option("--seed", sa_seed);
    sa->add_option("--temperature", sa_temp);
    sa->add_option("--out", sa_out);

    // resample
    auto* re = app.add_subcommand("resample", "Resample one LV and regenerate");
    std::string re_ckpt, re_out = "resample.jsonl", re_base_sentence;
    int re_lv = 0, re_count = 3, re_bases = 1;
    uint64_t re_seed = 0;
    bool re_reprop = false;
    re->add_option("--checkpoint", re_ckpt)->required();
    re->add_option("--lv", re_lv)->required();
    re->add_option("--count", re_count);
    re->add_option("--bases", re_bases);
    re->add_option("--seed", re_seed);
    re->add_flag("--repropagate", re_reprop);
    re->add_option("--base-sentence", re_base_sentence);
    re->add_option("--out", re_out);

    // swap
    auto* sw = app.add_subcommand("swap", "Swap one LV between two encoded sentences");
    std::string sw_ckpt, sw_a, sw_b, sw_out = "swap.json";
    int sw_lv = 0;
    sw->add_option("--checkpoint", sw_ckpt)->required();
    sw->add_option("--lv", sw_lv)->required();
    sw->add_option("--a", sw_a)->required();
    sw->add_option("--b", sw_b)->required();
    sw->add_option("--out", sw_out);

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "Latent-influence evaluation protocol");
    std::string ev_ckpt, ev_grammar = "data/default_grammar.json", ev_out = "evaldis";
    int ev_bases = 100, ev_resamples = 10;
    int ev_threads = static_cast<int>(std::thread::hardware_concurrency());
    uint64_t ev_seed = 0;
    ev->add_option("--checkpoint", ev_ckpt)->required();
    ev->add_option("--grammar", ev_grammar);
    ev->add_option("--base-count", ev_bases);
    ev->add_option("--resamples", ev_resamples);
    ev->add_option("--seed", ev_seed);
    ev->add_option("--threads", ev_threads);
    ev->add_option("--out-dir", ev_out);

    // attention
    auto* at = app.add_subcommand("attention", "Inference cross-attention for one sentence");
    std::string at_ckpt, at_sentence, at_out = "attention.json";
    at->add_option("--checkpoint", at_ckpt)->required();
    at->add_option("--sentence", at_sentence)->required();
    at->add_option("--out", at_out);

    // selfcheck
    auto* sc = app.add_subcommand("selfcheck", "Wired-decoder harness self-test");
    std::string sc_grammar = "data/default_grammar.json", sc_out;
    uint64_t sc_seed = 0;
    sc->add_option("--grammar", sc_grammar);
    sc->add_option("--seed", sc_seed);
    sc->add_option("--out", sc_out);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;  // usage problems are validation errors
    }

    try {
        if (gen->parsed())
            return cmd_generate_corpus(gen_grammar, gen_count, gen_seed, gen_max_len, gen_out);
        if (tr->parsed()) {
            RunConfig cfg = load_run_config(tr_config);
            if (!tr_corpus.empty()) cfg.corpus = tr_corpus;
            if (!tr_grammar.empty()) cfg.grammar = tr_grammar;
            if (!tr_out.empty()) cfg.output_dir = tr_out;
            if (!tr_objective.empty()) cfg.objective = tr_objective;
            if (tr_max_steps >= 0) cfg.max_steps = tr_max_steps;
            if (tr_threads > 0) cfg.threads = tr_threads;
            if (tr_batch > 0) cfg.batch_size = tr_batch;
            if (tr_seed_set) cfg.seed = tr_seed;
            return cmd_train(std::move(cfg));
        }
        if (sa->parsed()) return cmd_sample(sa_ckpt, sa_count, sa_seed, sa_temp, sa_out);
        if (re->parsed())
            return cmd_resample(re_ckpt, re_lv, re_count, re_bases, re_seed, re_reprop,
                                re_base_sentence, re_out);
        if (sw->parsed()) return cmd_swap(sw_ckpt, sw_lv, sw_a, sw_b, sw_out);
        if (ev->parsed())
            return cmd_evaluate(ev_ckpt, ev_grammar, ev_bases, ev_resamples, ev_seed, ev_threads,
                                ev_out);
        if (at->parsed()) return cmd_attention(at_ckpt, at_sentence, at_out);
        if (sc->parsed()) return cmd_selfcheck(sc_grammar, sc_seed, sc_out);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::out_of_range& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
