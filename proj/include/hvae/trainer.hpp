#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "hvae/corpus.hpp"
#include "hvae/graph.hpp"
#include "hvae/model.hpp"
#include "hvae/objective.hpp"
#include "hvae/rng.hpp"

namespace hvae::train {

using model::AttentionRecord;
using model::Binder;
using model::ModelConfig;
using model::ParameterStore;
using objective::LossBreakdown;
using objective::ObjectiveKind;
using objective::ScheduleState;

// FNV-1a over token ids; keys the per-example noise so identical sentences in
// a batch draw identical noise.
inline uint64_t hash_ids(const std::vector<int>& ids) {
    uint64_t h = 1469598103934665603ULL;
    for (int id : ids) {
        h ^= static_cast<uint64_t>(static_cast<uint32_t>(id));
        h *= 1099511628211ULL;
    }
    return h;
}

template <typename T>
void fill_gauss(Tensor<T>& t, Rng& rng) {
    for (auto& x : t.v) x = static_cast<T>(rng.gauss());
}

template <typename T>
struct ExampleLossRefs {
    typename Graph<T>::Ref loss;
    typename Graph<T>::Ref recon;
    std::array<typename Graph<T>::Ref, 3> kls;
    LossBreakdown breakdown;
};

// Full single-example objective graph: inference, structured prior, teacher
// forced decoding, layer KLs and the mobile-threshold loss.
template <typename T>
ExampleLossRefs<T> example_loss(Binder<T>& b, const ModelConfig& cfg,
                                const std::vector<int>& ids, const Tensor<T> eps[4],
                                double alpha, double beta, ObjectiveKind kind,
                                AttentionRecord* record = nullptr) {
    Graph<T>& g = b.graph();
    auto post = model::infer_posteriors(b, cfg, ids, eps, record);
    auto prior2 = model::prior_params(b, cfg, 2, {post.value[1]});
    auto prior3 = model::prior_params(b, cfg, 3, {post.value[1], post.value[2]});

    Tensor<T> zeros(cfg.n1, cfg.z_size), ones(cfg.n1, cfg.z_size);
    ones.fill(T(1));
    std::array<typename Graph<T>::Ref, 3> kls;
    kls[0] = g.kl_diag_sum(post.level[1].mean, post.level[1].std, g.input(zeros),
                           g.input(ones));
    kls[1] = g.kl_diag_sum(post.level[2].mean, post.level[2].std, prior2.mean, prior2.std);
    kls[2] = g.kl_diag_sum(post.level[3].mean, post.level[3].std, prior3.mean, prior3.std);

    auto latents = g.concat_rows({post.value[1], post.value[2], post.value[3]});
    auto src = model::identify_latents(b, latents);
    std::vector<int> prefix(ids.begin(), ids.end() - 1);
    std::vector<int> next(ids.begin() + 1, ids.end());
    auto logits = model::decode_logits(b, cfg, src, prefix);
    auto recon = g.cross_entropy_sum(logits, next);

    ExampleLossRefs<T> out;
    out.recon = recon;
    out.kls = kls;
    out.loss = objective::mobile_threshold_loss_graph<T>(g, recon, kls, alpha, beta, kind,
                                                         &out.breakdown);
    return out;
}

struct AdamState {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long t = 0;
    std::vector<Tensor<float>> m, v;

    void init(const ParameterStore<float>& ps) {
        m = ps.zero_like();
        v = ps.zero_like();
        t = 0;
    }
};

struct TrainOptions {
    int batch_size = 64;
    double grad_clip = 1.0;
    int log_every = 50;
    long max_steps = 20000;
    int eval_every_epochs = 3;
    int threads = 1;
    ObjectiveKind objective = ObjectiveKind::GATED_ADDITIVE;
    uint64_t seed = 0;
};

struct ReportRow {
    long step = 0;
    double recon_nll = 0;
    std::array<double, 3> layer_kl{0, 0, 0};
    double kl_max = 0;
    double branch_recon_rate = 0;
    double alpha = 0;
    double beta = 0;
    std::optional<double> perplexity;
};

struct TrainReport {
    std::vector<ReportRow> rows;
    void write_csv(const std::string& path) const;
};

struct TrainerError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Mean loss over the batch with one optimizer update. Deterministic given
// (parameters, batch, schedule step, seed, thread count).
LossBreakdown train_step(ParameterStore<float>& ps, const ModelConfig& cfg,
                         const std::vector<corpus::TokenSequence>& batch,
                         ScheduleState& state, AdamState& adam, const TrainOptions& opt);

// exp( sum of -ELBO / number of predicted tokens ), posterior means (eps = 0).
double evaluate_perplexity(const ParameterStore<float>& ps, const ModelConfig& cfg,
                           const std::vector<corpus::TokenSequence>& test, int threads = 1);

TrainReport run_training(ParameterStore<float>& ps, const ModelConfig& cfg,
                         const TrainOptions& opt, const ScheduleState& schedule_init,
                         const corpus::Vocab& vocab,
                         const std::vector<corpus::TokenSequence>& train_set,
                         const std::vector<corpus::TokenSequence>& test_set,
                         const std::string& output_dir);

// ---- checkpointing ----

struct Checkpoint {
    int version = 1;
    ModelConfig config;
    ScheduleState schedule;
    std::vector<std::string> vocab_words;
    ParameterStore<float> params;
    AdamState adam;
    std::string rng_state;
};

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace hvae::train
