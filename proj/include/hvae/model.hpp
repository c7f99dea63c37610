#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "hvae/graph.hpp"
#include "hvae/rng.hpp"
#include "hvae/tensor.hpp"

namespace hvae::model {

struct ModelConfig {
    int n1 = 16;
    int n2 = 16;
    int n3 = 16;
    int z_size = 8;
    int d_model = 48;
    int heads = 4;
    int enc_layers = 2;
    int dec_layers = 3;
    int vocab_size = 0;
    int max_len = 16;
    uint64_t seed = 0;

    int n_of(int level) const { return level == 1 ? n1 : level == 2 ? n2 : n3; }
    int total_latents() const { return n1 + n2 + n3; }
    // Global LV index layout: level 1 first, then level 2, then level 3.
    int level_offset(int level) const { return level == 1 ? 0 : level == 2 ? n1 : n1 + n2; }
    int level_of(int lv_index) const {
        if (lv_index < n1) return 1;
        if (lv_index < n1 + n2) return 2;
        return 3;
    }

    void validate() const {
        if (n1 < 1 || n2 < 1 || n3 < 1 || z_size < 1 || d_model < 1 || heads < 1 ||
            enc_layers < 1 || dec_layers < 1 || vocab_size < 5 || max_len < 3)
            throw std::invalid_argument("model config: counts must be positive (vocab >= 5)");
        if (d_model % heads != 0)
            throw std::invalid_argument("model config: d_model must be divisible by heads");
    }
};

// Named parameter tensors in fixed creation order. The path set and order are
// a stable contract: checkpoints key on them.
template <typename T>
struct ParameterStore {
    std::vector<std::string> paths;
    std::vector<Tensor<T>> values;
    std::map<std::string, int> index;

    int add(const std::string& path, int rows, int cols) {
        if (index.count(path)) throw std::invalid_argument("duplicate parameter path " + path);
        index[path] = static_cast<int>(paths.size());
        paths.push_back(path);
        values.emplace_back(rows, cols);
        return static_cast<int>(paths.size()) - 1;
    }
    Tensor<T>& at(const std::string& path) { return values[idx(path)]; }
    const Tensor<T>& at(const std::string& path) const { return values[idx(path)]; }
    int idx(const std::string& path) const {
        auto it = index.find(path);
        if (it == index.end()) throw std::out_of_range("unknown parameter path " + path);
        return it->second;
    }
    size_t total_size() const {
        size_t s = 0;
        for (const auto& t : values) s += t.size();
        return s;
    }
    std::vector<Tensor<T>> zero_like() const {
        std::vector<Tensor<T>> g;
        g.reserve(values.size());
        for (const auto& t : values) g.emplace_back(t.rows, t.cols);
        return g;
    }
};

namespace detail {

template <typename T>
void init_weight(Tensor<T>& t, Rng& rng) {
    for (auto& x : t.v) x = static_cast<T>(rng.trunc_gauss(0.02));
}

template <typename T>
void add_linear(ParameterStore<T>& ps, Rng& rng, const std::string& p, int in, int out) {
    init_weight(ps.values[ps.add(p + ".w", in, out)], rng);
    ps.add(p + ".b", 1, out);  // zeros
}

template <typename T>
void add_ln(ParameterStore<T>& ps, const std::string& p, int d) {
    ps.values[ps.add(p + ".g", 1, d)].fill(T(1));
    ps.add(p + ".b", 1, d);
}

template <typename T>
void add_attn(ParameterStore<T>& ps, Rng& rng, const std::string& p, int d) {
    for (const char* n : {".wq", ".wk", ".wv", ".wo"})
        init_weight(ps.values[ps.add(p + n, d, d)], rng);
    for (const char* n : {".bq", ".bk", ".bv", ".bo"}) ps.add(p + n, 1, d);
}

template <typename T>
void add_ffn(ParameterStore<T>& ps, Rng& rng, const std::string& p, int d) {
    add_linear(ps, rng, p + ".f1", d, 4 * d);
    add_linear(ps, rng, p + ".f2", 4 * d, d);
}

template <typename T>
void add_enc_layer(ParameterStore<T>& ps, Rng& rng, const std::string& p, int d) {
    add_ln(ps, p + ".ln1", d);
    add_attn(ps, rng, p + ".attn", d);
    add_ln(ps, p + ".ln2", d);
    add_ffn(ps, rng, p, d);
}

template <typename T>
void add_dec_layer(ParameterStore<T>& ps, Rng& rng, const std::string& p, int d) {
    add_ln(ps, p + ".ln1", d);
    add_attn(ps, rng, p + ".self", d);
    add_ln(ps, p + ".lnc", d);
    add_attn(ps, rng, p + ".cross", d);
    add_ln(ps, p + ".ln2", d);
    add_ffn(ps, rng, p, d);
}

// A latent query stack: n_k learnable queries run through decoder layers over
// some source, then per-LV Gaussian parameter heads.
template <typename T>
void add_stage(ParameterStore<T>& ps, Rng& rng, const std::string& p, const ModelConfig& cfg,
               int n_k, int layers) {
    init_weight(ps.values[ps.add(p + ".query", n_k, cfg.d_model)], rng);
    for (int i = 0; i < layers; ++i)
        add_dec_layer(ps, rng, p + ".l" + std::to_string(i), cfg.d_model);
    add_ln(ps, p + ".lnf", cfg.d_model);
    for (int j = 0; j < n_k; ++j) {
        const std::string lv = p + ".lv" + std::to_string(j);
        add_linear(ps, rng, lv + ".mean", cfg.d_model, cfg.z_size);
        add_linear(ps, rng, lv + ".std1", cfg.d_model, cfg.d_model);
        add_linear(ps, rng, lv + ".std2", cfg.d_model, cfg.z_size);
    }
}

}  // namespace detail

template <typename T>
ParameterStore<T> build_model(const ModelConfig& cfg) {
    cfg.validate();
    ParameterStore<T> ps;
    Rng rng(cfg.seed);
    const int d = cfg.d_model, N = cfg.total_latents();

    // Inference side ("inf."): token encoder, latent conditioning, posterior stages.
    detail::init_weight(ps.values[ps.add("inf.tok.emb", cfg.vocab_size, d)], rng);
    for (int i = 0; i < cfg.enc_layers; ++i)
        detail::add_enc_layer(ps, rng, "inf.tok.l" + std::to_string(i), d);
    detail::add_ln(ps, "inf.tok.lnf", d);
    detail::init_weight(ps.values[ps.add("inf.lv.id", N, d)], rng);
    detail::add_linear(ps, rng, "inf.lv.proj", cfg.z_size + d, d);
    for (int level = 1; level <= 3; ++level)
        detail::add_stage(ps, rng, "inf.s" + std::to_string(level), cfg, cfg.n_of(level),
                          cfg.enc_layers);

    // Generative side ("gen."): latent identifiers, structured prior, sequence decoder.
    detail::init_weight(ps.values[ps.add("gen.lv.id", N, d)], rng);
    detail::add_linear(ps, rng, "gen.lv.proj", cfg.z_size + d, d);
    for (int level = 2; level <= 3; ++level)
        detail::add_stage(ps, rng, "gen.prior" + std::to_string(level), cfg, cfg.n_of(level),
                          cfg.enc_layers);
    detail::init_weight(ps.values[ps.add("gen.dec.emb", cfg.vocab_size, d)], rng);
    for (int i = 0; i < cfg.dec_layers; ++i)
        detail::add_dec_layer(ps, rng, "gen.dec.l" + std::to_string(i), d);
    detail::add_ln(ps, "gen.dec.lnf", d);
    detail::add_linear(ps, rng, "gen.dec.out", d, cfg.vocab_size);
    return ps;
}

// Cross-attention weights recorded during inference. Indexed
// [level-1][layer][head], each tensor [n_k, tokens + conditioned latents].
struct AttentionRecord {
    std::vector<std::vector<std::vector<Tensor<double>>>> levels{3};
    int token_count = 0;
    int cond_count_of_level[4] = {0, 0, 0, 0};  // 1-based by level
};

// One row of extract_attention: per-token weights plus the summed latent column.
struct AttentionRow {
    std::vector<double> token_weights;
    double latent_sum = 0;
};

// Binds parameters into a graph, caching one node per parameter. In trainable
// mode gradients accumulate into `grads` (parallel to store order).
template <typename T>
class Binder {
public:
    using Ref = typename Graph<T>::Ref;
    Binder(Graph<T>& g, const ParameterStore<T>& ps, std::vector<Tensor<T>>* grads)
        : g_(g), ps_(ps), grads_(grads), cache_(ps.paths.size(), -1) {}

    Ref operator()(const std::string& path) {
        const int i = ps_.idx(path);
        if (cache_[i] < 0)
            cache_[i] = grads_ ? g_.leaf(ps_.values[i], &(*grads_)[i])
                               : g_.input(ps_.values[i]);
        return cache_[i];
    }
    Graph<T>& graph() { return g_; }

private:
    Graph<T>& g_;
    const ParameterStore<T>& ps_;
    std::vector<Tensor<T>>* grads_;
    std::vector<int> cache_;
};

namespace detail {

template <typename T>
Tensor<T> positional_encoding(int len, int d) {
    Tensor<T> pe(len, d);
    for (int pos = 0; pos < len; ++pos)
        for (int i = 0; i < d; ++i) {
            const double angle = pos / std::pow(10000.0, 2.0 * (i / 2) / d);
            pe(pos, i) = static_cast<T>((i % 2 == 0) ? std::sin(angle) : std::cos(angle));
        }
    return pe;
}

template <typename T>
Tensor<T> causal_mask(int len) {
    Tensor<T> m(len, len);
    for (int i = 0; i < len; ++i)
        for (int j = i + 1; j < len; ++j) m(i, j) = T(-1e30);
    return m;
}

// Multi-head attention; if `sink` is given, per-head softmax weights are copied
// out (as doubles) after the forward pass.
template <typename T>
typename Graph<T>::Ref mha(Binder<T>& b, const std::string& p, typename Graph<T>::Ref q_in,
                           typename Graph<T>::Ref kv_in, int heads,
                           const Tensor<T>* mask = nullptr,
                           std::vector<Tensor<double>>* sink = nullptr) {
    Graph<T>& g = b.graph();
    const int d = g.val(q_in).cols;
    const int dh = d / heads;
    auto Q = g.linear(q_in, b(p + ".wq"), b(p + ".bq"));
    auto K = g.linear(kv_in, b(p + ".wk"), b(p + ".bk"));
    auto V = g.linear(kv_in, b(p + ".wv"), b(p + ".bv"));
    std::vector<typename Graph<T>::Ref> outs;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    for (int h = 0; h < heads; ++h) {
        auto Qh = g.slice_cols(Q, h * dh, (h + 1) * dh);
        auto Kh = g.slice_cols(K, h * dh, (h + 1) * dh);
        auto Vh = g.slice_cols(V, h * dh, (h + 1) * dh);
        auto scores = g.scale(g.matmul_nt(Qh, Kh), inv_sqrt);
        auto attn = g.softmax_rows(scores, mask);
        if (sink) {
            const auto& a = g.val(attn);
            Tensor<double> copy(a.rows, a.cols);
            for (size_t i = 0; i < a.v.size(); ++i) copy.v[i] = static_cast<double>(a.v[i]);
            sink->push_back(std::move(copy));
        }
        outs.push_back(g.matmul(attn, Vh));
    }
    typename Graph<T>::Ref cat = outs[0];
    for (size_t h = 1; h < outs.size(); ++h) cat = g.concat_cols(cat, outs[h]);
    return g.linear(cat, b(p + ".wo"), b(p + ".bo"));
}

template <typename T>
typename Graph<T>::Ref ffn(Binder<T>& b, const std::string& p, typename Graph<T>::Ref x) {
    Graph<T>& g = b.graph();
    return g.linear(g.relu(g.linear(x, b(p + ".f1.w"), b(p + ".f1.b"))), b(p + ".f2.w"),
                    b(p + ".f2.b"));
}

template <typename T>
typename Graph<T>::Ref enc_layer(Binder<T>& b, const std::string& p, typename Graph<T>::Ref x,
                                 int heads) {
    Graph<T>& g = b.graph();
    auto h = g.layernorm(x, b(p + ".ln1.g"), b(p + ".ln1.b"));
    x = g.add(x, mha(b, p + ".attn", h, h, heads));
    auto h2 = g.layernorm(x, b(p + ".ln2.g"), b(p + ".ln2.b"));
    return g.add(x, ffn(b, p, h2));
}

template <typename T>
typename Graph<T>::Ref dec_layer(Binder<T>& b, const std::string& p, typename Graph<T>::Ref x,
                                 typename Graph<T>::Ref src, int heads,
                                 const Tensor<T>* self_mask = nullptr,
                                 std::vector<Tensor<double>>* sink = nullptr) {
    Graph<T>& g = b.graph();
    auto h = g.layernorm(x, b(p + ".ln1.g"), b(p + ".ln1.b"));
    x = g.add(x, mha(b, p + ".self", h, h, heads, self_mask));
    auto hc = g.layernorm(x, b(p + ".lnc.g"), b(p + ".lnc.b"));
    x = g.add(x, mha(b, p + ".cross", hc, src, heads, static_cast<const Tensor<T>*>(nullptr),
                     sink));
    auto h2 = g.layernorm(x, b(p + ".ln2.g"), b(p + ".ln2.b"));
    return g.add(x, ffn(b, p, h2));
}

}  // namespace detail

// Gaussian posterior/prior heads of one stage, as graph refs.
template <typename T>
struct StageRefs {
    typename Graph<T>::Ref mean;
    typename Graph<T>::Ref std;
};

template <typename T>
typename Graph<T>::Ref encode_tokens(Binder<T>& b, const ModelConfig& cfg,
                                     const std::vector<int>& ids) {
    if (static_cast<int>(ids.size()) > cfg.max_len)
        throw std::length_error("encode_tokens: sequence longer than max_len");
    Graph<T>& g = b.graph();
    auto x = g.add(g.gather_rows(b("inf.tok.emb"), ids),
                   g.input(detail::positional_encoding<T>(static_cast<int>(ids.size()),
                                                          cfg.d_model)));
    for (int i = 0; i < cfg.enc_layers; ++i)
        x = detail::enc_layer(b, "inf.tok.l" + std::to_string(i), x, cfg.heads);
    return g.layernorm(x, b("inf.tok.lnf.g"), b("inf.tok.lnf.b"));
}

// Latent values turned into d_model rows via the per-LV identifier vectors.
// `side` is "inf" (conditioning inside the encoder) or "gen" (identifier used
// by the prior networks and the sequence decoder). `offset` is the global LV
// index of the first row of `values`.
template <typename T>
typename Graph<T>::Ref latent_slots(Binder<T>& b, const std::string& side,
                                    typename Graph<T>::Ref values, int offset) {
    Graph<T>& g = b.graph();
    const int k = g.val(values).rows;
    auto ids = g.slice_rows(b(side + ".lv.id"), offset, offset + k);
    return g.linear(g.concat_cols(values, ids), b(side + ".lv.proj.w"),
                    b(side + ".lv.proj.b"));
}

template <typename T>
typename Graph<T>::Ref identify_latents(Binder<T>& b, typename Graph<T>::Ref values) {
    return latent_slots(b, "gen", values, 0);
}

// Runs one latent query stack over `src`; cross-attention weights optionally
// recorded into `record_level` (vector indexed [layer][head]).
template <typename T>
StageRefs<T> stage_forward(Binder<T>& b, const std::string& p, const ModelConfig& cfg, int n_k,
                           int layers, typename Graph<T>::Ref src,
                           std::vector<std::vector<Tensor<double>>>* record_level = nullptr) {
    Graph<T>& g = b.graph();
    auto x = b(p + ".query");
    for (int i = 0; i < layers; ++i) {
        std::vector<Tensor<double>>* sink = nullptr;
        if (record_level) {
            record_level->emplace_back();
            sink = &record_level->back();
        }
        x = detail::dec_layer(b, p + ".l" + std::to_string(i), x, src, cfg.heads,
                              static_cast<const Tensor<T>*>(nullptr), sink);
    }
    x = g.layernorm(x, b(p + ".lnf.g"), b(p + ".lnf.b"));
    std::vector<typename Graph<T>::Ref> means, stds;
    for (int j = 0; j < n_k; ++j) {
        const std::string lv = p + ".lv" + std::to_string(j);
        auto row = g.slice_rows(x, j, j + 1);
        means.push_back(g.linear(row, b(lv + ".mean.w"), b(lv + ".mean.b")));
        auto h = g.softplus(g.linear(row, b(lv + ".std1.w"), b(lv + ".std1.b")));
        auto s = g.softplus(g.linear(h, b(lv + ".std2.w"), b(lv + ".std2.b")));
        stds.push_back(g.add_const(s, T(1e-6)));  // positivity floor
    }
    return {g.concat_rows(means), g.concat_rows(stds)};
}

// Posterior refs for the three levels plus reparameterized samples.
template <typename T>
struct PosteriorRefs {
    StageRefs<T> level[4];                      // 1-based
    typename Graph<T>::Ref value[4];            // reparameterized samples [n_k, z]
    typename Graph<T>::Ref encoded = -1;        // encoded tokens
};

// Inference pass: z3 from tokens, z2 conditioned on sampled z3, z1 on sampled
// z2 and z3. `eps[k]` is the standard-normal draw for level k (zeros give the
// posterior means).
template <typename T>
PosteriorRefs<T> infer_posteriors(Binder<T>& b, const ModelConfig& cfg,
                                  const std::vector<int>& ids, const Tensor<T> eps[4],
                                  AttentionRecord* record = nullptr) {
    Graph<T>& g = b.graph();
    PosteriorRefs<T> out;
    out.encoded = encode_tokens(b, cfg, ids);
    if (record) {
        record->token_count = static_cast<int>(ids.size());
        record->cond_count_of_level[3] = 0;
        record->cond_count_of_level[2] = cfg.n3;
        record->cond_count_of_level[1] = cfg.n2 + cfg.n3;
    }
    auto reparam = [&](const StageRefs<T>& s, const Tensor<T>& e) {
        return g.add(s.mean, g.mul(s.std, g.input(e)));
    };
    // Level 3: tokens only.
    out.level[3] = stage_forward(b, "inf.s3", cfg, cfg.n3, cfg.enc_layers, out.encoded,
                                 record ? &record->levels[2] : nullptr);
    out.value[3] = reparam(out.level[3], eps[3]);
    // Level 2: tokens + sampled z3.
    auto src2 = g.concat_rows(
        {out.encoded, latent_slots(b, "inf", out.value[3], cfg.level_offset(3))});
    out.level[2] = stage_forward(b, "inf.s2", cfg, cfg.n2, cfg.enc_layers, src2,
                                 record ? &record->levels[1] : nullptr);
    out.value[2] = reparam(out.level[2], eps[2]);
    // Level 1: tokens + sampled z2 + sampled z3.
    auto src1 = g.concat_rows(
        {out.encoded, latent_slots(b, "inf", out.value[2], cfg.level_offset(2)),
         latent_slots(b, "inf", out.value[3], cfg.level_offset(3))});
    out.level[1] = stage_forward(b, "inf.s1", cfg, cfg.n1, cfg.enc_layers, src1,
                                 record ? &record->levels[0] : nullptr);
    out.value[1] = reparam(out.level[1], eps[1]);
    return out;
}

// Structured prior p(z2|z1) or p(z3|z1,z2); the level-1 prior is the fixed
// standard normal and has no network.
template <typename T>
StageRefs<T> prior_params(Binder<T>& b, const ModelConfig& cfg, int level,
                          const std::vector<typename Graph<T>::Ref>& conditioned) {
    Graph<T>& g = b.graph();
    if (level == 2) {
        if (conditioned.size() != 1)
            throw std::invalid_argument("prior level 2 conditions on z1 only");
        auto src = latent_slots(b, "gen", conditioned[0], 0);
        return stage_forward(b, "gen.prior2", cfg, cfg.n2, cfg.enc_layers, src);
    }
    if (level == 3) {
        if (conditioned.size() != 2)
            throw std::invalid_argument("prior level 3 conditions on z1 and z2");
        auto src = g.concat_rows({latent_slots(b, "gen", conditioned[0], 0),
                                  latent_slots(b, "gen", conditioned[1], cfg.level_offset(2))});
        return stage_forward(b, "gen.prior3", cfg, cfg.n3, cfg.enc_layers, src);
    }
    throw std::invalid_argument("prior_params: level must be 2 or 3");
}

// Causal decoder: next-token logits for each position of `targets` (which must
// begin with BOS), conditioned on identified latent rows `src`.
template <typename T>
typename Graph<T>::Ref decode_logits(Binder<T>& b, const ModelConfig& cfg,
                                     typename Graph<T>::Ref src,
                                     const std::vector<int>& targets) {
    if (static_cast<int>(targets.size()) > cfg.max_len)
        throw std::length_error("decode_logits: targets longer than max_len");
    if (targets.empty()) throw std::invalid_argument("decode_logits: empty targets");
    Graph<T>& g = b.graph();
    const int L = static_cast<int>(targets.size());
    auto mask = std::make_shared<Tensor<T>>(detail::causal_mask<T>(L));
    auto x = g.add(g.gather_rows(b("gen.dec.emb"), targets),
                   g.input(detail::positional_encoding<T>(L, cfg.d_model)));
    for (int i = 0; i < cfg.dec_layers; ++i)
        x = detail::dec_layer(b, "gen.dec.l" + std::to_string(i), x, src, cfg.heads,
                              mask.get());
    x = g.layernorm(x, b("gen.dec.lnf.g"), b("gen.dec.lnf.b"));
    return g.linear(x, b("gen.dec.out.w"), b("gen.dec.out.b"));
}

// Appendix-style attention view: averages a stage's cross-attention over heads
// and sums the conditioned-latent columns into one trailing aggregate.
inline AttentionRow extract_attention(const AttentionRecord& record, const ModelConfig& cfg,
                                      int lv_index, int layer) {
    if (lv_index < 0 || lv_index >= cfg.total_latents())
        throw std::out_of_range("extract_attention: lv_index");
    const int level = cfg.level_of(lv_index);
    const int row = lv_index - cfg.level_offset(level);
    const auto& layers = record.levels[level - 1];
    if (layer < 0 || layer >= static_cast<int>(layers.size()))
        throw std::out_of_range("extract_attention: layer");
    const auto& heads = layers[layer];
    const int cols = heads.at(0).cols;
    std::vector<double> mean(cols, 0.0);
    for (const auto& h : heads)
        for (int j = 0; j < cols; ++j) mean[j] += h(row, j);
    for (double& x : mean) x /= static_cast<double>(heads.size());
    AttentionRow out;
    out.token_weights.assign(mean.begin(), mean.begin() + record.token_count);
    for (int j = record.token_count; j < cols; ++j) out.latent_sum += mean[j];
    return out;
}

}  // namespace hvae::model
