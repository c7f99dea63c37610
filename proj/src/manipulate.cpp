#include "hvae/manipulate.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace hvae::manip {

std::string to_string(Provenance p) {
    switch (p) {
        case Provenance::PRIOR_SAMPLED: return "prior-sampled";
        case Provenance::POSTERIOR_ENCODED: return "posterior-encoded";
        case Provenance::RESAMPLED: return "resampled";
        case Provenance::SWAPPED: return "swapped";
    }
    throw std::invalid_argument("bad provenance value");
}

Provenance provenance_from_string(const std::string& s) {
    if (s == "prior-sampled") return Provenance::PRIOR_SAMPLED;
    if (s == "posterior-encoded") return Provenance::POSTERIOR_ENCODED;
    if (s == "resampled") return Provenance::RESAMPLED;
    if (s == "swapped") return Provenance::SWAPPED;
    throw std::invalid_argument("unknown provenance '" + s + "'");
}

LatentAssignment LatentAssignment::zeros(const model::ModelConfig& cfg) {
    LatentAssignment a;
    a.values = Tensor<float>(cfg.total_latents(), cfg.z_size);
    a.levels = {cfg.n1, cfg.n2, cfg.n3};
    a.z_size = cfg.z_size;
    a.provenance.assign(cfg.total_latents(), Provenance::PRIOR_SAMPLED);
    return a;
}

Tensor<float> LatentAssignment::level_values(const model::ModelConfig& cfg, int level) const {
    const int off = cfg.level_offset(level), n = cfg.n_of(level);
    Tensor<float> out(n, z_size);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < z_size; ++c) out(r, c) = values(off + r, c);
    return out;
}

std::string LatentAssignment::to_json() const {
    nlohmann::json j;
    j["levels"] = levels;
    j["z_size"] = z_size;
    j["values"] = values.v;
    nlohmann::json prov = nlohmann::json::array();
    for (auto p : provenance) prov.push_back(to_string(p));
    j["provenance"] = prov;
    return j.dump();
}

LatentAssignment LatentAssignment::from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    LatentAssignment a;
    a.levels = j.at("levels").get<std::array<int, 3>>();
    a.z_size = j.at("z_size");
    const int n = a.levels[0] + a.levels[1] + a.levels[2];
    a.values = Tensor<float>(n, a.z_size);
    const auto vals = j.at("values").get<std::vector<float>>();
    if (vals.size() != a.values.v.size())
        throw std::invalid_argument("latent json: values length does not match shape");
    a.values.v = vals;
    for (const auto& p : j.at("provenance"))
        a.provenance.push_back(provenance_from_string(p.get<std::string>()));
    if (static_cast<int>(a.provenance.size()) != n)
        throw std::invalid_argument("latent json: provenance length does not match LV count");
    return a;
}

Gaussian conditional_prior(const model::ParameterStore<float>& ps,
                           const model::ModelConfig& cfg, int level,
                           const std::vector<Tensor<float>>& conditioned) {
    Graph<float> g;
    model::Binder<float> b(g, ps, nullptr);
    std::vector<Graph<float>::Ref> refs;
    for (const auto& t : conditioned) refs.push_back(g.input(t));
    auto pr = model::prior_params(b, cfg, level, refs);
    return {g.val(pr.mean), g.val(pr.std)};
}

namespace {

void write_level(LatentAssignment& a, const model::ModelConfig& cfg, int level,
                 const Tensor<float>& rows) {
    const int off = cfg.level_offset(level);
    for (int r = 0; r < rows.rows; ++r)
        for (int c = 0; c < rows.cols; ++c) a.values(off + r, c) = rows(r, c);
}

Tensor<float> draw_from(const Gaussian& gsn, Rng& rng) {
    Tensor<float> out(gsn.mean.rows, gsn.mean.cols);
    for (size_t i = 0; i < out.v.size(); ++i)
        out.v[i] = gsn.mean.v[i] + gsn.std.v[i] * static_cast<float>(rng.gauss());
    return out;
}

// Next-token distribution (pre-softmax) for the current prefix; PAD and BOS
// are never emitted.
std::vector<double> next_logits(const model::ParameterStore<float>& ps,
                                const model::ModelConfig& cfg, const Tensor<float>& values,
                                const std::vector<int>& prefix) {
    Graph<float> g;
    model::Binder<float> b(g, ps, nullptr);
    auto src = model::identify_latents(b, g.input(values));
    auto logits = model::decode_logits(b, cfg, src, prefix);
    const auto& L = g.val(logits);
    std::vector<double> row(L.cols);
    for (int c = 0; c < L.cols; ++c) row[c] = L(L.rows - 1, c);
    row[corpus::kPad] = -1e30;
    row[corpus::kBos] = -1e30;
    return row;
}

GenerationResult generate_impl(const model::ParameterStore<float>& ps,
                               const model::ModelConfig& cfg, const LatentAssignment& latents,
                               int max_len, double temperature, Rng* rng) {
    if (max_len < 3) throw std::invalid_argument("generate: max_len must be at least 3");
    std::vector<int> seq{corpus::kBos};
    while (static_cast<int>(seq.size()) < max_len - 1) {
        const auto logits = next_logits(ps, cfg, latents.values, seq);
        int next;
        if (!rng || temperature < 1e-6) {
            next = static_cast<int>(
                std::max_element(logits.begin(), logits.end()) - logits.begin());
        } else {
            const double mx = *std::max_element(logits.begin(), logits.end());
            std::vector<double> p(logits.size());
            double z = 0;
            for (size_t i = 0; i < p.size(); ++i)
                z += p[i] = std::exp((logits[i] - mx) / temperature);
            double u = rng->uniform() * z;
            next = static_cast<int>(p.size()) - 1;
            for (size_t i = 0; i < p.size(); ++i)
                if ((u -= p[i]) <= 0) { next = static_cast<int>(i); break; }
        }
        seq.push_back(next);
        if (next == corpus::kEos) break;
    }
    GenerationResult out;
    if (seq.back() != corpus::kEos) {
        seq.push_back(corpus::kEos);
        out.truncated = true;
    }
    out.sequence.ids = std::move(seq);
    return out;
}

}  // namespace

LatentAssignment sample_prior_chain(const model::ParameterStore<float>& ps,
                                    const model::ModelConfig& cfg, Rng& rng) {
    auto a = LatentAssignment::zeros(cfg);
    Tensor<float> z1(cfg.n1, cfg.z_size);
    for (auto& x : z1.v) x = static_cast<float>(rng.gauss());
    write_level(a, cfg, 1, z1);
    auto z2 = draw_from(conditional_prior(ps, cfg, 2, {z1}), rng);
    write_level(a, cfg, 2, z2);
    auto z3 = draw_from(conditional_prior(ps, cfg, 3, {z1, z2}), rng);
    write_level(a, cfg, 3, z3);
    return a;
}

GenerationResult greedy_generate(const model::ParameterStore<float>& ps,
                                 const model::ModelConfig& cfg,
                                 const LatentAssignment& latents, int max_len) {
    return generate_impl(ps, cfg, latents, max_len, 0.0, nullptr);
}

GenerationResult ancestral_generate(const model::ParameterStore<float>& ps,
                                    const model::ModelConfig& cfg,
                                    const LatentAssignment& latents, int max_len,
                                    double temperature, Rng& rng) {
    if (temperature < 0) throw std::invalid_argument("generate: negative temperature");
    return generate_impl(ps, cfg, latents, max_len, temperature, &rng);
}

LatentAssignment resample_single_lv(const model::ParameterStore<float>& ps,
                                    const model::ModelConfig& cfg,
                                    const LatentAssignment& base, int lv_index, Rng& rng,
                                    bool repropagate) {
    if (lv_index < 0 || lv_index >= cfg.total_latents())
        throw std::out_of_range("resample_single_lv: lv_index");
    LatentAssignment out = base;
    const int level = cfg.level_of(lv_index);
    const int row = lv_index - cfg.level_offset(level);

    auto redraw_row = [&](int lvl, int r) {
        Tensor<float> fresh;
        if (lvl == 1) {
            fresh = Tensor<float>(cfg.n1, cfg.z_size);
            for (auto& x : fresh.v) x = static_cast<float>(rng.gauss());
        } else if (lvl == 2) {
            fresh = draw_from(conditional_prior(ps, cfg, 2, {out.level_values(cfg, 1)}), rng);
        } else {
            fresh = draw_from(conditional_prior(ps, cfg, 3, {out.level_values(cfg, 1),
                                                            out.level_values(cfg, 2)}),
                              rng);
        }
        const int off = cfg.level_offset(lvl);
        for (int c = 0; c < cfg.z_size; ++c) out.values(off + r, c) = fresh(r, c);
    };

    redraw_row(level, row);
    out.provenance[lv_index] = Provenance::RESAMPLED;
    if (repropagate) {
        for (int lvl = level + 1; lvl <= 3; ++lvl)
            for (int r = 0; r < cfg.n_of(lvl); ++r) {
                redraw_row(lvl, r);
                out.provenance[cfg.level_offset(lvl) + r] = Provenance::PRIOR_SAMPLED;
            }
    }
    return out;
}

std::pair<LatentAssignment, LatentAssignment> swap_lv(const LatentAssignment& a,
                                                      const LatentAssignment& b, int lv_index) {
    if (a.levels != b.levels || a.z_size != b.z_size)
        throw std::invalid_argument("swap_lv: incompatible latent shapes");
    const int total = a.levels[0] + a.levels[1] + a.levels[2];
    if (lv_index < 0 || lv_index >= total) throw std::out_of_range("swap_lv: lv_index");
    auto sa = a, sb = b;
    for (int c = 0; c < a.z_size; ++c)
        std::swap(sa.values(lv_index, c), sb.values(lv_index, c));
    sa.provenance[lv_index] = Provenance::SWAPPED;
    sb.provenance[lv_index] = Provenance::SWAPPED;
    return {sa, sb};
}

LatentAssignment encode_sentence_latents(const model::ParameterStore<float>& ps,
                                         const model::ModelConfig& cfg,
                                         const corpus::TokenSequence& x, EncodeMode mode,
                                         Rng& rng) {
    Tensor<float> eps[4];
    for (int level = 1; level <= 3; ++level) {
        eps[level] = Tensor<float>(cfg.n_of(level), cfg.z_size);
        if (mode == EncodeMode::SAMPLE)
            for (auto& e : eps[level].v) e = static_cast<float>(rng.gauss());
    }
    Graph<float> g;
    model::Binder<float> b(g, ps, nullptr);
    auto post = model::infer_posteriors(b, cfg, x.ids, eps);
    auto a = LatentAssignment::zeros(cfg);
    for (int level = 1; level <= 3; ++level) write_level(a, cfg, level, g.val(post.value[level]));
    a.provenance.assign(cfg.total_latents(), Provenance::POSTERIOR_ENCODED);
    return a;
}

}  // namespace hvae::manip
