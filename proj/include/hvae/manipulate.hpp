#pragma once

#include <array>
#include <string>
#include <vector>

#include "hvae/corpus.hpp"
#include "hvae/model.hpp"
#include "hvae/rng.hpp"

namespace hvae::manip {

enum class Provenance { PRIOR_SAMPLED, POSTERIOR_ENCODED, RESAMPLED, SWAPPED };

std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& s);

// A concrete value for every latent variable, in global LV order (level 1,
// then 2, then 3) -- the same order identify_latents uses.
struct LatentAssignment {
    Tensor<float> values;  // [n1+n2+n3, z_size]
    std::array<int, 3> levels{0, 0, 0};
    int z_size = 0;
    std::vector<Provenance> provenance;

    static LatentAssignment zeros(const model::ModelConfig& cfg);
    // Rows of one level as a copy [n_k, z_size].
    Tensor<float> level_values(const model::ModelConfig& cfg, int level) const;

    std::string to_json() const;
    static LatentAssignment from_json(const std::string& text);
};

struct GenerationResult {
    corpus::TokenSequence sequence;
    bool truncated = false;  // hit max_len before EOS (EOS appended regardless)
};

// Mean/std of the learnable prior at `level`, conditioned on the given
// shallower-level values (level 2 takes z1; level 3 takes z1 and z2).
struct Gaussian {
    Tensor<float> mean;
    Tensor<float> std;
};
Gaussian conditional_prior(const model::ParameterStore<float>& ps,
                           const model::ModelConfig& cfg, int level,
                           const std::vector<Tensor<float>>& conditioned);

// z1 ~ N(0,I), z2 ~ p(z2|z1), z3 ~ p(z3|z1,z2), reparameterized draws.
LatentAssignment sample_prior_chain(const model::ParameterStore<float>& ps,
                                    const model::ModelConfig& cfg, Rng& rng);

GenerationResult greedy_generate(const model::ParameterStore<float>& ps,
                                 const model::ModelConfig& cfg,
                                 const LatentAssignment& latents, int max_len);

GenerationResult ancestral_generate(const model::ParameterStore<float>& ps,
                                    const model::ModelConfig& cfg,
                                    const LatentAssignment& latents, int max_len,
                                    double temperature, Rng& rng);

// Redraws one LV from its conditional prior given the base values of the
// shallower levels; everything else is left bitwise unchanged. Deeper levels
// are not re-propagated unless `repropagate` is set.
LatentAssignment resample_single_lv(const model::ParameterStore<float>& ps,
                                    const model::ModelConfig& cfg,
                                    const LatentAssignment& base, int lv_index, Rng& rng,
                                    bool repropagate = false);

std::pair<LatentAssignment, LatentAssignment> swap_lv(const LatentAssignment& a,
                                                      const LatentAssignment& b, int lv_index);

enum class EncodeMode { MEAN, SAMPLE };

LatentAssignment encode_sentence_latents(const model::ParameterStore<float>& ps,
                                         const model::ModelConfig& cfg,
                                         const corpus::TokenSequence& x, EncodeMode mode,
                                         Rng& rng);

}  // namespace hvae::manip
