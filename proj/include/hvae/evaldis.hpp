#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "hvae/corpus.hpp"
#include "hvae/manipulate.hpp"
#include "hvae/model.hpp"
#include "hvae/rng.hpp"

namespace hvae::evaldis {

enum class ParseStatus { PARSED, UNPARSED };

// Oracle analysis of one sentence against the grammar: dependency-analog
// labels plus OpenIE-analog argument spans, and the head spans the corpus
// generator annotates (for the closed-loop check).
struct RoleParse {
    ParseStatus status = ParseStatus::UNPARSED;
    std::string root_label;                          // verb word-class name
    std::set<std::string> root_children;             // labels attached to the root
    std::map<std::string, int> all_labels;           // label -> occurrence count
    std::map<std::string, corpus::Span> role_spans;  // ARG0/V/ARG1/ARG2 phrase spans
    std::map<std::string, corpus::Span> head_spans;  // subject/verb/dobj/pobj
    std::vector<std::string> labels_by_token;
    int template_id = -1;
};

RoleParse parse_roles(const std::vector<std::string>& tokens, const corpus::GrammarSpec& spec);

struct DiffRecord {
    std::string couple_id;
    int lv_index = -1;
    std::set<std::string> root_dep_appear;
    std::set<std::string> dep_appear;
    std::set<std::string> oie_appear;
    bool dep_alter_abstain = true;
    std::vector<std::string> dep_alter;
    bool oie_alter_abstain = true;
    std::vector<std::string> oie_alter;
    bool structure_broken = false;
};

DiffRecord diff_statistics(const RoleParse& original, const RoleParse& modified,
                           const std::vector<std::string>& orig_tokens,
                           const std::vector<std::string>& mod_tokens);

// Probability that resampling each LV flips each label under one metric.
struct InfluenceMatrix {
    std::string metric;
    std::vector<std::string> labels;  // column order
    int num_lvs = 0;
    std::vector<std::vector<double>> cells;  // [lv][label index]
    std::vector<long> valid_trials;          // per LV (ALTER: non-abstaining only)
    std::vector<long> total_trials;          // per LV
    std::vector<long> broken_trials;         // per LV, either side UNPARSED
    bool has_empty_lv = false;               // some LV ended with 0 valid trials

    double cell(int lv, const std::string& label) const;
    void write_csv(const std::string& path) const;
};

std::vector<InfluenceMatrix> aggregate_influence(const std::vector<DiffRecord>& records,
                                                 int num_lvs = -1);

struct TopInfluencer {
    std::string metric;
    std::string label;
    int lv_index = 0;
    double probability = 0;
};

std::vector<TopInfluencer> top_influencers(const std::vector<InfluenceMatrix>& matrices);
std::string top_influencers_json(const std::vector<TopInfluencer>& top);

// Anything that maps latent assignments to sentences; lets the protocol run
// against either the trained model or the wired self-test generator.
class SentenceGenerator {
public:
    virtual ~SentenceGenerator() = default;
    virtual int total_latents() const = 0;
    virtual manip::LatentAssignment sample_base(Rng& rng) = 0;
    virtual manip::LatentAssignment resample(const manip::LatentAssignment& base, int lv_index,
                                             Rng& rng) = 0;
    virtual std::vector<std::string> generate(const manip::LatentAssignment& latents) = 0;
};

class NeuralGenerator : public SentenceGenerator {
public:
    NeuralGenerator(const model::ParameterStore<float>& ps, const model::ModelConfig& cfg,
                    const corpus::Vocab& vocab)
        : ps_(ps), cfg_(cfg), vocab_(vocab) {}
    int total_latents() const override { return cfg_.total_latents(); }
    manip::LatentAssignment sample_base(Rng& rng) override;
    manip::LatentAssignment resample(const manip::LatentAssignment& base, int lv_index,
                                     Rng& rng) override;
    std::vector<std::string> generate(const manip::LatentAssignment& latents) override;

private:
    const model::ParameterStore<float>& ps_;
    model::ModelConfig cfg_;
    corpus::Vocab vocab_;
};

// Non-neural generator for the harness self-test: designated LVs index words
// of a fixed transitive+prepositional template through Phi(value[0]) bins;
// every other LV is inert.
class WiredGenerator : public SentenceGenerator {
public:
    // wiring: role (ARG0/V/ARG1/ARG2) -> controlling LV index. Unwired roles
    // keep the first word of their class.
    WiredGenerator(const corpus::GrammarSpec& spec, std::map<std::string, int> wiring,
                   int num_lvs = 48, int z_size = 8);
    int total_latents() const override { return num_lvs_; }
    manip::LatentAssignment sample_base(Rng& rng) override;
    manip::LatentAssignment resample(const manip::LatentAssignment& base, int lv_index,
                                     Rng& rng) override;
    std::vector<std::string> generate(const manip::LatentAssignment& latents) override;

private:
    std::map<std::string, int> wiring_;
    std::map<std::string, std::vector<std::string>> words_;  // role -> word list
    int num_lvs_;
    int z_size_;
};

// base_count x resamples_per_lv x total_latents couples; deterministic given
// seed (each (base, lv, trial) triple derives its own RNG stream).
// threads > 1 splits work across base sentences; the record stream is
// identical for any thread count (per-triple RNG streams).
std::vector<DiffRecord> run_influence_experiment(SentenceGenerator& gen,
                                                 const corpus::GrammarSpec& spec,
                                                 int base_count, int resamples_per_lv,
                                                 uint64_t seed, int threads = 1);

struct WiredCheckReport {
    std::map<std::string, int> wiring;
    // role -> (top-influencer LV, probability) under OIE_ALTER
    std::map<std::string, std::pair<int, double>> top_by_role;
    // highest OIE_ALTER cell of any non-wired LV on any role
    double max_inert_cell = 0;
    long record_count = 0;
    bool passed = false;
};

WiredCheckReport wired_decoder_check(const corpus::GrammarSpec& spec, uint64_t seed,
                                     std::map<std::string, int> wiring = {
                                         {"ARG0", 2}, {"V", 9}, {"ARG1", 20}, {"ARG2", 33}},
                                     int base_count = 100, int resamples_per_lv = 10);

// External-parse ingestion: JSON-lines, one object per line with couple id,
// token list and a serialized RoleParse, so third-party parser output can be
// diffed with the same machinery.
struct ExternalParse {
    std::string couple_id;
    std::vector<std::string> tokens;
    RoleParse parse;
};

std::vector<ExternalParse> load_external_parses(const std::string& path);
std::string role_parse_to_json(const RoleParse& parse);
RoleParse role_parse_from_json(const std::string& text);

}  // namespace hvae::evaldis
