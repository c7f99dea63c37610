#include "hvae/evaldis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace hvae::evaldis {

namespace {

const std::vector<std::string> kMetricNames = {"ROOT_DEP_APPEAR", "DEP_APPEAR", "OIE_APPEAR",
                                               "DEP_ALTER", "OIE_ALTER"};
const std::vector<std::string> kOieRoles = {"ARG0", "ARG1", "ARG2", "V"};

// Dependency-analog label of one template slot.
std::string slot_label(const corpus::TemplateSlot& slot) {
    if (slot.role == "subject") return "nsubj";
    if (slot.role == "verb") return "root";
    if (slot.role == "dobj") return "dobj";
    if (slot.role == "pobj") return "pobj";
    if (slot.word_class == "DET") return "det";
    if (slot.word_class == "ADJ") return "amod";
    if (slot.word_class == "AUX") return "aux";
    if (slot.word_class == "PREP") return "prep";
    return "dep";
}

bool slot_matches(const corpus::GrammarSpec& spec, const corpus::TemplateSlot& slot,
                  const std::string& token) {
    auto it = spec.word_class_of.find(token);
    return it != spec.word_class_of.end() && it->second == slot.word_class;
}

std::set<std::string> key_set(const std::map<std::string, corpus::Span>& m) {
    std::set<std::string> s;
    for (const auto& [k, v] : m) s.insert(k);
    return s;
}

std::set<std::string> sym_diff(const std::set<std::string>& a, const std::set<std::string>& b) {
    std::set<std::string> out;
    std::set_symmetric_difference(a.begin(), a.end(), b.begin(), b.end(),
                                  std::inserter(out, out.begin()));
    return out;
}

std::vector<std::string> span_text(const std::vector<std::string>& tokens,
                                   const corpus::Span& s) {
    return {tokens.begin() + s.start, tokens.begin() + s.end};
}

}  // namespace

RoleParse parse_roles(const std::vector<std::string>& tokens, const corpus::GrammarSpec& spec) {
    RoleParse out;
    // Deterministic longest match: longer templates first, then declaration order.
    std::vector<int> order(spec.templates.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return spec.templates[a].size() > spec.templates[b].size();
    });

    int matched = -1;
    for (int t : order) {
        const auto& tpl = spec.templates[t];
        if (tpl.size() != tokens.size()) continue;
        bool ok = true;
        for (size_t i = 0; i < tpl.size() && ok; ++i)
            ok = slot_matches(spec, tpl[i], tokens[i]);
        if (ok) {
            matched = t;
            break;
        }
    }
    if (matched < 0) return out;  // UNPARSED

    const auto& tpl = spec.templates[matched];
    out.status = ParseStatus::PARSED;
    out.template_id = matched;
    const int n = static_cast<int>(tpl.size());

    for (int i = 0; i < n; ++i) {
        const std::string label = slot_label(tpl[i]);
        out.labels_by_token.push_back(label);
        out.all_labels[label] += 1;
        if (tpl[i].role == "verb") out.root_label = tpl[i].word_class;
        if (tpl[i].role != "none")
            out.head_spans[tpl[i].role] = corpus::Span{i, i + 1};
    }

    // Phrase spans: every role-less slot attaches to the nearest head slot on
    // its right, so e.g. "a dog" forms ARG0 and "in the park" forms ARG2.
    static const std::map<std::string, std::string> kArgOf = {
        {"subject", "ARG0"}, {"verb", "V"}, {"dobj", "ARG1"}, {"pobj", "ARG2"}};
    int phrase_start = 0;
    for (int i = 0; i < n; ++i) {
        if (tpl[i].role == "none") continue;
        out.role_spans[kArgOf.at(tpl[i].role)] = corpus::Span{phrase_start, i + 1};
        phrase_start = i + 1;
    }

    // Root children: direct dependents of the verb. Nominal heads and their
    // modifiers hang off their own phrase; prepositional objects hang off the
    // preposition.
    if (out.head_spans.count("subject")) out.root_children.insert("nsubj");
    if (out.head_spans.count("dobj")) out.root_children.insert("dobj");
    if (out.all_labels.count("aux")) out.root_children.insert("aux");
    if (out.all_labels.count("prep")) out.root_children.insert("prep");
    return out;
}

DiffRecord diff_statistics(const RoleParse& original, const RoleParse& modified,
                           const std::vector<std::string>& orig_tokens,
                           const std::vector<std::string>& mod_tokens) {
    DiffRecord rec;
    if (original.status == ParseStatus::UNPARSED || modified.status == ParseStatus::UNPARSED) {
        rec.structure_broken = true;
        return rec;
    }

    auto support = [](const std::map<std::string, int>& m) {
        std::set<std::string> s;
        for (const auto& [k, v] : m) s.insert(k);
        return s;
    };
    rec.root_dep_appear = sym_diff(original.root_children, modified.root_children);
    rec.dep_appear = sym_diff(support(original.all_labels), support(modified.all_labels));
    rec.oie_appear = sym_diff(key_set(original.role_spans), key_set(modified.role_spans));

    // DEP_ALTER: guarded on equal sentence length; occurrences of a label are
    // paired positionally in order of appearance.
    if (orig_tokens.size() == mod_tokens.size()) {
        rec.dep_alter_abstain = false;
        std::map<std::string, std::vector<std::string>> occ_a, occ_b;
        for (size_t i = 0; i < orig_tokens.size(); ++i)
            occ_a[original.labels_by_token[i]].push_back(orig_tokens[i]);
        for (size_t i = 0; i < mod_tokens.size(); ++i)
            occ_b[modified.labels_by_token[i]].push_back(mod_tokens[i]);
        std::set<std::string> altered;
        for (const auto& [label, words] : occ_a) {
            auto it = occ_b.find(label);
            if (it == occ_b.end() || it->second != words) altered.insert(label);
        }
        for (const auto& [label, words] : occ_b)
            if (!occ_a.count(label)) altered.insert(label);
        rec.dep_alter.assign(altered.begin(), altered.end());
    }

    // OIE_ALTER: guarded on identical first-predicate structure (equal role sets).
    if (key_set(original.role_spans) == key_set(modified.role_spans)) {
        rec.oie_alter_abstain = false;
        for (const auto& [role, span] : original.role_spans)
            if (span_text(orig_tokens, span) !=
                span_text(mod_tokens, modified.role_spans.at(role)))
                rec.oie_alter.push_back(role);
    }
    return rec;
}

double InfluenceMatrix::cell(int lv, const std::string& label) const {
    auto it = std::find(labels.begin(), labels.end(), label);
    if (it == labels.end() || lv < 0 || lv >= num_lvs)
        throw std::out_of_range("influence cell (" + std::to_string(lv) + ", " + label + ")");
    return cells[lv][it - labels.begin()];
}

void InfluenceMatrix::write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << "lv";
    for (const auto& l : labels) out << "," << l;
    out << ",valid_trials,total_trials,broken_trials\n";
    for (int lv = 0; lv < num_lvs; ++lv) {
        out << lv;
        for (size_t c = 0; c < labels.size(); ++c) out << "," << cells[lv][c];
        out << "," << valid_trials[lv] << "," << total_trials[lv] << "," << broken_trials[lv]
            << "\n";
    }
    if (!out) throw std::runtime_error("write failed for " + path);
}

std::vector<InfluenceMatrix> aggregate_influence(const std::vector<DiffRecord>& records,
                                                 int num_lvs) {
    if (records.empty()) throw std::invalid_argument("aggregate_influence: no records");
    if (num_lvs < 0) {
        for (const auto& r : records) num_lvs = std::max(num_lvs, r.lv_index + 1);
    }

    struct Payload {
        bool counted;
        const std::set<std::string>* set_labels;
        const std::vector<std::string>* list_labels;
    };
    auto payload_of = [](const DiffRecord& r, int metric) -> Payload {
        switch (metric) {
            case 0: return {true, &r.root_dep_appear, nullptr};
            case 1: return {true, &r.dep_appear, nullptr};
            case 2: return {true, &r.oie_appear, nullptr};
            case 3: return {!r.dep_alter_abstain, nullptr, &r.dep_alter};
            default: return {!r.oie_alter_abstain, nullptr, &r.oie_alter};
        }
    };

    std::vector<InfluenceMatrix> out;
    for (int m = 0; m < 5; ++m) {
        InfluenceMatrix mat;
        mat.metric = kMetricNames[m];
        mat.num_lvs = num_lvs;

        std::set<std::string> labels;
        if (m == 2 || m == 4) labels.insert(kOieRoles.begin(), kOieRoles.end());
        for (const auto& r : records) {
            auto p = payload_of(r, m);
            if (p.set_labels) labels.insert(p.set_labels->begin(), p.set_labels->end());
            if (p.list_labels) labels.insert(p.list_labels->begin(), p.list_labels->end());
        }
        mat.labels.assign(labels.begin(), labels.end());

        std::vector<std::map<std::string, long>> hits(num_lvs);
        mat.valid_trials.assign(num_lvs, 0);
        mat.total_trials.assign(num_lvs, 0);
        mat.broken_trials.assign(num_lvs, 0);
        for (const auto& r : records) {
            if (r.lv_index < 0 || r.lv_index >= num_lvs)
                throw std::out_of_range("record lv_index out of range");
            mat.total_trials[r.lv_index] += 1;
            if (r.structure_broken) mat.broken_trials[r.lv_index] += 1;
            auto p = payload_of(r, m);
            if (!p.counted) continue;
            mat.valid_trials[r.lv_index] += 1;
            if (p.set_labels)
                for (const auto& l : *p.set_labels) hits[r.lv_index][l] += 1;
            if (p.list_labels)
                for (const auto& l : *p.list_labels) hits[r.lv_index][l] += 1;
        }
        for (int lv = 0; lv < num_lvs; ++lv) {
            std::vector<double> row;
            for (const auto& l : mat.labels) {
                const long h = hits[lv].count(l) ? hits[lv][l] : 0;
                row.push_back(mat.valid_trials[lv] > 0
                                  ? static_cast<double>(h) / mat.valid_trials[lv]
                                  : 0.0);
            }
            mat.cells.push_back(std::move(row));
            if (mat.valid_trials[lv] == 0) mat.has_empty_lv = true;
        }
        out.push_back(std::move(mat));
    }
    return out;
}

std::vector<TopInfluencer> top_influencers(const std::vector<InfluenceMatrix>& matrices) {
    std::vector<TopInfluencer> out;
    for (const auto& mat : matrices)
        for (size_t c = 0; c < mat.labels.size(); ++c) {
            TopInfluencer t;
            t.metric = mat.metric;
            t.label = mat.labels[c];
            for (int lv = 0; lv < mat.num_lvs; ++lv)
                if (mat.cells[lv][c] > t.probability) {  // strict: ties keep lowest LV
                    t.probability = mat.cells[lv][c];
                    t.lv_index = lv;
                }
            out.push_back(std::move(t));
        }
    return out;
}

std::string top_influencers_json(const std::vector<TopInfluencer>& top) {
    nlohmann::json j;
    for (const auto& t : top)
        j[t.metric][t.label] = {{"lv", t.lv_index}, {"probability", t.probability}};
    return j.dump(2);
}

// ---- generators ----

manip::LatentAssignment NeuralGenerator::sample_base(Rng& rng) {
    return manip::sample_prior_chain(ps_, cfg_, rng);
}

manip::LatentAssignment NeuralGenerator::resample(const manip::LatentAssignment& base,
                                                  int lv_index, Rng& rng) {
    return manip::resample_single_lv(ps_, cfg_, base, lv_index, rng);
}

std::vector<std::string> NeuralGenerator::generate(const manip::LatentAssignment& latents) {
    auto res = manip::greedy_generate(ps_, cfg_, latents, cfg_.max_len);
    return corpus::detokenize(res.sequence, vocab_);
}

WiredGenerator::WiredGenerator(const corpus::GrammarSpec& spec,
                               std::map<std::string, int> wiring, int num_lvs, int z_size)
    : wiring_(std::move(wiring)), num_lvs_(num_lvs), z_size_(z_size) {
    words_["ARG0"] = spec.lexicon.at("NOUN-SUBJ");
    words_["V"] = spec.lexicon.at("VERB-TRANS");
    words_["ARG1"] = spec.lexicon.at("NOUN-OBJ");
    words_["ARG2"] = spec.lexicon.at("NOUN-LOC");
    for (const auto& [role, lv] : wiring_)
        if (!words_.count(role) || lv < 0 || lv >= num_lvs_)
            throw std::invalid_argument("wired generator: bad wiring entry " + role);
}

manip::LatentAssignment WiredGenerator::sample_base(Rng& rng) {
    manip::LatentAssignment a;
    a.values = Tensor<float>(num_lvs_, z_size_);
    for (auto& x : a.values.v) x = static_cast<float>(rng.gauss());
    a.levels = {num_lvs_, 0, 0};
    a.z_size = z_size_;
    a.provenance.assign(num_lvs_, manip::Provenance::PRIOR_SAMPLED);
    return a;
}

manip::LatentAssignment WiredGenerator::resample(const manip::LatentAssignment& base,
                                                 int lv_index, Rng& rng) {
    auto out = base;
    for (int c = 0; c < z_size_; ++c) out.values(lv_index, c) = static_cast<float>(rng.gauss());
    out.provenance[lv_index] = manip::Provenance::RESAMPLED;
    return out;
}

std::vector<std::string> WiredGenerator::generate(const manip::LatentAssignment& latents) {
    auto pick = [&](const std::string& role) -> std::string {
        const auto& list = words_.at(role);
        auto it = wiring_.find(role);
        if (it == wiring_.end()) return list.front();
        // Phi(value[0]) is uniform for standard-normal draws, so the bin index
        // is uniform over the word list.
        const double u = 0.5 * std::erfc(-latents.values(it->second, 0) / std::sqrt(2.0));
        const int k = static_cast<int>(list.size());
        return list[std::min(k - 1, static_cast<int>(u * k))];
    };
    return {"the", pick("ARG0"), "is", pick("V"), "the", pick("ARG1"), "in", "the",
            pick("ARG2")};
}

std::vector<DiffRecord> run_influence_experiment(SentenceGenerator& gen,
                                                 const corpus::GrammarSpec& spec,
                                                 int base_count, int resamples_per_lv,
                                                 uint64_t seed, int threads) {
    if (base_count < 1 || resamples_per_lv < 1)
        throw std::invalid_argument("influence experiment: counts must be positive");
    const int N = gen.total_latents();

    std::vector<std::vector<DiffRecord>> per_base(base_count);
    auto run_base = [&](int b) {
        Rng rb(Rng::mix(seed, 0x6261736500ULL + b));
        const auto base = gen.sample_base(rb);
        const auto orig_tokens = gen.generate(base);
        const auto orig_parse = parse_roles(orig_tokens, spec);
        auto& out = per_base[b];
        out.reserve(static_cast<size_t>(resamples_per_lv) * N);
        for (int lv = 0; lv < N; ++lv)
            for (int t = 0; t < resamples_per_lv; ++t) {
                Rng rt(Rng::mix(Rng::mix(Rng::mix(seed, b + 1), lv + 1), t + 1));
                const auto mod = gen.resample(base, lv, rt);
                const auto mod_tokens = gen.generate(mod);
                auto rec = diff_statistics(orig_parse, parse_roles(mod_tokens, spec),
                                           orig_tokens, mod_tokens);
                rec.couple_id = "b" + std::to_string(b) + "-lv" + std::to_string(lv) + "-t" +
                                std::to_string(t);
                rec.lv_index = lv;
                out.push_back(std::move(rec));
            }
    };

    threads = std::max(1, std::min(threads, base_count));
    if (threads == 1) {
        for (int b = 0; b < base_count; ++b) run_base(b);
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < threads; ++w)
            pool.emplace_back([&, w] {
                for (int b = w; b < base_count; b += threads) run_base(b);
            });
        for (auto& th : pool) th.join();
    }

    std::vector<DiffRecord> records;
    records.reserve(static_cast<size_t>(base_count) * resamples_per_lv * N);
    for (auto& chunk : per_base)
        for (auto& r : chunk) records.push_back(std::move(r));
    return records;
}

WiredCheckReport wired_decoder_check(const corpus::GrammarSpec& spec, uint64_t seed,
                                     std::map<std::string, int> wiring, int base_count,
                                     int resamples_per_lv) {
    WiredGenerator gen(spec, wiring);
    const auto records = run_influence_experiment(gen, spec, base_count, resamples_per_lv, seed);
    const auto matrices = aggregate_influence(records, gen.total_latents());
    const auto& oie = *std::find_if(matrices.begin(), matrices.end(),
                                    [](const auto& m) { return m.metric == "OIE_ALTER"; });

    WiredCheckReport report;
    report.wiring = wiring;
    report.record_count = static_cast<long>(records.size());
    std::set<int> wired_lvs;
    for (const auto& [role, lv] : wiring) wired_lvs.insert(lv);
    for (const auto& role : {"ARG0", "V", "ARG1", "ARG2"}) {
        int best = 0;
        double p = 0;
        for (int lv = 0; lv < oie.num_lvs; ++lv) {
            const double c = oie.cell(lv, role);
            if (c > p) {
                p = c;
                best = lv;
            }
            if (!wired_lvs.count(lv)) report.max_inert_cell = std::max(report.max_inert_cell, c);
        }
        report.top_by_role[role] = {best, p};
    }
    report.passed = report.max_inert_cell <= 0.1;
    for (const auto& [role, lv] : wiring) {
        auto [best, p] = report.top_by_role.at(role);
        if (best != lv || p < 0.9) report.passed = false;
    }
    return report;
}

// ---- external-parse ingestion ----

std::string role_parse_to_json(const RoleParse& parse) {
    nlohmann::json j;
    j["status"] = parse.status == ParseStatus::PARSED ? "PARSED" : "UNPARSED";
    j["root_label"] = parse.root_label;
    j["root_children"] = parse.root_children;
    j["all_labels"] = parse.all_labels;
    j["labels_by_token"] = parse.labels_by_token;
    j["template_id"] = parse.template_id;
    nlohmann::json spans = nlohmann::json::object();
    for (const auto& [role, s] : parse.role_spans) spans[role] = {s.start, s.end};
    j["role_spans"] = spans;
    nlohmann::json heads = nlohmann::json::object();
    for (const auto& [role, s] : parse.head_spans) heads[role] = {s.start, s.end};
    j["head_spans"] = heads;
    return j.dump();
}

RoleParse role_parse_from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    RoleParse p;
    p.status = j.at("status") == "PARSED" ? ParseStatus::PARSED : ParseStatus::UNPARSED;
    p.root_label = j.value("root_label", "");
    for (const auto& l : j.value("root_children", nlohmann::json::array()))
        p.root_children.insert(l.get<std::string>());
    if (j.contains("all_labels"))
        p.all_labels = j.at("all_labels").get<std::map<std::string, int>>();
    if (j.contains("labels_by_token"))
        p.labels_by_token = j.at("labels_by_token").get<std::vector<std::string>>();
    p.template_id = j.value("template_id", -1);
    // materialize before .items(): the proxy would outlive a value() temporary
    const auto role_spans = j.value("role_spans", nlohmann::json::object());
    for (const auto& [role, s] : role_spans.items())
        p.role_spans[role] = corpus::Span{s.at(0), s.at(1)};
    const auto head_spans = j.value("head_spans", nlohmann::json::object());
    for (const auto& [role, s] : head_spans.items())
        p.head_spans[role] = corpus::Span{s.at(0), s.at(1)};
    return p;
}

std::vector<ExternalParse> load_external_parses(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<ExternalParse> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        ExternalParse e;
        e.couple_id = j.at("couple_id");
        e.tokens = j.at("tokens").get<std::vector<std::string>>();
        e.parse = role_parse_from_json(j.at("parse").dump());
        out.push_back(std::move(e));
    }
    return out;
}

}  // namespace hvae::evaldis
