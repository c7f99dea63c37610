#include "hvae/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "hvae/rng.hpp"

namespace hvae::corpus {

namespace {

const std::set<std::string> kRoles = {"subject", "verb", "dobj", "pobj", "none"};

bool is_content_class(const std::string& c) {
    return c.rfind("NOUN-", 0) == 0 || c.rfind("VERB-", 0) == 0;
}

}  // namespace

GrammarSpec parse_grammar_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw GrammarError(std::string("grammar parse error: ") + e.what());
    }
    GrammarSpec spec;
    if (!j.contains("lexicon") || !j.contains("templates") || !j.contains("weights"))
        throw GrammarError("grammar: missing one of lexicon/templates/weights");
    for (auto& [cls, words] : j.at("lexicon").items()) {
        std::vector<std::string> list;
        for (auto& w : words) list.push_back(w.get<std::string>());
        spec.lexicon[cls] = std::move(list);
    }
    for (auto& tpl : j.at("templates")) {
        std::vector<TemplateSlot> slots;
        for (auto& slot : tpl) {
            TemplateSlot s;
            s.word_class = slot.at("class").get<std::string>();
            s.role = slot.at("role").get<std::string>();
            slots.push_back(std::move(s));
        }
        spec.templates.push_back(std::move(slots));
    }
    for (auto& w : j.at("weights")) spec.weights.push_back(w.get<double>());
    validate_grammar(spec);
    return spec;
}

GrammarSpec load_grammar(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw GrammarError("grammar: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_grammar_json(ss.str());
}

void validate_grammar(GrammarSpec& spec) {
    if (spec.templates.empty()) throw GrammarError("grammar: no templates");
    if (spec.weights.size() != spec.templates.size())
        throw GrammarError("grammar: weights count differs from templates count");
    double total = 0;
    for (double w : spec.weights) {
        if (w < 0) throw GrammarError("grammar: negative template weight");
        total += w;
    }
    if (std::abs(total - 1.0) > 1e-9)
        throw GrammarError("grammar: template weights must sum to 1");

    // Content-word lists must be disjoint so the oracle parser is unambiguous.
    // We enforce disjointness across all classes.
    spec.word_class_of.clear();
    for (auto& [cls, words] : spec.lexicon) {
        if (words.empty()) throw GrammarError("grammar: empty word list for class " + cls);
        for (auto& w : words) {
            auto [it, fresh] = spec.word_class_of.emplace(w, cls);
            if (!fresh && (is_content_class(cls) || is_content_class(it->second)))
                throw GrammarError("grammar: word '" + w + "' in classes " + it->second +
                                   " and " + cls);
            if (!fresh)
                throw GrammarError("grammar: word '" + w + "' appears in two classes");
        }
    }

    for (size_t t = 0; t < spec.templates.size(); ++t) {
        int verbs = 0, subjects = 0, dobjs = 0, pobjs = 0;
        for (auto& slot : spec.templates[t]) {
            if (!spec.lexicon.count(slot.word_class))
                throw GrammarError("grammar: template " + std::to_string(t) +
                                   " references unknown class " + slot.word_class);
            if (!kRoles.count(slot.role))
                throw GrammarError("grammar: template " + std::to_string(t) +
                                   " has unknown role " + slot.role);
            verbs += slot.role == "verb";
            subjects += slot.role == "subject";
            dobjs += slot.role == "dobj";
            pobjs += slot.role == "pobj";
        }
        if (verbs != 1 || subjects != 1)
            throw GrammarError("grammar: template " + std::to_string(t) +
                               " must have exactly one verb and one subject role");
        if (dobjs > 1 || pobjs > 1)
            throw GrammarError("grammar: template " + std::to_string(t) +
                               " may use dobj/pobj at most once");
    }
}

std::vector<RoleAnnotatedSentence> generate_corpus(const GrammarSpec& spec, int count,
                                                   uint64_t seed, int max_len) {
    if (count < 1) throw std::invalid_argument("generate_corpus: count must be >= 1");
    std::vector<double> cum(spec.weights.size());
    std::partial_sum(spec.weights.begin(), spec.weights.end(), cum.begin());

    std::vector<RoleAnnotatedSentence> out;
    out.reserve(count);
    Rng rng(seed);
    while (static_cast<int>(out.size()) < count) {
        const double u = rng.uniform();
        size_t t = std::lower_bound(cum.begin(), cum.end(), u) - cum.begin();
        if (t >= spec.templates.size()) t = spec.templates.size() - 1;
        const auto& tpl = spec.templates[t];
        if (static_cast<int>(tpl.size()) + 2 > max_len) continue;  // reject, resample
        RoleAnnotatedSentence s;
        s.template_id = static_cast<int>(t);
        for (const auto& slot : tpl) {
            const auto& words = spec.lexicon.at(slot.word_class);
            s.tokens.push_back(words[rng.uniform_int(words.size())]);
        }
        for (size_t i = 0; i < tpl.size(); ++i) {
            const auto& role = tpl[i].role;
            if (role == "none") continue;
            auto it = s.role_spans.find(role);
            if (it == s.role_spans.end())
                s.role_spans[role] = {static_cast<int>(i), static_cast<int>(i) + 1};
            else
                it->second.end = static_cast<int>(i) + 1;  // contiguous by construction
        }
        out.push_back(std::move(s));
    }
    return out;
}

Vocab build_vocab(const std::vector<RoleAnnotatedSentence>& corpus) {
    if (corpus.empty()) throw std::invalid_argument("build_vocab: empty corpus");
    std::map<std::string, int> freq;
    for (const auto& s : corpus)
        for (const auto& w : s.tokens) ++freq[w];
    std::vector<std::pair<std::string, int>> items(freq.begin(), freq.end());
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Vocab v;
    v.id_to_word = {"<pad>", "<bos>", "<eos>", "<unk>"};
    for (auto& [w, _] : items) {
        v.word_to_id[w] = static_cast<int>(v.id_to_word.size());
        v.id_to_word.push_back(w);
    }
    return v;
}

TokenSequence tokenize(const std::vector<std::string>& words, const Vocab& vocab) {
    TokenSequence seq;
    seq.ids.push_back(kBos);
    for (const auto& w : words) seq.ids.push_back(vocab.id(w));
    seq.ids.push_back(kEos);
    return seq;
}

std::vector<std::string> detokenize(const TokenSequence& seq, const Vocab& vocab) {
    std::vector<std::string> words;
    for (int id : seq.ids) {
        if (id == kBos || id == kEos || id == kPad) continue;
        words.push_back(id < vocab.size() ? vocab.id_to_word[id] : "<unk>");
    }
    return words;
}

std::pair<std::vector<RoleAnnotatedSentence>, std::vector<RoleAnnotatedSentence>>
split_corpus(const std::vector<RoleAnnotatedSentence>& corpus, double train_fraction,
             uint64_t seed) {
    if (train_fraction <= 0 || train_fraction >= 1)
        throw std::invalid_argument("split_corpus: fraction must be in (0,1)");
    std::vector<size_t> idx(corpus.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    for (size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[rng.uniform_int(i)]);
    const size_t n_train = static_cast<size_t>(train_fraction * corpus.size());
    std::pair<std::vector<RoleAnnotatedSentence>, std::vector<RoleAnnotatedSentence>> out;
    for (size_t i = 0; i < idx.size(); ++i)
        (i < n_train ? out.first : out.second).push_back(corpus[idx[i]]);
    return out;
}

void save_corpus_jsonl(const std::vector<RoleAnnotatedSentence>& corpus,
                       const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_corpus_jsonl: cannot open " + path);
    for (const auto& s : corpus) {
        nlohmann::json j;
        j["tokens"] = s.tokens;
        nlohmann::json roles = nlohmann::json::object();
        for (const auto& [role, span] : s.role_spans) roles[role] = {span.start, span.end};
        j["roles"] = roles;
        j["template_id"] = s.template_id;
        out << j.dump() << "\n";
    }
}

std::vector<RoleAnnotatedSentence> load_corpus_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_corpus_jsonl: cannot open " + path);
    std::vector<RoleAnnotatedSentence> corpus;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        RoleAnnotatedSentence s;
        s.tokens = j.at("tokens").get<std::vector<std::string>>();
        for (auto& [role, span] : j.at("roles").items())
            s.role_spans[role] = {span.at(0).get<int>(), span.at(1).get<int>()};
        s.template_id = j.value("template_id", 0);
        corpus.push_back(std::move(s));
    }
    return corpus;
}

std::vector<RoleAnnotatedSentence> load_corpus_plain(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_corpus_plain: cannot open " + path);
    std::vector<RoleAnnotatedSentence> corpus;
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ss(line);
        RoleAnnotatedSentence s;
        s.template_id = -1;
        std::string w;
        while (ss >> w) s.tokens.push_back(w);
        if (!s.tokens.empty()) corpus.push_back(std::move(s));
    }
    return corpus;
}

}  // namespace hvae::corpus
