#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hvae::corpus {

// Reserved vocabulary ids.
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kNumReserved = 4;

// Half-open token range [start, end).
struct Span {
    int start = 0;
    int end = 0;
    bool operator==(const Span&) const = default;
};

struct TemplateSlot {
    std::string word_class;
    std::string role;  // subject | verb | dobj | pobj | none
};

struct GrammarSpec {
    std::map<std::string, std::vector<std::string>> lexicon;
    std::vector<std::vector<TemplateSlot>> templates;
    std::vector<double> weights;

    // word -> class, derived from the lexicon (classes are disjoint).
    std::map<std::string, std::string> word_class_of;
};

struct RoleAnnotatedSentence {
    std::vector<std::string> tokens;
    std::map<std::string, Span> role_spans;  // subject/verb/dobj/pobj head spans
    int template_id = 0;
};

struct Vocab {
    std::map<std::string, int> word_to_id;
    std::vector<std::string> id_to_word;  // index 0..3 are PAD/BOS/EOS/UNK

    int size() const { return static_cast<int>(id_to_word.size()); }
    int id(const std::string& w) const {
        auto it = word_to_id.find(w);
        return it == word_to_id.end() ? kUnk : it->second;
    }
};

struct TokenSequence {
    std::vector<int> ids;  // BOS ... EOS
    int length() const { return static_cast<int>(ids.size()); }
};

struct GrammarError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

GrammarSpec load_grammar(const std::string& path);
GrammarSpec parse_grammar_json(const std::string& text);
void validate_grammar(GrammarSpec& spec);

std::vector<RoleAnnotatedSentence> generate_corpus(const GrammarSpec& spec, int count,
                                                   uint64_t seed, int max_len = 16);

Vocab build_vocab(const std::vector<RoleAnnotatedSentence>& corpus);

TokenSequence tokenize(const std::vector<std::string>& words, const Vocab& vocab);
std::vector<std::string> detokenize(const TokenSequence& seq, const Vocab& vocab);

std::pair<std::vector<RoleAnnotatedSentence>, std::vector<RoleAnnotatedSentence>>
split_corpus(const std::vector<RoleAnnotatedSentence>& corpus, double train_fraction,
             uint64_t seed);

// JSON-lines persistence for role-annotated corpora, and a plain-text loader
// (one sentence per line, whitespace tokens, no role annotations).
void save_corpus_jsonl(const std::vector<RoleAnnotatedSentence>& corpus, const std::string& path);
std::vector<RoleAnnotatedSentence> load_corpus_jsonl(const std::string& path);
std::vector<RoleAnnotatedSentence> load_corpus_plain(const std::string& path);

}  // namespace hvae::corpus
