#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "hvae/corpus.hpp"

using namespace hvae::corpus;

static const char* kGrammarPath = "data/default_grammar.json";

TEST_CASE("default grammar loads with 9 classes and >= 6 templates") {
    auto spec = load_grammar(kGrammarPath);
    CHECK(spec.lexicon.size() == 9);
    CHECK(spec.templates.size() >= 6);
}

TEST_CASE("template referencing unknown class is rejected") {
    auto spec = load_grammar(kGrammarPath);
    spec.templates[0][1].word_class = "XNOUN";
    CHECK_THROWS_AS(validate_grammar(spec), GrammarError);
}

TEST_CASE("weights must sum to one") {
    const char* base = R"({
      "lexicon": {"DET": ["a"], "NOUN-SUBJ": ["dog"], "AUX": ["is"], "VERB-INTRANS": ["running"]},
      "templates": [
        [{"class":"DET","role":"none"},{"class":"NOUN-SUBJ","role":"subject"},
         {"class":"AUX","role":"none"},{"class":"VERB-INTRANS","role":"verb"}],
        [{"class":"NOUN-SUBJ","role":"subject"},{"class":"VERB-INTRANS","role":"verb"}]
      ],
      "weights": [%W%]})";
    std::string good(base), bad(base);
    good.replace(good.find("%W%"), 3, "0.5, 0.5");
    bad.replace(bad.find("%W%"), 3, "0.5, 0.6");
    CHECK_NOTHROW(parse_grammar_json(good));
    CHECK_THROWS_AS(parse_grammar_json(bad), GrammarError);
}

TEST_CASE("generation is deterministic and length-calibrated") {
    auto spec = load_grammar(kGrammarPath);
    auto a = generate_corpus(spec, 5000, 7);
    auto b = generate_corpus(spec, 5000, 7);
    REQUIRE(a.size() == 5000);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].tokens == b[i].tokens);
        CHECK(a[i].template_id == b[i].template_id);
    }
    double mean = 0;
    for (const auto& s : a) mean += s.tokens.size();
    mean /= a.size();
    double var = 0;
    for (const auto& s : a) var += (s.tokens.size() - mean) * (s.tokens.size() - mean);
    const double sd = std::sqrt(var / a.size());
    CHECK(mean >= 6.0);
    CHECK(mean <= 11.0);
    CHECK(sd >= 1.5);
    CHECK(sd <= 4.0);
}

TEST_CASE("degenerate singleton grammar yields the unique sentence") {
    const char* text = R"({
      "lexicon": {"DET": ["a"], "NOUN-SUBJ": ["dog"], "AUX": ["is"],
                  "VERB-TRANS": ["chasing"], "NOUN-OBJ": ["ball"]},
      "templates": [
        [{"class":"DET","role":"none"},{"class":"NOUN-SUBJ","role":"subject"},
         {"class":"AUX","role":"none"},{"class":"VERB-TRANS","role":"verb"},
         {"class":"DET","role":"none"},{"class":"NOUN-OBJ","role":"dobj"}]
      ],
      "weights": [1.0]})";
    auto spec = parse_grammar_json(text);
    auto corpus = generate_corpus(spec, 3, 42);
    for (const auto& s : corpus) {
        CHECK(s.tokens == std::vector<std::string>{"a", "dog", "is", "chasing", "a", "ball"});
        CHECK(s.role_spans.at("subject") == Span{1, 2});
        CHECK(s.role_spans.at("verb") == Span{3, 4});
        CHECK(s.role_spans.at("dobj") == Span{5, 6});
    }
}

TEST_CASE("vocab construction") {
    RoleAnnotatedSentence s;
    s.tokens = {"a", "dog", "runs"};
    auto v = build_vocab({s});
    CHECK(v.size() == 7);
    auto v2 = build_vocab({s});
    CHECK(v.id_to_word == v2.id_to_word);

    auto spec = load_grammar(kGrammarPath);
    auto corpus = generate_corpus(spec, 5000, 7);
    auto full = build_vocab(corpus);
    std::set<std::string> used;
    for (const auto& sent : corpus)
        for (const auto& w : sent.tokens) used.insert(w);
    CHECK(full.size() == 4 + static_cast<int>(used.size()));
}

TEST_CASE("tokenize round trip and OOV") {
    RoleAnnotatedSentence s;
    s.tokens = {"a", "dog", "runs"};
    auto v = build_vocab({s});
    auto seq = tokenize(s.tokens, v);
    REQUIRE(seq.length() == 5);
    CHECK(seq.ids.front() == kBos);
    CHECK(seq.ids.back() == kEos);
    CHECK(detokenize(seq, v) == s.tokens);

    auto oov = tokenize({"a", "zebra", "runs"}, v);
    CHECK(oov.ids[2] == kUnk);

    auto spec = load_grammar(kGrammarPath);
    auto corpus = generate_corpus(spec, 1000, 3);
    auto full = build_vocab(corpus);
    for (const auto& sent : corpus)
        CHECK(detokenize(tokenize(sent.tokens, full), full) == sent.tokens);
}

TEST_CASE("split is disjoint, exhaustive and deterministic") {
    auto spec = load_grammar(kGrammarPath);
    auto corpus = generate_corpus(spec, 5000, 7);
    auto [train, test] = split_corpus(corpus, 0.9, 11);
    CHECK(train.size() == 4500);
    CHECK(test.size() == 500);
    auto [train2, test2] = split_corpus(corpus, 0.9, 11);
    CHECK(train[0].tokens == train2[0].tokens);
    CHECK(test[0].tokens == test2[0].tokens);

    auto two = generate_corpus(spec, 2, 1);
    auto [t1, t2] = split_corpus(two, 0.5, 1);
    CHECK(t1.size() == 1);
    CHECK(t2.size() == 1);
}

TEST_CASE("jsonl round trip") {
    auto spec = load_grammar(kGrammarPath);
    auto corpus = generate_corpus(spec, 50, 9);
    save_corpus_jsonl(corpus, "test_corpus_tmp.jsonl");
    auto back = load_corpus_jsonl("test_corpus_tmp.jsonl");
    REQUIRE(back.size() == corpus.size());
    for (size_t i = 0; i < corpus.size(); ++i) {
        CHECK(back[i].tokens == corpus[i].tokens);
        CHECK(back[i].role_spans == corpus[i].role_spans);
        CHECK(back[i].template_id == corpus[i].template_id);
    }
}
