// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "dreamcatcher/error.hpp"
#include "dreamcatcher/scorers.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace dreamcatcher;

namespace {

Embedding vec(std::initializer_list<float> v) { return Embedding{std::vector<float>(v)}; }

std::vector<std::size_t> argsort(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    return idx;
}

RawScores raw(const std::string& qid, int index, std::initializer_list<std::pair<Scorer, double>> values) {
    RawScores r;
    r.key = {qid, GenMode::Normal, index};
    for (auto [s, v] : values) r[s] = v;
    return r;
}

}  // namespace

TEST_SUITE("scorers") {

TEST_CASE("self-consistency examples") {
    const std::vector<Embedding> same{vec({1, 2}), vec({1, 2}), vec({1, 2})};
    for (double s : score_self_consistency(same)) CHECK(s == doctest::Approx(1.0));

    const std::vector<Embedding> three{vec({1, 0}), vec({1, 0}), vec({0, 1})};
    const auto s = score_self_consistency(three);
    CHECK(s[0] == doctest::Approx(0.5));
    CHECK(s[1] == doctest::Approx(0.5));
    CHECK(s[2] == doctest::Approx(0.0));

    const std::vector<Embedding> two{vec({1, 1}), vec({1, 0})};
    const auto t = score_self_consistency(two);
    CHECK(t[0] == doctest::Approx(cosine(two[0], two[1])));
    CHECK(t[1] == doctest::Approx(t[0]));

    CHECK_THROWS_AS(score_self_consistency(std::vector<Embedding>{vec({1})}), ValidationError);
}

TEST_CASE("self-consistency is permutation-equivariant and scale-invariant") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<Embedding> e(5);
        for (auto& x : e) {
            x.values.resize(8);
            for (auto& v : x.values) v = static_cast<float>(rng.normal());
        }
        const auto base = score_self_consistency(e);
        std::vector<std::size_t> perm{0, 1, 2, 3, 4};
        rng.shuffle(perm.begin(), perm.end());
        std::vector<Embedding> permuted;
        for (auto p : perm) permuted.push_back(e[p]);
        const auto ps = score_self_consistency(permuted);
        for (std::size_t i = 0; i < 5; ++i) CHECK(ps[i] == doctest::Approx(base[perm[i]]).epsilon(1e-12));

        auto scaled = e;
        for (auto& x : scaled) {
            const float c = static_cast<float>(0.5 + 4.0 * rng.uniform());
            for (auto& v : x.values) v *= c;
        }
        const auto ss = score_self_consistency(scaled);
        for (std::size_t i = 0; i < 5; ++i) CHECK(ss[i] == doctest::Approx(base[i]).epsilon(1e-6));
    }
}

TEST_CASE("tokenization") {
    CHECK(tokenize("Harry Winer, the ANSWER!", "en") == std::vector<std::string>{"harry", "winer", "the", "answer"});
    CHECK(tokenize("北京。", "zh") == std::vector<std::string>{"北", "京"});
    CHECK(tokenize("  ", "en").empty());
}

TEST_CASE("overlap examples") {
    CHECK(score_overlap("Harry Winer", "Harry Winer", "en") == 1.0);
    CHECK(score_overlap("I think harry did it", "Harry Winer", "en") == 0.5);
    CHECK(score_overlap("nothing shared", "Harry Winer", "en") == 0.0);
    CHECK(score_overlap("a b", "a a b", "en") == doctest::Approx(2.0 / 3.0));
    CHECK(score_overlap("答案是北京", "北京", "zh") == 1.0);
    CHECK_THROWS_AS(score_overlap("x", "", "en"), ValidationError);
}

TEST_CASE("overlap never exceeds 1 and is 1 iff multiplicities are covered") {
    Rng rng(3);
    const std::vector<std::string> words{"a", "b", "c", "d"};
    for (int trial = 0; trial < 300; ++trial) {
        std::string g, a;
        std::map<std::string, int> gc, ac;
        const int ng = static_cast<int>(rng.below(6)), na = 1 + static_cast<int>(rng.below(4));
        for (int i = 0; i < ng; ++i) {
            const auto& w = words[rng.below(4)];
            g += w + " ";
            ++gc[w];
        }
        for (int i = 0; i < na; ++i) {
            const auto& w = words[rng.below(4)];
            a += w + " ";
            ++ac[w];
        }
        const double s = score_overlap(g, a, "en");
        bool covered = true;
        for (const auto& [w, n] : ac) covered = covered && gc[w] >= n;
        CHECK(s <= 1.0);
        CHECK((s == 1.0) == covered);
    }
}

TEST_CASE("answer similarity") {
    CHECK(score_answer_sim(vec({1, 1}), vec({1, 0})) == doctest::Approx(0.70710678).epsilon(1e-6));
    CHECK(score_answer_sim(vec({0, 1}), vec({1, 0})) == 0.0);
    CHECK(score_answer_sim(vec({3, 4}), vec({3, 4})) == doctest::Approx(1.0));
}

TEST_CASE("min-max normalization") {
    const std::vector<RawScores> rows{raw("q", 0, {{Scorer::Overlap, 2}}), raw("q", 1, {{Scorer::Overlap, 4}}),
                                      raw("q", 2, {{Scorer::Overlap, 6}})};
    const auto spec = fit_normalizer(rows);
    CHECK(spec.apply(Scorer::Overlap, 2) == 0.0);
    CHECK(spec.apply(Scorer::Overlap, 4) == 0.5);
    CHECK(spec.apply(Scorer::Overlap, 6) == 1.0);

    const std::vector<RawScores> flat{raw("q", 0, {{Scorer::AnswerSim, 3}}), raw("q", 1, {{Scorer::AnswerSim, 3}})};
    CHECK(fit_normalizer(flat).apply(Scorer::AnswerSim, 3) == 0.5);
}

TEST_CASE("aggregation") {
    const std::vector<RawScores> rows{
        raw("q", 0, {{Scorer::SelfConsistency, 1}, {Scorer::Probe, 1}, {Scorer::Overlap, 1}, {Scorer::AnswerSim, 1}}),
        raw("q", 1, {{Scorer::SelfConsistency, 0}, {Scorer::Probe, 0}, {Scorer::Overlap, 0}, {Scorer::AnswerSim, 0}}),
        raw("q", 2, {{Scorer::SelfConsistency, 0.5}, {Scorer::Probe, 0.5}, {Scorer::Overlap, 0.5}, {Scorer::AnswerSim, 0.5}})};
    const auto spec = fit_normalizer(rows);
    const ScorerSet all{Scorer::SelfConsistency, Scorer::Probe, Scorer::Overlap, Scorer::AnswerSim};
    const auto cards = aggregate_scorecards(rows, spec, all);
    CHECK(cards[0].total == 4.0);
    CHECK(cards[1].total == 0.0);
    CHECK(cards[2].total == 2.0);
    const auto one = aggregate_scorecards(rows, spec, ScorerSet{Scorer::Overlap});
    CHECK(one[2].total == *one[2].norm(Scorer::Overlap));
    for (const auto& c : cards)
        for (Scorer s : kAllScorers) {
            CHECK(*c.norm(s) >= 0.0);
            CHECK(*c.norm(s) <= 1.0);
        }

    const std::vector<RawScores> missing{raw("q7", 3, {{Scorer::Overlap, 1}})};
    try {
        aggregate_scorecards(missing, fit_normalizer(missing), ScorerSet{Scorer::Overlap, Scorer::Probe});
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("q7") != std::string::npos);
    }
}

TEST_CASE("positive affine change of one scorer leaves the total order intact") {
    Rng rng(17);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<RawScores> rows;
        for (int i = 0; i < 12; ++i)
            rows.push_back(raw("q", i, {{Scorer::SelfConsistency, rng.uniform()}, {Scorer::Overlap, rng.uniform()}}));
        const ScorerSet set{Scorer::SelfConsistency, Scorer::Overlap};
        std::vector<double> before, after;
        for (const auto& c : aggregate_scorecards(rows, fit_normalizer(rows), set)) before.push_back(c.total);
        const double a = 0.1 + 10.0 * rng.uniform(), b = rng.normal() * 5.0;
        for (auto& r : rows) r[Scorer::Overlap] = a * *r[Scorer::Overlap] + b;
        for (const auto& c : aggregate_scorecards(rows, fit_normalizer(rows), set)) after.push_back(c.total);
        CHECK(argsort(before) == argsort(after));
    }
}

TEST_CASE("score_corpus matches brute-force references") {
    const auto corpus = fixtures::random_scoring_corpus(2024, 30, 5);
    const auto groups = group_by_question(corpus.questions, corpus.generations);
    EmbedderConfig cfg;
    cfg.dim = 64;
    Embedder emb(cfg);
    const auto rows = score_corpus(groups, emb, nullptr, 3);
    REQUIRE(rows.size() == 150);
    std::size_t r = 0;
    for (const auto& g : groups) {
        std::vector<std::vector<float>> e;
        for (const auto* gen : g.normal) e.push_back(hash_featurize(gen->text, 64).values);
        const auto ref = oracle::self_consistency(e);
        const auto ans = hash_featurize(*g.question->answer, 64).values;
        for (std::size_t i = 0; i < g.normal.size(); ++i, ++r) {
            CHECK(*rows[r][Scorer::SelfConsistency] == doctest::Approx(ref[i]).epsilon(1e-9));
            CHECK(*rows[r][Scorer::Overlap] ==
                  doctest::Approx(oracle::overlap(g.normal[i]->text, *g.question->answer, g.question->language == "zh")));
            CHECK(*rows[r][Scorer::AnswerSim] == doctest::Approx(oracle::cosine(e[i], ans)).epsilon(1e-9));
            CHECK_FALSE(rows[r][Scorer::Probe]);
        }
    }
}

TEST_CASE("probe scores are broadcast to every generation of the question") {
    const auto corpus = fixtures::random_scoring_corpus(5, 3, 4);
    const auto groups = group_by_question(corpus.questions, corpus.generations);
    Embedder emb(EmbedderConfig{});
    const std::map<std::string, double> p{{"r0", 0.25}, {"r2", 0.75}};
    const auto rows = score_corpus(groups, emb, &p);
    for (const auto& row : rows) {
        if (row.key.question_id == "r1") CHECK_FALSE(row[Scorer::Probe]);
        else CHECK(*row[Scorer::Probe] == p.at(row.key.question_id));
    }
}

}  // TEST_SUITE
