// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "dreamcatcher/corpus.hpp"
#include "dreamcatcher/labeling.hpp"
#include "dreamcatcher/random.hpp"
#include "dreamcatcher/scorers.hpp"

namespace fixtures {

inline const std::vector<std::string>& en_words() {
    static const std::vector<std::string> w{"paris", "london", "harry", "winer", "the",   "answer", "is",
                                            "it",    "city",   "river", "blue",  "north", "Tokyo",  "ann"};
    return w;
}

inline const std::vector<std::string>& zh_chars() {
    static const std::vector<std::string> c{"北", "京", "上", "海", "河", "山", "王", "李", "是", "的", "答", "案"};
    return c;
}

inline std::string random_text(dreamcatcher::Rng& rng, bool zh, int min_tokens, int max_tokens) {
    const int n = min_tokens + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_tokens - min_tokens + 1)));
    std::string out;
    for (int i = 0; i < n; ++i) {
        if (zh) {
            out += zh_chars()[rng.below(zh_chars().size())];
            if (rng.uniform() < 0.1) out += "，";
        } else {
            if (i) out += rng.uniform() < 0.15 ? ", " : " ";
            out += en_words()[rng.below(en_words().size())];
        }
    }
    out += zh ? "。" : ".";
    return out;
}

struct ScoringCorpus {
    std::vector<dreamcatcher::Question> questions;
    std::vector<dreamcatcher::Generation> generations;
};

/// Random bilingual questions with answers and k normal generations each.
inline ScoringCorpus random_scoring_corpus(std::uint64_t seed, int n, int k) {
    dreamcatcher::Rng rng(seed);
    ScoringCorpus c;
    for (int i = 0; i < n; ++i) {
        const bool zh = rng.uniform() < 0.5;
        dreamcatcher::Question q;
        q.id = "r" + std::to_string(i);
        q.language = zh ? "zh" : "en";
        q.text = random_text(rng, zh, 3, 6);
        q.answer = random_text(rng, zh, 1, 3);
        for (int j = 0; j < k; ++j)
            c.generations.push_back({q.id, dreamcatcher::GenMode::Normal, j,
                                     rng.uniform() < 0.4 ? *q.answer : random_text(rng, zh, 1, 6)});
        c.questions.push_back(std::move(q));
    }
    return c;
}

inline dreamcatcher::ScoreCard card(const std::string& qid, int index, double total) {
    dreamcatcher::ScoreCard c;
    c.key = {qid, dreamcatcher::GenMode::Normal, index};
    c.raw.key = c.key;
    c.total = total;
    return c;
}

using PairTuple = std::tuple<std::string, std::string, std::string, std::string, std::string, std::string>;

inline PairTuple tuple_of(const dreamcatcher::PreferencePair& p) {
    using dreamcatcher::to_string;
    return {p.question_id, std::string(to_string(p.category)), p.chosen.text, std::string(to_string(p.chosen.role)),
            p.rejected.text, std::string(to_string(p.rejected.role))};
}

/// Twelve questions, k = 3, with totals chosen so that 18 generations sit
/// above and 18 below the median gap.
struct EmissionFixture {
    std::vector<dreamcatcher::Question> questions;
    std::vector<dreamcatcher::Generation> generations;
    std::map<std::string, std::vector<double>> totals;

    EmissionFixture() {
        totals = {{"q0", {10, 12, 11}},   {"q1", {11, 11, 10}}, {"q2", {10, 10.5, 13}}, {"q3", {12, 10, 10}},
                  {"q4", {1, 0.5, 2}},    {"q5", {2, 2, 0.1}},  {"q6", {0.4, 1.5, 0.4}}, {"q7", {1, 1, 1}},
                  {"q8", {10, 1, 11}},    {"q9", {1, 12, 2}},   {"q10", {0.2, 0.2, 13}}, {"q11", {14, 0.3, 14}}};
        for (int q = 0; q < 12; ++q) {
            const std::string id = "q" + std::to_string(q);
            questions.push_back({id, "question " + id, q % 2 ? "zh" : "en", "ans", std::nullopt});
            for (int i = 0; i < 3; ++i) generations.push_back({id, dreamcatcher::GenMode::Normal, i, id + " n" + std::to_string(i)});
            for (int i = 0; i < 2; ++i)
                generations.push_back({id, dreamcatcher::GenMode::Uncertainty, i, id + " u" + std::to_string(i)});
        }
    }

    std::vector<dreamcatcher::ScoreCard> all_cards() const {
        std::vector<dreamcatcher::ScoreCard> out;
        for (const auto& q : questions)
            for (int i = 0; i < 3; ++i) out.push_back(card(q.id, i, totals.at(q.id)[static_cast<std::size_t>(i)]));
        return out;
    }

    /// (question, category, chosen text, chosen role, rejected text, rejected role).
    static std::set<PairTuple> expected_pairs() {
        return {
            {"q0", "known", "q0 n1", "factual", "q0 u0", "uncertainty"},
            {"q1", "known", "q1 n0", "factual", "q1 u0", "uncertainty"},
            {"q2", "known", "q2 n2", "factual", "q2 u0", "uncertainty"},
            {"q3", "known", "q3 n0", "factual", "q3 u0", "uncertainty"},
            {"q4", "unknown", "q4 u0", "uncertainty", "q4 n1", "hallucination"},
            {"q5", "unknown", "q5 u0", "uncertainty", "q5 n2", "hallucination"},
            {"q6", "unknown", "q6 u0", "uncertainty", "q6 n0", "hallucination"},
            {"q7", "unknown", "q7 u0", "uncertainty", "q7 n0", "hallucination"},
            {"q8", "mixed", "q8 n2", "factual", "q8 u0", "uncertainty"},
            {"q8", "mixed", "q8 u0", "uncertainty", "q8 n1", "hallucination"},
            {"q8", "mixed", "q8 n2", "factual", "q8 n1", "hallucination"},
            {"q9", "mixed", "q9 n1", "factual", "q9 u0", "uncertainty"},
            {"q9", "mixed", "q9 u0", "uncertainty", "q9 n0", "hallucination"},
            {"q9", "mixed", "q9 n1", "factual", "q9 n0", "hallucination"},
            {"q10", "mixed", "q10 n2", "factual", "q10 u0", "uncertainty"},
            {"q10", "mixed", "q10 u0", "uncertainty", "q10 n0", "hallucination"},
            {"q10", "mixed", "q10 n2", "factual", "q10 n0", "hallucination"},
            {"q11", "mixed", "q11 n0", "factual", "q11 u0", "uncertainty"},
            {"q11", "mixed", "q11 u0", "uncertainty", "q11 n1", "hallucination"},
            {"q11", "mixed", "q11 n0", "factual", "q11 n1", "hallucination"},
        };
    }

    static std::map<std::string, dreamcatcher::Category> expected_categories() {
        using dreamcatcher::Category;
        return {
            {"q0", Category::Known},   {"q1", Category::Known},   {"q2", Category::Known},   {"q3", Category::Known},
            {"q4", Category::Unknown}, {"q5", Category::Unknown}, {"q6", Category::Unknown}, {"q7", Category::Unknown},
            {"q8", Category::Mixed},   {"q9", Category::Mixed},   {"q10", Category::Mixed},  {"q11", Category::Mixed}};
    }
};

}  // namespace fixtures
