// SPDX-License-Identifier: Apache-2.0
#include "dreamcatcher/scorers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_map>

#include "dreamcatcher/error.hpp"
#include "dreamcatcher/parallel.hpp"
#include "utf8.hpp"

namespace dreamcatcher {

std::string_view to_string(Scorer s) noexcept {
    switch (s) {
        case Scorer::SelfConsistency: return "s2g";
        case Scorer::Probe: return "p";
        case Scorer::Overlap: return "o2a";
        case Scorer::AnswerSim: return "s2a";
    }
    return "?";
}

Scorer parse_scorer(std::string_view name) {
    for (Scorer s : kAllScorers)
        if (to_string(s) == name) return s;
    throw ConfigError("unknown scorer '" + std::string(name) + "' (expected s2g, p, o2a, s2a)");
}

std::vector<std::string> ScorerSet::names() const {
    std::vector<std::string> out;
    for (Scorer s : kAllScorers)
        if (contains(s)) out.emplace_back(to_string(s));
    return out;
}

ScorerSet ScorerSet::parse(std::span<const std::string> names) {
    ScorerSet set;
    for (const auto& n : names) set.insert(parse_scorer(n));
    return set;
}

double NormalizationSpec::apply(Scorer s, double x) const {
    const auto& r = ranges[static_cast<std::size_t>(s)];
    if (!r) throw ValidationError("no normalization range fitted for scorer " + std::string(to_string(s)));
    if (r->max == r->min) return 0.5;
    return (x - r->min) / (r->max - r->min);
}

std::vector<std::string> tokenize(std::string_view text, std::string_view language) {
    std::vector<std::string> tokens;
    const bool per_char = language == "zh";
    std::string current;
    for (const auto& u : utf8::decode(text)) {
        if (utf8::is_space(u.cp) || utf8::is_punct(u.cp)) {
            if (!current.empty()) tokens.push_back(std::move(current));
            current.clear();
            continue;
        }
        utf8::append(current, utf8::fold(u.cp));
        if (per_char) {
            tokens.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    return tokens;
}

std::vector<double> score_self_consistency(std::span<const Embedding> embeddings) {
    const std::size_t k = embeddings.size();
    if (k < 2) throw ValidationError("self-consistency needs k >= 2 generations");
    std::vector<double> sum(k, 0.0);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = i + 1; j < k; ++j) {
            const double c = cosine(embeddings[i], embeddings[j]);
            sum[i] += c;
            sum[j] += c;
        }
    for (auto& s : sum) s /= static_cast<double>(k - 1);
    return sum;
}

double score_overlap(std::string_view generation, std::string_view answer, std::string_view language) {
    if (answer.empty()) throw ValidationError("overlap score needs a non-empty answer");
    const auto answer_tokens = tokenize(answer, language);
    if (answer_tokens.empty()) throw ValidationError("answer has no tokens: '" + std::string(answer) + "'");
    std::unordered_map<std::string, int> available;
    for (auto& t : tokenize(generation, language)) ++available[std::move(t)];
    std::size_t matched = 0;
    for (const auto& t : answer_tokens) {
        auto it = available.find(t);
        if (it != available.end() && it->second > 0) {
            --it->second;
            ++matched;
        }
    }
    return static_cast<double>(matched) / static_cast<double>(answer_tokens.size());
}

double score_answer_sim(const Embedding& generation, const Embedding& answer) {
    return cosine(generation, answer);
}

NormalizationSpec fit_normalizer(std::span<const RawScores> scores) {
    NormalizationSpec spec;
    for (const auto& row : scores)
        for (std::size_t s = 0; s < kNumScorers; ++s) {
            if (!row.values[s]) continue;
            const double x = *row.values[s];
            auto& r = spec.ranges[s];
            if (!r) r = NormalizationSpec::Range{x, x};
            r->min = std::min(r->min, x);
            r->max = std::max(r->max, x);
        }
    return spec;
}

std::vector<ScoreCard> aggregate_scorecards(std::span<const RawScores> scores,
                                            const NormalizationSpec& spec, ScorerSet enabled) {
    if (enabled.empty()) throw ConfigError("no scorers enabled");
    std::vector<ScoreCard> cards;
    cards.reserve(scores.size());
    for (const auto& row : scores) {
        ScoreCard card;
        card.key = row.key;
        card.raw = row;
        for (Scorer s : kAllScorers) {
            const auto& raw = row[s];
            if (raw) card.normalized[static_cast<std::size_t>(s)] = spec.apply(s, *raw);
            if (!enabled.contains(s)) continue;
            if (!raw)
                throw ValidationError("scorer " + std::string(to_string(s)) +
                                      " enabled but missing for generation (" + row.key.question_id +
                                      ", " + std::string(to_string(row.key.mode)) + ", " +
                                      std::to_string(row.key.index) + ")");
            card.total += *card.normalized[static_cast<std::size_t>(s)];
        }
        cards.push_back(std::move(card));
    }
    return cards;
}

std::vector<RawScores> score_corpus(std::span<const QuestionGroup> groups, Embedder& embedder,
                                    const std::map<std::string, double>* probe_scores,
                                    unsigned jobs) {
    // collect every text once, embed in one pass, then score per question
    std::vector<std::string> texts;
    std::vector<std::size_t> first_text(groups.size());
    for (std::size_t g = 0; g < groups.size(); ++g) {
        first_text[g] = texts.size();
        for (const auto* gen : groups[g].normal) texts.push_back(gen->text);
        if (groups[g].question->answer) texts.push_back(*groups[g].question->answer);
    }
    if (texts.empty()) return {};
    const auto embeddings = embedder.embed(texts);

    std::vector<std::vector<RawScores>> per_group(groups.size());
    parallel_for(groups.size(), jobs, [&](std::size_t g) {
        const auto& grp = groups[g];
        const auto& q = *grp.question;
        const std::size_t k = grp.normal.size();
        std::span<const Embedding> gen_emb(embeddings.data() + first_text[g], k);
        const auto s2g = score_self_consistency(gen_emb);
        std::optional<double> p;
        if (probe_scores) {
            if (auto it = probe_scores->find(q.id); it != probe_scores->end()) p = it->second;
        }
        auto& out = per_group[g];
        out.resize(k);
        for (std::size_t i = 0; i < k; ++i) {
            auto& row = out[i];
            row.key = key_of(*grp.normal[i]);
            row[Scorer::SelfConsistency] = s2g[i];
            row[Scorer::Probe] = p;
            if (q.answer) {
                row[Scorer::Overlap] = score_overlap(grp.normal[i]->text, *q.answer, q.language);
                row[Scorer::AnswerSim] = score_answer_sim(gen_emb[i], embeddings[first_text[g] + k]);
            }
        }
    });
    std::vector<RawScores> all;
    for (auto& v : per_group)
        for (auto& r : v) all.push_back(std::move(r));
    return all;
}

}  // namespace dreamcatcher
