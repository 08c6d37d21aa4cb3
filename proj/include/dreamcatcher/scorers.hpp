// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dreamcatcher/corpus.hpp"
#include "dreamcatcher/embedder.hpp"

namespace dreamcatcher {

/// The four factuality scorers.
///  SelfConsistency (s2g): mean cosine to the other k-1 sampled answers.
///  Probe (p):             probe read-out on the question activation.
///  Overlap (o2a):         multiset token overlap with the gold answer.
///  AnswerSim (s2a):       cosine between generation and gold answer embeddings.
enum class Scorer : std::uint8_t { SelfConsistency = 0, Probe = 1, Overlap = 2, AnswerSim = 3 };
inline constexpr std::size_t kNumScorers = 4;
inline constexpr Scorer kAllScorers[] = {Scorer::SelfConsistency, Scorer::Probe, Scorer::Overlap,
                                         Scorer::AnswerSim};

std::string_view to_string(Scorer s) noexcept;
Scorer parse_scorer(std::string_view name);

class ScorerSet {
public:
    constexpr ScorerSet() = default;
    constexpr ScorerSet(std::initializer_list<Scorer> list) {
        for (Scorer s : list) insert(s);
    }
    constexpr void insert(Scorer s) { bits_ |= 1u << static_cast<unsigned>(s); }
    constexpr bool contains(Scorer s) const { return bits_ & (1u << static_cast<unsigned>(s)); }
    constexpr bool empty() const { return bits_ == 0; }
    std::vector<std::string> names() const;
    static ScorerSet parse(std::span<const std::string> names);
    constexpr bool operator==(const ScorerSet&) const = default;

private:
    unsigned bits_ = 0;
};

/// Raw (un-normalized) scores for one generation; absent scorers are nullopt.
struct RawScores {
    GenerationKey key;
    std::array<std::optional<double>, kNumScorers> values{};

    std::optional<double>& operator[](Scorer s) { return values[static_cast<std::size_t>(s)]; }
    const std::optional<double>& operator[](Scorer s) const {
        return values[static_cast<std::size_t>(s)];
    }
};

struct ScoreCard {
    GenerationKey key;
    RawScores raw;
    std::array<std::optional<double>, kNumScorers> normalized{};
    double total = 0.0;

    const std::optional<double>& norm(Scorer s) const { return normalized[static_cast<std::size_t>(s)]; }
};

/// Min-max ranges fitted per scorer over a dataset.
struct NormalizationSpec {
    struct Range {
        double min = 0.0;
        double max = 0.0;
    };
    std::array<std::optional<Range>, kNumScorers> ranges{};

    /// (x - min) / (max - min); 0.5 for a constant scorer (max == min).
    double apply(Scorer s, double x) const;
};

// --- tokenization ---------------------------------------------------------

/// Case-folded tokens. "zh" text yields one token per non-space,
/// non-punctuation code point; other languages split on whitespace and
/// punctuation.
std::vector<std::string> tokenize(std::string_view text, std::string_view language);

// --- scorers --------------------------------------------------------------

/// Per-generation self-consistency: score_i = mean_{j != i} cos(e_i, e_j).
std::vector<double> score_self_consistency(std::span<const Embedding> embeddings);

/// |tokens(G) ∩ tokens(A)| / |tokens(A)| with multiset intersection.
double score_overlap(std::string_view generation, std::string_view answer,
                     std::string_view language);

double score_answer_sim(const Embedding& generation, const Embedding& answer);

NormalizationSpec fit_normalizer(std::span<const RawScores> scores);

/// total = sum of normalized enabled scores. Throws ValidationError naming the
/// generation when an enabled scorer has no raw value.
std::vector<ScoreCard> aggregate_scorecards(std::span<const RawScores> scores,
                                            const NormalizationSpec& spec, ScorerSet enabled);

/// Computes every available raw score for the Normal generations of `groups`:
/// s2g always, o2a/s2a when the question has an answer, p when `probe_scores`
/// holds a value for the question (broadcast to its generations). Output is
/// in group order, then generation index.
std::vector<RawScores> score_corpus(std::span<const QuestionGroup> groups, Embedder& embedder,
                                    const std::map<std::string, double>* probe_scores = nullptr,
                                    unsigned jobs = 1);

}  // namespace dreamcatcher
