// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dreamcatcher/corpus.hpp"
#include "dreamcatcher/embedder.hpp"
#include "dreamcatcher/scorers.hpp"

namespace dreamcatcher {

enum class Category { Known, Unknown, Mixed };
enum class Role { Factual, Uncertainty, Hallucination };

std::string_view to_string(Category c) noexcept;
std::string_view to_string(Role r) noexcept;
Category parse_category(std::string_view s);
Role parse_role(std::string_view s);

/// Lower is better: Factual (0) > Uncertainty (1) > Hallucination (2).
constexpr int role_rank(Role r) noexcept { return static_cast<int>(r); }

// --- median split ---------------------------------------------------------

struct MedianSplit {
    double median = 0.0;
    std::vector<Verdict> verdicts;  // aligned with input
};

/// total >= median -> Correct, else Incorrect. For even n the median is the
/// mean of the two middle order statistics.
MedianSplit classify_generations(std::span<const ScoreCard> cards);

/// All Correct -> Known, all Incorrect -> Unknown, otherwise Mixed.
/// Throws when verdicts.size() != k.
Category categorize_question(std::span<const Verdict> verdicts, int k);

// --- preference pairs -----------------------------------------------------

struct PairSide {
    std::string text;
    Role role = Role::Factual;
    GenerationKey source;
};

struct PreferencePair {
    std::string question_id;
    Category category = Category::Known;
    PairSide chosen;
    PairSide rejected;
};

struct PairOptions {
    /// Mixed questions emit F>U, U>H and F>H; when false only the adjacent two.
    bool mixed_transitive_closure = true;
};

struct SkipRecord {
    std::string question_id;
    std::string reason;
};

struct Emission {
    std::vector<PreferencePair> pairs;
    std::vector<SkipRecord> warnings;
};

/// Pairs for one question. `cards` are the question's Normal-generation score
/// cards. Factual = argmax total, Hallucination = argmin total (ties to the
/// lowest index); Uncertainty = the lowest-index uncertainty-mode response.
/// Questions without an uncertainty response are skipped with a warning.
Emission emit_preference_pairs(const QuestionGroup& group, Category category,
                               std::span<const ScoreCard> cards, const PairOptions& options = {});

// --- agreement ------------------------------------------------------------

struct Confusion {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
    std::size_t total() const noexcept { return tp + fp + fn + tn; }
};

/// Correct is the positive class. Ratios with a zero denominator are 0.
struct AgreementMetrics {
    Confusion counts;
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;

    static AgreementMetrics from(const Confusion& c);
};

struct AgreementReport {
    AgreementMetrics all;
    std::map<std::string, AgreementMetrics> by_language;
};

/// Compares pipeline verdicts with gold labels on their common generations.
/// Throws ValidationError when they share none.
AgreementReport evaluate_agreement(const std::map<GenerationKey, Verdict>& predicted,
                                   std::span<const GoldLabel> gold, std::span<const Question> questions);

// --- end-to-end -----------------------------------------------------------

struct CategoryStats {
    std::size_t total = 0;
    std::size_t known = 0;
    std::size_t unknown = 0;
    std::size_t mixed = 0;
};

struct LabelingOptions {
    ScorerSet enabled{Scorer::SelfConsistency, Scorer::Probe, Scorer::Overlap, Scorer::AnswerSim};
    PairOptions pairs;
    unsigned jobs = 1;
};

struct LabelingRun {
    std::vector<ScoreCard> cards;  // Normal generations, question order
    NormalizationSpec normalizer;
    MedianSplit split;             // aligned with cards
    std::vector<std::pair<std::string, Category>> categories;  // question order
    std::vector<PreferencePair> pairs;
    std::vector<SkipRecord> warnings;
    CategoryStats stats;

    std::map<GenerationKey, Verdict> verdict_map() const;
};

/// score -> normalize -> median split -> categorize -> emit pairs.
LabelingRun run_labeling(std::span<const QuestionGroup> groups, Embedder& embedder,
                         const std::map<std::string, double>* probe_scores, const LabelingOptions& options);

// --- file formats ---------------------------------------------------------

void write_scores_jsonl(const std::filesystem::path& path, std::span<const ScoreCard> cards);
void write_labels_jsonl(const std::filesystem::path& path, const LabelingRun& run);
void write_pairs_jsonl(const std::filesystem::path& path, std::span<const PreferencePair> pairs);
std::vector<PreferencePair> load_pairs_jsonl(const std::filesystem::path& path);

}  // namespace dreamcatcher
