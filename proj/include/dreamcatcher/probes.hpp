// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dreamcatcher/corpus.hpp"
#include "dreamcatcher/scorers.hpp"

namespace dreamcatcher {

// --- pre-labeling ---------------------------------------------------------

struct PrelabelConfig {
    double upper_percentile = 65.0;
    double lower_percentile = 35.0;
    ScorerSet enabled{Scorer::SelfConsistency, Scorer::Overlap, Scorer::AnswerSim};
    int k = 5;

    void validate() const;
};

enum class Prelabel { Correct, Incorrect, Unlabeled };

/// Nearest-rank percentile: the ceil(p/100 * n)-th smallest value (1-based,
/// clamped to [1, n]). Throws on empty input.
double nearest_rank_percentile(std::span<const double> values, double p);

struct PrelabelResult {
    double upper_threshold = 0.0;
    double lower_threshold = 0.0;
    std::vector<Prelabel> verdicts;  // aligned with the input cards
};

/// total > upper threshold -> Correct, total < lower threshold -> Incorrect,
/// otherwise Unlabeled. Thresholds are nearest-rank percentiles of all totals.
PrelabelResult prelabel_generations(std::span<const ScoreCard> cards, const PrelabelConfig& config);

// --- probe datasets -------------------------------------------------------

enum class Knowledge { Known, Unknown };

std::string_view to_string(Knowledge k) noexcept;

/// Questions whose k Normal generations are all Correct (Known) or all
/// Incorrect (Unknown), in first-appearance order. Any Unlabeled or mixed
/// verdict excludes the question.
std::vector<std::pair<std::string, Knowledge>> label_questions(std::span<const ScoreCard> cards,
                                                               std::span<const Prelabel> verdicts,
                                                               int k);

struct ProbeRow {
    std::string question_id;
    std::vector<float> features;
    Knowledge label = Knowledge::Unknown;
};

/// Rows for one (site, layer). Throws NotFoundError naming the question when
/// an activation is missing.
std::vector<ProbeRow> build_probe_dataset(std::span<const std::pair<std::string, Knowledge>> labels,
                                          const ActivationStore& store, Site site, int layer);

std::vector<ProbeRow> build_probe_dataset(std::span<const ScoreCard> cards,
                                          std::span<const Prelabel> verdicts,
                                          const ActivationStore& store, Site site, int layer, int k);

// --- logistic regression probe --------------------------------------------

struct ProbeHyper {
    double lr = 0.1;
    int epochs = 200;
    double l2 = 1e-4;
    double val_fraction = 0.2;
    std::uint64_t seed = 0;
};

/// Row-major dense matrix of standardized features.
struct DenseMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
};

struct LossAndGrad {
    double loss = 0.0;
    std::vector<double> grad_w;
    double grad_b = 0.0;
};

/// mean BCE(sigmoid(Xw + b), y) + l2 * ||w||^2 / 2, with exact gradient.
/// `labels` holds 1 for Known and 0 for Unknown.
LossAndGrad probe_loss_and_grad(std::span<const double> weights, double bias, const DenseMatrix& x,
                                std::span<const int> labels, double l2);

struct ProbeModel {
    Site site = Site::HiddenState;
    int layer = 0;
    std::vector<double> weights;
    double bias = 0.0;
    std::vector<double> mean;
    std::vector<double> std;
    std::uint64_t seed = 0;
    double val_accuracy = 0.0;

    /// (x - mean) / std, element-wise.
    std::vector<double> standardize(std::span<const float> x) const;
    /// sigmoid(w . standardize(x) + b); probability of Known.
    double predict(std::span<const float> x) const;
};

struct ProbeEpoch {
    double loss = 0.0;  // training objective after the epoch's update
    double train_accuracy = 0.0;
    double val_accuracy = 0.0;
};

struct ProbeTrainReport {
    double initial_loss = 0.0;
    std::vector<ProbeEpoch> epochs;
    std::size_t train_size = 0;
    std::size_t val_size = 0;
    double val_accuracy = 0.0;  // train accuracy when the validation split is empty
};

struct ProbeTrainResult {
    ProbeModel model;
    ProbeTrainReport report;
};

/// Whether a question lands in the validation split for a given split seed.
bool in_validation_split(std::string_view question_id, double val_fraction, std::uint64_t split_seed);

/// Full-batch gradient descent from zero weights. Features are standardized
/// with train-split statistics (std floored at 1e-6). Requires >= 2 training
/// rows of each class.
ProbeTrainResult train_probe(std::span<const ProbeRow> rows, const ProbeHyper& hyper,
                             Site site = Site::HiddenState, int layer = 0);

/// Probability-of-Known read-out. Throws on dimension mismatch.
double probe_score(const ProbeModel& model, std::span<const float> activation);

// --- grid evaluation ------------------------------------------------------

struct CellKey {
    Site site = Site::HiddenState;
    int layer = 0;
    auto operator<=>(const CellKey&) const = default;
};

struct GridCell {
    CellKey cell;
    double mean_acc = 0.0;
    double min_acc = 0.0;
    double max_acc = 0.0;
    std::vector<double> accuracies;  // one per repetition
};

struct GridResult {
    std::vector<GridCell> cells;  // sorted by (site, layer)

    /// argmax mean accuracy; ties go to the lower layer, then site order.
    const GridCell& best() const;
    const GridCell& at(CellKey key) const;
};

/// Trains one probe per cell and repetition. Repetition r uses split/training
/// seed derive_seed(hyper.seed, r) for every cell, so all cells of a
/// repetition share one question split.
GridResult eval_probe_grid(const std::map<CellKey, std::vector<ProbeRow>>& rows, const ProbeHyper& hyper,
                           int repetitions, unsigned jobs = 1);

// --- cross-fitted read-out -----------------------------------------------

/// Fold of a question: floor(hash_unit(id, seed) * folds).
int cross_fit_fold(std::string_view question_id, int folds, std::uint64_t seed);

/// Probe scores for `questions` at one cell where each question is scored by
/// a probe trained only on labeled questions from the other folds. Questions
/// without an activation at the cell get no score.
std::map<std::string, double> cross_fit_probe_scores(
    std::span<const std::pair<std::string, Knowledge>> labels, std::span<const std::string> questions,
    const ActivationStore& store, CellKey cell, const ProbeHyper& hyper, int folds = 2);

// --- persistence ----------------------------------------------------------

void write_probe_model(const std::filesystem::path& path, const ProbeModel& model);
ProbeModel load_probe_model(const std::filesystem::path& path);
void write_grid_csv(const std::filesystem::path& path, const GridResult& grid);

}  // namespace dreamcatcher
