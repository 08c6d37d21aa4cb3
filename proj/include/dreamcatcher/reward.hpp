// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dreamcatcher/embedder.hpp"
#include "dreamcatcher/labeling.hpp"

namespace dreamcatcher {

/// Text-level preference example. `category` is "known", "unknown", "mixed"
/// or "general" for non-factual filler data.
struct RewardPair {
    std::string question;
    std::string chosen;
    std::string rejected;
    std::string category;
};

/// Resolves question texts by id. Throws NotFoundError for unknown ids.
std::vector<RewardPair> to_reward_pairs(std::span<const PreferencePair> pairs,
                                        std::span<const Question> questions);

/// general_pairs.jsonl: {"question", "chosen", "rejected"} per line.
std::vector<RewardPair> load_general_pairs(const std::filesystem::path& path);
void write_general_pairs(const std::filesystem::path& path, std::span<const RewardPair> pairs);

/// Appends exactly round(ratio * factual.size()) general pairs, drawn without
/// replacement in a seed-determined order. Throws ValidationError when the
/// pool is too small.
std::vector<RewardPair> mix_general_pairs(std::span<const RewardPair> factual,
                                          std::span<const RewardPair> general, double ratio,
                                          std::uint64_t seed);

struct PairFeatures {
    std::vector<double> chosen;
    std::vector<double> rejected;
    std::string category;
};

using PairBatch = std::vector<PairFeatures>;

/// [embed(question) ; embed(response)] for both sides of every pair.
std::vector<double> response_features(const Embedding& question, const Embedding& response);
PairBatch build_pair_features(std::span<const RewardPair> pairs, Embedder& embedder);

struct RewardModel {
    std::vector<double> weights;
    double bias = 0.0;
    std::string embedder_id;
    std::size_t embed_dim = 0;
    double lambda_reg = 0.01;

    double score(std::span<const double> features) const;
    /// Embeds question and response with `embedder` and scores them.
    double score(Embedder& embedder, const std::string& question, const std::string& response) const;
};

/// Zero weights sized for `embed_dim`-dimensional embeddings.
RewardModel make_reward_model(std::size_t embed_dim, std::string embedder_id, double lambda_reg);

struct RmLossAndGrad {
    double loss = 0.0;
    std::vector<double> grad_w;
    double grad_b = 0.0;
};

/// mean over pairs of [-log sigmoid(r_c - r_r) + lambda (r_c^2 + r_r^2)] and
/// its exact gradient. Throws on an empty batch.
RmLossAndGrad rm_loss_and_grad(const RewardModel& model, std::span<const PairFeatures> batch,
                               unsigned jobs = 1);

/// -log sigmoid(delta) + lambda (r_c^2 + r_r^2) for one pair of scalar rewards.
double pairwise_loss(double r_chosen, double r_rejected, double lambda);

struct RewardHyper {
    double lr = 1e-2;
    double warmup_fraction = 0.01;
    int epochs = 1;
    std::size_t batch_size = 16;  // 0 = full batch
    double lambda = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-5;
    std::uint64_t seed = 0;
};

/// Learning rate at optimizer step `step` of `total`: linear warmup over
/// ceil(warmup_fraction * total) steps, then linear decay towards zero.
double rm_learning_rate(const RewardHyper& hyper, std::size_t step, std::size_t total);

struct RmTrainReport {
    std::vector<double> step_loss;  // mini-batch loss before each update
    double initial_loss = 0.0;      // full-data loss before training
    double final_loss = 0.0;        // full-data loss after training
    double train_accuracy = 0.0;
    std::size_t steps = 0;
};

struct RmTrainResult {
    RewardModel model;
    RmTrainReport report;
};

/// Adam from `init` with per-epoch shuffling. Throws DivergenceError on a
/// non-finite loss.
RmTrainResult train_reward_model(const PairBatch& batch, const RewardHyper& hyper, RewardModel init);

struct CategoryAccuracy {
    std::size_t pairs = 0;
    std::size_t correct = 0;
    double accuracy = 0.0;
};

struct RmEvalReport {
    std::map<std::string, CategoryAccuracy> by_category;  // categories without pairs are absent
    CategoryAccuracy overall;
};

/// A pair counts as correct only when r_chosen > r_rejected strictly.
RmEvalReport eval_reward_model(const RewardModel& model, std::span<const PairFeatures> pairs);

/// Fraction of i with chosen[i] > rejected[i].
double pairwise_accuracy(std::span<const double> chosen, std::span<const double> rejected);

void write_reward_model(const std::filesystem::path& path, const RewardModel& model);
RewardModel load_reward_model(const std::filesystem::path& path);
void write_rm_eval(const std::filesystem::path& path, const RmEvalReport& report);

}  // namespace dreamcatcher
