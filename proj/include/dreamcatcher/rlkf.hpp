// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dreamcatcher/embedder.hpp"
#include "dreamcatcher/labeling.hpp"
#include "dreamcatcher/reward.hpp"

namespace dreamcatcher {

// --- environment ----------------------------------------------------------

using TokenSeq = std::vector<int>;

struct ToyQuestion {
    std::string id;
    std::string text;
    Category category = Category::Known;
    TokenSeq factual;
    TokenSeq hallucination;
    TokenSeq uncertainty;

    const TokenSeq& preferred() const { return category == Category::Unknown ? uncertainty : factual; }
};

/// Initial "generative model" logits. Template tokens get the listed logits
/// (first token / continuation along the template); every other token gets
/// `other_logit`, except fact-pool tokens on Unknown questions, which get
/// `unknown_fact_logit` because the model has no knowledge to draw them from.
struct ToyPrior {
    double known_factual_first = 5.0;
    double known_halluc_first = 3.5;
    double known_uncertain_first = 1.0;
    double unknown_halluc_first = 5.0;
    double unknown_uncertain_first = 3.0;
    double mixed_factual_first = 4.0;
    double mixed_halluc_first = 4.0;
    double mixed_uncertain_first = 1.0;
    double factual_second = 6.0;
    double factual_continue = 6.0;
    double halluc_continue = 6.0;
    double uncertain_second = 4.0;    // second uncertainty token after the first
    double uncertain_continue = 2.0;  // later uncertainty tokens
    double other_logit = -2.0;
    double unknown_fact_logit = -4.0;
};

struct ToyEnvConfig {
    int known = 8;
    int unknown = 8;
    int mixed = 4;
    int length = 4;
    int fact_pool = 28;
    int halluc_pool = 28;
    std::vector<std::string> uncertainty_words{"i", "do", "not", "know"};
    ToyPrior prior;
    std::uint64_t seed = 0;

    void validate() const;
};

enum class TokenPool { Fact, Hallucination, Uncertainty };

/// Questions in Known, Unknown, Mixed order. Vocabulary = fact-pool words,
/// hallucination-pool words and the uncertainty words (at most 64 tokens).
/// Factual templates draw from the fact pool, hallucination templates from
/// the hallucination pool; all questions share one uncertainty template.
struct ToyEnv {
    std::vector<std::string> vocab;
    std::vector<TokenPool> pool;  // per token
    std::vector<ToyQuestion> questions;
    int length = 4;
    ToyPrior prior;

    int vocab_size() const { return static_cast<int>(vocab.size()); }
    std::string detokenize(std::span<const int> tokens) const;
    /// Role by exact match against the question's own templates.
    std::optional<Role> classify(std::size_t question, std::span<const int> tokens) const;
    /// Preference pairs implied by each question's category, in question order.
    std::vector<RewardPair> preference_pairs() const;
};

ToyEnv make_toy_env(const ToyEnvConfig& config);

// --- policy ---------------------------------------------------------------

/// Tabular autoregressive policy: one logit row per (bucket, position,
/// previous token). Position 0 conditions on a begin marker only. Bucket =
/// question index.
class Policy {
public:
    Policy() = default;
    Policy(int buckets, int length, int vocab);

    /// Logits of the initial generative model described by env.prior.
    static Policy from_prior(const ToyEnv& env);
    static Policy uniform(const ToyEnv& env);

    int buckets() const noexcept { return buckets_; }
    int length() const noexcept { return length_; }
    int vocab() const noexcept { return vocab_; }
    std::size_t rows() const noexcept { return static_cast<std::size_t>(buckets_) * rows_per_bucket(); }

    /// prev = -1 at position 0.
    std::size_t row_index(int bucket, int position, int prev) const;
    std::span<double> logits(std::size_t row) { return {table_.data() + row * vocab_, static_cast<std::size_t>(vocab_)}; }
    std::span<const double> logits(std::size_t row) const {
        return {table_.data() + row * vocab_, static_cast<std::size_t>(vocab_)};
    }
    std::vector<double> probs(std::size_t row) const;
    /// Probability of emitting exactly `tokens` from `bucket`.
    double sequence_prob(int bucket, std::span<const int> tokens) const;

    const std::vector<double>& table() const noexcept { return table_; }
    std::vector<double>& table() noexcept { return table_; }
    bool operator==(const Policy&) const = default;

private:
    std::size_t rows_per_bucket() const noexcept { return 1 + static_cast<std::size_t>(length_ - 1) * vocab_; }

    int buckets_ = 0;
    int length_ = 0;
    int vocab_ = 0;
    std::vector<double> table_;
};

/// Numerically stable softmax.
std::vector<double> softmax(std::span<const double> logits);

void write_policy(const std::filesystem::path& path, const Policy& policy, const ToyEnv& env);
Policy load_policy(const std::filesystem::path& path);

// --- reward ---------------------------------------------------------------

/// Terminal reward for (question index, tokens).
using RewardFn = std::function<double(std::size_t, std::span<const int>)>;

/// Reward-model score of the detokenized response, memoized per text.
/// Thread-safe.
class EnvReward {
public:
    EnvReward(const ToyEnv& env, RewardModel model, Embedder& embedder);
    double operator()(std::size_t question, std::span<const int> tokens);
    const RewardModel& model() const noexcept { return model_; }
    /// Standard deviation of the rewards of every template of every question.
    double template_reward_std();

private:
    const ToyEnv& env_;
    RewardModel model_;
    Embedder& embedder_;
    std::mutex mu_;
    std::unordered_map<std::string, double> cache_;
};

/// Defaults for the env reward model: full batch, lr 5e-2, 300 epochs.
RewardHyper env_reward_hyper(std::uint64_t seed = 0);

/// Trains a reward model on the env's own preference pairs.
RmTrainResult train_env_reward_model(const ToyEnv& env, Embedder& embedder, const RewardHyper& hyper);

// --- rollouts and PPO -----------------------------------------------------

struct Trajectory {
    std::size_t question = 0;
    TokenSeq tokens;
    std::vector<double> logprob;     // behavior policy, per token
    std::vector<bool> guided_mask;   // forced prefix tokens
    double reward = 0.0;
    bool guided = false;

    bool trainable() const;
};

struct PpoConfig {
    double clip = 0.2;
    int epochs = 4;
    double lr = 3e-2;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-5;
    double kl_coeff = 0.0;
    double entropy_coeff = 0.01;
    double baseline_decay = 0.9;
    bool baseline_split_guided = true;
    double guidance_fraction = 0.5;
    int guidance_length = 2;
    int batch_size = 20;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Episodes [first, first + count): episode e uses question e mod n and an RNG
/// stream derived from (seed, e). It is guided when guidance is on and its
/// stream's first draw is below guidance_fraction.
std::vector<Trajectory> rollout(const Policy& policy, const ToyEnv& env, const RewardFn& reward,
                                std::uint64_t first, std::size_t count, bool guidance,
                                const PpoConfig& config, unsigned jobs = 1);

/// min(rho * adv, clip(rho, 1 - eps, 1 + eps) * adv).
double clipped_surrogate(double ratio, double advantage, double eps);

/// Bias-corrected exponential moving average of rewards per question. With
/// `split_guided`, guided and unguided episodes keep separate averages.
class Baseline {
public:
    explicit Baseline(double decay = 0.9, bool split_guided = false) : decay_(decay), split_(split_guided) {}
    /// nullopt until the (question, guided) slot has been observed.
    std::optional<double> value(std::size_t question, bool guided) const;
    void observe(std::span<const Trajectory> batch);

private:
    struct Slot {
        double m = 0.0;
        int updates = 0;
    };
    double decay_;
    bool split_;
    std::map<std::pair<std::size_t, bool>, Slot> slots_;
};

/// Sparse Adam state for the policy table; rows are updated lazily.
struct PolicyOptimizer {
    std::vector<double> m, v;
    std::vector<int> steps;  // per row
    void ensure(const Policy& policy);
};

struct PpoStats {
    double surrogate = 0.0;   // mean clipped surrogate at the start of the update
    double entropy = 0.0;     // mean entropy at trainable positions
    double clip_fraction = 0.0;
    std::size_t tokens = 0;
    bool skipped = false;
};

/// Mean clipped surrogate over non-guided positions for the given advantages.
double surrogate_objective(const Policy& policy, std::span<const Trajectory> batch,
                           std::span<const double> advantages, double clip);

/// `config.epochs` Adam steps on the clipped surrogate plus entropy bonus
/// (minus kl_coeff * KL(behavior || current) when nonzero). Only positions
/// with guided_mask false contribute. Advantages are R - b per trajectory,
/// constant across its tokens; trajectories without a baseline get 0.
PpoStats ppo_update(Policy& policy, PolicyOptimizer& optimizer, std::span<const Trajectory> batch,
                    std::span<const double> advantages, const PpoConfig& config, double lr);

// --- training loop --------------------------------------------------------

struct RoleRates {
    double factual = 0.0;
    double uncertainty = 0.0;
    double hallucination = 0.0;
    double other = 0.0;
};

struct CurvePoint {
    std::size_t step = 0;
    std::size_t episodes = 0;
    double mean_reward = 0.0;
    double factual_rate_known = 0.0;       // mean exact template probability
    double uncertainty_rate_unknown = 0.0;
    double entropy = 0.0;
};

struct RlkfResult {
    Policy policy;
    std::vector<CurvePoint> curve;
    /// First step at which the Known factual rate reaches the threshold.
    std::optional<std::size_t> steps_to_threshold;
    /// Same for the Unknown uncertainty rate.
    std::optional<std::size_t> steps_to_uncertainty_threshold;
    double reward_scale = 1.0;
};

struct TrainOptions {
    std::size_t episodes = 5000;
    bool guidance = true;
    double threshold = 0.8;
    bool uniform_init = false;
    unsigned jobs = 1;
};

/// Exact P(template | question) averaged per category.
std::map<Category, RoleRates> exact_role_rates(const Policy& policy, const ToyEnv& env);

RlkfResult train_rlkf(const ToyEnv& env, EnvReward& reward, const PpoConfig& config,
                      const TrainOptions& options);

enum class DecodeMode { Greedy, Sample };

struct PolicyEval {
    std::map<Category, RoleRates> rates;
    double mean_reward = 0.0;
    std::size_t episodes = 0;
};

/// Role frequencies of `episodes` decoded responses (question = episode mod
/// n). Greedy breaks ties towards the lowest token id.
PolicyEval evaluate_policy(const Policy& policy, const ToyEnv& env, const RewardFn& reward,
                           std::size_t episodes, std::uint64_t seed, DecodeMode mode = DecodeMode::Greedy);

void write_learning_curve(const std::filesystem::path& path, std::span<const CurvePoint> curve);

}  // namespace dreamcatcher
