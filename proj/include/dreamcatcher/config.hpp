// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include <json.hpp>

#include "dreamcatcher/embedder.hpp"
#include "dreamcatcher/labeling.hpp"
#include "dreamcatcher/probes.hpp"
#include "dreamcatcher/reward.hpp"
#include "dreamcatcher/rlkf.hpp"
#include "dreamcatcher/scorers.hpp"

namespace dreamcatcher {

/// Corpus files live under `corpus` with fixed names; activations may live
/// elsewhere.
struct PathsConfig {
    std::filesystem::path corpus = ".";
    std::filesystem::path activations;  // empty = corpus
    std::filesystem::path cache;        // empty disables the embedding cache
    std::filesystem::path output = "out";

    std::filesystem::path questions() const { return corpus / "questions.jsonl"; }
    std::filesystem::path generations() const { return corpus / "generations.jsonl"; }
    std::filesystem::path gold() const { return corpus / "gold.jsonl"; }
    std::filesystem::path general_pairs() const { return corpus / "general_pairs.jsonl"; }
    std::filesystem::path manifest() const { return (activations.empty() ? corpus : activations) / "activations.manifest.json"; }
    std::filesystem::path activation_bin() const { return (activations.empty() ? corpus : activations) / "activations.bin"; }
};

struct ProbeSettings {
    ProbeHyper hyper;
    int repetitions = 5;
    int cross_fit_folds = 2;
    std::optional<CellKey> cell;  // unset = best grid cell
};

struct RewardSettings {
    RewardHyper hyper;
    double general_ratio = 1.0;
    double test_fraction = 0.2;
};

struct PpoSettings {
    PpoConfig config;
    ToyEnvConfig env;
    TrainOptions train;
    std::size_t eval_episodes = 1000;
};

struct PipelineConfig {
    PathsConfig paths;
    EmbedderConfig embedder;
    int k = 5;
    PrelabelConfig prelabel;
    ScorerSet scorers{Scorer::SelfConsistency, Scorer::Probe, Scorer::Overlap, Scorer::AnswerSim};
    PairOptions pairs;
    ProbeSettings probe;
    RewardSettings reward;
    PpoSettings ppo;
    std::uint64_t seed = 0;

    /// Fans `seed` out to every stage (derive_seed with the stage name).
    void set_seed(std::uint64_t s);
    void validate() const;
};

/// Parses a config object. Absent keys keep their defaults, unknown keys and
/// type mismatches raise ConfigError naming the dotted key. Relative paths
/// are resolved against `base_dir`.
PipelineConfig parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
PipelineConfig load_config(const std::filesystem::path& path);

/// Full config as JSON (paths as given, not resolved).
nlohmann::json config_to_json(const PipelineConfig& config);

}  // namespace dreamcatcher
