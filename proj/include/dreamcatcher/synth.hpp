// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dreamcatcher/corpus.hpp"
#include "dreamcatcher/labeling.hpp"
#include "dreamcatcher/probes.hpp"
#include "dreamcatcher/reward.hpp"

namespace dreamcatcher {

/// Synthetic fixture corpus with planted structure. Every question has a
/// latent knowledge state: Known questions answer correctly k times, Unknown
/// ones give a different wrong answer each time, Mixed ones get between 1 and
/// k-1 correct answers. Activations are Gaussian noise plus +/- signal * u
/// (Known / Unknown) at the planted cell, decaying by `layer_decay` per layer
/// of distance on the planted site.
struct SynthConfig {
    int questions = 120;
    double zh_fraction = 0.5;
    double known_fraction = 0.45;
    double unknown_fraction = 0.45;
    int k = 5;
    int num_layers = 8;
    int hidden_size = 32;
    CellKey planted{Site::HiddenState, 5};
    double signal = 2.5;
    double layer_decay = 0.5;
    double gold_fraction = 0.6;  // questions with gold labels for their normal generations
    int general_pairs = 240;     // 0 = no general_pairs.jsonl
    std::uint64_t seed = 0;

    void validate() const;
};

struct SynthCorpus {
    std::vector<Question> questions;
    std::vector<Generation> generations;
    std::vector<GoldLabel> gold;
    std::vector<ActivationRow> activations;  // (question, site, layer) order
    std::vector<RewardPair> general;
    std::vector<std::pair<std::string, Category>> latent;  // question order
};

SynthCorpus make_synth_corpus(const SynthConfig& config);

/// Writes questions.jsonl, generations.jsonl, gold.jsonl, activations.*,
/// general_pairs.jsonl (when present) and a config.json pointing at `dir`.
void write_synth_corpus(const std::filesystem::path& dir, const SynthCorpus& corpus, const SynthConfig& config);

}  // namespace dreamcatcher
