// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dreamcatcher {

enum class GenMode { Normal, Uncertainty };
enum class Site { AttnOutput, MlpOutput, HiddenState };
enum class Verdict { Correct, Incorrect };

std::string_view to_string(GenMode mode) noexcept;
std::string_view to_string(Site site) noexcept;
std::string_view to_string(Verdict verdict) noexcept;
GenMode parse_mode(std::string_view s);
Site parse_site(std::string_view s);
Verdict parse_verdict(std::string_view s);

inline constexpr Site kAllSites[] = {Site::AttnOutput, Site::MlpOutput, Site::HiddenState};

struct Question {
    std::string id;
    std::string text;
    std::string language;  // "zh", "en", or any other tag
    std::optional<std::string> answer;
    std::optional<std::string> qtype;

    bool operator==(const Question&) const = default;
};

struct Generation {
    std::string question_id;
    GenMode mode = GenMode::Normal;
    int index = 0;
    std::string text;

    bool operator==(const Generation&) const = default;
};

/// Identifies one generation: (question_id, mode, index).
struct GenerationKey {
    std::string question_id;
    GenMode mode = GenMode::Normal;
    int index = 0;

    auto operator<=>(const GenerationKey&) const = default;
    bool operator==(const GenerationKey&) const = default;
};

inline GenerationKey key_of(const Generation& g) { return {g.question_id, g.mode, g.index}; }

struct GoldLabel {
    GenerationKey generation;
    Verdict verdict = Verdict::Correct;

    bool operator==(const GoldLabel&) const = default;
};

// ---------------------------------------------------------------------------
// JSONL text data

/// Reads questions.jsonl. Rejects malformed lines (ParseError with line
/// number) and duplicate ids (ValidationError naming the id).
std::vector<Question> load_questions(const std::filesystem::path& path);
void write_questions(const std::filesystem::path& path, std::span<const Question> questions);

/// Parses generations.jsonl without enforcing k. Duplicate
/// (question_id, mode, index) keys are rejected.
std::vector<Generation> read_generations(const std::filesystem::path& path);

/// Reads generations.jsonl and enforces the corpus-level k: every question
/// that appears must have exactly k Normal generations with indices 0..k-1.
std::vector<Generation> load_generations(const std::filesystem::path& path, int k);
void write_generations(const std::filesystem::path& path, std::span<const Generation> generations);

std::vector<GoldLabel> load_gold(const std::filesystem::path& path);
void write_gold(const std::filesystem::path& path, std::span<const GoldLabel> labels);

/// Throws ValidationError when k normal generations per question are not
/// present. Shared by load_generations and callers that build corpora in memory.
void check_k(std::span<const Generation> generations, int k);

// ---------------------------------------------------------------------------
// Activation dumps

struct ActivationEntry {
    std::string question_id;
    Site site = Site::HiddenState;
    int layer = 0;
    std::uint64_t byte_offset = 0;
};

struct ActivationManifest {
    std::string model_name;
    int num_layers = 0;
    int hidden_size = 0;
    std::vector<Site> sites;
    std::string dtype = "f32le";
    std::vector<ActivationEntry> records;
};

ActivationManifest load_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const ActivationManifest& manifest);

/// Read-only, random-access view over activations.bin. The file is memory
/// mapped; lookups return views into the mapping, valid for the store's
/// lifetime. Immutable after construction and safe to share across threads.
class ActivationStore {
public:
    static ActivationStore open(const std::filesystem::path& manifest_path,
                                const std::filesystem::path& bin_path);

    ActivationStore(ActivationStore&&) noexcept;
    ActivationStore& operator=(ActivationStore&&) noexcept;
    ~ActivationStore();

    const ActivationManifest& manifest() const noexcept;
    int hidden_size() const noexcept { return manifest().hidden_size; }
    int num_layers() const noexcept { return manifest().num_layers; }

    bool contains(std::string_view question_id, Site site, int layer) const;
    bool contains_question(std::string_view question_id) const;

    /// Throws NotFoundError for an unknown (question_id, site, layer).
    std::span<const float> lookup(std::string_view question_id, Site site, int layer) const;

    /// Question ids in first-appearance order.
    const std::vector<std::string>& question_ids() const noexcept;

private:
    struct Impl;
    explicit ActivationStore(std::unique_ptr<Impl> impl);
    std::unique_ptr<Impl> impl_;
};

/// One vector to persist; `values.size()` must equal the manifest hidden size.
struct ActivationRow {
    std::string question_id;
    Site site = Site::HiddenState;
    int layer = 0;
    std::vector<float> values;
};

/// Writes manifest + bin in the given row order (offsets assigned densely).
void write_activations(const std::filesystem::path& manifest_path,
                       const std::filesystem::path& bin_path, std::string model_name,
                       int num_layers, int hidden_size, std::vector<Site> sites,
                       std::span<const ActivationRow> rows);

// ---------------------------------------------------------------------------
// Corpus-level views and validation

/// Generations of one question, Normal ones ordered by index.
struct QuestionGroup {
    const Question* question = nullptr;
    std::vector<const Generation*> normal;
    std::vector<const Generation*> uncertainty;
};

/// Groups generations under their questions, in question order. Generations
/// that reference unknown questions are ignored (validate_corpus reports them).
std::vector<QuestionGroup> group_by_question(std::span<const Question> questions,
                                             std::span<const Generation> generations);

struct Finding {
    std::string kind;  // dangling_generation, k_violation, missing_answer, ...
    std::string message;
};

struct ValidationReport {
    std::vector<Finding> findings;
    bool empty() const noexcept { return findings.empty(); }
};

ValidationReport validate_corpus(std::span<const Question> questions,
                                 std::span<const Generation> generations, int k,
                                 const ActivationStore* activations = nullptr,
                                 std::span<const GoldLabel> gold = {});

}  // namespace dreamcatcher
