// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstddef>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace dreamcatcher {

/// Dense text embedding. Entries are finite; the dimension is fixed per backend.
struct Embedding {
    std::vector<float> values;

    std::size_t dim() const noexcept { return values.size(); }
    bool operator==(const Embedding&) const = default;
};

/// Cosine similarity in [-1, 1]. Zero-norm inputs give 0. Throws on dim mismatch.
double cosine(std::span<const float> a, std::span<const float> b);
inline double cosine(const Embedding& a, const Embedding& b) { return cosine(a.values, b.values); }

/// Offline featurizer: character n-grams (n = 1..3, over code points) hashed
/// into `dim` signed buckets, then L2-normalized. Empty text maps to the zero
/// vector. Output depends only on the UTF-8 bytes of `text`.
Embedding hash_featurize(std::string_view text, int dim);

enum class EmbedderBackend { Service, Hashed };

struct EmbedderConfig {
    EmbedderBackend backend = EmbedderBackend::Hashed;
    std::string base_url;                // Service
    std::string model;                   // Service
    int dim = 256;                       // Hashed
    std::filesystem::path cache_dir;     // empty disables the disk cache
    int max_retries = 5;
    double timeout_s = 30.0;
    double backoff_base_s = 0.5;         // delay before retry n is base * 2^n
    int batch_size = 64;                 // texts per service request
    unsigned parallelism = 4;            // concurrent service requests
    std::string api_key_env = "DREAM_API_KEY";

    /// Throws ConfigError when the backend requirements are not met.
    void validate() const;
};

/// Something that turns a batch of texts into vectors, in order.
class EmbeddingSource {
public:
    virtual ~EmbeddingSource() = default;
    /// Stable identifier; part of the cache key.
    virtual std::string id() const = 0;
    virtual std::vector<Embedding> embed_batch(std::span<const std::string> texts) = 0;
};

std::unique_ptr<EmbeddingSource> make_source(const EmbedderConfig& config);

/// Caching front end over an EmbeddingSource. Identical texts always return
/// identical vectors: lookups go memory cache -> disk cache -> backend, and
/// every backend result is persisted. Thread-safe.
class Embedder {
public:
    explicit Embedder(EmbedderConfig config);
    Embedder(EmbedderConfig config, std::unique_ptr<EmbeddingSource> source);

    /// One vector per text, in order. Throws on empty input, on transport
    /// failure, and when a vector's dimension differs from earlier ones.
    std::vector<Embedding> embed(std::span<const std::string> texts);
    Embedding embed_one(const std::string& text);

    const EmbedderConfig& config() const noexcept { return config_; }
    std::string backend_id() const { return source_->id(); }
    /// Number of embed_batch calls issued to the backend.
    std::size_t backend_calls() const noexcept { return backend_calls_.load(); }
    std::optional<std::size_t> dim() const;

private:
    std::optional<Embedding> read_disk(const std::string& key) const;
    void write_disk(const std::string& key, const Embedding& e) const;
    void check_dim(const Embedding& e);

    EmbedderConfig config_;
    std::unique_ptr<EmbeddingSource> source_;
    std::filesystem::path cache_root_;
    mutable std::mutex mu_;
    std::unordered_map<std::string, Embedding> memory_;
    std::optional<std::size_t> dim_;
    std::atomic<std::size_t> backend_calls_{0};
};

/// One-shot convenience wrapper around Embedder.
std::vector<Embedding> embed_texts(const EmbedderConfig& config,
                                   std::span<const std::string> texts);

/// Hex SHA-256 of the bytes of `text`.
std::string content_hash(std::string_view text);

}  // namespace dreamcatcher
