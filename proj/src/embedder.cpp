// SPDX-License-Identifier: Apache-2.0
#include "dreamcatcher/embedder.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "dreamcatcher/error.hpp"
#include "dreamcatcher/parallel.hpp"
#include "dreamcatcher/random.hpp"
#include "utf8.hpp"

namespace dreamcatcher {

namespace fs = std::filesystem;
using nlohmann::json;

double cosine(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size())
        throw ValidationError("cosine: dimension mismatch (" + std::to_string(a.size()) + " vs " +
                              std::to_string(b.size()) + ")");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    const double c = dot / (std::sqrt(na) * std::sqrt(nb));
    return std::clamp(c, -1.0, 1.0);
}

Embedding hash_featurize(std::string_view text, int dim) {
    if (dim < 16) throw ValidationError("hash_featurize: dim must be >= 16");
    std::vector<double> acc(static_cast<std::size_t>(dim), 0.0);
    const auto units = utf8::decode(text);
    for (std::size_t n = 1; n <= 3; ++n) {
        for (std::size_t i = 0; i + n <= units.size(); ++i) {
            // n-gram bytes are contiguous in the source string
            const char* begin = units[i].bytes.data();
            const char* end = units[i + n - 1].bytes.data() + units[i + n - 1].bytes.size();
            const std::string_view gram(begin, static_cast<std::size_t>(end - begin));
            const std::uint64_t h = mix64(fnv1a64(gram) ^ n);
            const auto bucket = static_cast<std::size_t>(h % static_cast<std::uint64_t>(dim));
            acc[bucket] += (h >> 63) ? -1.0 : 1.0;
        }
    }
    double norm = 0.0;
    for (double v : acc) norm += v * v;
    Embedding out;
    out.values.resize(acc.size());
    if (norm > 0.0) {
        const double inv = 1.0 / std::sqrt(norm);
        for (std::size_t i = 0; i < acc.size(); ++i) out.values[i] = static_cast<float>(acc[i] * inv);
    }
    return out;
}

std::string content_hash(std::string_view text) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(text.data(), text.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw Error("sha256 failed");
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned i = 0; i < len; ++i) {
        out.push_back(kHex[md[i] >> 4]);
        out.push_back(kHex[md[i] & 0xF]);
    }
    return out;
}

void EmbedderConfig::validate() const {
    if (backend == EmbedderBackend::Service) {
        if (base_url.empty() || model.empty())
            throw ConfigError("service embedder requires base_url and model");
    } else if (dim < 16) {
        throw ConfigError("hashed embedder requires dim >= 16");
    }
    if (max_retries < 0) throw ConfigError("max_retries must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
}

// ---------------------------------------------------------------------------
// sources

namespace {

class HashedSource final : public EmbeddingSource {
public:
    explicit HashedSource(int dim) : dim_(dim) {}
    std::string id() const override { return "hashed-ngram3-d" + std::to_string(dim_); }
    std::vector<Embedding> embed_batch(std::span<const std::string> texts) override {
        std::vector<Embedding> out;
        out.reserve(texts.size());
        for (const auto& t : texts) out.push_back(hash_featurize(t, dim_));
        return out;
    }

private:
    int dim_;
};

class ServiceSource final : public EmbeddingSource {
public:
    explicit ServiceSource(const EmbedderConfig& cfg) : cfg_(cfg) {
        // split "scheme://host:port/prefix" into client base and path prefix
        const auto scheme_end = cfg.base_url.find("://");
        const auto path_start =
            cfg.base_url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
        host_ = cfg.base_url.substr(0, path_start);
        prefix_ = path_start == std::string::npos ? "" : cfg.base_url.substr(path_start);
        while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
        if (const char* key = std::getenv(cfg.api_key_env.c_str())) api_key_ = key;
    }

    std::string id() const override { return "service:" + cfg_.model + "@" + cfg_.base_url; }

    std::vector<Embedding> embed_batch(std::span<const std::string> texts) override {
        const json body{{"model", cfg_.model}, {"input", json(std::vector<std::string>(texts.begin(), texts.end()))}};
        const std::string payload = body.dump();
        std::string last_error;
        for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
            if (attempt > 0) {
                const double delay = cfg_.backoff_base_s * std::pow(2.0, attempt - 1);
                std::this_thread::sleep_for(std::chrono::duration<double>(delay));
            }
            httplib::Client client(host_);
            const auto timeout = std::chrono::duration<double>(cfg_.timeout_s);
            client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
            client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
            httplib::Headers headers;
            if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
            auto res = client.Post(prefix_ + "/v1/embeddings", headers, payload, "application/json");
            if (!res) {
                last_error = "connection failed: " + httplib::to_string(res.error());
                spdlog::warn("embedding request attempt {} failed: {}", attempt + 1, last_error);
                continue;
            }
            if (res->status == 429 || res->status >= 500) {
                last_error = "HTTP " + std::to_string(res->status);
                spdlog::warn("embedding request attempt {} failed: {}", attempt + 1, last_error);
                continue;
            }
            if (res->status != 200)
                throw TransportError("embedding service returned HTTP " + std::to_string(res->status) +
                                     ": " + res->body.substr(0, 200));
            return parse(res->body, texts.size());
        }
        throw TransportError("embedding service unreachable after " +
                             std::to_string(cfg_.max_retries + 1) + " attempts (" + last_error + ")");
    }

private:
    static std::vector<Embedding> parse(const std::string& body, std::size_t expected) {
        std::vector<Embedding> out;
        try {
            const auto doc = json::parse(body);
            const auto& data = doc.at("data");
            if (data.size() != expected)
                throw TransportError("embedding service returned " + std::to_string(data.size()) +
                                     " vectors for " + std::to_string(expected) + " inputs");
            out.resize(expected);
            for (std::size_t i = 0; i < data.size(); ++i) {
                const auto& item = data[i];
                const std::size_t slot =
                    item.contains("index") ? item.at("index").get<std::size_t>() : i;
                if (slot >= expected) throw TransportError("embedding index out of range");
                out[slot].values = item.at("embedding").get<std::vector<float>>();
            }
        } catch (const json::exception& e) {
            throw TransportError(std::string("malformed embedding response: ") + e.what());
        }
        for (const auto& e : out) {
            if (e.values.empty()) throw TransportError("embedding service returned an empty vector");
            for (float v : e.values)
                if (!std::isfinite(v)) throw TransportError("embedding contains non-finite values");
        }
        return out;
    }

    EmbedderConfig cfg_;
    std::string host_;
    std::string prefix_;
    std::string api_key_;
};

std::string sanitize(const std::string& id) {
    std::string out;
    for (char c : id) out.push_back(std::isalnum(static_cast<unsigned char>(c)) ? c : '_');
    if (out.size() > 48) out.resize(48);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(id)));
    return out + "-" + buf;
}

}  // namespace

std::unique_ptr<EmbeddingSource> make_source(const EmbedderConfig& config) {
    config.validate();
    if (config.backend == EmbedderBackend::Service) return std::make_unique<ServiceSource>(config);
    return std::make_unique<HashedSource>(config.dim);
}

// ---------------------------------------------------------------------------
// Embedder

Embedder::Embedder(EmbedderConfig config) : Embedder(config, make_source(config)) {}

Embedder::Embedder(EmbedderConfig config, std::unique_ptr<EmbeddingSource> source)
    : config_(std::move(config)), source_(std::move(source)) {
    if (!config_.cache_dir.empty()) {
        cache_root_ = config_.cache_dir / sanitize(source_->id());
        std::error_code ec;
        fs::create_directories(cache_root_, ec);
        if (ec) throw IoError("cannot create cache dir " + cache_root_.string() + ": " + ec.message());
    }
}

std::optional<std::size_t> Embedder::dim() const {
    std::lock_guard lock(mu_);
    return dim_;
}

void Embedder::check_dim(const Embedding& e) {
    if (!dim_) {
        dim_ = e.dim();
    } else if (*dim_ != e.dim()) {
        throw ValidationError("embedding dimension drift: expected " + std::to_string(*dim_) +
                              ", got " + std::to_string(e.dim()));
    }
}

std::optional<Embedding> Embedder::read_disk(const std::string& key) const {
    if (cache_root_.empty()) return std::nullopt;
    const auto path = cache_root_ / (key + ".f32");
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) return std::nullopt;
    const auto bytes = static_cast<std::size_t>(in.tellg());
    if (bytes == 0 || bytes % sizeof(float) != 0) return std::nullopt;
    Embedding e;
    e.values.resize(bytes / sizeof(float));
    in.seekg(0);
    in.read(reinterpret_cast<char*>(e.values.data()), static_cast<std::streamsize>(bytes));
    if (!in) return std::nullopt;
    return e;
}

void Embedder::write_disk(const std::string& key, const Embedding& e) const {
    if (cache_root_.empty()) return;
    // write-then-rename: concurrent writers of one key race benignly
    const auto final_path = cache_root_ / (key + ".f32");
    auto tmp = final_path;
    tmp += ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write cache file " + tmp.string());
        out.write(reinterpret_cast<const char*>(e.values.data()),
                  static_cast<std::streamsize>(e.values.size() * sizeof(float)));
        if (!out) throw IoError("short write to cache file " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, final_path, ec);
    if (ec) throw IoError("cannot publish cache file " + final_path.string() + ": " + ec.message());
}

std::vector<Embedding> Embedder::embed(std::span<const std::string> texts) {
    if (texts.empty()) throw ValidationError("embed: empty input");
    std::vector<Embedding> out(texts.size());
    std::vector<std::string> keys(texts.size());
    // unique missing texts -> positions needing them
    std::vector<std::string> missing;
    std::unordered_map<std::string, std::vector<std::size_t>> waiting;

    for (std::size_t i = 0; i < texts.size(); ++i) keys[i] = content_hash(texts[i]);
    {
        std::lock_guard lock(mu_);
        for (std::size_t i = 0; i < texts.size(); ++i) {
            if (auto it = memory_.find(keys[i]); it != memory_.end()) {
                out[i] = it->second;
                continue;
            }
            auto [it, inserted] = waiting.try_emplace(keys[i]);
            if (inserted) missing.push_back(texts[i]);
            it->second.push_back(i);
        }
    }

    std::vector<std::string> to_fetch;
    std::vector<std::string> fetch_keys;
    for (const auto& text : missing) {
        const auto key = content_hash(text);
        if (auto cached = read_disk(key)) {
            std::lock_guard lock(mu_);
            check_dim(*cached);
            for (auto pos : waiting[key]) out[pos] = *cached;
            memory_.emplace(key, std::move(*cached));
        } else {
            to_fetch.push_back(text);
            fetch_keys.push_back(key);
        }
    }

    if (!to_fetch.empty()) {
        const std::size_t batch = static_cast<std::size_t>(config_.batch_size);
        const std::size_t nbatches = (to_fetch.size() + batch - 1) / batch;
        std::vector<std::vector<Embedding>> results(nbatches);
        const unsigned jobs = config_.backend == EmbedderBackend::Service ? config_.parallelism : 1;
        parallel_for(nbatches, jobs, [&](std::size_t b) {
            const std::size_t lo = b * batch;
            const std::size_t hi = std::min(to_fetch.size(), lo + batch);
            ++backend_calls_;
            results[b] = source_->embed_batch(std::span(to_fetch).subspan(lo, hi - lo));
            if (results[b].size() != hi - lo)
                throw TransportError("backend returned wrong number of vectors");
        });
        for (std::size_t b = 0; b < nbatches; ++b) {
            for (std::size_t j = 0; j < results[b].size(); ++j) {
                const auto& key = fetch_keys[b * batch + j];
                auto& e = results[b][j];
                {
                    std::lock_guard lock(mu_);
                    check_dim(e);
                }
                write_disk(key, e);
                std::lock_guard lock(mu_);
                for (auto pos : waiting[key]) out[pos] = e;
                memory_.emplace(key, std::move(e));
            }
        }
    }
    return out;
}

Embedding Embedder::embed_one(const std::string& text) {
    return embed(std::span(&text, 1)).front();
}

std::vector<Embedding> embed_texts(const EmbedderConfig& config, std::span<const std::string> texts) {
    Embedder embedder(config);
    return embedder.embed(texts);
}

}  // namespace dreamcatcher
