// SPDX-License-Identifier: Apache-2.0
#include "dreamcatcher/config.hpp"

#include <fstream>
#include <limits>
#include <set>
#include <type_traits>

#include "dreamcatcher/error.hpp"
#include "dreamcatcher/random.hpp"

namespace dreamcatcher {

using nlohmann::json;

namespace {

/// Strict view over one config object: every key read is recorded and
/// finish() rejects the rest.
class Section {
public:
    Section(const json& obj, std::string prefix) : obj_(obj), prefix_(std::move(prefix)) {
        if (!obj_.is_object()) throw ConfigError("config key '" + where() + "' must be an object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = obj_.find(key);
        if (it == obj_.end()) return;
        out = convert<T>(*it, name(key));
    }

    template <typename T>
    std::optional<T> maybe(const char* key) {
        seen_.insert(key);
        auto it = obj_.find(key);
        if (it == obj_.end() || it->is_null()) return std::nullopt;
        return convert<T>(*it, name(key));
    }

    void path(const char* key, std::filesystem::path& out, const std::filesystem::path& base) {
        if (auto s = maybe<std::string>(key)) {
            std::filesystem::path p(*s);
            out = (p.is_relative() && !base.empty() && !p.empty()) ? (base / p).lexically_normal() : p;
        }
    }

    Section sub(const char* key) {
        seen_.insert(key);
        auto it = obj_.find(key);
        if (it == obj_.end()) return Section(empty(), name(key));
        return Section(*it, name(key));
    }

    void finish() const {
        for (const auto& [k, v] : obj_.items())
            if (!seen_.count(k)) throw ConfigError("unknown config key '" + name(k) + "'");
    }

private:
    static const json& empty() {
        static const json e = json::object();
        return e;
    }

    std::string where() const { return prefix_.empty() ? std::string("<root>") : prefix_; }
    std::string name(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

    template <typename T>
    static T convert(const json& v, const std::string& key) {
        auto fail = [&](const char* expected) {
            return ConfigError("config key '" + key + "': expected " + expected + ", got " + v.type_name());
        };
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw fail("a boolean");
            return v.get<bool>();
        } else if constexpr (std::is_same_v<T, std::uint64_t>) {
            if (v.is_number_unsigned()) return v.get<std::uint64_t>();
            if (!v.is_number_integer() || v.get<std::int64_t>() < 0) throw fail("a non-negative integer");
            return static_cast<std::uint64_t>(v.get<std::int64_t>());
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) throw fail("an integer");
            const auto x = v.get<std::int64_t>();
            if (x < static_cast<std::int64_t>(std::numeric_limits<T>::min()) ||
                (x > 0 && static_cast<std::uint64_t>(x) > static_cast<std::uint64_t>(std::numeric_limits<T>::max())))
                throw ConfigError("config key '" + key + "': value out of range");
            return static_cast<T>(x);
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw fail("a number");
            return v.get<T>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw fail("a string");
            return v.get<std::string>();
        } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
            if (!v.is_array()) throw fail("an array of strings");
            std::vector<std::string> out;
            for (const auto& e : v) {
                if (!e.is_string()) throw fail("an array of strings");
                out.push_back(e.get<std::string>());
            }
            return out;
        } else {
            static_assert(sizeof(T) == 0, "unsupported config type");
        }
    }

    const json& obj_;
    std::string prefix_;
    std::set<std::string> seen_;
};

EmbedderBackend parse_backend(const std::string& s) {
    if (s == "hashed") return EmbedderBackend::Hashed;
    if (s == "service") return EmbedderBackend::Service;
    throw ConfigError("config key 'embedder.backend': expected \"hashed\" or \"service\", got \"" + s + "\"");
}

ScorerSet parse_scorers(const std::vector<std::string>& names, const std::string& key) {
    try {
        return ScorerSet::parse(names);
    } catch (const ConfigError& e) {
        throw ConfigError("config key '" + key + "': " + e.what());
    }
}

}  // namespace

void PipelineConfig::set_seed(std::uint64_t s) {
    seed = s;
    probe.hyper.seed = derive_seed(s, "probe");
    reward.hyper.seed = derive_seed(s, "reward");
    ppo.config.seed = derive_seed(s, "ppo");
    ppo.env.seed = derive_seed(s, "toy-env");
}

void PipelineConfig::validate() const {
    if (k < 2) throw ConfigError("k must be >= 2");
    embedder.validate();
    PrelabelConfig pl = prelabel;
    pl.k = k;
    pl.validate();
    if (scorers.empty()) throw ConfigError("at least one scorer must be enabled");
    if (probe.repetitions < 1) throw ConfigError("probe.repetitions must be >= 1");
    if (probe.cross_fit_folds < 2) throw ConfigError("probe.cross_fit_folds must be >= 2");
    if (!(probe.hyper.val_fraction >= 0.0 && probe.hyper.val_fraction < 1.0))
        throw ConfigError("probe.val_fraction must be in [0, 1)");
    if (!(probe.hyper.lr > 0.0) || probe.hyper.epochs < 0 || probe.hyper.l2 < 0.0)
        throw ConfigError("probe hyperparameters out of range");
    if (probe.cell && probe.cell->layer < 0) throw ConfigError("probe.layer must be >= 0");
    const auto& rh = reward.hyper;
    if (!(rh.lr > 0.0) || rh.epochs < 0 || rh.lambda < 0.0 || rh.warmup_fraction < 0.0 || rh.warmup_fraction > 1.0)
        throw ConfigError("reward hyperparameters out of range");
    if (!(reward.general_ratio >= 0.0)) throw ConfigError("reward.general_ratio must be >= 0");
    if (!(reward.test_fraction >= 0.0 && reward.test_fraction < 1.0))
        throw ConfigError("reward.test_fraction must be in [0, 1)");
    ppo.config.validate();
    ppo.env.validate();
    if (ppo.train.episodes == 0) throw ConfigError("ppo.episodes must be > 0");
    if (!(ppo.train.threshold > 0.0 && ppo.train.threshold <= 1.0)) throw ConfigError("ppo.threshold must be in (0, 1]");
}

PipelineConfig parse_config(const json& doc, const std::filesystem::path& base_dir) {
    PipelineConfig c;
    Section root(doc, "");

    auto seed = root.maybe<std::uint64_t>("seed");
    c.set_seed(seed.value_or(0));
    root.get("k", c.k);

    {
        auto s = root.sub("paths");
        c.paths.corpus = base_dir.empty() ? std::filesystem::path(".") : base_dir;
        s.path("corpus", c.paths.corpus, base_dir);
        s.path("activations", c.paths.activations, base_dir);
        s.path("cache", c.paths.cache, base_dir);
        if (!base_dir.empty()) c.paths.output = (base_dir / c.paths.output).lexically_normal();
        s.path("output", c.paths.output, base_dir);
        s.finish();
    }
    {
        auto s = root.sub("embedder");
        if (auto b = s.maybe<std::string>("backend")) c.embedder.backend = parse_backend(*b);
        s.get("base_url", c.embedder.base_url);
        s.get("model", c.embedder.model);
        s.get("dim", c.embedder.dim);
        s.get("max_retries", c.embedder.max_retries);
        s.get("timeout_s", c.embedder.timeout_s);
        s.get("backoff_base_s", c.embedder.backoff_base_s);
        s.get("batch_size", c.embedder.batch_size);
        s.get("parallelism", c.embedder.parallelism);
        s.get("api_key_env", c.embedder.api_key_env);
        s.finish();
    }
    c.embedder.cache_dir = c.paths.cache;
    {
        auto s = root.sub("prelabel");
        s.get("upper_percentile", c.prelabel.upper_percentile);
        s.get("lower_percentile", c.prelabel.lower_percentile);
        if (auto names = s.maybe<std::vector<std::string>>("scorers"))
            c.prelabel.enabled = parse_scorers(*names, "prelabel.scorers");
        s.finish();
    }
    c.prelabel.k = c.k;
    if (auto names = root.maybe<std::vector<std::string>>("scorers")) c.scorers = parse_scorers(*names, "scorers");
    {
        auto s = root.sub("pairs");
        s.get("mixed_transitive_closure", c.pairs.mixed_transitive_closure);
        s.finish();
    }
    {
        auto s = root.sub("probe");
        s.get("lr", c.probe.hyper.lr);
        s.get("epochs", c.probe.hyper.epochs);
        s.get("l2", c.probe.hyper.l2);
        s.get("val_fraction", c.probe.hyper.val_fraction);
        s.get("repetitions", c.probe.repetitions);
        s.get("cross_fit_folds", c.probe.cross_fit_folds);
        auto site = s.maybe<std::string>("site");
        auto layer = s.maybe<int>("layer");
        if (site.has_value() != layer.has_value())
            throw ConfigError("config keys 'probe.site' and 'probe.layer' must be given together");
        if (site) {
            try {
                c.probe.cell = CellKey{parse_site(*site), *layer};
            } catch (const Error& e) {
                throw ConfigError(std::string("config key 'probe.site': ") + e.what());
            }
        }
        s.finish();
    }
    {
        auto s = root.sub("reward");
        auto& h = c.reward.hyper;
        s.get("lr", h.lr);
        s.get("warmup_fraction", h.warmup_fraction);
        s.get("epochs", h.epochs);
        s.get("batch_size", h.batch_size);
        s.get("lambda", h.lambda);
        s.get("beta1", h.beta1);
        s.get("beta2", h.beta2);
        s.get("eps", h.eps);
        s.get("general_ratio", c.reward.general_ratio);
        s.get("test_fraction", c.reward.test_fraction);
        s.finish();
    }
    {
        auto s = root.sub("ppo");
        auto& p = c.ppo.config;
        s.get("clip", p.clip);
        s.get("epochs", p.epochs);
        s.get("lr", p.lr);
        s.get("beta1", p.beta1);
        s.get("beta2", p.beta2);
        s.get("eps", p.eps);
        s.get("kl_coeff", p.kl_coeff);
        s.get("entropy_coeff", p.entropy_coeff);
        s.get("baseline_decay", p.baseline_decay);
        s.get("baseline_split_guided", p.baseline_split_guided);
        s.get("guidance_fraction", p.guidance_fraction);
        s.get("guidance_length", p.guidance_length);
        s.get("batch_size", p.batch_size);
        s.get("guidance", c.ppo.train.guidance);
        s.get("episodes", c.ppo.train.episodes);
        s.get("threshold", c.ppo.train.threshold);
        s.get("uniform_init", c.ppo.train.uniform_init);
        s.get("eval_episodes", c.ppo.eval_episodes);
        auto e = s.sub("env");
        e.get("known", c.ppo.env.known);
        e.get("unknown", c.ppo.env.unknown);
        e.get("mixed", c.ppo.env.mixed);
        e.get("length", c.ppo.env.length);
        e.get("fact_pool", c.ppo.env.fact_pool);
        e.get("halluc_pool", c.ppo.env.halluc_pool);
        e.finish();
        s.finish();
    }
    root.finish();
    c.validate();
    return c;
}

PipelineConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return parse_config(doc, path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
}

json config_to_json(const PipelineConfig& c) {
    json scorers = c.scorers.names();
    json out;
    out["seed"] = c.seed;
    out["k"] = c.k;
    json paths = {{"corpus", c.paths.corpus.string()}, {"output", c.paths.output.string()}};
    if (!c.paths.activations.empty()) paths["activations"] = c.paths.activations.string();
    if (!c.paths.cache.empty()) paths["cache"] = c.paths.cache.string();
    out["paths"] = paths;
    const auto& e = c.embedder;
    out["embedder"] = {{"backend", e.backend == EmbedderBackend::Hashed ? "hashed" : "service"},
                       {"base_url", e.base_url},
                       {"model", e.model},
                       {"dim", e.dim},
                       {"max_retries", e.max_retries},
                       {"timeout_s", e.timeout_s},
                       {"backoff_base_s", e.backoff_base_s},
                       {"batch_size", e.batch_size},
                       {"parallelism", e.parallelism},
                       {"api_key_env", e.api_key_env}};
    out["prelabel"] = {{"upper_percentile", c.prelabel.upper_percentile},
                       {"lower_percentile", c.prelabel.lower_percentile},
                       {"scorers", c.prelabel.enabled.names()}};
    out["scorers"] = scorers;
    out["pairs"] = {{"mixed_transitive_closure", c.pairs.mixed_transitive_closure}};
    json probe = {{"lr", c.probe.hyper.lr},
                  {"epochs", c.probe.hyper.epochs},
                  {"l2", c.probe.hyper.l2},
                  {"val_fraction", c.probe.hyper.val_fraction},
                  {"repetitions", c.probe.repetitions},
                  {"cross_fit_folds", c.probe.cross_fit_folds}};
    if (c.probe.cell) {
        probe["site"] = to_string(c.probe.cell->site);
        probe["layer"] = c.probe.cell->layer;
    }
    out["probe"] = probe;
    const auto& h = c.reward.hyper;
    out["reward"] = {{"lr", h.lr},         {"warmup_fraction", h.warmup_fraction},
                     {"epochs", h.epochs}, {"batch_size", h.batch_size},
                     {"lambda", h.lambda}, {"beta1", h.beta1},
                     {"beta2", h.beta2},   {"eps", h.eps},
                     {"general_ratio", c.reward.general_ratio},
                     {"test_fraction", c.reward.test_fraction}};
    const auto& p = c.ppo.config;
    out["ppo"] = {{"clip", p.clip},
                  {"epochs", p.epochs},
                  {"lr", p.lr},
                  {"beta1", p.beta1},
                  {"beta2", p.beta2},
                  {"eps", p.eps},
                  {"kl_coeff", p.kl_coeff},
                  {"entropy_coeff", p.entropy_coeff},
                  {"baseline_decay", p.baseline_decay},
                  {"baseline_split_guided", p.baseline_split_guided},
                  {"guidance_fraction", p.guidance_fraction},
                  {"guidance_length", p.guidance_length},
                  {"batch_size", p.batch_size},
                  {"guidance", c.ppo.train.guidance},
                  {"episodes", c.ppo.train.episodes},
                  {"threshold", c.ppo.train.threshold},
                  {"uniform_init", c.ppo.train.uniform_init},
                  {"eval_episodes", c.ppo.eval_episodes},
                  {"env",
                   {{"known", c.ppo.env.known},
                    {"unknown", c.ppo.env.unknown},
                    {"mixed", c.ppo.env.mixed},
                    {"length", c.ppo.env.length},
                    {"fact_pool", c.ppo.env.fact_pool},
                    {"halluc_pool", c.ppo.env.halluc_pool}}}};
    return out;
}

}  // namespace dreamcatcher
