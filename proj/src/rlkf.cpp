// SPDX-License-Identifier: Apache-2.0
#include "dreamcatcher/rlkf.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "dreamcatcher/error.hpp"
#include "dreamcatcher/parallel.hpp"
#include "dreamcatcher/random.hpp"

namespace dreamcatcher {

using nlohmann::json;

// --- environment ----------------------------------------------------------

void ToyEnvConfig::validate() const {
    if (known < 0 || unknown < 0 || mixed < 0 || known + unknown + mixed == 0)
        throw ConfigError("toy env needs at least one question and no negative counts");
    if (length < 1) throw ConfigError("toy env length must be >= 1");
    if (fact_pool < 1 || halluc_pool < 1) throw ConfigError("toy env word pools must be non-empty");
    if (uncertainty_words.empty()) throw ConfigError("toy env needs uncertainty words");
    std::set<std::string> distinct(uncertainty_words.begin(), uncertainty_words.end());
    const auto vocab = static_cast<std::size_t>(fact_pool + halluc_pool) + distinct.size();
    if (vocab > 64) throw ConfigError("toy env vocabulary has " + std::to_string(vocab) + " tokens (max 64)");
}

namespace {

// Two-syllable words over a fixed consonant/vowel inventory, in seeded order.
std::vector<std::string> make_words(std::string_view consonants, std::string_view vowels, int count, Rng& rng) {
    std::vector<std::string> syllables;
    for (char c : consonants)
        for (char v : vowels) syllables.push_back(std::string{c, v});
    std::vector<std::string> words;
    for (const auto& a : syllables)
        for (const auto& b : syllables) words.push_back(a + b);
    if (static_cast<std::size_t>(count) > words.size()) throw ConfigError("toy env word pool too large");
    rng.shuffle(words.begin(), words.end());
    words.resize(static_cast<std::size_t>(count));
    return words;
}

TokenSeq draw_template(int first_token, int pool_size, int length, Rng& rng) {
    std::vector<int> ids(static_cast<std::size_t>(pool_size));
    std::iota(ids.begin(), ids.end(), first_token);
    TokenSeq out;
    if (pool_size >= length) {
        rng.shuffle(ids.begin(), ids.end());
        out.assign(ids.begin(), ids.begin() + length);
    } else {
        for (int t = 0; t < length; ++t) out.push_back(ids[rng.below(ids.size())]);
    }
    return out;
}

}  // namespace

ToyEnv make_toy_env(const ToyEnvConfig& config) {
    config.validate();
    Rng rng(derive_seed(config.seed, "toy-env"));
    ToyEnv env;
    env.length = config.length;
    env.prior = config.prior;
    for (auto& w : make_words("bdgkt", "ao", config.fact_pool, rng)) {
        env.vocab.push_back(std::move(w));
        env.pool.push_back(TokenPool::Fact);
    }
    for (auto& w : make_words("mnprs", "eiu", config.halluc_pool, rng)) {
        env.vocab.push_back(std::move(w));
        env.pool.push_back(TokenPool::Hallucination);
    }
    TokenSeq idk;
    for (int t = 0; t < config.length; ++t) {
        const auto& word = config.uncertainty_words[static_cast<std::size_t>(t) % config.uncertainty_words.size()];
        auto it = std::find(env.vocab.begin(), env.vocab.end(), word);
        if (it == env.vocab.end()) {
            env.vocab.push_back(word);
            env.pool.push_back(TokenPool::Uncertainty);
            it = env.vocab.end() - 1;
        }
        idk.push_back(static_cast<int>(it - env.vocab.begin()));
    }

    auto add = [&](Category cat, int count, char tag) {
        for (int i = 0; i < count; ++i) {
            ToyQuestion q;
            char id[16];
            std::snprintf(id, sizeof id, "toy-%c%02d", tag, i);
            q.id = id;
            q.text = "question " + q.id;
            q.category = cat;
            q.factual = draw_template(0, config.fact_pool, config.length, rng);
            q.hallucination = draw_template(config.fact_pool, config.halluc_pool, config.length, rng);
            q.uncertainty = idk;
            env.questions.push_back(std::move(q));
        }
    };
    add(Category::Known, config.known, 'k');
    add(Category::Unknown, config.unknown, 'u');
    add(Category::Mixed, config.mixed, 'm');
    return env;
}

std::string ToyEnv::detokenize(std::span<const int> tokens) const {
    std::string out;
    for (int t : tokens) {
        if (!out.empty()) out += ' ';
        out += vocab.at(static_cast<std::size_t>(t));
    }
    return out;
}

std::optional<Role> ToyEnv::classify(std::size_t question, std::span<const int> tokens) const {
    const auto& q = questions.at(question);
    auto same = [&](const TokenSeq& t) { return std::equal(tokens.begin(), tokens.end(), t.begin(), t.end()); };
    if (same(q.factual)) return Role::Factual;
    if (same(q.uncertainty)) return Role::Uncertainty;
    if (same(q.hallucination)) return Role::Hallucination;
    return std::nullopt;
}

std::vector<RewardPair> ToyEnv::preference_pairs() const {
    std::vector<RewardPair> out;
    for (const auto& q : questions) {
        const auto f = detokenize(q.factual), u = detokenize(q.uncertainty), h = detokenize(q.hallucination);
        const std::string cat(to_string(q.category));
        switch (q.category) {
            case Category::Known: out.push_back({q.text, f, u, cat}); break;
            case Category::Unknown: out.push_back({q.text, u, h, cat}); break;
            case Category::Mixed:
                out.push_back({q.text, f, u, cat});
                out.push_back({q.text, u, h, cat});
                out.push_back({q.text, f, h, cat});
                break;
        }
    }
    return out;
}

// --- policy ---------------------------------------------------------------

std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> p(logits.size());
    if (logits.empty()) return p;
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) sum += p[i] = std::exp(logits[i] - mx);
    for (auto& x : p) x /= sum;
    return p;
}

Policy::Policy(int buckets, int length, int vocab) : buckets_(buckets), length_(length), vocab_(vocab) {
    if (buckets < 1 || length < 1 || vocab < 1) throw ConfigError("policy dimensions must be positive");
    table_.assign(rows() * static_cast<std::size_t>(vocab_), 0.0);
}

std::size_t Policy::row_index(int bucket, int position, int prev) const {
    if (bucket < 0 || bucket >= buckets_ || position < 0 || position >= length_)
        throw ValidationError("policy state out of range");
    const std::size_t base = static_cast<std::size_t>(bucket) * rows_per_bucket();
    if (position == 0) return base;
    if (prev < 0 || prev >= vocab_) throw ValidationError("policy previous token out of range");
    return base + 1 + static_cast<std::size_t>(position - 1) * vocab_ + static_cast<std::size_t>(prev);
}

std::vector<double> Policy::probs(std::size_t row) const { return softmax(logits(row)); }

double Policy::sequence_prob(int bucket, std::span<const int> tokens) const {
    double p = 1.0;
    int prev = -1;
    for (int t = 0; t < static_cast<int>(tokens.size()) && t < length_; ++t) {
        p *= probs(row_index(bucket, t, prev))[static_cast<std::size_t>(tokens[t])];
        prev = tokens[t];
    }
    return p;
}

Policy Policy::uniform(const ToyEnv& env) {
    return Policy(static_cast<int>(env.questions.size()), env.length, env.vocab_size());
}

Policy Policy::from_prior(const ToyEnv& env) {
    Policy policy = uniform(env);
    const auto& pr = env.prior;
    for (std::size_t b = 0; b < env.questions.size(); ++b) {
        const auto& q = env.questions[b];
        const bool unknown = q.category == Category::Unknown;
        double f0 = 0.0, h0 = 0.0, u0 = 0.0;
        switch (q.category) {
            case Category::Known: f0 = pr.known_factual_first, h0 = pr.known_halluc_first, u0 = pr.known_uncertain_first; break;
            case Category::Unknown: f0 = pr.unknown_fact_logit, h0 = pr.unknown_halluc_first, u0 = pr.unknown_uncertain_first; break;
            case Category::Mixed: f0 = pr.mixed_factual_first, h0 = pr.mixed_halluc_first, u0 = pr.mixed_uncertain_first; break;
        }
        for (int t = 0; t < env.length; ++t) {
            for (int prev = t == 0 ? -1 : 0; prev < (t == 0 ? 0 : env.vocab_size()); ++prev) {
                auto row = policy.logits(policy.row_index(static_cast<int>(b), t, prev));
                std::fill(row.begin(), row.end(), pr.other_logit);
                if (unknown)
                    for (int v = 0; v < env.vocab_size(); ++v)
                        if (env.pool[static_cast<std::size_t>(v)] == TokenPool::Fact) row[v] = pr.unknown_fact_logit;
                if (t == 0) {
                    row[q.factual[0]] = f0;
                    row[q.hallucination[0]] = h0;
                    row[q.uncertainty[0]] = u0;
                    continue;
                }
                if (!unknown && prev == q.factual[t - 1])
                    row[q.factual[t]] = t == 1 ? pr.factual_second : pr.factual_continue;
                if (prev == q.hallucination[t - 1]) row[q.hallucination[t]] = pr.halluc_continue;
                if (prev == q.uncertainty[t - 1])
                    row[q.uncertainty[t]] = t == 1 ? pr.uncertain_second : pr.uncertain_continue;
            }
        }
    }
    return policy;
}

void write_policy(const std::filesystem::path& path, const Policy& policy, const ToyEnv& env) {
    json questions = json::array();
    for (const auto& q : env.questions) questions.push_back(q.id);
    json doc{{"buckets", policy.buckets()}, {"length", policy.length()}, {"vocab_size", policy.vocab()},
             {"vocab", env.vocab},          {"questions", questions},     {"logits", policy.table()}};
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << doc.dump() << '\n';
}

Policy load_policy(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open policy " + path.string());
    try {
        const auto doc = json::parse(in);
        Policy p(doc.at("buckets").get<int>(), doc.at("length").get<int>(), doc.at("vocab_size").get<int>());
        auto logits = doc.at("logits").get<std::vector<double>>();
        if (logits.size() != p.table().size())
            throw ValidationError("policy " + path.string() + " has " + std::to_string(logits.size()) +
                                  " logits, expected " + std::to_string(p.table().size()));
        p.table() = std::move(logits);
        return p;
    } catch (const json::exception& e) {
        throw ParseError(path.string(), 0, e.what());
    }
}

// --- reward ---------------------------------------------------------------

EnvReward::EnvReward(const ToyEnv& env, RewardModel model, Embedder& embedder)
    : env_(env), model_(std::move(model)), embedder_(embedder) {}

double EnvReward::operator()(std::size_t question, std::span<const int> tokens) {
    const auto& q = env_.questions.at(question);
    std::string key = q.text;
    key += '\n';
    key += env_.detokenize(tokens);
    {
        std::lock_guard lock(mu_);
        if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    }
    const double r = model_.score(embedder_, q.text, env_.detokenize(tokens));
    std::lock_guard lock(mu_);
    cache_.emplace(std::move(key), r);
    return r;
}

double EnvReward::template_reward_std() {
    std::vector<double> rs;
    for (std::size_t i = 0; i < env_.questions.size(); ++i) {
        const auto& q = env_.questions[i];
        for (const auto* t : {&q.factual, &q.uncertainty, &q.hallucination}) rs.push_back((*this)(i, *t));
    }
    const double mean = std::accumulate(rs.begin(), rs.end(), 0.0) / static_cast<double>(rs.size());
    double var = 0.0;
    for (double r : rs) var += (r - mean) * (r - mean);
    return std::sqrt(var / static_cast<double>(rs.size()));
}

RewardHyper env_reward_hyper(std::uint64_t seed) {
    RewardHyper h;
    h.lr = 5e-2;
    h.epochs = 300;
    h.batch_size = 0;
    h.seed = seed;
    return h;
}

RmTrainResult train_env_reward_model(const ToyEnv& env, Embedder& embedder, const RewardHyper& hyper) {
    const auto pairs = env.preference_pairs();
    const auto batch = build_pair_features(pairs, embedder);
    if (batch.empty()) throw ValidationError("toy env produced no preference pairs");
    auto init = make_reward_model(batch.front().chosen.size() / 2, embedder.backend_id(), hyper.lambda);
    return train_reward_model(batch, hyper, std::move(init));
}

// --- rollouts -------------------------------------------------------------

bool Trajectory::trainable() const {
    return std::find(guided_mask.begin(), guided_mask.end(), false) != guided_mask.end();
}

void PpoConfig::validate() const {
    if (!(clip > 0.0 && clip < 1.0)) throw ConfigError("ppo clip must be in (0, 1)");
    if (kl_coeff < 0.0) throw ConfigError("ppo kl_coeff must be >= 0");
    if (entropy_coeff < 0.0) throw ConfigError("ppo entropy_coeff must be >= 0");
    if (epochs < 0) throw ConfigError("ppo epochs must be >= 0");
    if (!(lr >= 0.0)) throw ConfigError("ppo lr must be >= 0");
    if (!(baseline_decay >= 0.0 && baseline_decay < 1.0)) throw ConfigError("ppo baseline_decay must be in [0, 1)");
    if (!(guidance_fraction >= 0.0 && guidance_fraction <= 1.0))
        throw ConfigError("ppo guidance_fraction must be in [0, 1]");
    if (guidance_length < 0) throw ConfigError("ppo guidance_length must be >= 0");
    if (batch_size < 1) throw ConfigError("ppo batch_size must be >= 1");
}

namespace {

int sample_token(std::span<const double> p, double u) {
    double acc = 0.0;
    int last = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        last = static_cast<int>(i);
        acc += p[i];
        if (u < acc) return last;
    }
    return last;
}

int argmax_token(std::span<const double> p) {
    return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

}  // namespace

std::vector<Trajectory> rollout(const Policy& policy, const ToyEnv& env, const RewardFn& reward,
                                std::uint64_t first, std::size_t count, bool guidance,
                                const PpoConfig& config, unsigned jobs) {
    const std::size_t n = env.questions.size();
    std::vector<Trajectory> out(count);
    parallel_for(count, jobs, [&](std::size_t i) {
        const std::uint64_t episode = first + i;
        Rng rng(derive_seed(derive_seed(config.seed, "rollout"), episode));
        auto& tr = out[i];
        tr.question = static_cast<std::size_t>(episode % n);
        // the guidance draw is taken unconditionally so guided and unguided
        // runs with one seed see the same sampling stream
        tr.guided = rng.uniform() < config.guidance_fraction && guidance;
        const auto& preferred = env.questions[tr.question].preferred();
        int prev = -1;
        for (int t = 0; t < env.length; ++t) {
            const auto p = policy.probs(policy.row_index(static_cast<int>(tr.question), t, prev));
            const double u = rng.uniform();
            const bool forced = tr.guided && t < config.guidance_length;
            const int tok = forced ? preferred[static_cast<std::size_t>(t)] : sample_token(p, u);
            tr.tokens.push_back(tok);
            tr.logprob.push_back(std::log(p[static_cast<std::size_t>(tok)]));
            tr.guided_mask.push_back(forced);
            prev = tok;
        }
        tr.reward = reward(tr.question, tr.tokens);
    });
    return out;
}

// --- PPO ------------------------------------------------------------------

double clipped_surrogate(double ratio, double advantage, double eps) {
    return std::min(ratio * advantage, std::clamp(ratio, 1.0 - eps, 1.0 + eps) * advantage);
}

std::optional<double> Baseline::value(std::size_t question, bool guided) const {
    auto it = slots_.find({question, split_ && guided});
    if (it == slots_.end() || it->second.updates == 0) return std::nullopt;
    return it->second.m / (1.0 - std::pow(decay_, it->second.updates));
}

void Baseline::observe(std::span<const Trajectory> batch) {
    std::map<std::pair<std::size_t, bool>, std::pair<double, int>> sums;
    for (const auto& tr : batch) {
        if (!tr.trainable()) continue;
        auto& s = sums[{tr.question, split_ && tr.guided}];
        s.first += tr.reward;
        ++s.second;
    }
    for (const auto& [q, s] : sums) {
        auto& slot = slots_[q];
        slot.m = decay_ * slot.m + (1.0 - decay_) * (s.first / s.second);
        ++slot.updates;
    }
}

void PolicyOptimizer::ensure(const Policy& policy) {
    if (m.size() == policy.table().size()) return;
    m.assign(policy.table().size(), 0.0);
    v.assign(policy.table().size(), 0.0);
    steps.assign(policy.rows(), 0);
}

namespace {

struct TokenRef {
    std::size_t traj;
    std::size_t row;
    int action;
    double old_logprob;
};

std::vector<TokenRef> trainable_tokens(const Policy& policy, std::span<const Trajectory> batch) {
    std::vector<TokenRef> out;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& tr = batch[i];
        int prev = -1;
        for (std::size_t t = 0; t < tr.tokens.size(); ++t) {
            if (!tr.guided_mask[t])
                out.push_back({i, policy.row_index(static_cast<int>(tr.question), static_cast<int>(t), prev),
                               tr.tokens[t], tr.logprob[t]});
            prev = tr.tokens[t];
        }
    }
    return out;
}

double entropy_of(std::span<const double> p) {
    double h = 0.0;
    for (double x : p)
        if (x > 0.0) h -= x * std::log(x);
    return h;
}

}  // namespace

double surrogate_objective(const Policy& policy, std::span<const Trajectory> batch,
                           std::span<const double> advantages, double clip) {
    const auto tokens = trainable_tokens(policy, batch);
    if (tokens.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& tk : tokens) {
        const double logp = std::log(policy.probs(tk.row)[static_cast<std::size_t>(tk.action)]);
        sum += clipped_surrogate(std::exp(logp - tk.old_logprob), advantages[tk.traj], clip);
    }
    return sum / static_cast<double>(tokens.size());
}

PpoStats ppo_update(Policy& policy, PolicyOptimizer& opt, std::span<const Trajectory> batch,
                    std::span<const double> advantages, const PpoConfig& config, double lr) {
    if (advantages.size() != batch.size()) throw ValidationError("one advantage per trajectory expected");
    PpoStats stats;
    const auto tokens = trainable_tokens(policy, batch);
    stats.tokens = tokens.size();
    if (tokens.empty()) {
        spdlog::warn("ppo update skipped: batch has no non-guided positions");
        stats.skipped = true;
        return stats;
    }
    opt.ensure(policy);
    const std::size_t V = static_cast<std::size_t>(policy.vocab());
    const double inv_n = 1.0 / static_cast<double>(tokens.size());

    // rows touched by this batch, in first-use order
    std::vector<std::size_t> rows;
    std::map<std::size_t, std::size_t> slot_of;
    for (const auto& tk : tokens)
        if (slot_of.emplace(tk.row, rows.size()).second) rows.push_back(tk.row);

    std::vector<std::vector<double>> reference;
    if (config.kl_coeff > 0.0)
        for (std::size_t r : rows) reference.push_back(policy.probs(r));

    std::vector<std::vector<double>> probs(rows.size());
    std::vector<double> grad(rows.size() * V);
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        for (std::size_t s = 0; s < rows.size(); ++s) probs[s] = policy.probs(rows[s]);
        std::fill(grad.begin(), grad.end(), 0.0);
        double surrogate = 0.0, entropy = 0.0;
        std::size_t clipped = 0;
        for (const auto& tk : tokens) {
            const std::size_t s = slot_of[tk.row];
            const auto& p = probs[s];
            double* g = grad.data() + s * V;
            const double adv = advantages[tk.traj];
            const double ratio = std::exp(std::log(p[static_cast<std::size_t>(tk.action)]) - tk.old_logprob);
            const double unclipped = ratio * adv;
            const double obj = clipped_surrogate(ratio, adv, config.clip);
            surrogate += obj;
            // g accumulates d(loss)/d(logits) with loss = -objective
            if (unclipped <= obj) {
                for (std::size_t j = 0; j < V; ++j) g[j] += adv * ratio * p[j] * inv_n;
                g[tk.action] -= adv * ratio * inv_n;
            } else {
                ++clipped;
            }
            const double h = entropy_of(p);
            entropy += h;
            if (config.entropy_coeff > 0.0)
                for (std::size_t j = 0; j < V; ++j)
                    if (p[j] > 0.0) g[j] += config.entropy_coeff * p[j] * (std::log(p[j]) + h) * inv_n;
            if (config.kl_coeff > 0.0)
                for (std::size_t j = 0; j < V; ++j) g[j] += config.kl_coeff * (p[j] - reference[s][j]) * inv_n;
        }
        if (epoch == 0) {
            stats.surrogate = surrogate * inv_n;
            stats.entropy = entropy * inv_n;
        }
        stats.clip_fraction += static_cast<double>(clipped) * inv_n / config.epochs;

        for (std::size_t s = 0; s < rows.size(); ++s) {
            const std::size_t r = rows[s];
            const int step = ++opt.steps[r];
            const double c1 = 1.0 - std::pow(config.beta1, step);
            const double c2 = 1.0 - std::pow(config.beta2, step);
            auto z = policy.logits(r);
            for (std::size_t j = 0; j < V; ++j) {
                const std::size_t k = r * V + j;
                const double gj = grad[s * V + j];
                opt.m[k] = config.beta1 * opt.m[k] + (1.0 - config.beta1) * gj;
                opt.v[k] = config.beta2 * opt.v[k] + (1.0 - config.beta2) * gj * gj;
                z[j] -= lr * (opt.m[k] / c1) / (std::sqrt(opt.v[k] / c2) + config.eps);
                if (!std::isfinite(z[j]))
                    throw DivergenceError("policy logits became non-finite (row " + std::to_string(r) +
                                          ", lr " + std::to_string(lr) + ")");
            }
        }
    }
    return stats;
}

// --- training loop --------------------------------------------------------

std::map<Category, RoleRates> exact_role_rates(const Policy& policy, const ToyEnv& env) {
    std::map<Category, RoleRates> rates;
    std::map<Category, int> counts;
    for (std::size_t b = 0; b < env.questions.size(); ++b) {
        const auto& q = env.questions[b];
        auto& r = rates[q.category];
        const int bucket = static_cast<int>(b);
        r.factual += policy.sequence_prob(bucket, q.factual);
        r.uncertainty += policy.sequence_prob(bucket, q.uncertainty);
        r.hallucination += policy.sequence_prob(bucket, q.hallucination);
        ++counts[q.category];
    }
    for (auto& [cat, r] : rates) {
        const double n = counts[cat];
        r.factual /= n;
        r.uncertainty /= n;
        r.hallucination /= n;
        r.other = std::max(0.0, 1.0 - r.factual - r.uncertainty - r.hallucination);
    }
    return rates;
}

RlkfResult train_rlkf(const ToyEnv& env, EnvReward& reward, const PpoConfig& config, const TrainOptions& options) {
    config.validate();
    RlkfResult result;
    result.policy = options.uniform_init ? Policy::uniform(env) : Policy::from_prior(env);
    const double scale = reward.template_reward_std();
    result.reward_scale = scale > 0.0 ? scale : 1.0;

    RewardFn fn = [&](std::size_t q, std::span<const int> t) { return reward(q, t); };
    PolicyOptimizer opt;
    Baseline baseline(config.baseline_decay, config.baseline_split_guided);
    const std::size_t bs = static_cast<std::size_t>(config.batch_size);
    const std::size_t steps = (options.episodes + bs - 1) / bs;
    for (std::size_t step = 0; step < steps; ++step) {
        const std::size_t first = step * bs;
        const std::size_t count = std::min(bs, options.episodes - first);
        const auto batch = rollout(result.policy, env, fn, first, count, options.guidance, config, options.jobs);
        std::vector<double> adv(batch.size(), 0.0);
        for (std::size_t i = 0; i < batch.size(); ++i)
            if (auto b = baseline.value(batch[i].question, batch[i].guided)) adv[i] = batch[i].reward - *b;
        const double lr =
            config.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(steps)));
        const auto stats = ppo_update(result.policy, opt, batch, adv, config, lr);
        baseline.observe(batch);

        CurvePoint pt;
        pt.step = step + 1;
        pt.episodes = first + count;
        double total = 0.0;
        for (const auto& tr : batch) total += tr.reward;
        pt.mean_reward = total / static_cast<double>(batch.size()) / result.reward_scale;
        if (!std::isfinite(pt.mean_reward)) throw DivergenceError("non-finite reward at step " + std::to_string(pt.step));
        const auto rates = exact_role_rates(result.policy, env);
        auto rate = [&](Category c, double RoleRates::*field) {
            auto it = rates.find(c);
            return it == rates.end() ? std::optional<double>{} : std::optional<double>{it->second.*field};
        };
        const auto fk = rate(Category::Known, &RoleRates::factual);
        const auto uu = rate(Category::Unknown, &RoleRates::uncertainty);
        pt.factual_rate_known = fk.value_or(0.0);
        pt.uncertainty_rate_unknown = uu.value_or(0.0);
        pt.entropy = stats.entropy;
        result.curve.push_back(pt);
        if (!result.steps_to_threshold && fk.value_or(1.0) >= options.threshold) result.steps_to_threshold = pt.step;
        if (!result.steps_to_uncertainty_threshold && uu.value_or(1.0) >= options.threshold)
            result.steps_to_uncertainty_threshold = pt.step;
    }
    return result;
}

PolicyEval evaluate_policy(const Policy& policy, const ToyEnv& env, const RewardFn& reward,
                           std::size_t episodes, std::uint64_t seed, DecodeMode mode) {
    PolicyEval eval;
    eval.episodes = episodes;
    std::map<Category, std::size_t> counts;
    double total = 0.0;
    for (std::size_t e = 0; e < episodes; ++e) {
        const std::size_t qi = e % env.questions.size();
        Rng rng(derive_seed(derive_seed(seed, "evaluate"), e));
        TokenSeq tokens;
        int prev = -1;
        for (int t = 0; t < env.length; ++t) {
            const auto p = policy.probs(policy.row_index(static_cast<int>(qi), t, prev));
            const int tok = mode == DecodeMode::Greedy ? argmax_token(p) : sample_token(p, rng.uniform());
            tokens.push_back(tok);
            prev = tok;
        }
        const auto cat = env.questions[qi].category;
        auto& r = eval.rates[cat];
        ++counts[cat];
        switch (env.classify(qi, tokens).value_or(static_cast<Role>(-1))) {
            case Role::Factual: r.factual += 1; break;
            case Role::Uncertainty: r.uncertainty += 1; break;
            case Role::Hallucination: r.hallucination += 1; break;
            default: r.other += 1; break;
        }
        if (reward) total += reward(qi, tokens);
    }
    for (auto& [cat, r] : eval.rates) {
        const double n = static_cast<double>(counts[cat]);
        r.factual /= n;
        r.uncertainty /= n;
        r.hallucination /= n;
        r.other /= n;
    }
    eval.mean_reward = episodes ? total / static_cast<double>(episodes) : 0.0;
    return eval;
}

void write_learning_curve(const std::filesystem::path& path, std::span<const CurvePoint> curve) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << "step,mean_reward,factual_rate_known,uncertainty_rate_unknown,entropy\n";
    char buf[160];
    for (const auto& p : curve) {
        std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.6f\n", p.step, p.mean_reward, p.factual_rate_known,
                      p.uncertainty_rate_unknown, p.entropy);
        out << buf;
    }
}

}  // namespace dreamcatcher
