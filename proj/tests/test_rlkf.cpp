// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "dreamcatcher/error.hpp"
#include "dreamcatcher/rlkf.hpp"
#include "support.hpp"

using namespace dreamcatcher;
using testing::TempDir;

namespace {

const RewardFn kZeroReward = [](std::size_t, std::span<const int>) { return 0.0; };

/// Reward 1 for the question's preferred template, 0 otherwise.
RewardFn template_reward(const ToyEnv& env) {
    return [&env](std::size_t q, std::span<const int> t) {
        const auto& p = env.questions[q].preferred();
        return std::equal(t.begin(), t.end(), p.begin(), p.end()) ? 1.0 : 0.0;
    };
}

/// Policy that emits the given template of every question with probability 1.
Policy one_hot(const ToyEnv& env, Role role) {
    Policy p = Policy::uniform(env);
    for (std::size_t q = 0; q < env.questions.size(); ++q) {
        const auto& qq = env.questions[q];
        const TokenSeq& t = role == Role::Factual ? qq.factual : role == Role::Uncertainty ? qq.uncertainty : qq.hallucination;
        int prev = -1;
        for (int pos = 0; pos < env.length; ++pos) {
            p.logits(p.row_index(static_cast<int>(q), pos, prev))[static_cast<std::size_t>(t[pos])] = 1000.0;
            prev = t[pos];
        }
    }
    return p;
}

std::vector<double> random_advantages(Rng& rng, std::size_t n) {
    std::vector<double> a(n);
    for (auto& x : a) x = rng.normal();
    return a;
}

void check_normalized(const Policy& p) {
    for (std::size_t r = 0; r < p.rows(); ++r) {
        const auto pr = p.probs(r);
        CHECK(std::abs(std::accumulate(pr.begin(), pr.end(), 0.0) - 1.0) <= 1e-9);
    }
}

std::vector<double> smooth(const std::vector<CurvePoint>& curve, std::size_t window) {
    std::vector<double> out;
    for (std::size_t i = 0; i + window <= curve.size(); ++i) {
        double s = 0.0;
        for (std::size_t j = i; j < i + window; ++j) s += curve[j].mean_reward;
        out.push_back(s / static_cast<double>(window));
    }
    return out;
}

}  // namespace

TEST_SUITE("rlkf") {

TEST_CASE("toy environment invariants") {
    const auto env = make_toy_env({});
    CHECK(env.vocab_size() <= 64);
    CHECK(env.questions.size() == 20);
    for (std::size_t q = 0; q < env.questions.size(); ++q) {
        const auto& qq = env.questions[q];
        CHECK(qq.factual.size() == 4);
        CHECK(qq.factual != qq.hallucination);
        CHECK(qq.factual != qq.uncertainty);
        CHECK(env.classify(q, qq.factual) == Role::Factual);
        CHECK(env.classify(q, qq.hallucination) == Role::Hallucination);
        CHECK(env.classify(q, qq.uncertainty) == Role::Uncertainty);
    }
    ToyEnvConfig big;
    big.fact_pool = 40;
    big.halluc_pool = 40;
    CHECK_THROWS_AS(make_toy_env(big), ConfigError);
}

TEST_CASE("softmax stays normalized through training updates") {
    const auto env = make_toy_env({});
    Policy policy = Policy::from_prior(env);
    check_normalized(policy);
    PolicyOptimizer opt;
    PpoConfig cfg;
    const auto reward = template_reward(env);
    Rng rng(1);
    for (int step = 0; step < 5; ++step) {
        const auto batch = rollout(policy, env, reward, static_cast<std::uint64_t>(step) * 20, 20, true, cfg);
        ppo_update(policy, opt, batch, random_advantages(rng, batch.size()), cfg, cfg.lr);
        check_normalized(policy);
    }
    const std::vector<double> extreme{800.0, -800.0, 0.0};
    const auto s = softmax(extreme);
    CHECK(std::abs(s[0] + s[1] + s[2] - 1.0) <= 1e-12);
}

TEST_CASE("clipped surrogate") {
    CHECK(clipped_surrogate(1.5, 1.0, 0.2) == doctest::Approx(1.2));
    CHECK(clipped_surrogate(0.5, -1.0, 0.2) == doctest::Approx(-0.8));
    CHECK(clipped_surrogate(1.0, 0.7, 0.2) == 0.7);
    Rng rng(3);
    for (int i = 0; i < 1000; ++i) {
        const double rho = 3.0 * rng.uniform(), adv = 4.0 * rng.normal(), eps = 0.05 + 0.5 * rng.uniform();
        CHECK(clipped_surrogate(rho, adv, eps) <= (1.0 + eps) * std::abs(adv) + 1e-12);
    }
}

TEST_CASE("surrogate at ratio one is the token-weighted mean advantage") {
    const auto env = make_toy_env({});
    const Policy policy = Policy::from_prior(env);
    PpoConfig cfg;
    const auto batch = rollout(policy, env, kZeroReward, 0, 40, true, cfg);
    Rng rng(8);
    const auto adv = random_advantages(rng, batch.size());
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i)
        for (bool g : batch[i].guided_mask)
            if (!g) {
                num += adv[i];
                den += 1.0;
            }
    CHECK(surrogate_objective(policy, batch, adv, cfg.clip) == doctest::Approx(num / den).epsilon(1e-12));
}

TEST_CASE("guidance forces the preferred prefix") {
    const auto env = make_toy_env({});
    const Policy policy = Policy::from_prior(env);
    PpoConfig cfg;
    cfg.guidance_fraction = 1.0;
    cfg.guidance_length = 2;
    const auto batch = rollout(policy, env, kZeroReward, 0, 200, true, cfg);
    for (const auto& t : batch) {
        REQUIRE(t.guided);
        const auto& pref = env.questions[t.question].preferred();
        CHECK(t.tokens[0] == pref[0]);
        CHECK(t.tokens[1] == pref[1]);
        CHECK(t.guided_mask == std::vector<bool>{true, true, false, false});
        CHECK(t.trainable());
    }
    const auto off = rollout(policy, env, kZeroReward, 0, 50, false, cfg);
    for (const auto& t : off) {
        CHECK_FALSE(t.guided);
        for (bool g : t.guided_mask) CHECK_FALSE(g);
    }
}

TEST_CASE("fully guided trajectories do not influence the update") {
    const auto env = make_toy_env({});
    PpoConfig cfg;
    cfg.guidance_fraction = 0.5;
    cfg.guidance_length = env.length;
    const Policy start = Policy::from_prior(env);
    const auto batch = rollout(start, env, kZeroReward, 0, 60, true, cfg);
    Rng rng(4);
    const auto adv = random_advantages(rng, batch.size());
    auto zeroed = adv;
    std::size_t full = 0;
    for (std::size_t i = 0; i < batch.size(); ++i)
        if (!batch[i].trainable()) {
            zeroed[i] = 0.0;
            ++full;
        }
    REQUIRE(full > 0);
    REQUIRE(full < batch.size());
    Policy a = start, b = start;
    PolicyOptimizer oa, ob;
    ppo_update(a, oa, batch, adv, cfg, cfg.lr);
    ppo_update(b, ob, batch, zeroed, cfg, cfg.lr);
    CHECK(a.table() == b.table());
}

TEST_CASE("with no KL term the first step follows the clipped objective") {
    const auto env = make_toy_env({});
    PpoConfig cfg;
    cfg.epochs = 1;
    cfg.entropy_coeff = 0.0;
    cfg.kl_coeff = 0.0;
    const Policy start = Policy::from_prior(env);
    const auto batch = rollout(start, env, kZeroReward, 0, 40, false, cfg);
    Rng rng(6);
    const auto adv = random_advantages(rng, batch.size());
    Policy moved = start;
    PolicyOptimizer opt;
    ppo_update(moved, opt, batch, adv, cfg, 1e-3);

    const double h = 1e-6;
    int checked = 0;
    for (std::size_t i = 0; i < start.table().size(); ++i) {
        Policy p = start, m = start;
        p.table()[i] += h;
        m.table()[i] -= h;
        const double g = (surrogate_objective(p, batch, adv, cfg.clip) - surrogate_objective(m, batch, adv, cfg.clip)) / (2 * h);
        if (std::abs(g) < 1e-4) continue;
        ++checked;
        CHECK((moved.table()[i] - start.table()[i]) * g > 0.0);
    }
    CHECK(checked > 10);

    Policy k0 = start, k1 = start;
    PolicyOptimizer o0, o1;
    cfg.epochs = 4;
    ppo_update(k0, o0, batch, adv, cfg, cfg.lr);
    cfg.kl_coeff = 1.0;
    ppo_update(k1, o1, batch, adv, cfg, cfg.lr);
    CHECK(k0.table() != k1.table());
}

TEST_CASE("deterministic policies give identical rollouts across seeds") {
    const auto env = make_toy_env({});
    const Policy p = one_hot(env, Role::Factual);
    PpoConfig a, b;
    a.seed = 1;
    b.seed = 999;
    const auto ra = rollout(p, env, kZeroReward, 0, 40, false, a);
    const auto rb = rollout(p, env, kZeroReward, 0, 40, false, b);
    for (std::size_t i = 0; i < ra.size(); ++i) {
        CHECK(ra[i].tokens == rb[i].tokens);
        CHECK(ra[i].tokens == env.questions[ra[i].question].factual);
    }
}

TEST_CASE("rollouts do not depend on the worker count") {
    const auto env = make_toy_env({});
    const Policy p = Policy::from_prior(env);
    PpoConfig cfg;
    cfg.seed = 42;
    const auto reward = template_reward(env);
    const auto serial = rollout(p, env, reward, 100, 64, true, cfg, 1);
    const auto parallel = rollout(p, env, reward, 100, 64, true, cfg, 4);
    REQUIRE(serial.size() == parallel.size());
    for (std::size_t i = 0; i < serial.size(); ++i) {
        CHECK(serial[i].tokens == parallel[i].tokens);
        CHECK(serial[i].logprob == parallel[i].logprob);
        CHECK(serial[i].guided == parallel[i].guided);
        CHECK(serial[i].reward == parallel[i].reward);
    }
}

TEST_CASE("env reward model prefers facts on known questions") {
    const auto env = make_toy_env({});
    EmbedderConfig ec;
    Embedder emb(ec);
    const auto rm = train_env_reward_model(env, emb, env_reward_hyper(3));
    EnvReward reward(env, rm.model, emb);
    for (std::size_t q = 0; q < env.questions.size(); ++q) {
        const auto& qq = env.questions[q];
        if (qq.category == Category::Known) CHECK(reward(q, qq.factual) > reward(q, qq.hallucination));
        if (qq.category == Category::Unknown) CHECK(reward(q, qq.uncertainty) > reward(q, qq.hallucination));
    }
    CHECK(reward.template_reward_std() > 0.0);
}

TEST_CASE("uniform policy over eight tokens matches the combinatorial rate") {
    ToyEnvConfig cfg;
    cfg.fact_pool = 2;
    cfg.halluc_pool = 2;
    const auto env = make_toy_env(cfg);
    REQUIRE(env.vocab_size() == 8);
    const Policy p = Policy::uniform(env);
    const double exact = std::pow(8.0, -4.0);
    for (const auto& [cat, r] : exact_role_rates(p, env)) {
        CHECK(r.factual == doctest::Approx(exact).epsilon(1e-12));
        CHECK(r.uncertainty == doctest::Approx(exact).epsilon(1e-12));
        CHECK(r.hallucination == doctest::Approx(exact).epsilon(1e-12));
    }
    const auto ev = evaluate_policy(p, env, kZeroReward, 4000, 5, DecodeMode::Sample);
    for (const auto& [cat, r] : ev.rates) {
        CHECK(r.factual <= 0.005);
        CHECK(r.uncertainty <= 0.005);
        CHECK(r.hallucination <= 0.005);
        CHECK(r.other >= 0.985);
    }
}

TEST_CASE("policy evaluation") {
    const auto env = make_toy_env({});
    const Policy p = one_hot(env, Role::Factual);
    const auto ev = evaluate_policy(p, env, kZeroReward, 200, 1);
    for (const auto& [cat, r] : ev.rates) CHECK(r.factual == 1.0);

    const Policy prior = Policy::from_prior(env);
    const auto reward = template_reward(env);
    const auto a = evaluate_policy(prior, env, reward, 500, 9, DecodeMode::Sample);
    const auto b = evaluate_policy(prior, env, reward, 500, 9, DecodeMode::Sample);
    CHECK(a.mean_reward == b.mean_reward);
    for (const auto& [cat, r] : a.rates) {
        CHECK(r.factual == b.rates.at(cat).factual);
        CHECK(r.uncertainty == b.rates.at(cat).uncertainty);
        CHECK(r.hallucination == b.rates.at(cat).hallucination);
    }
}

TEST_CASE("training raises the smoothed reward and is reproducible") {
    const auto env = make_toy_env({});
    Embedder emb(EmbedderConfig{});
    const auto rm = train_env_reward_model(env, emb, env_reward_hyper(0));
    EnvReward reward(env, rm.model, emb);
    PpoConfig cfg;
    cfg.seed = 5;
    TrainOptions opts;
    opts.episodes = 2000;
    const auto a = train_rlkf(env, reward, cfg, opts);
    const auto s = smooth(a.curve, 10);
    REQUIRE(s.size() >= 2);
    CHECK(s.back() >= s.front() + 0.1);
    check_normalized(a.policy);

    opts.jobs = 3;
    const auto b = train_rlkf(env, reward, cfg, opts);
    CHECK(a.policy == b.policy);
    CHECK(a.steps_to_threshold == b.steps_to_threshold);
}

TEST_CASE("policy file round trip") {
    const auto env = make_toy_env({});
    const Policy p = Policy::from_prior(env);
    TempDir dir("policy");
    write_policy(dir / "p.json", p, env);
    CHECK(load_policy(dir / "p.json") == p);
}

TEST_CASE("config validation") {
    PpoConfig c;
    c.clip = 1.5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.clip = 0.2;
    c.kl_coeff = -1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

}  // TEST_SUITE
