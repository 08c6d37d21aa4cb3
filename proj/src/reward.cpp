// SPDX-License-Identifier: Apache-2.0
#include "dreamcatcher/reward.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "dreamcatcher/error.hpp"
#include "dreamcatcher/parallel.hpp"
#include "dreamcatcher/random.hpp"
#include "jsonl.hpp"

namespace dreamcatcher {

using nlohmann::json;

namespace {

// log(1 + exp(x)) without overflow
double softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

// --- data -----------------------------------------------------------------

std::vector<RewardPair> to_reward_pairs(std::span<const PreferencePair> pairs,
                                        std::span<const Question> questions) {
    std::unordered_map<std::string_view, const Question*> by_id;
    for (const auto& q : questions) by_id.emplace(q.id, &q);
    std::vector<RewardPair> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) {
        auto it = by_id.find(p.question_id);
        if (it == by_id.end()) throw NotFoundError("pair references unknown question " + p.question_id);
        out.push_back({it->second->text, p.chosen.text, p.rejected.text, std::string(to_string(p.category))});
    }
    return out;
}

std::vector<RewardPair> load_general_pairs(const std::filesystem::path& path) {
    std::vector<RewardPair> out;
    jsonl::for_each_line(path, [&](const json& obj, std::size_t line) {
        out.push_back({jsonl::required<std::string>(obj, "question", path, line),
                       jsonl::required<std::string>(obj, "chosen", path, line),
                       jsonl::required<std::string>(obj, "rejected", path, line), "general"});
    });
    return out;
}

void write_general_pairs(const std::filesystem::path& path, std::span<const RewardPair> pairs) {
    jsonl::Writer w(path);
    for (const auto& p : pairs) w.write(json{{"question", p.question}, {"chosen", p.chosen}, {"rejected", p.rejected}});
}

std::vector<RewardPair> mix_general_pairs(std::span<const RewardPair> factual,
                                          std::span<const RewardPair> general, double ratio,
                                          std::uint64_t seed) {
    if (!(ratio >= 0.0) || !std::isfinite(ratio)) throw ConfigError("general pair ratio must be >= 0");
    const auto wanted = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(factual.size())));
    if (wanted > general.size())
        throw ValidationError("need " + std::to_string(wanted) + " general pairs but only " +
                              std::to_string(general.size()) + " are available");
    std::vector<std::size_t> order(general.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, "general-pairs"));
    rng.shuffle(order.begin(), order.end());
    std::vector<RewardPair> out(factual.begin(), factual.end());
    for (std::size_t i = 0; i < wanted; ++i) {
        out.push_back(general[order[i]]);
        out.back().category = "general";
    }
    return out;
}

std::vector<double> response_features(const Embedding& question, const Embedding& response) {
    if (question.dim() != response.dim())
        throw ValidationError("question and response embeddings differ in dimension");
    std::vector<double> f;
    f.reserve(question.dim() * 2);
    for (float v : question.values) f.push_back(v);
    for (float v : response.values) f.push_back(v);
    return f;
}

PairBatch build_pair_features(std::span<const RewardPair> pairs, Embedder& embedder) {
    if (pairs.empty()) return {};
    std::vector<std::string> texts;
    texts.reserve(pairs.size() * 3);
    for (const auto& p : pairs) {
        texts.push_back(p.question);
        texts.push_back(p.chosen);
        texts.push_back(p.rejected);
    }
    const auto emb = embedder.embed(texts);
    if (emb.size() != texts.size()) throw ValidationError("embedder returned the wrong number of vectors");
    PairBatch batch;
    batch.reserve(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& q = emb[3 * i];
        batch.push_back({response_features(q, emb[3 * i + 1]), response_features(q, emb[3 * i + 2]),
                         pairs[i].category});
    }
    return batch;
}

// --- model ----------------------------------------------------------------

double RewardModel::score(std::span<const double> features) const {
    if (features.size() != weights.size())
        throw ValidationError("reward features have dimension " + std::to_string(features.size()) +
                              ", model expects " + std::to_string(weights.size()));
    return dot(weights, features) + bias;
}

double RewardModel::score(Embedder& embedder, const std::string& question, const std::string& response) const {
    const std::string texts[] = {question, response};
    const auto emb = embedder.embed(texts);
    return score(response_features(emb[0], emb[1]));
}

RewardModel make_reward_model(std::size_t embed_dim, std::string embedder_id, double lambda_reg) {
    RewardModel m;
    m.weights.assign(2 * embed_dim, 0.0);
    m.embed_dim = embed_dim;
    m.embedder_id = std::move(embedder_id);
    m.lambda_reg = lambda_reg;
    return m;
}

double pairwise_loss(double r_chosen, double r_rejected, double lambda) {
    return softplus(-(r_chosen - r_rejected)) + lambda * (r_chosen * r_chosen + r_rejected * r_rejected);
}

RmLossAndGrad rm_loss_and_grad(const RewardModel& model, std::span<const PairFeatures> batch, unsigned jobs) {
    if (batch.empty()) throw ValidationError("reward loss of an empty batch");
    const std::size_t dim = model.weights.size();
    const double lambda = model.lambda_reg;

    // fixed-size chunks reduced in order, so the result does not depend on `jobs`
    constexpr std::size_t kChunk = 256;
    const std::size_t chunks = (batch.size() + kChunk - 1) / kChunk;
    std::vector<RmLossAndGrad> partial(chunks);
    parallel_for(chunks, jobs, [&](std::size_t c) {
        auto& acc = partial[c];
        acc.grad_w.assign(dim, 0.0);
        const std::size_t end = std::min(batch.size(), (c + 1) * kChunk);
        for (std::size_t i = c * kChunk; i < end; ++i) {
            const auto& p = batch[i];
            const double rc = model.score(p.chosen);
            const double rr = model.score(p.rejected);
            acc.loss += pairwise_loss(rc, rr, lambda);
            const double s = sigmoid(-(rc - rr));
            const double gc = -s + 2.0 * lambda * rc;
            const double gr = s + 2.0 * lambda * rr;
            for (std::size_t j = 0; j < dim; ++j) acc.grad_w[j] += gc * p.chosen[j] + gr * p.rejected[j];
            acc.grad_b += gc + gr;
        }
    });

    RmLossAndGrad out;
    out.grad_w.assign(dim, 0.0);
    for (const auto& acc : partial) {
        out.loss += acc.loss;
        out.grad_b += acc.grad_b;
        for (std::size_t j = 0; j < dim; ++j) out.grad_w[j] += acc.grad_w[j];
    }
    const double n = static_cast<double>(batch.size());
    out.loss /= n;
    out.grad_b /= n;
    for (auto& g : out.grad_w) g /= n;
    return out;
}

// --- training -------------------------------------------------------------

double rm_learning_rate(const RewardHyper& hyper, std::size_t step, std::size_t total) {
    if (total == 0) return 0.0;
    const auto warmup = static_cast<std::size_t>(std::ceil(hyper.warmup_fraction * static_cast<double>(total)));
    if (step < warmup) return hyper.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const double remaining = static_cast<double>(total - step);
    return hyper.lr * remaining / static_cast<double>(total - warmup);
}

RmTrainResult train_reward_model(const PairBatch& batch, const RewardHyper& hyper, RewardModel model) {
    if (batch.empty()) throw ValidationError("reward model training needs at least one pair");
    if (hyper.epochs < 0) throw ConfigError("reward epochs must be >= 0");
    for (const auto& p : batch)
        if (p.chosen.size() != model.weights.size() || p.rejected.size() != model.weights.size())
            throw ValidationError("pair features do not match the reward model dimension");
    model.lambda_reg = hyper.lambda;

    RmTrainResult result;
    auto& report = result.report;
    report.initial_loss = rm_loss_and_grad(model, batch).loss;

    const std::size_t n = batch.size();
    const std::size_t bs = hyper.batch_size == 0 ? n : std::min(hyper.batch_size, n);
    const std::size_t per_epoch = (n + bs - 1) / bs;
    const std::size_t total = per_epoch * static_cast<std::size_t>(hyper.epochs);

    const std::size_t dim = model.weights.size();
    std::vector<double> m(dim, 0.0), v(dim, 0.0);
    double mb = 0.0, vb = 0.0;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(hyper.seed, "rm-shuffle"));
    PairBatch mini;
    std::size_t step = 0;
    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        for (std::size_t start = 0; start < n; start += bs) {
            mini.clear();
            for (std::size_t i = start; i < std::min(n, start + bs); ++i) mini.push_back(batch[order[i]]);
            const auto lg = rm_loss_and_grad(model, mini);
            if (!std::isfinite(lg.loss))
                throw DivergenceError("reward loss became non-finite at step " + std::to_string(step) +
                                      " (lr " + std::to_string(hyper.lr) + " may be too high)");
            report.step_loss.push_back(lg.loss);
            const double lr = rm_learning_rate(hyper, step, total);
            ++step;
            const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(step));
            const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(step));
            auto adam = [&](double& w, double& mm, double& vv, double g) {
                mm = hyper.beta1 * mm + (1.0 - hyper.beta1) * g;
                vv = hyper.beta2 * vv + (1.0 - hyper.beta2) * g * g;
                w -= lr * (mm / c1) / (std::sqrt(vv / c2) + hyper.eps);
            };
            for (std::size_t j = 0; j < dim; ++j) adam(model.weights[j], m[j], v[j], lg.grad_w[j]);
            adam(model.bias, mb, vb, lg.grad_b);
        }
    }
    report.steps = step;
    report.final_loss = rm_loss_and_grad(model, batch).loss;
    if (!std::isfinite(report.final_loss)) throw DivergenceError("reward loss is non-finite after training");
    report.train_accuracy = eval_reward_model(model, batch).overall.accuracy;
    result.model = std::move(model);
    return result;
}

// --- evaluation -----------------------------------------------------------

double pairwise_accuracy(std::span<const double> chosen, std::span<const double> rejected) {
    if (chosen.size() != rejected.size()) throw ValidationError("pairwise accuracy of unequal lengths");
    if (chosen.empty()) return 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < chosen.size(); ++i) correct += chosen[i] > rejected[i];
    return static_cast<double>(correct) / static_cast<double>(chosen.size());
}

RmEvalReport eval_reward_model(const RewardModel& model, std::span<const PairFeatures> pairs) {
    RmEvalReport report;
    for (const auto& p : pairs) {
        const bool ok = model.score(p.chosen) > model.score(p.rejected);
        for (auto* acc : {&report.overall, &report.by_category[p.category]}) {
            ++acc->pairs;
            acc->correct += ok;
        }
    }
    auto finish = [](CategoryAccuracy& a) {
        a.accuracy = a.pairs ? static_cast<double>(a.correct) / static_cast<double>(a.pairs) : 0.0;
    };
    finish(report.overall);
    for (auto& [_, acc] : report.by_category) finish(acc);
    return report;
}

// --- files ----------------------------------------------------------------

void write_reward_model(const std::filesystem::path& path, const RewardModel& m) {
    json doc{{"weights", m.weights},
             {"bias", m.bias},
             {"feature_spec", {{"embedder", m.embedder_id}, {"embed_dim", m.embed_dim}, {"layout", "question+response"}}},
             {"lambda_reg", m.lambda_reg}};
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << doc.dump() << '\n';
}

RewardModel load_reward_model(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open reward model " + path.string());
    RewardModel m;
    try {
        const auto doc = json::parse(in);
        m.weights = doc.at("weights").get<std::vector<double>>();
        m.bias = doc.at("bias").get<double>();
        const auto& spec = doc.at("feature_spec");
        m.embedder_id = spec.at("embedder").get<std::string>();
        m.embed_dim = spec.at("embed_dim").get<std::size_t>();
        m.lambda_reg = doc.at("lambda_reg").get<double>();
    } catch (const json::exception& e) {
        throw ParseError(path.string(), 0, e.what());
    }
    if (m.weights.size() != 2 * m.embed_dim)
        throw ValidationError("reward model " + path.string() + " has " + std::to_string(m.weights.size()) +
                              " weights for embed_dim " + std::to_string(m.embed_dim));
    return m;
}

void write_rm_eval(const std::filesystem::path& path, const RmEvalReport& report) {
    auto entry = [](const CategoryAccuracy& a) {
        return json{{"pairs", a.pairs}, {"correct", a.correct}, {"accuracy", a.accuracy}};
    };
    json by_cat = json::object();
    for (const auto& [cat, acc] : report.by_category) by_cat[cat] = entry(acc);
    json doc{{"by_category", by_cat}, {"overall", entry(report.overall)}};
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << doc.dump(2) << '\n';
}

}  // namespace dreamcatcher
