// SPDX-License-Identifier: Apache-2.0
#include "dreamcatcher/probes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

#include "dreamcatcher/error.hpp"
#include "dreamcatcher/parallel.hpp"
#include "dreamcatcher/random.hpp"

namespace dreamcatcher {

using nlohmann::json;

namespace {

double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

}  // namespace

// --- pre-labeling ---------------------------------------------------------

void PrelabelConfig::validate() const {
    if (!(0.0 < lower_percentile && lower_percentile < upper_percentile && upper_percentile < 100.0))
        throw ConfigError("prelabel percentiles must satisfy 0 < lower < upper < 100");
    if (enabled.empty()) throw ConfigError("prelabel needs at least one enabled scorer");
    if (k < 2) throw ConfigError("k must be >= 2");
}

double nearest_rank_percentile(std::span<const double> values, double p) {
    if (values.empty()) throw ValidationError("percentile of an empty dataset");
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const auto n = static_cast<double>(sorted.size());
    auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * n));
    rank = std::clamp<std::size_t>(rank, 1, sorted.size());
    return sorted[rank - 1];
}

PrelabelResult prelabel_generations(std::span<const ScoreCard> cards, const PrelabelConfig& config) {
    config.validate();
    if (cards.empty()) throw ValidationError("prelabel: empty dataset");
    std::vector<double> totals;
    totals.reserve(cards.size());
    for (const auto& c : cards) totals.push_back(c.total);
    PrelabelResult out;
    out.upper_threshold = nearest_rank_percentile(totals, config.upper_percentile);
    out.lower_threshold = nearest_rank_percentile(totals, config.lower_percentile);
    out.verdicts.reserve(cards.size());
    for (double t : totals) {
        if (t > out.upper_threshold) out.verdicts.push_back(Prelabel::Correct);
        else if (t < out.lower_threshold) out.verdicts.push_back(Prelabel::Incorrect);
        else out.verdicts.push_back(Prelabel::Unlabeled);
    }
    return out;
}

// --- datasets -------------------------------------------------------------

std::string_view to_string(Knowledge k) noexcept { return k == Knowledge::Known ? "known" : "unknown"; }

std::vector<std::pair<std::string, Knowledge>> label_questions(std::span<const ScoreCard> cards,
                                                               std::span<const Prelabel> verdicts,
                                                               int k) {
    if (cards.size() != verdicts.size()) throw ValidationError("cards and verdicts differ in length");
    struct Tally {
        int correct = 0, incorrect = 0, other = 0;
    };
    std::vector<std::string> order;
    std::unordered_map<std::string, Tally> tally;
    for (std::size_t i = 0; i < cards.size(); ++i) {
        if (cards[i].key.mode != GenMode::Normal) continue;
        auto [it, inserted] = tally.try_emplace(cards[i].key.question_id);
        if (inserted) order.push_back(cards[i].key.question_id);
        switch (verdicts[i]) {
            case Prelabel::Correct: ++it->second.correct; break;
            case Prelabel::Incorrect: ++it->second.incorrect; break;
            case Prelabel::Unlabeled: ++it->second.other; break;
        }
    }
    std::vector<std::pair<std::string, Knowledge>> out;
    for (const auto& id : order) {
        const auto& t = tally[id];
        if (t.correct == k && t.incorrect == 0 && t.other == 0) out.emplace_back(id, Knowledge::Known);
        else if (t.incorrect == k && t.correct == 0 && t.other == 0) out.emplace_back(id, Knowledge::Unknown);
    }
    return out;
}

std::vector<ProbeRow> build_probe_dataset(std::span<const std::pair<std::string, Knowledge>> labels,
                                          const ActivationStore& store, Site site, int layer) {
    std::vector<ProbeRow> rows;
    rows.reserve(labels.size());
    for (const auto& [qid, label] : labels) {
        if (!store.contains(qid, site, layer))
            throw NotFoundError("missing activation for labeled question '" + qid + "' at " +
                                std::string(to_string(site)) + " layer " + std::to_string(layer));
        const auto v = store.lookup(qid, site, layer);
        rows.push_back({qid, std::vector<float>(v.begin(), v.end()), label});
    }
    return rows;
}

std::vector<ProbeRow> build_probe_dataset(std::span<const ScoreCard> cards,
                                          std::span<const Prelabel> verdicts,
                                          const ActivationStore& store, Site site, int layer, int k) {
    const auto labels = label_questions(cards, verdicts, k);
    return build_probe_dataset(labels, store, site, layer);
}

// --- logistic regression --------------------------------------------------

LossAndGrad probe_loss_and_grad(std::span<const double> weights, double bias, const DenseMatrix& x,
                                std::span<const int> labels, double l2) {
    if (weights.size() != x.cols || labels.size() != x.rows)
        throw ValidationError("probe_loss_and_grad: shape mismatch");
    LossAndGrad out;
    out.grad_w.assign(x.cols, 0.0);
    if (x.rows == 0) return out;
    const double inv_n = 1.0 / static_cast<double>(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const auto row = x.row(i);
        double z = bias;
        for (std::size_t j = 0; j < x.cols; ++j) z += weights[j] * row[j];
        out.loss += softplus(z) - labels[i] * z;
        const double r = sigmoid(z) - labels[i];
        out.grad_b += r;
        for (std::size_t j = 0; j < x.cols; ++j) out.grad_w[j] += r * row[j];
    }
    out.loss *= inv_n;
    out.grad_b *= inv_n;
    double sq = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) {
        out.grad_w[j] = out.grad_w[j] * inv_n + l2 * weights[j];
        sq += weights[j] * weights[j];
    }
    out.loss += 0.5 * l2 * sq;
    return out;
}

std::vector<double> ProbeModel::standardize(std::span<const float> x) const {
    std::vector<double> out(x.size());
    for (std::size_t j = 0; j < x.size(); ++j) out[j] = (static_cast<double>(x[j]) - mean[j]) / std[j];
    return out;
}

double ProbeModel::predict(std::span<const float> x) const {
    if (x.size() != weights.size())
        throw ValidationError("probe expects dimension " + std::to_string(weights.size()) + ", got " +
                              std::to_string(x.size()));
    const auto z = standardize(x);
    double logit = bias;
    for (std::size_t j = 0; j < z.size(); ++j) logit += weights[j] * z[j];
    return sigmoid(logit);
}

double probe_score(const ProbeModel& model, std::span<const float> activation) {
    return model.predict(activation);
}

bool in_validation_split(std::string_view question_id, double val_fraction, std::uint64_t split_seed) {
    return hash_unit(question_id, split_seed) < val_fraction;
}

namespace {

double accuracy(std::span<const double> w, double b, const DenseMatrix& x, std::span<const int> y) {
    if (x.rows == 0) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < x.rows; ++i) {
        const auto row = x.row(i);
        double z = b;
        for (std::size_t j = 0; j < x.cols; ++j) z += w[j] * row[j];
        hits += static_cast<std::size_t>((z > 0.0) == (y[i] == 1));
    }
    return static_cast<double>(hits) / static_cast<double>(x.rows);
}

}  // namespace

ProbeTrainResult train_probe(std::span<const ProbeRow> rows, const ProbeHyper& hyper, Site site, int layer) {
    if (rows.empty()) throw ValidationError("train_probe: no rows");
    if (!(hyper.val_fraction >= 0.0 && hyper.val_fraction < 1.0))
        throw ConfigError("val_fraction must be in [0, 1)");
    const std::size_t dim = rows.front().features.size();
    std::vector<const ProbeRow*> train, val;
    for (const auto& r : rows) {
        if (r.features.size() != dim) throw ValidationError("probe rows differ in dimension");
        (in_validation_split(r.question_id, hyper.val_fraction, hyper.seed) ? val : train).push_back(&r);
    }
    std::size_t known = 0;
    for (const auto* r : train) known += r->label == Knowledge::Known;
    if (known < 2 || train.size() - known < 2)
        throw ValidationError("train_probe needs >= 2 training rows of each class (got " +
                              std::to_string(known) + " known, " + std::to_string(train.size() - known) +
                              " unknown)");

    ProbeModel model;
    model.site = site;
    model.layer = layer;
    model.seed = hyper.seed;
    model.weights.assign(dim, 0.0);
    model.mean.assign(dim, 0.0);
    model.std.assign(dim, 0.0);
    for (const auto* r : train)
        for (std::size_t j = 0; j < dim; ++j) model.mean[j] += r->features[j];
    for (auto& m : model.mean) m /= static_cast<double>(train.size());
    for (const auto* r : train)
        for (std::size_t j = 0; j < dim; ++j) {
            const double d = r->features[j] - model.mean[j];
            model.std[j] += d * d;
        }
    for (auto& s : model.std) s = std::max(std::sqrt(s / static_cast<double>(train.size())), 1e-6);

    auto to_matrix = [&](const std::vector<const ProbeRow*>& subset, std::vector<int>& labels) {
        DenseMatrix m;
        m.rows = subset.size();
        m.cols = dim;
        m.data.reserve(m.rows * dim);
        for (const auto* r : subset) {
            const auto z = model.standardize(r->features);
            m.data.insert(m.data.end(), z.begin(), z.end());
            labels.push_back(r->label == Knowledge::Known ? 1 : 0);
        }
        return m;
    };
    std::vector<int> ytrain, yval;
    const DenseMatrix xtrain = to_matrix(train, ytrain);
    const DenseMatrix xval = to_matrix(val, yval);

    ProbeTrainReport report;
    report.train_size = train.size();
    report.val_size = val.size();
    report.epochs.reserve(static_cast<std::size_t>(std::max(hyper.epochs, 0)));
    for (int epoch = 0;; ++epoch) {
        const auto lg = probe_loss_and_grad(model.weights, model.bias, xtrain, ytrain, hyper.l2);
        if (!std::isfinite(lg.loss)) throw DivergenceError("probe loss diverged (lr too high?)");
        if (epoch == 0) {
            report.initial_loss = lg.loss;
        } else {
            report.epochs.push_back({lg.loss, accuracy(model.weights, model.bias, xtrain, ytrain),
                                     val.empty() ? 0.0 : accuracy(model.weights, model.bias, xval, yval)});
        }
        if (epoch >= hyper.epochs) break;
        for (std::size_t j = 0; j < dim; ++j) model.weights[j] -= hyper.lr * lg.grad_w[j];
        model.bias -= hyper.lr * lg.grad_b;
    }
    report.val_accuracy = val.empty() ? accuracy(model.weights, model.bias, xtrain, ytrain)
                                      : accuracy(model.weights, model.bias, xval, yval);
    model.val_accuracy = report.val_accuracy;
    return {std::move(model), std::move(report)};
}

// --- grid -----------------------------------------------------------------

const GridCell& GridResult::best() const {
    if (cells.empty()) throw ValidationError("empty probe grid");
    const GridCell* best = &cells.front();
    for (const auto& c : cells) {
        if (c.mean_acc > best->mean_acc ||
            (c.mean_acc == best->mean_acc &&
             (c.cell.layer < best->cell.layer ||
              (c.cell.layer == best->cell.layer && c.cell.site < best->cell.site))))
            best = &c;
    }
    return *best;
}

const GridCell& GridResult::at(CellKey key) const {
    for (const auto& c : cells)
        if (c.cell == key) return c;
    throw NotFoundError("probe grid has no cell " + std::string(to_string(key.site)) + "/" +
                        std::to_string(key.layer));
}

GridResult eval_probe_grid(const std::map<CellKey, std::vector<ProbeRow>>& rows, const ProbeHyper& hyper,
                           int repetitions, unsigned jobs) {
    if (repetitions < 1) throw ConfigError("repetitions must be >= 1");
    std::vector<std::pair<CellKey, const std::vector<ProbeRow>*>> cells;
    for (const auto& [key, r] : rows) cells.emplace_back(key, &r);
    const std::size_t reps = static_cast<std::size_t>(repetitions);
    std::vector<double> acc(cells.size() * reps);
    parallel_for(acc.size(), jobs, [&](std::size_t t) {
        const std::size_t c = t / reps;
        const std::size_t r = t % reps;
        ProbeHyper h = hyper;
        h.seed = derive_seed(hyper.seed, static_cast<std::uint64_t>(r));
        acc[t] = train_probe(*cells[c].second, h, cells[c].first.site, cells[c].first.layer).report.val_accuracy;
    });
    GridResult grid;
    for (std::size_t c = 0; c < cells.size(); ++c) {
        GridCell cell;
        cell.cell = cells[c].first;
        cell.accuracies.assign(acc.begin() + static_cast<std::ptrdiff_t>(c * reps),
                               acc.begin() + static_cast<std::ptrdiff_t>((c + 1) * reps));
        double sum = 0.0;
        cell.min_acc = cell.max_acc = cell.accuracies.front();
        for (double a : cell.accuracies) {
            sum += a;
            cell.min_acc = std::min(cell.min_acc, a);
            cell.max_acc = std::max(cell.max_acc, a);
        }
        cell.mean_acc = sum / static_cast<double>(reps);
        grid.cells.push_back(std::move(cell));
    }
    return grid;
}

// --- cross-fitting --------------------------------------------------------

int cross_fit_fold(std::string_view question_id, int folds, std::uint64_t seed) {
    const int f = static_cast<int>(hash_unit(question_id, seed) * folds);
    return std::min(f, folds - 1);
}

std::map<std::string, double> cross_fit_probe_scores(
    std::span<const std::pair<std::string, Knowledge>> labels, std::span<const std::string> questions,
    const ActivationStore& store, CellKey cell, const ProbeHyper& hyper, int folds) {
    if (folds < 2) throw ConfigError("cross-fitting needs >= 2 folds");
    const std::uint64_t fold_seed = derive_seed(hyper.seed, "cross-fit");
    std::map<std::string, double> out;
    for (int f = 0; f < folds; ++f) {
        std::vector<std::pair<std::string, Knowledge>> train;
        for (const auto& l : labels)
            if (cross_fit_fold(l.first, folds, fold_seed) != f) train.push_back(l);
        ProbeHyper h = hyper;
        h.seed = derive_seed(hyper.seed, static_cast<std::uint64_t>(f));
        const auto rows = build_probe_dataset(train, store, cell.site, cell.layer);
        const auto model = train_probe(rows, h, cell.site, cell.layer).model;
        for (const auto& q : questions) {
            if (cross_fit_fold(q, folds, fold_seed) != f || !store.contains(q, cell.site, cell.layer)) continue;
            out[q] = model.predict(store.lookup(q, cell.site, cell.layer));
        }
    }
    return out;
}

// --- persistence ----------------------------------------------------------

void write_probe_model(const std::filesystem::path& path, const ProbeModel& m) {
    json doc{{"site", to_string(m.site)}, {"layer", m.layer},   {"weights", m.weights},
             {"bias", m.bias},            {"mean", m.mean},     {"std", m.std},
             {"seed", m.seed},            {"val_accuracy", m.val_accuracy}};
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << doc.dump() << '\n';
}

ProbeModel load_probe_model(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open probe model " + path.string());
    ProbeModel m;
    try {
        const auto doc = json::parse(in);
        m.site = parse_site(doc.at("site").get<std::string>());
        m.layer = doc.at("layer").get<int>();
        m.weights = doc.at("weights").get<std::vector<double>>();
        m.bias = doc.at("bias").get<double>();
        m.mean = doc.at("mean").get<std::vector<double>>();
        m.std = doc.at("std").get<std::vector<double>>();
        m.seed = doc.at("seed").get<std::uint64_t>();
        m.val_accuracy = doc.at("val_accuracy").get<double>();
    } catch (const json::exception& e) {
        throw ParseError(path.string(), 0, e.what());
    }
    if (m.mean.size() != m.weights.size() || m.std.size() != m.weights.size())
        throw ValidationError("probe model " + path.string() + " has inconsistent dimensions");
    for (double s : m.std)
        if (!(s > 0.0)) throw ValidationError("probe model " + path.string() + " has non-positive std");
    return m;
}

void write_grid_csv(const std::filesystem::path& path, const GridResult& grid) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << "site,layer,mean_acc,min_acc,max_acc\n";
    char buf[128];
    for (const auto& c : grid.cells) {
        std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f", c.mean_acc, c.min_acc, c.max_acc);
        out << to_string(c.cell.site) << ',' << c.cell.layer << ',' << buf << '\n';
    }
}

}  // namespace dreamcatcher
