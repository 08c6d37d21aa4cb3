// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "dreamcatcher/error.hpp"
#include "dreamcatcher/probes.hpp"
#include "dreamcatcher/synth.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace dreamcatcher;
using testing::TempDir;

namespace {

ScoreCard card(const std::string& qid, int index, double total) {
    ScoreCard c;
    c.key = {qid, GenMode::Normal, index};
    c.raw.key = c.key;
    c.total = total;
    return c;
}

/// Two Gaussian classes whose means differ by `separation` standard deviations
/// along a random unit direction.
std::vector<ProbeRow> gaussian_rows(std::uint64_t seed, int n, int dim, double separation) {
    Rng rng(seed);
    std::vector<double> u(static_cast<std::size_t>(dim));
    double norm = 0.0;
    for (auto& v : u) {
        v = rng.normal();
        norm += v * v;
    }
    for (auto& v : u) v /= std::sqrt(norm);
    std::vector<ProbeRow> rows;
    for (int i = 0; i < n; ++i) {
        ProbeRow r;
        r.question_id = "g" + std::to_string(i);
        r.label = i % 2 ? Knowledge::Known : Knowledge::Unknown;
        const double shift = (r.label == Knowledge::Known ? 0.5 : -0.5) * separation;
        for (int j = 0; j < dim; ++j) r.features.push_back(static_cast<float>(rng.normal() + shift * u[j]));
        rows.push_back(std::move(r));
    }
    return rows;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

std::vector<std::pair<std::string, Knowledge>> latent_labels(const SynthCorpus& c) {
    std::vector<std::pair<std::string, Knowledge>> out;
    for (const auto& [id, cat] : c.latent) {
        if (cat == Category::Known) out.emplace_back(id, Knowledge::Known);
        if (cat == Category::Unknown) out.emplace_back(id, Knowledge::Unknown);
    }
    return out;
}

ActivationStore store_for(const SynthCorpus& c, const SynthConfig& cfg, const TempDir& dir) {
    write_activations(dir.path() / "a.manifest.json", dir.path() / "a.bin", "synthetic", cfg.num_layers,
                      cfg.hidden_size, {kAllSites[0], kAllSites[1], kAllSites[2]}, c.activations);
    return ActivationStore::open(dir.path() / "a.manifest.json", dir.path() / "a.bin");
}

}  // namespace

TEST_SUITE("probes") {

TEST_CASE("nearest-rank percentile matches the sort-and-index rule") {
    std::vector<double> twenty;
    for (int i = 20; i >= 1; --i) twenty.push_back(i * 1.5);
    CHECK(nearest_rank_percentile(twenty, 65) == 13 * 1.5);
    CHECK(nearest_rank_percentile(twenty, 35) == 7 * 1.5);
    CHECK(nearest_rank_percentile(twenty, 0) == 1.5);
    CHECK(nearest_rank_percentile(twenty, 100) == 30.0);
    CHECK_THROWS(nearest_rank_percentile(std::vector<double>{}, 50));

    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> v(1 + rng.below(40));
        for (auto& x : v) x = static_cast<double>(rng.below(6));
        const double p = 100.0 * rng.uniform();
        CHECK(nearest_rank_percentile(v, p) == oracle::nearest_rank(v, p));
    }
}

TEST_CASE("prelabel uses strict inequalities") {
    std::vector<ScoreCard> cards;
    for (int i = 0; i < 20; ++i) cards.push_back(card("q" + std::to_string(i / 5), i % 5, i + 1));
    PrelabelConfig cfg;
    const auto r = prelabel_generations(cards, cfg);
    CHECK(r.upper_threshold == 13.0);
    CHECK(r.lower_threshold == 7.0);
    for (int i = 0; i < 20; ++i) {
        const double t = i + 1;
        const Prelabel want = t > 13 ? Prelabel::Correct : t < 7 ? Prelabel::Incorrect : Prelabel::Unlabeled;
        CHECK(r.verdicts[static_cast<std::size_t>(i)] == want);
    }

    std::vector<ScoreCard> flat;
    for (int i = 0; i < 6; ++i) flat.push_back(card("q", i, 2.0));
    for (auto v : prelabel_generations(flat, cfg).verdicts) CHECK(v == Prelabel::Unlabeled);

    CHECK_THROWS(prelabel_generations(std::vector<ScoreCard>{}, cfg));
    PrelabelConfig bad;
    bad.lower_percentile = 70;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("prelabel verdicts survive strictly increasing transforms") {
    Rng rng(9);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<ScoreCard> a, b;
        for (int i = 0; i < 25; ++i) {
            const double t = static_cast<double>(rng.below(8)) + rng.uniform() * 0.5;
            a.push_back(card("q", i, t));
            b.push_back(card("q", i, std::exp(t) * 3.0 - 1.0));
        }
        CHECK(prelabel_generations(a, {}).verdicts == prelabel_generations(b, {}).verdicts);
    }
}

TEST_CASE("question labels need unanimous verdicts") {
    using P = Prelabel;
    std::vector<ScoreCard> cards;
    std::vector<P> verdicts;
    const std::vector<std::vector<P>> patterns{
        {P::Correct, P::Correct, P::Correct, P::Correct, P::Correct},
        {P::Incorrect, P::Incorrect, P::Incorrect, P::Incorrect, P::Incorrect},
        {P::Correct, P::Correct, P::Correct, P::Correct, P::Incorrect},
        {P::Correct, P::Correct, P::Unlabeled, P::Correct, P::Correct},
    };
    for (std::size_t q = 0; q < patterns.size(); ++q)
        for (int i = 0; i < 5; ++i) {
            cards.push_back(card("q" + std::to_string(q), i, 0.0));
            verdicts.push_back(patterns[q][static_cast<std::size_t>(i)]);
        }
    const auto labels = label_questions(cards, verdicts, 5);
    REQUIRE(labels.size() == 2);
    CHECK(labels[0] == std::pair<std::string, Knowledge>{"q0", Knowledge::Known});
    CHECK(labels[1] == std::pair<std::string, Knowledge>{"q1", Knowledge::Unknown});
}

TEST_CASE("probe dataset names the question with a missing activation") {
    TempDir dir("probe-ds");
    const std::vector<ActivationRow> rows{{"a", Site::HiddenState, 0, {1.0f, 2.0f}}};
    write_activations(dir.path() / "m.json", dir.path() / "a.bin", "m", 1, 2, {Site::HiddenState}, rows);
    const auto store = ActivationStore::open(dir.path() / "m.json", dir.path() / "a.bin");
    const std::vector<std::pair<std::string, Knowledge>> ok{{"a", Knowledge::Known}};
    const auto ds = build_probe_dataset(ok, store, Site::HiddenState, 0);
    REQUIRE(ds.size() == 1);
    CHECK(ds[0].features == std::vector<float>{1.0f, 2.0f});
    const std::vector<std::pair<std::string, Knowledge>> missing{{"zz", Knowledge::Unknown}};
    try {
        build_probe_dataset(missing, store, Site::HiddenState, 0);
        FAIL("expected NotFoundError");
    } catch (const NotFoundError& e) {
        CHECK(std::string(e.what()).find("zz") != std::string::npos);
    }
}

TEST_CASE("BCE + L2 gradient matches central differences") {
    Rng rng(5);
    for (int inst = 0; inst < 10; ++inst) {
        DenseMatrix x;
        x.rows = 6 + rng.below(6);
        x.cols = 3 + rng.below(4);
        for (std::size_t i = 0; i < x.rows * x.cols; ++i) x.data.push_back(rng.normal());
        std::vector<int> y;
        for (std::size_t i = 0; i < x.rows; ++i) y.push_back(static_cast<int>(rng.below(2)));
        std::vector<double> w(x.cols);
        for (auto& v : w) v = rng.normal() * 0.5;
        const double b = rng.normal() * 0.5, l2 = 0.1 * rng.uniform();
        const auto lg = probe_loss_and_grad(w, b, x, y, l2);
        const double h = 1e-6;
        for (std::size_t j = 0; j < w.size(); ++j) {
            auto wp = w, wm = w;
            wp[j] += h;
            wm[j] -= h;
            const double fd = (probe_loss_and_grad(wp, b, x, y, l2).loss - probe_loss_and_grad(wm, b, x, y, l2).loss) / (2 * h);
            CHECK(rel_err(lg.grad_w[j], fd) < 1e-5);
        }
        const double fdb = (probe_loss_and_grad(w, b + h, x, y, l2).loss - probe_loss_and_grad(w, b - h, x, y, l2).loss) / (2 * h);
        CHECK(rel_err(lg.grad_b, fdb) < 1e-5);
    }
}

TEST_CASE("separable data is learned and shuffled labels sit at chance") {
    ProbeHyper hyper;
    const auto rows = gaussian_rows(3, 200, 8, 6.0);
    const auto res = train_probe(rows, hyper);
    CHECK(res.report.val_accuracy >= 0.95);
    CHECK(res.report.val_size > 0);

    std::vector<float> known_c(8, 0.0f), unknown_c(8, 0.0f);
    for (const auto& r : rows)
        for (int j = 0; j < 8; ++j) (r.label == Knowledge::Known ? known_c : unknown_c)[j] += r.features[j] / 100.0f;
    CHECK(probe_score(res.model, known_c) > probe_score(res.model, unknown_c));

    double mean_acc = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto shuffled = gaussian_rows(100 + seed, 400, 8, 6.0);
        Rng rng(seed);
        std::vector<Knowledge> labels;
        for (const auto& r : shuffled) labels.push_back(r.label);
        rng.shuffle(labels.begin(), labels.end());
        for (std::size_t i = 0; i < shuffled.size(); ++i) shuffled[i].label = labels[i];
        ProbeHyper h = hyper;
        h.seed = seed;
        mean_acc += train_probe(shuffled, h).report.val_accuracy / 10.0;
    }
    CHECK(mean_acc >= 0.40);
    CHECK(mean_acc <= 0.60);
}

TEST_CASE("zero epochs leaves the zero model") {
    ProbeHyper hyper;
    hyper.epochs = 0;
    const auto rows = gaussian_rows(4, 40, 5, 3.0);
    const auto res = train_probe(rows, hyper);
    for (double w : res.model.weights) CHECK(w == 0.0);
    CHECK(res.model.bias == 0.0);
    for (const auto& r : rows) CHECK(probe_score(res.model, r.features) == 0.5);
    CHECK(res.report.epochs.empty());
}

TEST_CASE("training rejects a single-class dataset and bad dimensions") {
    auto rows = gaussian_rows(6, 30, 4, 3.0);
    for (auto& r : rows) r.label = Knowledge::Known;
    CHECK_THROWS_AS(train_probe(rows, {}), ValidationError);
    const auto ok = train_probe(gaussian_rows(6, 30, 4, 3.0), {});
    CHECK_THROWS(probe_score(ok.model, std::vector<float>{1.0f, 2.0f}));
}

TEST_CASE("loss is non-increasing for a small step size") {
    ProbeHyper hyper;
    hyper.lr = 1e-3;
    hyper.epochs = 50;
    const auto res = train_probe(gaussian_rows(8, 80, 6, 2.0), hyper);
    double prev = res.report.initial_loss;
    for (const auto& e : res.report.epochs) {
        CHECK(e.loss <= prev + 1e-15);
        prev = e.loss;
    }
}

TEST_CASE("training is deterministic and standardization is reproducible") {
    const auto rows = gaussian_rows(10, 60, 5, 2.0);
    ProbeHyper hyper;
    hyper.seed = 77;
    const auto a = train_probe(rows, hyper), b = train_probe(rows, hyper);
    CHECK(a.model.weights == b.model.weights);
    CHECK(a.model.bias == b.model.bias);
    for (const auto& r : rows) {
        const auto z = a.model.standardize(r.features);
        for (std::size_t j = 0; j < z.size(); ++j)
            CHECK(z[j] == (static_cast<double>(r.features[j]) - a.model.mean[j]) / a.model.std[j]);
    }
    for (double s : a.model.std) CHECK(s > 0.0);
}

TEST_CASE("prediction at the mean with zero weights is one half") {
    ProbeModel m;
    m.weights.assign(3, 0.0);
    m.mean = {1.0, 2.0, 3.0};
    m.std = {1.0, 1.0, 1.0};
    CHECK(probe_score(m, std::vector<float>{1.0f, 2.0f, 3.0f}) == 0.5);
    m.bias = 40.0;
    CHECK(probe_score(m, std::vector<float>{1.0f, 2.0f, 3.0f}) > 0.999999);
}

TEST_CASE("grid evaluation") {
    const auto base = gaussian_rows(12, 120, 6, 4.0);
    auto noise = base;
    Rng rng(2);
    for (auto& r : noise)
        for (auto& f : r.features) f = static_cast<float>(rng.normal());
    std::map<CellKey, std::vector<ProbeRow>> cells{{{Site::HiddenState, 0}, noise},
                                                   {{Site::HiddenState, 1}, base},
                                                   {{Site::HiddenState, 2}, base},
                                                   {{Site::MlpOutput, 1}, noise}};
    const auto grid = eval_probe_grid(cells, {}, 10, 2);
    CHECK(grid.cells.size() == 4);
    CHECK(grid.best().cell == CellKey{Site::HiddenState, 1});
    const auto& c1 = grid.at({Site::HiddenState, 1});
    const auto& c2 = grid.at({Site::HiddenState, 2});
    CHECK(c1.mean_acc == doctest::Approx(c2.mean_acc).epsilon(1e-9));
    for (const auto& c : grid.cells) {
        CHECK(c.accuracies.size() == 10);
        CHECK(c.min_acc <= c.mean_acc);
        CHECK(c.mean_acc <= c.max_acc);
    }
    const auto serial = eval_probe_grid(cells, {}, 10, 1);
    for (std::size_t i = 0; i < grid.cells.size(); ++i) CHECK(grid.cells[i].accuracies == serial.cells[i].accuracies);
}

TEST_CASE("grid argmax finds the planted cell in synthetic activations") {
    SynthConfig cfg;
    cfg.seed = 21;
    const auto corpus = make_synth_corpus(cfg);
    TempDir dir("grid");
    const auto store = store_for(corpus, cfg, dir);
    const auto labels = latent_labels(corpus);
    std::map<CellKey, std::vector<ProbeRow>> cells;
    for (Site s : kAllSites)
        for (int l = 0; l < cfg.num_layers; ++l) cells[{s, l}] = build_probe_dataset(labels, store, s, l);
    const auto grid = eval_probe_grid(cells, {}, 3);
    CHECK(grid.best().cell == cfg.planted);
    CHECK(grid.best().mean_acc >= 0.95);
}

TEST_CASE("cross-fitted scores ignore the scored question's own label") {
    SynthConfig cfg;
    cfg.seed = 4;
    const auto corpus = make_synth_corpus(cfg);
    TempDir dir("xfit");
    const auto store = store_for(corpus, cfg, dir);
    auto labels = latent_labels(corpus);
    std::vector<std::string> ids;
    for (const auto& q : corpus.questions) ids.push_back(q.id);
    const auto scores = cross_fit_probe_scores(labels, ids, store, cfg.planted, {}, 2);
    CHECK(scores.size() == ids.size());
    for (const auto& [id, s] : scores) {
        CHECK(s >= 0.0);
        CHECK(s <= 1.0);
    }

    const std::string target = labels[0].first;
    labels[0].second = labels[0].second == Knowledge::Known ? Knowledge::Unknown : Knowledge::Known;
    const auto flipped = cross_fit_probe_scores(labels, ids, store, cfg.planted, {}, 2);
    CHECK(flipped.at(target) == scores.at(target));

    for (const auto& id : ids) {
        const int f = cross_fit_fold(id, 3, 99);
        CHECK(f >= 0);
        CHECK(f < 3);
    }
    CHECK_THROWS_AS(cross_fit_probe_scores(labels, ids, store, cfg.planted, {}, 1), ConfigError);
}

TEST_CASE("probe model file round trip") {
    TempDir dir("pm");
    const auto res = train_probe(gaussian_rows(13, 50, 4, 3.0), {});
    write_probe_model(dir.path() / "m.json", res.model);
    const auto back = load_probe_model(dir.path() / "m.json");
    CHECK(back.weights == res.model.weights);
    CHECK(back.bias == res.model.bias);
    CHECK(back.mean == res.model.mean);
    CHECK(back.std == res.model.std);
    CHECK(back.site == res.model.site);
    CHECK(back.layer == res.model.layer);
}

}  // TEST_SUITE
