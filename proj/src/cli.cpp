// SPDX-License-Identifier: Apache-2.0
#include "dreamcatcher/cli.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "dreamcatcher/config.hpp"
#include "dreamcatcher/error.hpp"
#include "dreamcatcher/parallel.hpp"
#include "dreamcatcher/random.hpp"
#include "dreamcatcher/synth.hpp"
#include "jsonl.hpp"

namespace dreamcatcher {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Context {
    PipelineConfig cfg;
    unsigned jobs = 1;
    std::ostream& out;

    fs::path output(const char* name) const { return cfg.paths.output / name; }
};

void write_json(const fs::path& path, const json& doc) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f << doc.dump(2) << '\n';
}

json read_json(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw ParseError(path.string(), 0, e.what());
    }
}

void ensure_output(const Context& ctx) {
    std::error_code ec;
    fs::create_directories(ctx.cfg.paths.output, ec);
    if (ec) throw IoError("cannot create " + ctx.cfg.paths.output.string() + ": " + ec.message());
}

struct Corpus {
    std::vector<Question> questions;
    std::vector<Generation> generations;
    std::vector<GoldLabel> gold;
    std::optional<ActivationStore> store;
    std::vector<QuestionGroup> groups;

    std::vector<std::string> question_ids() const {
        std::vector<std::string> ids;
        for (const auto& q : questions) ids.push_back(q.id);
        return ids;
    }
};

std::optional<ActivationStore> open_store(const PathsConfig& paths) {
    if (!fs::exists(paths.manifest())) return std::nullopt;
    return ActivationStore::open(paths.manifest(), paths.activation_bin());
}

Corpus load_corpus(const Context& ctx, bool need_store) {
    Corpus c;
    c.questions = load_questions(ctx.cfg.paths.questions());
    c.generations = load_generations(ctx.cfg.paths.generations(), ctx.cfg.k);
    if (fs::exists(ctx.cfg.paths.gold())) c.gold = load_gold(ctx.cfg.paths.gold());
    c.store = open_store(ctx.cfg.paths);
    if (need_store && !c.store) throw IoError("missing activation manifest " + ctx.cfg.paths.manifest().string());
    c.groups = group_by_question(c.questions, c.generations);
    return c;
}

// --- probes ---------------------------------------------------------------

struct ProbeLabels {
    PrelabelResult prelabel;
    std::vector<std::pair<std::string, Knowledge>> labels;
};

ProbeLabels make_probe_labels(const Context& ctx, const Corpus& corpus, Embedder& embedder) {
    const auto raw = score_corpus(corpus.groups, embedder, nullptr, ctx.jobs);
    const auto spec = fit_normalizer(raw);
    const auto cards = aggregate_scorecards(raw, spec, ctx.cfg.prelabel.enabled);
    ProbeLabels out;
    out.prelabel = prelabel_generations(cards, ctx.cfg.prelabel);
    out.labels = label_questions(cards, out.prelabel.verdicts, ctx.cfg.k);
    return out;
}

std::map<CellKey, std::vector<ProbeRow>> grid_rows(std::span<const std::pair<std::string, Knowledge>> labels,
                                                   const ActivationStore& store) {
    std::map<CellKey, std::vector<ProbeRow>> rows;
    for (Site site : store.manifest().sites)
        for (int layer = 0; layer < store.num_layers(); ++layer)
            rows[{site, layer}] = build_probe_dataset(labels, store, site, layer);
    return rows;
}

CellKey pick_cell(const Context& ctx, std::span<const std::pair<std::string, Knowledge>> labels,
                  const ActivationStore& store, std::optional<GridResult>* grid_out = nullptr) {
    if (ctx.cfg.probe.cell) return *ctx.cfg.probe.cell;
    auto grid = eval_probe_grid(grid_rows(labels, store), ctx.cfg.probe.hyper, ctx.cfg.probe.repetitions, ctx.jobs);
    const CellKey best = grid.best().cell;
    if (grid_out) *grid_out = std::move(grid);
    return best;
}

json cell_json(CellKey c) { return {{"site", to_string(c.site)}, {"layer", c.layer}}; }

/// Cross-fitted s_p per question, or nullopt when the probe scorer is off or
/// there are no activations.
std::optional<std::map<std::string, double>> probe_scores(const Context& ctx, const Corpus& corpus,
                                                          Embedder& embedder, ScorerSet& enabled) {
    if (!enabled.contains(Scorer::Probe)) return std::nullopt;
    if (!corpus.store) {
        spdlog::warn("no activations at {}; probe scorer disabled", ctx.cfg.paths.manifest().string());
        ScorerSet rest;
        for (Scorer s : kAllScorers)
            if (s != Scorer::Probe && enabled.contains(s)) rest.insert(s);
        enabled = rest;
        return std::nullopt;
    }
    const auto pl = make_probe_labels(ctx, corpus, embedder);
    const CellKey cell = pick_cell(ctx, pl.labels, *corpus.store);
    spdlog::info("probe scores from {} layer {} ({} labeled questions, {} folds)", to_string(cell.site), cell.layer,
                 pl.labels.size(), ctx.cfg.probe.cross_fit_folds);
    return cross_fit_probe_scores(pl.labels, corpus.question_ids(), *corpus.store, cell, ctx.cfg.probe.hyper,
                                  ctx.cfg.probe.cross_fit_folds);
}

// --- subcommands ----------------------------------------------------------

int cmd_validate(Context& ctx) {
    const auto questions = load_questions(ctx.cfg.paths.questions());
    const auto generations = read_generations(ctx.cfg.paths.generations());
    std::vector<GoldLabel> gold;
    if (fs::exists(ctx.cfg.paths.gold())) gold = load_gold(ctx.cfg.paths.gold());
    const auto store = open_store(ctx.cfg.paths);
    const auto report = validate_corpus(questions, generations, ctx.cfg.k, store ? &*store : nullptr, gold);
    ensure_output(ctx);
    json findings = json::array();
    for (const auto& f : report.findings) {
        findings.push_back({{"kind", f.kind}, {"message", f.message}});
        ctx.out << f.kind << ": " << f.message << '\n';
    }
    write_json(ctx.output("validation.json"),
               {{"questions", questions.size()}, {"generations", generations.size()}, {"findings", findings}});
    ctx.out << questions.size() << " questions, " << generations.size() << " generations, "
            << report.findings.size() << " findings\n";
    return report.empty() ? kExitOk : kExitValidation;
}

int cmd_embed(Context& ctx) {
    if (ctx.cfg.paths.cache.empty()) throw ConfigError("embed needs paths.cache");
    const auto questions = load_questions(ctx.cfg.paths.questions());
    const auto generations = load_generations(ctx.cfg.paths.generations(), ctx.cfg.k);
    std::vector<std::string> texts;
    std::set<std::string> seen;
    auto add = [&](const std::string& t) {
        if (seen.insert(t).second) texts.push_back(t);
    };
    for (const auto& q : questions) {
        add(q.text);
        if (q.answer) add(*q.answer);
    }
    for (const auto& g : generations) add(g.text);
    Embedder embedder(ctx.cfg.embedder);
    if (!texts.empty()) embedder.embed(texts);
    ensure_output(ctx);
    write_json(ctx.output("embed.json"), {{"texts", texts.size()},
                                          {"backend", embedder.backend_id()},
                                          {"dim", embedder.dim().value_or(0)}});
    ctx.out << "embedded " << texts.size() << " texts with " << embedder.backend_id() << " ("
            << embedder.backend_calls() << " backend calls)\n";
    return kExitOk;
}

json grid_json(const GridResult& grid) {
    json cells = json::array();
    for (const auto& c : grid.cells)
        cells.push_back({{"site", to_string(c.cell.site)},
                         {"layer", c.cell.layer},
                         {"mean_acc", c.mean_acc},
                         {"min_acc", c.min_acc},
                         {"max_acc", c.max_acc}});
    return cells;
}

int cmd_probe_train(Context& ctx) {
    const auto corpus = load_corpus(ctx, true);
    Embedder embedder(ctx.cfg.embedder);
    const auto pl = make_probe_labels(ctx, corpus, embedder);
    std::optional<GridResult> grid;
    const CellKey cell = pick_cell(ctx, pl.labels, *corpus.store, &grid);
    const auto rows = build_probe_dataset(pl.labels, *corpus.store, cell.site, cell.layer);
    const auto trained = train_probe(rows, ctx.cfg.probe.hyper, cell.site, cell.layer);
    ensure_output(ctx);
    if (grid) write_grid_csv(ctx.output("probe_grid.csv"), *grid);
    write_probe_model(ctx.output("probe_model.json"), trained.model);
    std::size_t known = 0;
    for (const auto& l : pl.labels) known += l.second == Knowledge::Known;
    jsonl::Writer w(ctx.output("probe_labels.jsonl"));
    for (const auto& [qid, k] : pl.labels) w.write({{"question_id", qid}, {"label", to_string(k)}});
    json summary{{"labeled", pl.labels.size()},
                 {"known", known},
                 {"unknown", pl.labels.size() - known},
                 {"upper_threshold", pl.prelabel.upper_threshold},
                 {"lower_threshold", pl.prelabel.lower_threshold},
                 {"cell", cell_json(cell)},
                 {"train_size", trained.report.train_size},
                 {"val_size", trained.report.val_size},
                 {"val_accuracy", trained.report.val_accuracy}};
    if (grid) summary["grid"] = grid_json(*grid);
    write_json(ctx.output("probe_train.json"), summary);
    ctx.out << "probe at " << to_string(cell.site) << " layer " << cell.layer << ": val accuracy "
            << trained.report.val_accuracy << " on " << pl.labels.size() << " labeled questions\n";
    return kExitOk;
}

int cmd_probe_eval(Context& ctx) {
    const auto corpus = load_corpus(ctx, true);
    Embedder embedder(ctx.cfg.embedder);
    const auto pl = make_probe_labels(ctx, corpus, embedder);
    const auto rows = grid_rows(pl.labels, *corpus.store);
    const auto grid = eval_probe_grid(rows, ctx.cfg.probe.hyper, ctx.cfg.probe.repetitions, ctx.jobs);
    const auto& best = grid.best();

    auto shuffled = rows.at(best.cell);
    std::vector<Knowledge> labels;
    for (const auto& r : shuffled) labels.push_back(r.label);
    Rng rng(derive_seed(ctx.cfg.seed, "probe-shuffle"));
    rng.shuffle(labels.begin(), labels.end());
    for (std::size_t i = 0; i < shuffled.size(); ++i) shuffled[i].label = labels[i];
    const auto control = eval_probe_grid({{best.cell, shuffled}}, ctx.cfg.probe.hyper, ctx.cfg.probe.repetitions, ctx.jobs);

    ensure_output(ctx);
    write_grid_csv(ctx.output("probe_grid.csv"), grid);
    json summary{{"labeled", pl.labels.size()},
                 {"best", cell_json(best.cell)},
                 {"best_accuracy", best.mean_acc},
                 {"shuffled_label_accuracy", control.cells.front().mean_acc},
                 {"grid", grid_json(grid)}};
    if (fs::exists(ctx.output("probe_model.json"))) {
        const auto model = load_probe_model(ctx.output("probe_model.json"));
        std::size_t hits = 0;
        const auto& mrows = rows.at({model.site, model.layer});
        for (const auto& r : mrows) hits += (model.predict(r.features) >= 0.5) == (r.label == Knowledge::Known);
        summary["model"] = {{"cell", cell_json({model.site, model.layer})},
                            {"in_sample_accuracy", mrows.empty() ? 0.0 : static_cast<double>(hits) / mrows.size()}};
    }
    write_json(ctx.output("probe_eval.json"), summary);
    ctx.out << "best cell " << to_string(best.cell.site) << " layer " << best.cell.layer << ": accuracy "
            << best.mean_acc << " (shuffled labels " << control.cells.front().mean_acc << ")\n";
    return kExitOk;
}

int cmd_score(Context& ctx) {
    const auto corpus = load_corpus(ctx, false);
    Embedder embedder(ctx.cfg.embedder);
    ScorerSet enabled = ctx.cfg.scorers;
    const auto probe = probe_scores(ctx, corpus, embedder, enabled);
    const auto raw = score_corpus(corpus.groups, embedder, probe ? &*probe : nullptr, ctx.jobs);
    const auto cards = aggregate_scorecards(raw, fit_normalizer(raw), enabled);
    ensure_output(ctx);
    write_scores_jsonl(ctx.output("scores.jsonl"), cards);
    ctx.out << "scored " << cards.size() << " generations\n";
    return kExitOk;
}

json agreement_json(const AgreementMetrics& m) {
    return {{"accuracy", m.accuracy},
            {"precision", m.precision},
            {"recall", m.recall},
            {"tp", m.counts.tp},
            {"fp", m.counts.fp},
            {"fn", m.counts.fn},
            {"tn", m.counts.tn}};
}

int cmd_label(Context& ctx) {
    const auto corpus = load_corpus(ctx, false);
    Embedder embedder(ctx.cfg.embedder);
    LabelingOptions options;
    options.enabled = ctx.cfg.scorers;
    options.pairs = ctx.cfg.pairs;
    options.jobs = ctx.jobs;
    const auto probe = probe_scores(ctx, corpus, embedder, options.enabled);
    const auto run = run_labeling(corpus.groups, embedder, probe ? &*probe : nullptr, options);

    ensure_output(ctx);
    write_scores_jsonl(ctx.output("scores.jsonl"), run.cards);
    write_labels_jsonl(ctx.output("labels.jsonl"), run);
    write_pairs_jsonl(ctx.output("pairs.jsonl"), run.pairs);
    {
        jsonl::Writer w(ctx.output("categories.jsonl"));
        for (const auto& [qid, cat] : run.categories) w.write({{"question_id", qid}, {"category", to_string(cat)}});
    }
    std::map<std::string, std::size_t> pairs_by_cat;
    for (const auto& p : run.pairs) ++pairs_by_cat[std::string(to_string(p.category))];
    json skipped = json::array();
    for (const auto& w : run.warnings) skipped.push_back({{"question_id", w.question_id}, {"reason", w.reason}});
    std::string model = "corpus";
    if (corpus.store) model = corpus.store->manifest().model_name;
    write_json(ctx.output("label_stats.json"), {{"model", model},
                                                {"scorers", options.enabled.names()},
                                                {"median", run.split.median},
                                                {"total", run.stats.total},
                                                {"known", run.stats.known},
                                                {"unknown", run.stats.unknown},
                                                {"mixed", run.stats.mixed},
                                                {"pairs", run.pairs.size()},
                                                {"pairs_by_category", pairs_by_cat},
                                                {"warnings", skipped}});
    if (!corpus.gold.empty()) {
        const auto agreement = evaluate_agreement(run.verdict_map(), corpus.gold, corpus.questions);
        json by_lang = json::object();
        for (const auto& [lang, m] : agreement.by_language) by_lang[lang] = agreement_json(m);
        write_json(ctx.output("agreement.json"), {{"all", agreement_json(agreement.all)}, {"by_language", by_lang}});
        ctx.out << "agreement with gold: accuracy " << agreement.all.accuracy << '\n';
    }
    ctx.out << run.stats.total << " questions: " << run.stats.known << " known, " << run.stats.unknown << " unknown, "
            << run.stats.mixed << " mixed; " << run.pairs.size() << " pairs\n";
    return kExitOk;
}

struct RmSplit {
    std::vector<PreferencePair> train, test;
};

RmSplit split_pairs(const Context& ctx, std::vector<PreferencePair> pairs) {
    RmSplit s;
    const auto seed = derive_seed(ctx.cfg.seed, "rm-split");
    for (auto& p : pairs)
        (hash_unit(p.question_id, seed) < ctx.cfg.reward.test_fraction ? s.test : s.train).push_back(std::move(p));
    return s;
}

int cmd_rm_train(Context& ctx) {
    const auto questions = load_questions(ctx.cfg.paths.questions());
    const auto split = split_pairs(ctx, load_pairs_jsonl(ctx.output("pairs.jsonl")));
    if (split.train.empty()) throw ValidationError("no training pairs in " + ctx.output("pairs.jsonl").string());
    auto train = to_reward_pairs(split.train, questions);
    const std::size_t factual = train.size();
    if (ctx.cfg.reward.general_ratio > 0.0) {
        if (!fs::exists(ctx.cfg.paths.general_pairs()))
            throw ConfigError("reward.general_ratio is " + std::to_string(ctx.cfg.reward.general_ratio) + " but " +
                              ctx.cfg.paths.general_pairs().string() + " does not exist (set it to 0 to disable)");
        const auto general = load_general_pairs(ctx.cfg.paths.general_pairs());
        train = mix_general_pairs(train, general, ctx.cfg.reward.general_ratio, ctx.cfg.reward.hyper.seed);
    }
    Embedder embedder(ctx.cfg.embedder);
    const auto batch = build_pair_features(train, embedder);
    auto init = make_reward_model(batch.front().chosen.size() / 2, embedder.backend_id(), ctx.cfg.reward.hyper.lambda);
    const auto result = train_reward_model(batch, ctx.cfg.reward.hyper, std::move(init));
    ensure_output(ctx);
    write_reward_model(ctx.output("reward_model.json"), result.model);
    write_json(ctx.output("rm_train.json"), {{"pairs", train.size()},
                                             {"factual_pairs", factual},
                                             {"general_pairs", train.size() - factual},
                                             {"held_out_pairs", split.test.size()},
                                             {"steps", result.report.steps},
                                             {"initial_loss", result.report.initial_loss},
                                             {"final_loss", result.report.final_loss},
                                             {"train_accuracy", result.report.train_accuracy},
                                             {"step_loss", result.report.step_loss}});
    ctx.out << "reward model: " << train.size() << " pairs, loss " << result.report.initial_loss << " -> "
            << result.report.final_loss << ", train accuracy " << result.report.train_accuracy << '\n';
    return kExitOk;
}

int cmd_rm_eval(Context& ctx) {
    const auto questions = load_questions(ctx.cfg.paths.questions());
    const auto model = load_reward_model(ctx.output("reward_model.json"));
    Embedder embedder(ctx.cfg.embedder);
    if (model.embedder_id != embedder.backend_id())
        throw ConfigError("reward model was trained with embedder " + model.embedder_id + ", config uses " +
                          embedder.backend_id());
    const auto split = split_pairs(ctx, load_pairs_jsonl(ctx.output("pairs.jsonl")));
    if (split.test.empty()) throw ValidationError("no held-out pairs (reward.test_fraction too small?)");
    const auto test = to_reward_pairs(split.test, questions);
    const auto report = eval_reward_model(model, build_pair_features(test, embedder));
    ensure_output(ctx);
    write_rm_eval(ctx.output("rm_eval.json"), report);
    for (const auto& [cat, a] : report.by_category)
        ctx.out << cat << ": " << a.correct << "/" << a.pairs << " = " << a.accuracy << '\n';
    ctx.out << "overall: " << report.overall.accuracy << '\n';
    return kExitOk;
}

json rates_json(const std::map<Category, RoleRates>& rates) {
    json out = json::object();
    for (const auto& [cat, r] : rates)
        out[std::string(to_string(cat))] = {{"factual", r.factual},
                                            {"uncertainty", r.uncertainty},
                                            {"hallucination", r.hallucination},
                                            {"other", r.other}};
    return out;
}

int cmd_ppo(Context& ctx) {
    const auto env = make_toy_env(ctx.cfg.ppo.env);
    Embedder embedder(ctx.cfg.embedder);
    const auto rm = train_env_reward_model(env, embedder, env_reward_hyper(derive_seed(ctx.cfg.seed, "env-reward")));
    EnvReward reward(env, rm.model, embedder);
    TrainOptions options = ctx.cfg.ppo.train;
    options.jobs = ctx.jobs;
    const auto result = train_rlkf(env, reward, ctx.cfg.ppo.config, options);
    const RewardFn fn = [&](std::size_t q, std::span<const int> t) { return reward(q, t); };
    const auto greedy = evaluate_policy(result.policy, env, fn, ctx.cfg.ppo.eval_episodes,
                                        derive_seed(ctx.cfg.seed, "ppo-eval"), DecodeMode::Greedy);
    const auto sampled = evaluate_policy(result.policy, env, fn, ctx.cfg.ppo.eval_episodes,
                                         derive_seed(ctx.cfg.seed, "ppo-eval"), DecodeMode::Sample);

    ensure_output(ctx);
    write_learning_curve(ctx.output("learning_curve.csv"), result.curve);
    write_policy(ctx.output("policy.json"), result.policy, env);
    write_reward_model(ctx.output("env_reward_model.json"), rm.model);
    auto opt = [](const std::optional<std::size_t>& v) { return v ? json(*v) : json(nullptr); };
    const auto& last = result.curve.back();
    write_json(ctx.output("ppo_summary.json"),
               {{"episodes", last.episodes},
                {"steps", last.step},
                {"guidance", options.guidance},
                {"kl_coeff", ctx.cfg.ppo.config.kl_coeff},
                {"reward_scale", result.reward_scale},
                {"env_reward_train_accuracy", rm.report.train_accuracy},
                {"factual_rate_known", last.factual_rate_known},
                {"uncertainty_rate_unknown", last.uncertainty_rate_unknown},
                {"steps_to_threshold", opt(result.steps_to_threshold)},
                {"steps_to_uncertainty_threshold", opt(result.steps_to_uncertainty_threshold)},
                {"exact_rates", rates_json(exact_role_rates(result.policy, env))},
                {"greedy_rates", rates_json(greedy.rates)},
                {"sampled_rates", rates_json(sampled.rates)},
                {"sampled_mean_reward", sampled.mean_reward}});
    ctx.out << "ppo: " << last.step << " steps; P(factual|known) " << last.factual_rate_known
            << ", P(uncertainty|unknown) " << last.uncertainty_rate_unknown << '\n';
    return kExitOk;
}

std::string pct(std::size_t part, std::size_t total) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.0f%%", total ? 100.0 * static_cast<double>(part) / static_cast<double>(total) : 0.0);
    return buf;
}

std::string fixed(double v, int digits = 3) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

int cmd_report(Context& ctx) {
    const auto stats = read_json(ctx.output("label_stats.json"));
    const auto total = stats.at("total").get<std::size_t>();
    const auto known = stats.at("known").get<std::size_t>();
    const auto unknown = stats.at("unknown").get<std::size_t>();
    const auto mixed = stats.at("mixed").get<std::size_t>();
    const auto model = stats.at("model").get<std::string>();
    json report;
    report["preference_data"] = {{"model", model},
                                 {"total", total},
                                 {"known", known},
                                 {"unknown", unknown},
                                 {"mixed", mixed},
                                 {"known_pct", pct(known, total)},
                                 {"unknown_pct", pct(unknown, total)},
                                 {"mixed_pct", pct(mixed, total)},
                                 {"pairs", stats.at("pairs")},
                                 {"pairs_by_category", stats.at("pairs_by_category")}};

    std::ostringstream md;
    md << "# DreamCatcher report\n\n## Factual preference data\n\n"
       << "| Model | Total | Known | Unknown | Mixed |\n|---|---:|---:|---:|---:|\n"
       << "| " << model << " | " << total << " | " << pct(known, total) << " | " << pct(unknown, total) << " | "
       << pct(mixed, total) << " |\n\n";
    md << "| Category | Pairs |\n|---|---:|\n";
    for (const auto& [cat, n] : stats.at("pairs_by_category").items()) md << "| " << cat << " | " << n << " |\n";
    md << "| total | " << stats.at("pairs") << " |\n";

    if (fs::exists(ctx.output("agreement.json"))) {
        const auto a = read_json(ctx.output("agreement.json"));
        report["agreement"] = a;
        md << "\n## Agreement with gold labels\n\n| Split | Accuracy | Precision | Recall |\n|---|---:|---:|---:|\n";
        auto row = [&](const std::string& name, const json& m) {
            md << "| " << name << " | " << fixed(m.at("accuracy").get<double>()) << " | "
               << fixed(m.at("precision").get<double>()) << " | " << fixed(m.at("recall").get<double>()) << " |\n";
        };
        row("all", a.at("all"));
        for (const auto& [lang, m] : a.at("by_language").items()) row(lang, m);
    }
    if (fs::exists(ctx.output("probe_eval.json"))) {
        const auto p = read_json(ctx.output("probe_eval.json"));
        report["probe"] = {{"best", p.at("best")},
                           {"best_accuracy", p.at("best_accuracy")},
                           {"shuffled_label_accuracy", p.at("shuffled_label_accuracy")}};
        md << "\n## Probe\n\nBest cell " << p.at("best").at("site").get<std::string>() << " layer "
           << p.at("best").at("layer") << ": accuracy " << fixed(p.at("best_accuracy").get<double>())
           << " (shuffled labels " << fixed(p.at("shuffled_label_accuracy").get<double>()) << ")\n";
    }
    if (fs::exists(ctx.output("rm_eval.json"))) {
        const auto r = read_json(ctx.output("rm_eval.json"));
        report["reward_model"] = r;
        md << "\n## Reward model accuracy\n\n| Category | Pairs | Accuracy |\n|---|---:|---:|\n";
        for (const auto& [cat, a] : r.at("by_category").items())
            md << "| " << cat << " | " << a.at("pairs") << " | " << fixed(a.at("accuracy").get<double>()) << " |\n";
        md << "| overall | " << r.at("overall").at("pairs") << " | "
           << fixed(r.at("overall").at("accuracy").get<double>()) << " |\n";
    }
    if (fs::exists(ctx.output("ppo_summary.json"))) {
        const auto p = read_json(ctx.output("ppo_summary.json"));
        report["rlkf"] = p;
        md << "\n## RLKF toy loop\n\n| Metric | Value |\n|---|---:|\n"
           << "| steps | " << p.at("steps") << " |\n"
           << "| P(factual \\| known) | " << fixed(p.at("factual_rate_known").get<double>()) << " |\n"
           << "| P(uncertainty \\| unknown) | " << fixed(p.at("uncertainty_rate_unknown").get<double>()) << " |\n"
           << "| steps to threshold | " << p.at("steps_to_threshold").dump() << " |\n";
    }
    ensure_output(ctx);
    write_json(ctx.output("report.json"), report);
    std::ofstream f(ctx.output("report.md"), std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + ctx.output("report.md").string());
    f << md.str();
    ctx.out << md.str();
    return kExitOk;
}

int classify_error(std::ostream& err, const std::exception& e) {
    err << "error: " << e.what() << '\n';
    if (dynamic_cast<const ParseError*>(&e) || dynamic_cast<const ValidationError*>(&e) ||
        dynamic_cast<const NotFoundError*>(&e))
        return kExitValidation;
    return kExitIoOrConfig;
}

}  // namespace

int run_command(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
    CLI::App app{"DreamCatcher factuality labeling and RLKF pipeline", "dreamcatcher"};
    app.require_subcommand(1, 1);

    std::string config_path;
    unsigned jobs = 0;
    std::optional<std::uint64_t> seed;
    std::string synth_out;
    SynthConfig synth;

    struct Spec {
        const char* name;
        const char* help;
        int (*fn)(Context&);
    };
    static constexpr Spec kCommands[] = {
        {"validate", "check corpus consistency", cmd_validate},
        {"embed", "populate the embedding cache", cmd_embed},
        {"probe-train", "pre-label questions and train the knowledge probe", cmd_probe_train},
        {"probe-eval", "per-layer probe accuracy grid", cmd_probe_eval},
        {"score", "compute factuality score cards", cmd_score},
        {"label", "median split, categories and preference pairs", cmd_label},
        {"rm-train", "train the reward model on preference pairs", cmd_rm_train},
        {"rm-eval", "per-category reward model accuracy", cmd_rm_eval},
        {"ppo", "toy RLKF loop", cmd_ppo},
        {"report", "aggregate statistics", cmd_report},
    };
    std::map<CLI::App*, int (*)(Context&)> handlers;
    for (const auto& c : kCommands) {
        auto* sub = app.add_subcommand(c.name, c.help);
        sub->add_option("--config", config_path, "pipeline config (JSON)")->required();
        sub->add_option("--jobs", jobs, "worker threads (default: all cores)");
        sub->add_option("--seed", seed, "global seed (overrides the config)");
        handlers[sub] = c.fn;
    }
    auto* synth_cmd = app.add_subcommand("synth", "write a deterministic synthetic fixture corpus");
    synth_cmd->add_option("--config", config_path, "pipeline config (k and seed)");
    synth_cmd->add_option("--seed", seed, "fixture seed");
    synth_cmd->add_option("--jobs", jobs, "ignored");
    synth_cmd->add_option("--out", synth_out, "corpus directory (default: config paths.corpus)");
    synth_cmd->add_option("--questions", synth.questions, "number of questions");
    synth_cmd->add_option("--layers", synth.num_layers, "activation layers");
    synth_cmd->add_option("--hidden", synth.hidden_size, "activation width");
    synth_cmd->add_option("--planted-layer", synth.planted.layer, "layer carrying the knowledge signal");

    std::vector<std::string> argv{"dreamcatcher"};
    argv.insert(argv.end(), args.begin(), args.end());
    std::vector<const char*> cargv;
    for (const auto& a : argv) cargv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(cargv.size()), cargv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return kExitIoOrConfig;
    }

    try {
        PipelineConfig cfg;
        if (!config_path.empty()) cfg = load_config(config_path);
        if (seed) cfg.set_seed(*seed);
        Context ctx{std::move(cfg), jobs ? jobs : default_jobs(), out};

        if (synth_cmd->parsed()) {
            synth.k = ctx.cfg.k;
            synth.seed = ctx.cfg.seed;
            const fs::path dir = !synth_out.empty() ? fs::path(synth_out)
                                 : !config_path.empty() ? ctx.cfg.paths.corpus
                                                        : fs::path("synth");
            write_synth_corpus(dir, make_synth_corpus(synth), synth);
            out << "wrote synthetic corpus (" << synth.questions << " questions, seed " << synth.seed << ") to "
                << dir.string() << '\n';
            return kExitOk;
        }
        for (const auto& [sub, fn] : handlers)
            if (sub->parsed()) return fn(ctx);
        err << app.help();
        return kExitIoOrConfig;
    } catch (const std::exception& e) {
        return classify_error(err, e);
    }
}

}  // namespace dreamcatcher
