// SPDX-License-Identifier: Apache-2.0
#include "dreamcatcher/labeling.hpp"

#include <algorithm>
#include <unordered_map>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "dreamcatcher/error.hpp"
#include "jsonl.hpp"

namespace dreamcatcher {

using nlohmann::json;

std::string_view to_string(Category c) noexcept {
    switch (c) {
        case Category::Known: return "known";
        case Category::Unknown: return "unknown";
        case Category::Mixed: return "mixed";
    }
    return "?";
}

std::string_view to_string(Role r) noexcept {
    switch (r) {
        case Role::Factual: return "factual";
        case Role::Uncertainty: return "uncertainty";
        case Role::Hallucination: return "hallucination";
    }
    return "?";
}

Category parse_category(std::string_view s) {
    for (Category c : {Category::Known, Category::Unknown, Category::Mixed})
        if (to_string(c) == s) return c;
    throw ValidationError("unknown category '" + std::string(s) + "'");
}

Role parse_role(std::string_view s) {
    for (Role r : {Role::Factual, Role::Uncertainty, Role::Hallucination})
        if (to_string(r) == s) return r;
    throw ValidationError("unknown role '" + std::string(s) + "'");
}

MedianSplit classify_generations(std::span<const ScoreCard> cards) {
    if (cards.empty()) throw ValidationError("median split of an empty dataset");
    std::vector<double> totals;
    totals.reserve(cards.size());
    for (const auto& c : cards) totals.push_back(c.total);
    std::vector<double> sorted = totals;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    MedianSplit out;
    out.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    out.verdicts.reserve(n);
    for (double t : totals) out.verdicts.push_back(t >= out.median ? Verdict::Correct : Verdict::Incorrect);
    return out;
}

Category categorize_question(std::span<const Verdict> verdicts, int k) {
    if (static_cast<int>(verdicts.size()) != k)
        throw ValidationError("categorize_question expects " + std::to_string(k) + " verdicts, got " +
                              std::to_string(verdicts.size()));
    const auto correct = std::count(verdicts.begin(), verdicts.end(), Verdict::Correct);
    if (correct == k) return Category::Known;
    if (correct == 0) return Category::Unknown;
    return Category::Mixed;
}

Emission emit_preference_pairs(const QuestionGroup& group, Category category,
                               std::span<const ScoreCard> cards, const PairOptions& options) {
    Emission out;
    const auto& qid = group.question->id;
    auto skip = [&](std::string reason) {
        out.warnings.push_back({qid, std::move(reason)});
        return out;
    };
    if (group.uncertainty.empty()) return skip("no uncertainty response");
    if (category != Category::Unknown && group.normal.empty()) return skip("no normal generation");

    std::unordered_map<int, double> total_by_index;
    for (const auto& c : cards)
        if (c.key.question_id == qid && c.key.mode == GenMode::Normal) total_by_index[c.key.index] = c.total;

    const Generation* best = nullptr;
    const Generation* worst = nullptr;
    double best_total = 0.0, worst_total = 0.0;
    for (const auto* g : group.normal) {  // ordered by index, so ties keep the lowest index
        auto it = total_by_index.find(g->index);
        if (it == total_by_index.end()) return skip("missing score for generation " + std::to_string(g->index));
        if (!best || it->second > best_total) best = g, best_total = it->second;
        if (!worst || it->second < worst_total) worst = g, worst_total = it->second;
    }
    if (!best && category != Category::Unknown) return skip("no scored normal generation");
    if (category == Category::Unknown && !worst) return skip("no scored normal generation");
    if (category == Category::Mixed && best_total == worst_total)
        return skip("mixed question without distinct totals");

    const Generation* unc = group.uncertainty.front();
    const PairSide factual = best ? PairSide{best->text, Role::Factual, key_of(*best)} : PairSide{};
    const PairSide uncertainty{unc->text, Role::Uncertainty, key_of(*unc)};
    const PairSide hallucination = worst ? PairSide{worst->text, Role::Hallucination, key_of(*worst)} : PairSide{};

    auto emit = [&](const PairSide& chosen, const PairSide& rejected) {
        if (chosen.text == rejected.text) {
            out.warnings.push_back({qid, "identical " + std::string(to_string(chosen.role)) + "/" +
                                             std::string(to_string(rejected.role)) + " texts; pair dropped"});
            return;
        }
        out.pairs.push_back({qid, category, chosen, rejected});
    };
    switch (category) {
        case Category::Known: emit(factual, uncertainty); break;
        case Category::Unknown: emit(uncertainty, hallucination); break;
        case Category::Mixed:
            emit(factual, uncertainty);
            emit(uncertainty, hallucination);
            if (options.mixed_transitive_closure) emit(factual, hallucination);
            break;
    }
    return out;
}

AgreementMetrics AgreementMetrics::from(const Confusion& c) {
    auto ratio = [](std::size_t a, std::size_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; };
    AgreementMetrics m;
    m.counts = c;
    m.accuracy = ratio(c.tp + c.tn, c.total());
    m.precision = ratio(c.tp, c.tp + c.fp);
    m.recall = ratio(c.tp, c.tp + c.fn);
    return m;
}

AgreementReport evaluate_agreement(const std::map<GenerationKey, Verdict>& predicted,
                                   std::span<const GoldLabel> gold, std::span<const Question> questions) {
    std::unordered_map<std::string_view, std::string_view> language;
    for (const auto& q : questions) language.emplace(q.id, q.language);
    Confusion all;
    std::map<std::string, Confusion> per_lang;
    for (const auto& g : gold) {
        auto it = predicted.find(g.generation);
        if (it == predicted.end()) continue;
        const bool pred = it->second == Verdict::Correct;
        const bool truth = g.verdict == Verdict::Correct;
        auto lit = language.find(g.generation.question_id);
        auto& lang = per_lang[lit == language.end() ? std::string() : std::string(lit->second)];
        for (Confusion* c : {&all, &lang}) {
            if (pred && truth) ++c->tp;
            else if (pred) ++c->fp;
            else if (truth) ++c->fn;
            else ++c->tn;
        }
    }
    if (all.total() == 0) throw ValidationError("gold labels share no generation with the pipeline verdicts");
    AgreementReport report;
    report.all = AgreementMetrics::from(all);
    for (const auto& [lang, c] : per_lang) report.by_language.emplace(lang, AgreementMetrics::from(c));
    return report;
}

std::map<GenerationKey, Verdict> LabelingRun::verdict_map() const {
    std::map<GenerationKey, Verdict> out;
    for (std::size_t i = 0; i < cards.size(); ++i) out.emplace(cards[i].key, split.verdicts[i]);
    return out;
}

LabelingRun run_labeling(std::span<const QuestionGroup> groups, Embedder& embedder,
                         const std::map<std::string, double>* probe_scores, const LabelingOptions& options) {
    LabelingRun run;
    const auto raw = score_corpus(groups, embedder, probe_scores, options.jobs);
    run.normalizer = fit_normalizer(raw);
    run.cards = aggregate_scorecards(raw, run.normalizer, options.enabled);
    run.split = classify_generations(run.cards);

    std::size_t pos = 0;
    for (const auto& grp : groups) {
        const std::size_t k = grp.normal.size();
        std::span<const ScoreCard> cards(run.cards.data() + pos, k);
        std::span<const Verdict> verdicts(run.split.verdicts.data() + pos, k);
        pos += k;
        const Category cat = categorize_question(verdicts, static_cast<int>(k));
        run.categories.emplace_back(grp.question->id, cat);
        ++run.stats.total;
        switch (cat) {
            case Category::Known: ++run.stats.known; break;
            case Category::Unknown: ++run.stats.unknown; break;
            case Category::Mixed: ++run.stats.mixed; break;
        }
        auto emission = emit_preference_pairs(grp, cat, cards, options.pairs);
        for (auto& w : emission.warnings) {
            spdlog::warn("question {}: {}", w.question_id, w.reason);
            run.warnings.push_back(std::move(w));
        }
        for (auto& p : emission.pairs) run.pairs.push_back(std::move(p));
    }
    return run;
}

// --- files ----------------------------------------------------------------

namespace {

json scorer_values(const std::array<std::optional<double>, kNumScorers>& values) {
    json obj = json::object();
    for (Scorer s : kAllScorers)
        if (values[static_cast<std::size_t>(s)]) obj[std::string(to_string(s))] = *values[static_cast<std::size_t>(s)];
    return obj;
}

}  // namespace

void write_scores_jsonl(const std::filesystem::path& path, std::span<const ScoreCard> cards) {
    jsonl::Writer w(path);
    for (const auto& c : cards)
        w.write(json{{"question_id", c.key.question_id},
                     {"mode", to_string(c.key.mode)},
                     {"index", c.key.index},
                     {"raw", scorer_values(c.raw.values)},
                     {"normalized", scorer_values(c.normalized)},
                     {"total", c.total}});
}

void write_labels_jsonl(const std::filesystem::path& path, const LabelingRun& run) {
    std::unordered_map<std::string_view, Category> cat;
    for (const auto& [qid, c] : run.categories) cat.emplace(qid, c);
    jsonl::Writer w(path);
    for (std::size_t i = 0; i < run.cards.size(); ++i) {
        const auto& c = run.cards[i];
        w.write(json{{"question_id", c.key.question_id},
                     {"mode", to_string(c.key.mode)},
                     {"index", c.key.index},
                     {"verdict", to_string(run.split.verdicts[i])},
                     {"total", c.total},
                     {"category", to_string(cat.at(c.key.question_id))}});
    }
}

void write_pairs_jsonl(const std::filesystem::path& path, std::span<const PreferencePair> pairs) {
    jsonl::Writer w(path);
    for (const auto& p : pairs)
        w.write(json{{"question_id", p.question_id},
                     {"category", to_string(p.category)},
                     {"chosen", {{"text", p.chosen.text}, {"role", to_string(p.chosen.role)}}},
                     {"rejected", {{"text", p.rejected.text}, {"role", to_string(p.rejected.role)}}}});
}

std::vector<PreferencePair> load_pairs_jsonl(const std::filesystem::path& path) {
    std::vector<PreferencePair> out;
    jsonl::for_each_line(path, [&](const json& obj, std::size_t line) {
        PreferencePair p;
        try {
            p.question_id = jsonl::required<std::string>(obj, "question_id", path, line);
            p.category = parse_category(jsonl::required<std::string>(obj, "category", path, line));
            const auto chosen = jsonl::required<json>(obj, "chosen", path, line);
            const auto rejected = jsonl::required<json>(obj, "rejected", path, line);
            p.chosen.text = jsonl::required<std::string>(chosen, "text", path, line);
            p.chosen.role = parse_role(jsonl::required<std::string>(chosen, "role", path, line));
            p.rejected.text = jsonl::required<std::string>(rejected, "text", path, line);
            p.rejected.role = parse_role(jsonl::required<std::string>(rejected, "role", path, line));
        } catch (const ValidationError& e) {
            throw ParseError(path.string(), line, e.what());
        }
        if (role_rank(p.chosen.role) >= role_rank(p.rejected.role))
            throw ParseError(path.string(), line, "chosen role does not outrank rejected role");
        out.push_back(std::move(p));
    });
    return out;
}

}  // namespace dreamcatcher
