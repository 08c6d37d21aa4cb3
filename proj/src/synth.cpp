// SPDX-License-Identifier: Apache-2.0
#include "dreamcatcher/synth.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "dreamcatcher/error.hpp"
#include "dreamcatcher/random.hpp"
#include "utf8.hpp"

namespace dreamcatcher {

namespace {

constexpr const char* kAttrEn[] = {"capital", "author", "inventor", "founder", "birthplace", "language"};
constexpr const char* kAttrZh[] = {"首都", "作者", "发明者", "创始人", "出生地", "语言"};
// Correct and wrong answers draw from disjoint pools so that a response-only
// scorer can tell them apart, as in the toy RLKF env.
constexpr const char* kHanziTrue = "山川河海天地日月星云风雨雪花草木林石金银铜铁王李张刘陈杨黄赵吴周";
constexpr const char* kHanziFalse = "徐孙马朱胡郭何高罗郑梁谢宋唐许韩冯邓曹彭曾肖田董袁潘于蒋蔡余杜";
constexpr const char* kConsTrue = "bdgklt";
constexpr const char* kConsFalse = "fmnprsvz";

std::string pick(Rng& rng, std::span<const char* const> xs) { return xs[rng.below(xs.size())]; }

std::string latin_word(Rng& rng, std::string_view cons = kConsTrue) {
    static constexpr std::string_view kVow = "aeiou";
    const int syllables = 2 + static_cast<int>(rng.below(2));
    std::string w;
    for (int i = 0; i < syllables; ++i) {
        w += cons[rng.below(cons.size())];
        w += kVow[rng.below(kVow.size())];
    }
    w[0] = static_cast<char>(w[0] - 'a' + 'A');
    return w;
}

std::string latin_name(Rng& rng, bool wrong) {
    const std::string_view cons = wrong ? kConsFalse : kConsTrue;
    return latin_word(rng, cons) + " " + latin_word(rng, cons);
}

std::string hanzi_word(Rng& rng, int len, bool wrong = false) {
    static const auto good = utf8::decode(kHanziTrue);
    static const auto bad = utf8::decode(kHanziFalse);
    const auto& chars = wrong ? bad : good;
    std::string w;
    for (int i = 0; i < len; ++i) w += chars[rng.below(chars.size())].bytes;
    return w;
}

std::string answer_text(Rng& rng, bool zh, const std::string& answer) {
    if (zh) {
        static constexpr const char* kForms[] = {"答案是%s。", "%s。", "应该是%s。", "是%s。"};
        std::string f = pick(rng, kForms);
        return f.replace(f.find("%s"), 2, answer);
    }
    static constexpr const char* kForms[] = {"The answer is %s.", "%s.", "It is %s.", "I believe it is %s."};
    std::string f = pick(rng, kForms);
    return f.replace(f.find("%s"), 2, answer);
}

std::string uncertainty_text(Rng& rng, bool zh) {
    static constexpr const char* kZh[] = {"我不确定这个问题的答案。", "我不知道。", "抱歉，我不清楚。"};
    static constexpr const char* kEn[] = {"I am not sure about this.", "I do not know the answer to that question.",
                                          "Sorry, I am not certain."};
    return zh ? pick(rng, kZh) : pick(rng, kEn);
}

}  // namespace

void SynthConfig::validate() const {
    if (questions < 1) throw ConfigError("synth: questions must be >= 1");
    if (k < 2) throw ConfigError("synth: k must be >= 2");
    if (num_layers < 1 || hidden_size < 1) throw ConfigError("synth: layers and hidden size must be >= 1");
    if (known_fraction < 0.0 || unknown_fraction < 0.0 || known_fraction + unknown_fraction > 1.0)
        throw ConfigError("synth: category fractions must be non-negative and sum to <= 1");
    if (planted.layer < 0 || planted.layer >= num_layers) throw ConfigError("synth: planted layer out of range");
    if (general_pairs < 0) throw ConfigError("synth: general_pairs must be >= 0");
}

SynthCorpus make_synth_corpus(const SynthConfig& config) {
    config.validate();
    SynthCorpus out;
    Rng text_rng(derive_seed(config.seed, "synth-text"));
    for (int i = 0; i < config.questions; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "syn-%04d", i);
        const bool zh = text_rng.uniform() < config.zh_fraction;
        const double u = text_rng.uniform();
        const Category cat = u < config.known_fraction                             ? Category::Known
                             : u < config.known_fraction + config.unknown_fraction ? Category::Unknown
                                                                                   : Category::Mixed;
        const std::size_t attr = text_rng.below(std::size(kAttrEn));
        Question q;
        q.id = id;
        q.language = zh ? "zh" : "en";
        q.qtype = kAttrEn[attr];
        if (zh) {
            q.text = hanzi_word(text_rng, 2) + "的" + kAttrZh[attr] + "是什么？";
            q.answer = hanzi_word(text_rng, 3);
        } else {
            q.text = "What is the " + std::string(kAttrEn[attr]) + " of " + latin_word(text_rng) + "?";
            q.answer = latin_name(text_rng, false);
        }

        std::vector<bool> correct(static_cast<std::size_t>(config.k), cat == Category::Known);
        if (cat == Category::Mixed) {
            const auto n = 1 + text_rng.below(static_cast<std::uint64_t>(config.k - 1));
            for (std::uint64_t j = 0; j < n; ++j) correct[j] = true;
            text_rng.shuffle(correct.begin(), correct.end());
        }
        const bool has_gold = text_rng.uniform() < config.gold_fraction;
        for (int j = 0; j < config.k; ++j) {
            const bool ok = correct[static_cast<std::size_t>(j)];
            std::string answer = *q.answer;
            if (!ok) {
                do {
                    answer = zh ? hanzi_word(text_rng, 3, true) : latin_name(text_rng, true);
                } while (answer == *q.answer);
            }
            out.generations.push_back({q.id, GenMode::Normal, j, answer_text(text_rng, zh, answer)});
            if (has_gold)
                out.gold.push_back({{q.id, GenMode::Normal, j}, ok ? Verdict::Correct : Verdict::Incorrect});
        }
        out.generations.push_back({q.id, GenMode::Uncertainty, 0, uncertainty_text(text_rng, zh)});
        out.latent.emplace_back(q.id, cat);
        out.questions.push_back(std::move(q));
    }

    Rng act_rng(derive_seed(config.seed, "synth-activations"));
    const auto dim = static_cast<std::size_t>(config.hidden_size);
    std::vector<double> direction(dim);
    double norm = 0.0;
    for (auto& d : direction) {
        d = act_rng.normal();
        norm += d * d;
    }
    for (auto& d : direction) d /= std::sqrt(norm);
    for (const auto& [qid, cat] : out.latent) {
        const double sign = cat == Category::Known ? 1.0 : cat == Category::Unknown ? -1.0 : 0.0;
        for (Site site : kAllSites) {
            for (int layer = 0; layer < config.num_layers; ++layer) {
                double strength = 0.0;
                if (site == config.planted.site)
                    strength = config.signal * std::pow(config.layer_decay, std::abs(layer - config.planted.layer));
                ActivationRow row{qid, site, layer, std::vector<float>(dim)};
                for (std::size_t d = 0; d < dim; ++d)
                    row.values[d] = static_cast<float>(act_rng.normal() + sign * strength * direction[d]);
                out.activations.push_back(std::move(row));
            }
        }
    }

    Rng gen_rng(derive_seed(config.seed, "synth-general"));
    static constexpr const char* kTopics[] = {"the weather", "a meeting", "a birthday", "a book", "the holidays"};
    for (int i = 0; i < config.general_pairs; ++i) {
        const std::string name = latin_word(gen_rng);
        const std::string topic = pick(gen_rng, kTopics);
        out.general.push_back({"Write a short note to " + name + " about " + topic + ".",
                               "Dear " + name + ", here is a short note about " + topic + ". Best wishes.",
                               gen_rng.uniform() < 0.5 ? "No." : "I will not write that.", "general"});
    }
    return out;
}

void write_synth_corpus(const std::filesystem::path& dir, const SynthCorpus& corpus, const SynthConfig& config) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    write_questions(dir / "questions.jsonl", corpus.questions);
    write_generations(dir / "generations.jsonl", corpus.generations);
    write_gold(dir / "gold.jsonl", corpus.gold);
    write_activations(dir / "activations.manifest.json", dir / "activations.bin", "synthetic", config.num_layers,
                      config.hidden_size, {std::begin(kAllSites), std::end(kAllSites)}, corpus.activations);
    if (!corpus.general.empty()) write_general_pairs(dir / "general_pairs.jsonl", corpus.general);
    // The fixture yields ~100 training pairs, so one epoch is only a handful of steps.
    const nlohmann::json cfg = {{"paths", {{"corpus", "."}, {"output", "out"}, {"cache", "cache"}}},
                                {"k", config.k},
                                {"seed", config.seed},
                                {"reward", {{"epochs", 30}, {"lr", 0.05}}}};
    std::ofstream f(dir / "config.json", std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + (dir / "config.json").string());
    f << cfg.dump(2) << '\n';
}

}  // namespace dreamcatcher
