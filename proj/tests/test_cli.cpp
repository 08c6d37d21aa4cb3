// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <fstream>

#include <json.hpp>

#include "dreamcatcher/cli.hpp"
#include "support.hpp"

using namespace dreamcatcher;
using testing::cli;
using testing::TempDir;
namespace fs = std::filesystem;

namespace {

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(testing::read_file(p)); }

std::size_t count_lines(const fs::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) n += !line.empty();
    return n;
}

/// Writes a small fixture and returns the path of its config.
std::string make_fixture(const TempDir& dir, const std::string& seed = "7") {
    const auto r = cli({"synth", "--seed", seed, "--out", dir.path().string(), "--questions", "60"});
    REQUIRE(r.code == kExitOk);
    return (dir / "config.json").string();
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("synth is byte-identical across runs and differs across seeds") {
    TempDir a("synth-a"), b("synth-b"), c("synth-c");
    make_fixture(a);
    make_fixture(b);
    make_fixture(c, "8");
    const auto sa = testing::snapshot(a.path());
    CHECK(sa.count("questions.jsonl") == 1);
    CHECK(sa.count("activations.bin") == 1);
    CHECK(sa == testing::snapshot(b.path()));
    CHECK(sa.at("questions.jsonl") != testing::snapshot(c.path()).at("questions.jsonl"));
}

TEST_CASE("validate passes on the fixture and fails on a corrupted copy") {
    TempDir dir("validate");
    const auto config = make_fixture(dir);
    auto r = cli({"validate", "--config", config});
    CHECK(r.code == kExitOk);
    CHECK(read_json(dir / "out" / "validation.json")["findings"].empty());

    std::ofstream(dir / "generations.jsonl", std::ios::app)
        << R"({"question_id":"ghost","mode":"normal","index":0,"text":"boo"})" << '\n';
    r = cli({"validate", "--config", config});
    CHECK(r.code == kExitValidation);
    CHECK_FALSE(read_json(dir / "out" / "validation.json")["findings"].empty());
}

TEST_CASE("label partitions the questions") {
    TempDir dir("label");
    const auto config = make_fixture(dir);
    const auto r = cli({"label", "--config", config, "--jobs", "2"});
    REQUIRE(r.code == kExitOk);
    for (const char* f : {"labels.jsonl", "pairs.jsonl", "scores.jsonl", "categories.jsonl", "agreement.json"})
        CHECK(fs::exists(dir / "out" / f));
    const auto stats = read_json(dir / "out" / "label_stats.json");
    const auto total = stats["total"].get<std::size_t>();
    CHECK(total == 60);
    CHECK(stats["known"].get<std::size_t>() + stats["unknown"].get<std::size_t>() + stats["mixed"].get<std::size_t>() ==
          total);
    CHECK(count_lines(dir / "out" / "categories.jsonl") == total);
    CHECK(count_lines(dir / "out" / "pairs.jsonl") == stats["pairs"].get<std::size_t>());
}

TEST_CASE("downstream commands produce their outputs") {
    TempDir dir("chain");
    const auto config = make_fixture(dir);
    for (const char* cmd : {"probe-train", "probe-eval", "score", "label", "rm-train", "rm-eval", "report"}) {
        const auto r = cli({cmd, "--config", config});
        INFO(cmd << ": " << r.err);
        CHECK(r.code == kExitOk);
    }
    for (const char* f : {"probe_grid.csv", "probe_model.json", "probe_eval.json", "reward_model.json", "rm_eval.json",
                          "report.json", "report.md"})
        CHECK(fs::exists(dir / "out" / f));
    const auto eval = read_json(dir / "out" / "probe_eval.json");
    CHECK(eval["best_accuracy"].get<double>() >= 0.9);
}

TEST_CASE("exit codes") {
    auto r = cli({"frobnicate"});
    CHECK(r.code == kExitIoOrConfig);
    CHECK(r.err.find("validate") != std::string::npos);

    r = cli({"label"});
    CHECK(r.code == kExitIoOrConfig);

    r = cli({"label", "--config", "/nonexistent/config.json"});
    CHECK(r.code == kExitIoOrConfig);

    TempDir dir("codes");
    testing::write_file(dir / "config.json", R"({"kk": 5})");
    r = cli({"validate", "--config", (dir / "config.json").string()});
    CHECK(r.code == kExitIoOrConfig);
    CHECK(r.err.find("kk") != std::string::npos);

    const auto config = make_fixture(dir);
    testing::write_file(dir / "questions.jsonl", "{\"id\": \n");
    r = cli({"label", "--config", config});
    CHECK(r.code == kExitValidation);
}

TEST_CASE("label, rm-train and ppo are byte-identical across runs") {
    TempDir dir("determinism");
    const auto config = make_fixture(dir);
    std::map<std::string, std::string> first;
    for (int run = 0; run < 2; ++run) {
        fs::remove_all(dir / "out");
        for (const char* cmd : {"label", "rm-train", "ppo"}) {
            const auto r = cli({cmd, "--config", config, "--jobs", run ? "3" : "1"});
            INFO(cmd << ": " << r.err);
            REQUIRE(r.code == kExitOk);
        }
        const auto snap = testing::snapshot(dir / "out");
        if (run == 0) first = snap;
        else CHECK(snap == first);
    }
    CHECK(first.count("pairs.jsonl") == 1);
    CHECK(first.count("reward_model.json") == 1);
    CHECK(first.count("learning_curve.csv") == 1);
    CHECK(first.count("policy.json") == 1);
}

}  // TEST_SUITE
