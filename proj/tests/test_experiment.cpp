// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "memrope/experiment.hpp"

using namespace memrope;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("memrope_test_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::string validation_message(const ExperimentConfig& c) {
    try {
        c.validate();
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(Validate, DefaultsAreValid) { EXPECT_NO_THROW(ExperimentConfig{}.validate()); }

TEST(Validate, SpecificMessages) {
    ExperimentConfig c;
    c.engine.memory.alpha_long = 0.2;
    c.engine.memory.alpha_short = 0.1;
    EXPECT_NE(validation_message(c).find("alpha_long (0.2) must not exceed alpha_short (0.1)"), std::string::npos);

    c = ExperimentConfig{};
    c.engine.memory.alpha_short = 1.5;
    EXPECT_NE(validation_message(c).find("alpha_short must lie in (0, 1]"), std::string::npos);

    c = ExperimentConfig{};
    c.n_chunks = 0;
    EXPECT_NE(validation_message(c).find("chunks"), std::string::npos);

    c = ExperimentConfig{};
    c.bench = c.trace = true;
    EXPECT_FALSE(validation_message(c).empty());

    c = ExperimentConfig{};
    c.engine.layout.local_frames = 0;
    EXPECT_FALSE(validation_message(c).empty());
}

TEST(Validate, EqualAlphasAllowed) {
    ExperimentConfig c;
    c.engine.memory.alpha_long = c.engine.memory.alpha_short = 0.05;
    EXPECT_NO_THROW(c.validate());
}

TEST(Parse, EnumsAndUnknowns) {
    EXPECT_EQ(parse_rotary("1d"), RotaryMode::temporal_1d);
    EXPECT_EQ(parse_eviction("chunk"), EvictionGranularity::chunk);
    EXPECT_THROW(parse_rotary("2d"), ConfigError);
    EXPECT_THROW(parse_policy_or_throw("h2o"), ConfigError);
}

TEST(JsonConfig, OverridesApplyAndLaterWins) {
    ExperimentConfig c;
    apply_overrides(c, overrides_from_json(nlohmann::json{{"policy", "fifo"}, {"chunks", 9}, {"alpha_short", 0.3}}));
    EXPECT_EQ(c.engine.policy, PolicyId::fifo);
    EXPECT_EQ(c.n_chunks, 9);
    Overrides flags;
    flags.chunks = 4;
    apply_overrides(c, flags);
    EXPECT_EQ(c.n_chunks, 4);
    EXPECT_DOUBLE_EQ(c.engine.memory.alpha_short, 0.3);
}

TEST(JsonConfig, RejectsUnknownKeysAndBadTypes) {
    EXPECT_THROW(overrides_from_json(nlohmann::json{{"chunkz", 3}}), ConfigError);
    EXPECT_THROW(overrides_from_json(nlohmann::json{{"chunks", "many"}}), ConfigError);
    EXPECT_THROW(overrides_from_json(nlohmann::json::array()), ConfigError);
    EXPECT_THROW(load_json_file("/nonexistent/memrope.json"), ConfigError);
}

TEST(RunExperiment, ByteIdenticalOutputs) {
    ExperimentConfig c;
    c.n_chunks = 12;
    c.out_dir = scratch("a");
    run_experiment(c);
    const auto a = slurp(c.out_dir / "metrics.csv");
    c.out_dir = scratch("b");
    run_experiment(c);
    EXPECT_EQ(a, slurp(c.out_dir / "metrics.csv"));
    EXPECT_TRUE(fs::exists(c.out_dir / "summary.json"));
    EXPECT_FALSE(fs::exists(c.out_dir / "trace.json"));
}

TEST(RunExperiment, MultipleSeedsAndTrace) {
    ExperimentConfig c;
    c.n_chunks = 4;
    c.seeds = {7, 8};
    c.trace = true;
    c.out_dir = scratch("seeds");
    run_experiment(c);
    EXPECT_TRUE(fs::exists(c.out_dir / "seed_7" / "trace.json"));
    EXPECT_TRUE(fs::exists(c.out_dir / "seed_8" / "metrics.csv"));
    EXPECT_NE(slurp(c.out_dir / "seed_7" / "metrics.csv"), slurp(c.out_dir / "seed_8" / "metrics.csv"));
    const auto tr = nlohmann::json::parse(slurp(c.out_dir / "seed_7" / "trace.json"));
    EXPECT_EQ(tr.size(), 4u);
}

TEST(RunExperiment, UnwritableOutputIsIoError) {
    ExperimentConfig c;
    c.n_chunks = 2;
    c.out_dir = "/proc/memrope_forbidden";
    EXPECT_THROW(run_experiment(c), IoError);
}

TEST(Sweep, TwelveCellsInGridOrder) {
    const auto cells = run_sweep(EngineConfig{}, 6, 2);
    ASSERT_EQ(cells.size(), 12u);
    EXPECT_DOUBLE_EQ(cells.front().alpha_long, 0.001);
    EXPECT_DOUBLE_EQ(cells.front().alpha_short, 0.05);
    EXPECT_DOUBLE_EQ(cells.back().alpha_long, 0.05);
    EXPECT_DOUBLE_EQ(cells.back().alpha_short, 0.5);
    for (const auto& c : cells) {
        EXPECT_TRUE(c.completed) << c.error;
        EXPECT_LE(c.max_index, 11);
        EXPECT_EQ(c.records.size(), 6u);
    }
    EXPECT_EQ(cells[0].dir_name(), "aL_0.001_aS_0.05");
    // single-threaded run gives the same numbers
    const auto serial = run_sweep(EngineConfig{}, 6, 1);
    for (std::size_t i = 0; i < cells.size(); ++i) EXPECT_EQ(cells[i].mean_output_drift, serial[i].mean_output_drift);
}

TEST(Bench, ReportOnSyntheticTimings) {
    std::vector<StepRecord> recs(400);
    for (std::size_t i = 0; i < recs.size(); ++i) {
        recs[i].chunk = static_cast<std::int64_t>(i);
        recs[i].wall_ns = i == 0 ? 1'000'000 : 1000 + static_cast<std::int64_t>(i % 7);
    }
    const auto b = bench_report(recs);
    EXPECT_EQ(b.chunks_timed, 399u);
    EXPECT_GE(b.p50_ns, 1000.0);
    EXPECT_LE(b.p99_ns, 1006.0);
    ASSERT_TRUE(b.slope.has_value());
    EXPECT_TRUE(b.slope->ci_contains_zero());
    EXPECT_EQ(b.slope->n, 6u);
    EXPECT_TRUE(b.to_json().contains("slope_ns_per_chunk"));
}
