// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "memrope/metrics.hpp"

namespace memrope {

inline constexpr const char* kVersion = "memrope 0.1.0";

/// Rejected experiment configuration. The CLI maps this to exit status 2.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Output could not be written. The CLI maps this to exit status 3.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
    EngineConfig engine;
    std::int64_t n_chunks = 200;
    std::vector<std::uint64_t> seeds{7};
    bool trace = false;
    bool bench = false;
    bool sweep_ema = false;
    std::filesystem::path out_dir = "memrope_out";

    void validate() const {
        if (n_chunks < 1) throw ConfigError("chunks must be at least 1");
        if (seeds.empty()) throw ConfigError("at least one seed is required");
        const auto& m = engine.memory;
        if (!(m.alpha_long > 0.0 && m.alpha_long <= 1.0))
            throw ConfigError("alpha_long must lie in (0, 1], got " + format_real(m.alpha_long));
        if (!(m.alpha_short > 0.0 && m.alpha_short <= 1.0))
            throw ConfigError("alpha_short must lie in (0, 1], got " + format_real(m.alpha_short));
        if (m.alpha_long > m.alpha_short)
            throw ConfigError("alpha_long (" + format_real(m.alpha_long) + ") must not exceed alpha_short (" +
                              format_real(m.alpha_short) + "): the long-term memory must decay no faster than the short-term one");
        if (bench && trace) throw ConfigError("--bench requires tracing to be disabled");
        if (bench && sweep_ema) throw ConfigError("--bench and --sweep cannot be combined");
        try {
            engine.validate();
            (void)engine.rotary();
        } catch (const std::exception& e) {
            throw ConfigError(e.what());
        }
    }
};

// ---------------------------------------------------------------------------
// JSON config and overrides
// ---------------------------------------------------------------------------

inline RotaryMode parse_rotary(const std::string& s) {
    if (s == "1d") return RotaryMode::temporal_1d;
    if (s == "3d") return RotaryMode::spatiotemporal_3d;
    throw ConfigError("rotary must be 1d or 3d, got '" + s + "'");
}

inline EvictionGranularity parse_eviction(const std::string& s) {
    if (s == "frame") return EvictionGranularity::frame;
    if (s == "chunk") return EvictionGranularity::chunk;
    throw ConfigError("eviction must be frame or chunk, got '" + s + "'");
}

inline PolicyId parse_policy_or_throw(const std::string& s) {
    if (auto p = parse_policy(s)) return *p;
    throw ConfigError("unknown policy '" + s + "'");
}

/// Explicitly given settings; unset fields leave the config untouched.
struct Overrides {
    std::optional<std::string> policy;
    std::optional<std::int64_t> chunks;
    std::optional<std::size_t> sink, mem, local, frames_per_chunk;
    std::optional<double> alpha_long, alpha_short;
    std::optional<std::string> eviction, rotary;
    std::optional<std::vector<std::uint64_t>> seeds;
    std::optional<bool> trace, bench, sweep_ema;
    std::optional<std::string> out;
};

inline void apply_overrides(ExperimentConfig& cfg, const Overrides& o) {
    auto& e = cfg.engine;
    if (o.policy) e.policy = parse_policy_or_throw(*o.policy);
    if (o.chunks) cfg.n_chunks = *o.chunks;
    if (o.sink) e.layout.sink_frames = *o.sink;
    if (o.mem) e.layout.mem_tokens = *o.mem;
    if (o.local) e.layout.local_frames = *o.local;
    if (o.frames_per_chunk) e.layout.frames_per_chunk = *o.frames_per_chunk;
    if (o.alpha_long) e.memory.alpha_long = *o.alpha_long;
    if (o.alpha_short) e.memory.alpha_short = *o.alpha_short;
    if (o.eviction) e.memory.granularity = parse_eviction(*o.eviction);
    if (o.rotary) e.rotary_mode = parse_rotary(*o.rotary);
    if (o.seeds) cfg.seeds = *o.seeds;
    if (o.trace) cfg.trace = *o.trace;
    if (o.bench) cfg.bench = *o.bench;
    if (o.sweep_ema) cfg.sweep_ema = *o.sweep_ema;
    if (o.out) cfg.out_dir = *o.out;
}

/// Reads the keys of a JSON config file into Overrides. Unknown keys are errors.
inline Overrides overrides_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
    Overrides o;
    try {
        for (const auto& [key, val] : j.items()) {
            if (key == "policy") o.policy = val.get<std::string>();
            else if (key == "chunks") o.chunks = val.get<std::int64_t>();
            else if (key == "sink") o.sink = val.get<std::size_t>();
            else if (key == "mem") o.mem = val.get<std::size_t>();
            else if (key == "local") o.local = val.get<std::size_t>();
            else if (key == "frames_per_chunk") o.frames_per_chunk = val.get<std::size_t>();
            else if (key == "alpha_long") o.alpha_long = val.get<double>();
            else if (key == "alpha_short") o.alpha_short = val.get<double>();
            else if (key == "eviction") o.eviction = val.get<std::string>();
            else if (key == "rotary") o.rotary = val.get<std::string>();
            else if (key == "seed") o.seeds = std::vector<std::uint64_t>{val.get<std::uint64_t>()};
            else if (key == "seeds") o.seeds = val.get<std::vector<std::uint64_t>>();
            else if (key == "trace") o.trace = val.get<bool>();
            else if (key == "bench") o.bench = val.get<bool>();
            else if (key == "sweep") {
                if (val.get<std::string>() != "ema") throw ConfigError("sweep must be 'ema'");
                o.sweep_ema = true;
            } else if (key == "out") o.out = val.get<std::string>();
            else throw ConfigError("unknown config key '" + key + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config file: ") + e.what());
    }
    return o;
}

inline nlohmann::json load_json_file(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw ConfigError("cannot read config file " + p.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + p.string() + " is not valid JSON: " + e.what());
    }
}

inline nlohmann::json config_to_json(const ExperimentConfig& cfg) {
    const auto& e = cfg.engine;
    nlohmann::json j;
    j["policy"] = policy_name(e.policy);
    j["chunks"] = cfg.n_chunks;
    j["sink"] = e.layout.sink_frames;
    j["mem"] = e.layout.mem_tokens;
    j["local"] = e.layout.local_frames;
    j["frames_per_chunk"] = e.layout.frames_per_chunk;
    j["grid"] = {e.layout.grid_h, e.layout.grid_w};
    j["alpha_long"] = e.memory.alpha_long;
    j["alpha_short"] = e.memory.alpha_short;
    j["eviction"] = e.memory.granularity == EvictionGranularity::frame ? "frame" : "chunk";
    j["bias_correction"] = e.memory.bias_correction;
    j["rotary"] = e.rotary_mode == RotaryMode::temporal_1d ? "1d" : "3d";
    j["rope_base"] = e.rope_base;
    j["schedule"] = e.schedule.timesteps;
    j["model"] = {{"layers", e.model.n_layers}, {"heads", e.model.n_heads}, {"d_model", e.model.d_model}};
    j["pc_budget"] = e.policy_config().effective_pc_budget();
    j["pc_score"] = "column attention mass summed over steps, heads, queries and layers";
    j["f_limit"] = e.f_limit;
    j["seeds"] = cfg.seeds;
    j["trace"] = cfg.trace;
    j["bench"] = cfg.bench;
    return j;
}

// ---------------------------------------------------------------------------
// Single runs
// ---------------------------------------------------------------------------

inline std::string hex64(std::uint64_t v) {
    char buf[19];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

/// Per-chunk checksums that pin a run bit-for-bit.
inline nlohmann::json golden_entry(const ChunkResult& r, const CachePolicy& policy) {
    return {{"chunk", r.chunk},
            {"latent", hex64(fnv1a(r.latent.data))},
            {"cache", hex64(policy.digest())},
            {"max_index", r.max_index},
            {"cached_tokens", r.cached_tokens_after},
            {"flops", r.flops}};
}

inline nlohmann::json trace_entry(const ChunkResult& r, const CachePolicy& policy) {
    nlohmann::json j = golden_entry(r, policy);
    nlohmann::json ctx = nlohmann::json::array();
    for (std::size_t i = 0; i < r.context_ids.size(); ++i) {
        nlohmann::json mass = nlohmann::json::array();
        for (const auto& layer : r.trace.column_mass) mass.push_back(layer[i]);
        const Coord& p = r.context_positions[i];
        ctx.push_back({{"id", r.context_ids[i]}, {"tier", tier_name(r.context_tiers[i])}, {"pos", {p.t, p.h, p.w}},
                       {"mass", mass}});
    }
    j["context"] = std::move(ctx);
    j["current_mass"] = r.trace.current_mass;
    j["rows_per_layer"] = r.trace.rows_per_layer;
    j["admitted"] = r.commit.admitted;
    return j;
}

struct RunOutput {
    std::vector<StepRecord> records;
    nlohmann::json trace;  // null unless requested
};

/// Runs one engine for `n_chunks`. wall_ns is zeroed unless `keep_timing`, so
/// that metric files are reproducible byte for byte.
inline RunOutput run_records(const EngineConfig& cfg, std::int64_t n_chunks, bool with_trace, bool keep_timing) {
    Engine engine(cfg);
    MetricsTracker tracker(cfg.policy);
    RunOutput out;
    out.records.reserve(static_cast<std::size_t>(n_chunks));
    if (with_trace) out.trace = nlohmann::json::array();
    for (std::int64_t c = 0; c < n_chunks; ++c) {
        ChunkResult r = engine.step();
        if (with_trace) out.trace.push_back(trace_entry(r, engine.policy()));
        StepRecord s = tracker.observe(r);
        if (!keep_timing) s.wall_ns = 0;
        out.records.push_back(s);
    }
    return out;
}

inline nlohmann::json golden_trace(const EngineConfig& cfg, std::int64_t n_chunks) {
    Engine engine(cfg);
    nlohmann::json j = nlohmann::json::array();
    for (std::int64_t c = 0; c < n_chunks; ++c) {
        ChunkResult r = engine.step();
        j.push_back(golden_entry(r, engine.policy()));
    }
    return j;
}

struct MetricColumn {
    const char* name;
    double (*get)(const StepRecord&);
};

inline const std::vector<MetricColumn>& metric_columns() {
    static const std::vector<MetricColumn> cols = {
        {"retention_overlap", [](const StepRecord& s) { return s.retention_overlap; }},
        {"admitted_share", [](const StepRecord& s) { return s.admitted_attention_share; }},
        {"admitted_uniform_ratio", [](const StepRecord& s) { return s.admitted_uniform_ratio; }},
        {"output_drift", [](const StepRecord& s) { return s.output_drift; }},
        {"mem_drift_L", [](const StepRecord& s) { return s.memory_drift_L; }},
        {"mem_drift_S", [](const StepRecord& s) { return s.memory_drift_S; }},
        {"share_sink", [](const StepRecord& s) { return s.attention_share_sink; }},
        {"share_L", [](const StepRecord& s) { return s.attention_share_long; }},
        {"share_S", [](const StepRecord& s) { return s.attention_share_short; }},
        {"share_compressed", [](const StepRecord& s) { return s.attention_share_compressed; }},
        {"share_local", [](const StepRecord& s) { return s.attention_share_local; }},
        {"share_current", [](const StepRecord& s) { return s.attention_share_current; }},
        {"max_index", [](const StepRecord& s) { return static_cast<double>(s.max_index); }},
        {"cached_tokens", [](const StepRecord& s) { return static_cast<double>(s.cached_tokens); }},
        {"flops", [](const StepRecord& s) { return static_cast<double>(s.flops); }},
        {"wall_ns", [](const StepRecord& s) { return static_cast<double>(s.wall_ns); }},
    };
    return cols;
}

/// mean and max of every metric column.
inline nlohmann::json summarize(std::span<const StepRecord> recs) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& col : metric_columns()) {
        double sum = 0.0, mx = -std::numeric_limits<double>::infinity();
        for (const auto& r : recs) {
            const double v = col.get(r);
            sum += v;
            mx = std::max(mx, v);
        }
        j[col.name] = {{"mean", recs.empty() ? 0.0 : sum / static_cast<double>(recs.size())}, {"max", mx}};
    }
    return j;
}

// ---------------------------------------------------------------------------
// File output
// ---------------------------------------------------------------------------

inline void ensure_dir(const std::filesystem::path& p) {
    std::error_code ec;
    std::filesystem::create_directories(p, ec);
    if (ec || !std::filesystem::is_directory(p)) throw IoError("cannot create output directory " + p.string());
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + p.string() + " for writing");
    out << text;
    out.flush();
    if (!out) throw IoError("write failed for " + p.string());
}

inline std::string csv_text(std::span<const StepRecord> recs) {
    std::ostringstream os;
    write_csv(os, recs);
    return os.str();
}

inline void write_run(const std::filesystem::path& dir, const ExperimentConfig& cfg, std::uint64_t seed,
                      const RunOutput& run) {
    ensure_dir(dir);
    write_text(dir / "metrics.csv", csv_text(run.records));
    nlohmann::json s;
    s["version"] = kVersion;
    s["config"] = config_to_json(cfg);
    s["config"]["seed"] = seed;
    s["chunks"] = run.records.size();
    s["metrics"] = summarize(run.records);
    write_text(dir / "summary.json", s.dump(2) + "\n");
    if (!run.trace.is_null()) write_text(dir / "trace.json", run.trace.dump() + "\n");
}

/// Writes one run per seed; several seeds go to seed_<n> subdirectories.
inline void run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    for (std::uint64_t seed : cfg.seeds) {
        EngineConfig e = cfg.engine;
        e.seed = seed;
        const RunOutput run = run_records(e, cfg.n_chunks, cfg.trace, false);
        const auto dir = cfg.seeds.size() == 1 ? cfg.out_dir : cfg.out_dir / ("seed_" + std::to_string(seed));
        write_run(dir, cfg, seed, run);
    }
}

// ---------------------------------------------------------------------------
// EMA sweep
// ---------------------------------------------------------------------------

inline constexpr double kSweepAlphaLong[] = {0.001, 0.01, 0.05};
inline constexpr double kSweepAlphaShort[] = {0.05, 0.1, 0.3, 0.5};

struct SweepCell {
    double alpha_long = 0.0;
    double alpha_short = 0.0;
    bool completed = false;
    std::string error;
    double mean_output_drift = 0.0;
    double mean_mem_drift_L = 0.0;
    double mean_mem_drift_S = 0.0;
    std::int64_t max_index = 0;
    std::size_t max_cached_tokens = 0;
    std::vector<StepRecord> records;

    std::string dir_name() const { return "aL_" + format_real(alpha_long) + "_aS_" + format_real(alpha_short); }
};

/// Runs the 3 x 4 grid, one engine per worker thread; results come back in
/// grid order regardless of scheduling.
inline std::vector<SweepCell> run_sweep(const EngineConfig& base, std::int64_t n_chunks, unsigned workers = 0) {
    std::vector<SweepCell> cells;
    for (double aL : kSweepAlphaLong)
        for (double aS : kSweepAlphaShort) {
            SweepCell cell;
            cell.alpha_long = aL;
            cell.alpha_short = aS;
            cells.push_back(std::move(cell));
        }
    if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
    workers = std::min<unsigned>(workers, static_cast<unsigned>(cells.size()));
    std::size_t next = 0;
    std::mutex mu;
    auto work = [&] {
        for (;;) {
            std::size_t i;
            {
                std::lock_guard<std::mutex> lock(mu);
                if (next == cells.size()) return;
                i = next++;
            }
            SweepCell& cell = cells[i];
            try {
                EngineConfig e = base;
                e.memory.alpha_long = cell.alpha_long;
                e.memory.alpha_short = cell.alpha_short;
                cell.records = run_records(e, n_chunks, false, false).records;
                double od = 0.0, mL = 0.0, mS = 0.0;
                for (const auto& r : cell.records) {
                    od += r.output_drift;
                    mL += r.memory_drift_L;
                    mS += r.memory_drift_S;
                    cell.max_index = std::max(cell.max_index, r.max_index);
                    cell.max_cached_tokens = std::max(cell.max_cached_tokens, r.cached_tokens);
                }
                const double n = static_cast<double>(cell.records.size());
                cell.mean_output_drift = od / n;
                cell.mean_mem_drift_L = mL / n;
                cell.mean_mem_drift_S = mS / n;
                cell.completed = true;
            } catch (const std::exception& ex) {
                cell.error = ex.what();
            }
        }
    };
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
    return cells;
}

inline void run_sweep_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    ensure_dir(cfg.out_dir);
    nlohmann::json combined;
    combined["version"] = kVersion;
    combined["config"] = config_to_json(cfg);
    combined["cells"] = nlohmann::json::array();
    for (std::uint64_t seed : cfg.seeds) {
        EngineConfig e = cfg.engine;
        e.seed = seed;
        const auto cells = run_sweep(e, cfg.n_chunks);
        for (const auto& cell : cells) {
            const auto dir = cfg.out_dir / (cfg.seeds.size() == 1 ? cell.dir_name()
                                                                  : "seed_" + std::to_string(seed) + "_" + cell.dir_name());
            if (cell.completed) {
                ExperimentConfig cc = cfg;
                cc.engine.memory.alpha_long = cell.alpha_long;
                cc.engine.memory.alpha_short = cell.alpha_short;
                write_run(dir, cc, seed, RunOutput{cell.records, nullptr});
            }
            combined["cells"].push_back({{"seed", seed},
                                         {"alpha_long", cell.alpha_long},
                                         {"alpha_short", cell.alpha_short},
                                         {"completed", cell.completed},
                                         {"error", cell.error},
                                         {"mean_output_drift", cell.mean_output_drift},
                                         {"mean_mem_drift_L", cell.mean_mem_drift_L},
                                         {"mean_mem_drift_S", cell.mean_mem_drift_S},
                                         {"max_index", cell.max_index},
                                         {"max_cached_tokens", cell.max_cached_tokens},
                                         {"dir", dir.filename().string()}});
        }
    }
    write_text(cfg.out_dir / "sweep_summary.json", combined.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Latency benchmark
// ---------------------------------------------------------------------------

struct BenchReport {
    std::size_t chunks_timed = 0;
    double chunks_per_sec = 0.0;
    double mean_ns = 0.0, p50_ns = 0.0, p90_ns = 0.0, p99_ns = 0.0;
    std::optional<SlopeFit> slope;  // ns per chunk, on batch means
    std::size_t slope_from = 0;
    std::size_t batch = 0;

    nlohmann::json to_json() const {
        nlohmann::json j{{"chunks_timed", chunks_timed}, {"chunks_per_sec", chunks_per_sec}, {"mean_ns", mean_ns},
                         {"p50_ns", p50_ns},           {"p90_ns", p90_ns},                 {"p99_ns", p99_ns}};
        if (slope)
            j["slope_ns_per_chunk"] = {{"estimate", slope->slope}, {"ci95", {slope->ci_low, slope->ci_high}},
                                       {"from_chunk", slope_from}, {"batch", batch},
                                       {"points", slope->n},        {"ci_contains_zero", slope->ci_contains_zero()}};
        return j;
    }
};

/// Timing statistics over per-chunk wall times, skipping chunk 0 as warm-up.
/// The slope is fitted to means of `batch` consecutive chunks from
/// `slope_from` on.
inline BenchReport bench_report(std::span<const StepRecord> recs, std::size_t slope_from = 100, std::size_t batch = 50) {
    MEMROPE_REQUIRE(recs.size() >= 2, "bench: need at least two chunks");
    std::vector<double> ns;
    for (std::size_t i = 1; i < recs.size(); ++i) ns.push_back(static_cast<double>(recs[i].wall_ns));
    BenchReport b;
    b.chunks_timed = ns.size();
    double total = 0.0;
    for (double v : ns) total += v;
    b.mean_ns = total / static_cast<double>(ns.size());
    b.chunks_per_sec = total > 0.0 ? 1e9 * static_cast<double>(ns.size()) / total : 0.0;
    b.p50_ns = quantile(ns, 0.5);
    b.p90_ns = quantile(ns, 0.9);
    b.p99_ns = quantile(ns, 0.99);
    if (recs.size() > slope_from + 3 * batch) {
        std::vector<double> x, y, bx, by;
        for (std::size_t i = slope_from; i < recs.size(); ++i) {
            x.push_back(static_cast<double>(recs[i].chunk));
            y.push_back(static_cast<double>(recs[i].wall_ns));
        }
        batch_means(x, y, batch, bx, by);
        b.slope = fit_slope(bx, by);
        b.slope_from = slope_from;
        b.batch = batch;
    }
    return b;
}

inline BenchReport run_bench(const ExperimentConfig& cfg) {
    cfg.validate();
    ensure_dir(cfg.out_dir);
    EngineConfig e = cfg.engine;
    e.seed = cfg.seeds.front();
    const RunOutput run = run_records(e, cfg.n_chunks, false, true);
    const BenchReport rep = bench_report(run.records);
    write_text(cfg.out_dir / "metrics.csv", csv_text(run.records));
    nlohmann::json j;
    j["version"] = kVersion;
    j["config"] = config_to_json(cfg);
    j["bench"] = rep.to_json();
    write_text(cfg.out_dir / "bench.json", j.dump(2) + "\n");
    return rep;
}

}  // namespace memrope
