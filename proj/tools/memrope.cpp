// SPDX-License-Identifier: Apache-2.0
//
// memrope: run, sweep or benchmark the streaming cache engine.
//
//   memrope --policy memrope --chunks 100 --seed 7 --out runs/a
//   memrope --sweep ema --chunks 200 --out runs/sweep
//   memrope --bench --policy fifo --local 18 --chunks 1000
//
// Exit status: 0 ok, 2 invalid configuration, 3 output error.

#include <cstdlib>
#include <iostream>

#include "CLI11.hpp"
#include "memrope/experiment.hpp"

int main(int argc, char** argv) {
    using namespace memrope;

    CLI::App app{"Chunk-autoregressive toy engine with position-free KV caching and EMA memory tokens"};
    app.set_version_flag("--version", kVersion);

    Overrides flags;
    std::string policy, eviction, rotary, out, sweep, config_path;
    std::int64_t chunks = 0;
    std::size_t sink = 0, mem = 0, local = 0, fpc = 0;
    double alpha_long = 0.0, alpha_short = 0.0;
    std::uint64_t seed = 0;
    bool trace = false, bench = false;

    auto* o_policy = app.add_option("--policy", policy, "fifo|sink_fifo|participative|infinity_rope|agg_with_rope|memrope");
    auto* o_chunks = app.add_option("--chunks", chunks, "number of chunks to generate");
    auto* o_sink = app.add_option("--sink", sink, "sink frames S");
    auto* o_mem = app.add_option("--mem", mem, "memory tokens M per stream");
    auto* o_local = app.add_option("--local", local, "local window frames L");
    auto* o_fpc = app.add_option("--frames-per-chunk", fpc, "frames per chunk");
    auto* o_al = app.add_option("--alpha-long", alpha_long, "long-term EMA rate");
    auto* o_as = app.add_option("--alpha-short", alpha_short, "short-term EMA rate");
    auto* o_ev = app.add_option("--eviction", eviction, "frame|chunk pooling granularity");
    auto* o_rot = app.add_option("--rotary", rotary, "1d|3d");
    auto* o_seed = app.add_option("--seed", seed, "run seed");
    auto* o_sweep = app.add_option("--sweep", sweep, "ema: run the 3x4 alpha grid");
    auto* o_trace = app.add_flag("--trace", trace, "write trace.json with per-token attention mass");
    auto* o_bench = app.add_flag("--bench", bench, "time each chunk and write bench.json");
    app.add_option("--config", config_path, "JSON config file; flags take precedence");
    auto* o_out = app.add_option("--out", out, "output directory (default: $MEMROPE_OUT or memrope_out)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        ExperimentConfig cfg;
        if (const char* env = std::getenv("MEMROPE_OUT"); env && *env) cfg.out_dir = env;
        if (!config_path.empty()) apply_overrides(cfg, overrides_from_json(load_json_file(config_path)));

        if (*o_policy) flags.policy = policy;
        if (*o_chunks) flags.chunks = chunks;
        if (*o_sink) flags.sink = sink;
        if (*o_mem) flags.mem = mem;
        if (*o_local) flags.local = local;
        if (*o_fpc) flags.frames_per_chunk = fpc;
        if (*o_al) flags.alpha_long = alpha_long;
        if (*o_as) flags.alpha_short = alpha_short;
        if (*o_ev) flags.eviction = eviction;
        if (*o_rot) flags.rotary = rotary;
        if (*o_seed) flags.seeds = std::vector<std::uint64_t>{seed};
        if (*o_sweep) {
            if (sweep != "ema") throw ConfigError("--sweep accepts only 'ema'");
            flags.sweep_ema = true;
        }
        if (*o_trace) flags.trace = true;
        if (*o_bench) flags.bench = true;
        if (*o_out) flags.out = out;
        apply_overrides(cfg, flags);
        cfg.validate();

        if (cfg.sweep_ema) {
            run_sweep_experiment(cfg);
            std::cout << "sweep: 12 cells written to " << cfg.out_dir.string() << "\n";
        } else if (cfg.bench) {
            const BenchReport rep = run_bench(cfg);
            std::cout << rep.to_json().dump(2) << "\n";
        } else {
            run_experiment(cfg);
            std::cout << "wrote " << cfg.n_chunks << " chunks to " << cfg.out_dir.string() << "\n";
        }
    } catch (const ConfigError& e) {
        std::cerr << "memrope: invalid configuration: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "memrope: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "memrope: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
