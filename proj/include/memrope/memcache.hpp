// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "json.hpp"
#include "memrope/numkernel.hpp"
#include "memrope/rope.hpp"

namespace memrope {

using TokenId = std::uint64_t;

/// Which part of the attended sequence a token belongs to.
enum class Tier : std::uint8_t { sink, mem_long, mem_short, compressed, local, current };

inline const char* tier_name(Tier t) {
    switch (t) {
        case Tier::sink: return "sink";
        case Tier::mem_long: return "mem_long";
        case Tier::mem_short: return "mem_short";
        case Tier::compressed: return "compressed";
        case Tier::local: return "local";
        case Tier::current: return "current";
    }
    return "?";
}

/// One cached key/value pair. The key is stored exactly as projected, with no
/// rotary phase applied; positions are assigned when it is attended to.
struct TokenState {
    Vec key;
    Vec value;
    Coord origin;
    std::int64_t admit_step = 0;
    TokenId id = 0;
};

/// One frame worth of cached tokens, row-major over the H x W grid.
struct FrameSlot {
    std::vector<TokenState> tokens;

    std::int64_t frame() const { return tokens.empty() ? -1 : tokens.front().origin.t; }
};

/// Cache geometry: S sink frames, M memory tokens per stream, L local frames.
struct CacheLayout {
    std::size_t sink_frames = 3;
    std::size_t mem_tokens = 1;
    std::size_t local_frames = 4;
    std::size_t grid_h = 4;
    std::size_t grid_w = 4;
    std::size_t frames_per_chunk = 3;

    /// C = S + 2M + L.
    std::size_t capacity() const { return sink_frames + 2 * mem_tokens + local_frames; }
    std::size_t tokens_per_frame() const { return grid_h * grid_w; }
    /// (S + L) * H * W + 2M.
    std::size_t max_cached_tokens() const {
        return (sink_frames + local_frames) * tokens_per_frame() + 2 * mem_tokens;
    }

    void validate() const {
        MEMROPE_REQUIRE(local_frames > 0, "CacheLayout: local window must hold at least one frame");
        MEMROPE_REQUIRE(grid_h > 0 && grid_w > 0, "CacheLayout: spatial grid must be non-empty");
        MEMROPE_REQUIRE(frames_per_chunk > 0, "CacheLayout: frames_per_chunk must be positive");
        MEMROPE_REQUIRE(mem_tokens <= grid_h * grid_w, "CacheLayout: more memory regions than grid cells");
    }
};

/// Spatial anchor given to tokens that have no grid position of their own.
inline Coord grid_center(const CacheLayout& layout, std::int64_t t) {
    return Coord{t, static_cast<std::int64_t>(layout.grid_h / 2), static_cast<std::int64_t>(layout.grid_w / 2)};
}

// ---------------------------------------------------------------------------
// Spatial pooling
// ---------------------------------------------------------------------------

struct Pooled {
    Vec key;
    Vec value;
};

namespace detail {

inline Pooled mean_of(std::span<const TokenState* const> tokens) {
    MEMROPE_REQUIRE(!tokens.empty(), "spatial_pool: empty frame");
    const std::size_t dk = tokens.front()->key.size();
    const std::size_t dv = tokens.front()->value.size();
    std::vector<double> k(dk, 0.0), v(dv, 0.0);
    for (const TokenState* t : tokens) {
        if (t->key.size() != dk || t->value.size() != dv) throw DimensionError("spatial_pool: ragged frame");
        for (std::size_t i = 0; i < dk; ++i) k[i] += t->key[i];
        for (std::size_t i = 0; i < dv; ++i) v[i] += t->value[i];
    }
    const double n = static_cast<double>(tokens.size());
    Pooled out{Vec(dk), Vec(dv)};
    for (std::size_t i = 0; i < dk; ++i) out.key[i] = static_cast<float>(k[i] / n);
    for (std::size_t i = 0; i < dv; ++i) out.value[i] = static_cast<float>(v[i] / n);
    return out;
}

}  // namespace detail

/// Arithmetic mean of the frame's keys and, separately, of its values.
inline Pooled spatial_pool(const FrameSlot& frame) {
    std::vector<const TokenState*> ptrs;
    ptrs.reserve(frame.tokens.size());
    for (const auto& t : frame.tokens) ptrs.push_back(&t);
    return detail::mean_of(ptrs);
}

/// Region index of a grid cell when the grid is split into `regions` row-major bands.
inline std::size_t pooling_region(const Coord& c, const CacheLayout& layout, std::size_t regions) {
    const std::size_t cell = static_cast<std::size_t>(c.h) * layout.grid_w + static_cast<std::size_t>(c.w);
    return cell * regions / layout.tokens_per_frame();
}

/// Pools a set of frames into `regions` vectors (one per band of the grid).
inline std::vector<Pooled> spatial_pool_regions(std::span<const FrameSlot> frames, const CacheLayout& layout,
                                                std::size_t regions) {
    std::vector<std::vector<const TokenState*>> buckets(regions);
    for (const auto& f : frames)
        for (const auto& t : f.tokens) buckets[pooling_region(t.origin, layout, regions)].push_back(&t);
    std::vector<Pooled> out;
    out.reserve(regions);
    for (const auto& b : buckets) out.push_back(detail::mean_of(b));
    return out;
}

// ---------------------------------------------------------------------------
// Dual EMA memory
// ---------------------------------------------------------------------------

/// Long- and short-term EMA accumulators for keys and values of one memory region.
struct MemoryState {
    Vec mu_long_key;
    Vec mu_long_val;
    Vec mu_short_key;
    Vec mu_short_val;
    double alpha_long = 0.01;
    double alpha_short = 0.1;
    std::int64_t update_count = 0;

    MemoryState() = default;
    MemoryState(std::size_t width, double a_long, double a_short)
        : mu_long_key(width, 0.0f),
          mu_long_val(width, 0.0f),
          mu_short_key(width, 0.0f),
          mu_short_val(width, 0.0f),
          alpha_long(a_long),
          alpha_short(a_short) {
        validate();
    }

    void validate() const {
        MEMROPE_REQUIRE(alpha_long > 0.0 && alpha_long <= 1.0, "MemoryState: alpha_long must lie in (0, 1]");
        MEMROPE_REQUIRE(alpha_short > 0.0 && alpha_short <= 1.0, "MemoryState: alpha_short must lie in (0, 1]");
        MEMROPE_REQUIRE(alpha_long <= alpha_short, "MemoryState: alpha_long must not exceed alpha_short");
    }

    friend bool operator==(const MemoryState&, const MemoryState&) = default;
};

namespace detail {

/// mu += alpha * (x - mu), in 64-bit before rounding. Written in increment form
/// so that x == mu leaves mu bit-identical and alpha == 1 lands exactly on x.
inline void ema_into(Vec& mu, std::span<const float> x, double alpha) {
    require_same_size(mu, x, "ema_update");
    for (std::size_t i = 0; i < mu.size(); ++i) {
        const double m = mu[i];
        mu[i] = static_cast<float>(m + alpha * (static_cast<double>(x[i]) - m));
    }
}

}  // namespace detail

inline MemoryState ema_update(MemoryState mem, std::span<const float> pooled_key, std::span<const float> pooled_val) {
    detail::ema_into(mem.mu_long_key, pooled_key, mem.alpha_long);
    detail::ema_into(mem.mu_long_val, pooled_val, mem.alpha_long);
    detail::ema_into(mem.mu_short_key, pooled_key, mem.alpha_short);
    detail::ema_into(mem.mu_short_val, pooled_val, mem.alpha_short);
    ++mem.update_count;
    return mem;
}

/// mu / (1 - (1 - alpha)^n); zero before the first update.
inline Vec bias_corrected(const Vec& mu, double alpha, std::int64_t updates) {
    if (updates == 0) return Vec(mu.size(), 0.0f);
    const double scale = 1.0 / (1.0 - std::pow(1.0 - alpha, static_cast<double>(updates)));
    Vec out(mu.size());
    for (std::size_t i = 0; i < mu.size(); ++i) out[i] = static_cast<float>(mu[i] * scale);
    return out;
}

// ---------------------------------------------------------------------------
// Three-tier cache
// ---------------------------------------------------------------------------

enum class EvictionGranularity { frame, chunk };

struct MemoryConfig {
    double alpha_long = 0.01;
    double alpha_short = 0.1;
    EvictionGranularity granularity = EvictionGranularity::frame;
    bool bias_correction = false;
    /// When set, keys are rotated by their origin frame index before pooling.
    /// This is the "aggregate rotated keys" ablation, not the default path.
    std::optional<RotaryConfig> rotate_before_pool;
};

/// One EMA absorption, kept for the step-size checks in tests and metrics.
struct MemoryUpdate {
    std::size_t region = 0;
    Vec pooled_key;
    double long_step = 0.0;       // ||mu_L' - mu_L||
    double short_step = 0.0;      // ||mu_S' - mu_S||
    double long_expected = 0.0;   // alpha_L * ||k - mu_L||
    double short_expected = 0.0;  // alpha_S * ||k - mu_S||
    double short_prev_norm = 0.0;
};

struct EvictionReport {
    std::vector<FrameSlot> evicted;
    std::vector<MemoryUpdate> updates;
};

/// Sink + dual-EMA memory + FIFO local window, all keys position-free.
///
/// The sink accepts the first S frames ever appended and is sealed after that.
/// Frames beyond it go to the local window; once the window holds more than L
/// frames the oldest are pooled into memory and dropped.
class ThreeTierCache {
public:
    ThreeTierCache(CacheLayout layout, MemoryConfig mem_cfg, std::size_t width)
        : layout_(layout), cfg_(std::move(mem_cfg)), width_(width) {
        layout_.validate();
        memory_.assign(layout_.mem_tokens, MemoryState(width, cfg_.alpha_long, cfg_.alpha_short));
        if (cfg_.rotate_before_pool && width % cfg_.rotate_before_pool->head_dim() != 0)
            throw DimensionError("ThreeTierCache: width is not a multiple of the rotary head_dim");
    }

    const CacheLayout& layout() const { return layout_; }
    const MemoryConfig& memory_config() const { return cfg_; }
    std::size_t width() const { return width_; }

    const std::vector<FrameSlot>& sink() const { return sink_; }
    const std::deque<FrameSlot>& local() const { return local_; }
    const std::vector<MemoryState>& memory() const { return memory_; }
    bool sink_sealed() const { return sink_.size() == layout_.sink_frames; }

    /// Memory tokens as presented to attention (bias-corrected when enabled).
    Vec memory_key(std::size_t region, Tier stream) const { return present(region, stream, true); }
    Vec memory_value(std::size_t region, Tier stream) const { return present(region, stream, false); }

    std::size_t cached_tokens() const {
        return (sink_.size() + local_.size()) * layout_.tokens_per_frame() + 2 * layout_.mem_tokens;
    }

    /// Appends a chunk's frames (sink first while it is unsealed), then evicts.
    EvictionReport append_chunk(std::vector<FrameSlot> frames) {
        for (auto& f : frames) {
            if (f.tokens.size() != layout_.tokens_per_frame())
                throw DimensionError("append_chunk: frame does not match the spatial grid");
            for (const auto& t : f.tokens)
                if (t.key.size() != width_ || t.value.size() != width_)
                    throw DimensionError("append_chunk: token width mismatch");
            if (!sink_sealed())
                sink_.push_back(std::move(f));
            else
                local_.push_back(std::move(f));
        }
        return evict_and_absorb();
    }

    /// Pools and absorbs the oldest local frames until |local| <= L.
    EvictionReport evict_and_absorb() {
        EvictionReport report;
        if (local_.size() <= layout_.local_frames) return report;
        const std::size_t excess = local_.size() - layout_.local_frames;
        if (cfg_.granularity == EvictionGranularity::frame) {
            for (std::size_t i = 0; i < excess; ++i) {
                absorb(std::span<const FrameSlot>(&local_.front(), 1), report);
                report.evicted.push_back(std::move(local_.front()));
                local_.pop_front();
            }
        } else {
            std::vector<FrameSlot> batch;
            for (std::size_t i = 0; i < excess; ++i) {
                batch.push_back(std::move(local_.front()));
                local_.pop_front();
            }
            absorb(batch, report);
            report.evicted = std::move(batch);
        }
        return report;
    }

    /// K = [sink || mu_L || mu_S || local] as (vector, tier) pairs.
    std::vector<std::pair<Vec, Tier>> snapshot_keys() const { return snapshot(true); }
    std::vector<std::pair<Vec, Tier>> snapshot_values() const { return snapshot(false); }

    /// Debug dump: tier sizes, memory vectors and update counts.
    nlohmann::json debug_dump() const {
        nlohmann::json j;
        j["sink_frames"] = sink_.size();
        j["local_frames"] = local_.size();
        j["memory_tokens"] = 2 * layout_.mem_tokens;
        j["cached_tokens"] = cached_tokens();
        j["local_origins"] = nlohmann::json::array();
        for (const auto& f : local_) j["local_origins"].push_back(f.frame());
        j["memory"] = nlohmann::json::array();
        for (const auto& m : memory_) {
            j["memory"].push_back({{"update_count", m.update_count},
                                   {"alpha_long", m.alpha_long},
                                   {"alpha_short", m.alpha_short},
                                   {"mu_long_key", m.mu_long_key},
                                   {"mu_long_val", m.mu_long_val},
                                   {"mu_short_key", m.mu_short_key},
                                   {"mu_short_val", m.mu_short_val}});
        }
        return j;
    }

private:
    Vec present(std::size_t region, Tier stream, bool key) const {
        const MemoryState& m = memory_.at(region);
        const bool is_long = stream == Tier::mem_long;
        MEMROPE_REQUIRE(is_long || stream == Tier::mem_short, "memory tier must be mem_long or mem_short");
        const Vec& mu = is_long ? (key ? m.mu_long_key : m.mu_long_val) : (key ? m.mu_short_key : m.mu_short_val);
        if (!cfg_.bias_correction) return mu;
        return bias_corrected(mu, is_long ? m.alpha_long : m.alpha_short, m.update_count);
    }

    std::vector<std::pair<Vec, Tier>> snapshot(bool keys) const {
        std::vector<std::pair<Vec, Tier>> out;
        out.reserve(cached_tokens());
        for (const auto& f : sink_)
            for (const auto& t : f.tokens) out.emplace_back(keys ? t.key : t.value, Tier::sink);
        for (std::size_t r = 0; r < memory_.size(); ++r)
            out.emplace_back(present(r, Tier::mem_long, keys), Tier::mem_long);
        for (std::size_t r = 0; r < memory_.size(); ++r)
            out.emplace_back(present(r, Tier::mem_short, keys), Tier::mem_short);
        for (const auto& f : local_)
            for (const auto& t : f.tokens) out.emplace_back(keys ? t.key : t.value, Tier::local);
        return out;
    }

    /// Temporal phase only: tokens of one frame share it, so a single evicted
    /// frame pools to R_t times the position-free mean.
    std::vector<FrameSlot> rotated_copy(std::span<const FrameSlot> frames) const {
        const RotaryConfig& rc = *cfg_.rotate_before_pool;
        std::vector<FrameSlot> out(frames.begin(), frames.end());
        for (auto& f : out)
            for (auto& t : f.tokens) {
                Vec rotated(t.key.size());
                apply_phase_heads(phase_for(Coord{t.origin.t, 0, 0}, rc), t.key, rotated);
                t.key = std::move(rotated);
            }
        return out;
    }

    void absorb(std::span<const FrameSlot> frames, EvictionReport& report) {
        if (memory_.empty()) return;
        std::vector<Pooled> pooled;
        if (cfg_.rotate_before_pool) {
            const auto rotated = rotated_copy(frames);
            pooled = spatial_pool_regions(rotated, layout_, memory_.size());
        } else {
            pooled = spatial_pool_regions(frames, layout_, memory_.size());
        }
        for (std::size_t r = 0; r < memory_.size(); ++r) {
            MemoryState next = ema_update(memory_[r], pooled[r].key, pooled[r].value);
            MemoryUpdate u;
            u.region = r;
            u.long_step = distance(next.mu_long_key, memory_[r].mu_long_key);
            u.short_step = distance(next.mu_short_key, memory_[r].mu_short_key);
            u.long_expected = memory_[r].alpha_long * distance(pooled[r].key, memory_[r].mu_long_key);
            u.short_expected = memory_[r].alpha_short * distance(pooled[r].key, memory_[r].mu_short_key);
            u.short_prev_norm = norm(memory_[r].mu_short_key);
            u.pooled_key = std::move(pooled[r].key);
            report.updates.push_back(std::move(u));
            memory_[r] = std::move(next);
        }
    }

    CacheLayout layout_;
    MemoryConfig cfg_;
    std::size_t width_;
    std::vector<FrameSlot> sink_;
    std::vector<MemoryState> memory_;
    std::deque<FrameSlot> local_;
};

}  // namespace memrope
