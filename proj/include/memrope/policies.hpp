// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "memrope/indexing.hpp"
#include "memrope/memcache.hpp"
#include "memrope/rope.hpp"

namespace memrope {

enum class PolicyId { fifo, sink_fifo, participative, infinity_rope, agg_with_rope, memrope };

inline constexpr PolicyId kAllPolicies[] = {PolicyId::fifo,          PolicyId::sink_fifo,     PolicyId::participative,
                                            PolicyId::infinity_rope, PolicyId::agg_with_rope, PolicyId::memrope};

inline const char* policy_name(PolicyId p) {
    switch (p) {
        case PolicyId::fifo: return "fifo";
        case PolicyId::sink_fifo: return "sink_fifo";
        case PolicyId::participative: return "participative";
        case PolicyId::infinity_rope: return "infinity_rope";
        case PolicyId::agg_with_rope: return "agg_with_rope";
        case PolicyId::memrope: return "memrope";
    }
    return "?";
}

inline std::optional<PolicyId> parse_policy(std::string_view s) {
    for (PolicyId p : kAllPolicies)
        if (s == policy_name(p)) return p;
    return std::nullopt;
}

/// A cached token as one attention call sees it.
struct AttendedToken {
    Vec key;
    Vec value;
    Coord position;
    /// True when the key already carries its rotary phase (conventional caches).
    bool prerotated = false;
    Tier tier = Tier::local;
    TokenId id = 0;
};

/// Everything the next chunk attends to besides itself, plus where its own
/// queries sit. Fixed for all denoising passes of the chunk.
struct ChunkContext {
    std::vector<std::vector<AttendedToken>> layers;
    std::vector<Coord> query_positions;
};

/// Attention mass each context token received while a chunk was denoised,
/// summed over steps, heads and queries.
struct AttentionTrace {
    std::vector<std::vector<double>> column_mass;  // [layer][context token]
    std::vector<double> current_mass;              // [layer]
    std::size_t rows_per_layer = 0;                // (step, head, query) rows summed
};

struct CommitReport {
    std::size_t evicted_frames = 0;
    bool compression_update = false;
    std::vector<TokenId> retained_before;
    std::vector<TokenId> retained_after;
    std::vector<TokenId> admitted;
    std::vector<std::vector<MemoryUpdate>> memory_updates;  // [layer]
};

struct PolicyConfig {
    CacheLayout layout;
    MemoryConfig memory;
    RotaryConfig rotary;
    std::size_t n_layers = 2;
    std::size_t width = 64;
    /// Compressed-tier size for participative; 0 means two frames' worth of tokens.
    std::size_t pc_budget = 0;
    std::int64_t f_limit = 1024;

    std::size_t effective_pc_budget() const { return pc_budget ? pc_budget : 2 * layout.tokens_per_frame(); }
};

/// Cache-management strategy behind the generation loop.
class CachePolicy {
public:
    virtual ~CachePolicy() = default;

    virtual PolicyId id() const = 0;
    /// What the next chunk attends to. Empty before anything was committed.
    virtual ChunkContext context() const = 0;
    /// Folds a fully denoised chunk ([layer][frame], raw keys) into the cache.
    virtual CommitReport commit(std::int64_t chunk_index, std::vector<std::vector<FrameSlot>> layer_frames,
                                const AttentionTrace* trace) = 0;
    virtual std::size_t cached_tokens() const = 0;
    virtual nlohmann::json debug_state() const = 0;

    /// FNV-1a over every stored key and value, in tier order.
    std::uint64_t digest() const {
        std::uint64_t h = 0xCBF29CE484222325ULL;
        for (const auto& layer : context().layers)
            for (const auto& t : layer) {
                h = fnv1a(t.key, h);
                h = fnv1a(t.value, h);
            }
        return h;
    }
};

namespace detail {

inline void check_layer_frames(const PolicyConfig& cfg, const std::vector<std::vector<FrameSlot>>& lf) {
    if (lf.size() != cfg.n_layers) throw DimensionError("commit: expected one frame list per layer");
    for (const auto& frames : lf)
        if (frames.size() != lf.front().size()) throw DimensionError("commit: layers disagree on frame count");
}

inline void push_frame(std::vector<AttendedToken>& out, const FrameSlot& f, std::int64_t t, bool prerotated, Tier tier) {
    for (const auto& tok : f.tokens)
        out.push_back({tok.key, tok.value, Coord{t, tok.origin.h, tok.origin.w}, prerotated, tier, tok.id});
}

inline std::vector<Coord> grid_positions(const CacheLayout& layout, std::span<const std::int64_t> frame_index) {
    std::vector<Coord> out;
    out.reserve(frame_index.size() * layout.tokens_per_frame());
    for (auto t : frame_index)
        for (std::size_t h = 0; h < layout.grid_h; ++h)
            for (std::size_t w = 0; w < layout.grid_w; ++w)
                out.push_back({t, static_cast<std::int64_t>(h), static_cast<std::int64_t>(w)});
    return out;
}

inline void rotate_frame(FrameSlot& f, const RotaryConfig& rc, std::int64_t t) {
    for (auto& tok : f.tokens) {
        Vec out(tok.key.size());
        apply_phase_heads(phase_for(Coord{t, tok.origin.h, tok.origin.w}, rc), tok.key, out);
        tok.key = std::move(out);
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// MemRoPE (and the rotated-aggregation ablation)
// ---------------------------------------------------------------------------

/// Position-free three-tier cache per layer with block-relative indices
/// assigned at every call. With `rotate_before_pool` set in the memory config
/// this becomes the ablation that averages keys carrying their rotary phase.
class MemRopePolicy final : public CachePolicy {
public:
    explicit MemRopePolicy(PolicyConfig cfg, bool aggregate_rotated = false) : cfg_(std::move(cfg)) {
        if (aggregate_rotated) cfg_.memory.rotate_before_pool = cfg_.rotary;
        else cfg_.memory.rotate_before_pool.reset();
        caches_.reserve(cfg_.n_layers);
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) caches_.emplace_back(cfg_.layout, cfg_.memory, cfg_.width);
    }

    PolicyId id() const override {
        return cfg_.memory.rotate_before_pool ? PolicyId::agg_with_rope : PolicyId::memrope;
    }

    const std::vector<ThreeTierCache>& caches() const { return caches_; }

    IndexMap index_map() const {
        return assign_indices(cfg_.layout, caches_.front().sink().size(), caches_.front().local().size(),
                              cfg_.layout.frames_per_chunk);
    }

    ChunkContext context() const override {
        const auto& L = cfg_.layout;
        if (!started_) {
            std::vector<std::int64_t> q;
            for (std::size_t f = 0; f < L.frames_per_chunk; ++f) q.push_back(static_cast<std::int64_t>(f));
            return {std::vector<std::vector<AttendedToken>>(cfg_.n_layers), detail::grid_positions(L, q)};
        }
        const IndexMap imap = index_map();
        ChunkContext ctx;
        ctx.layers.resize(cfg_.n_layers);
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            const auto& cache = caches_[l];
            auto& out = ctx.layers[l];
            out.reserve(cache.cached_tokens());
            for (std::size_t i = 0; i < cache.sink().size(); ++i)
                detail::push_frame(out, cache.sink()[i], imap.sink[i], false, Tier::sink);
            const std::size_t M = L.mem_tokens;
            for (std::size_t s = 0; s < 2; ++s) {
                const Tier tier = s == 0 ? Tier::mem_long : Tier::mem_short;
                for (std::size_t r = 0; r < M; ++r) {
                    const std::int64_t t = imap.memory[s * M + r];
                    out.push_back({cache.memory_key(r, tier), cache.memory_value(r, tier), grid_center(L, t), false,
                                   tier, memory_token_id(s, r)});
                }
            }
            for (std::size_t i = 0; i < cache.local().size(); ++i)
                detail::push_frame(out, cache.local()[i], imap.local[i], false, Tier::local);
        }
        ctx.query_positions = detail::grid_positions(L, imap.query);
        return ctx;
    }

    CommitReport commit(std::int64_t, std::vector<std::vector<FrameSlot>> layer_frames,
                        const AttentionTrace*) override {
        detail::check_layer_frames(cfg_, layer_frames);
        CommitReport rep;
        rep.memory_updates.resize(cfg_.n_layers);
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            EvictionReport ev = caches_[l].append_chunk(std::move(layer_frames[l]));
            rep.evicted_frames = ev.evicted.size();
            rep.memory_updates[l] = std::move(ev.updates);
        }
        started_ = true;
        return rep;
    }

    std::size_t cached_tokens() const override { return started_ ? caches_.front().cached_tokens() : 0; }

    nlohmann::json debug_state() const override {
        nlohmann::json j;
        j["policy"] = policy_name(id());
        j["layers"] = nlohmann::json::array();
        for (const auto& c : caches_) j["layers"].push_back(c.debug_dump());
        return j;
    }

    /// Reserved ids for memory tokens; frame tokens use frame * HW + cell.
    static TokenId memory_token_id(std::size_t stream, std::size_t region) {
        return (TokenId{1} << 62) | (static_cast<TokenId>(stream) << 32) | region;
    }

private:
    PolicyConfig cfg_;
    std::vector<ThreeTierCache> caches_;
    bool started_ = false;
};

// ---------------------------------------------------------------------------
// Conventional sliding window (optionally with a sink)
// ---------------------------------------------------------------------------

/// Keys are rotated once, at cache time, with their absolute frame index, and
/// queries are placed at the absolute index of the chunk being generated.
class FifoPolicy final : public CachePolicy {
public:
    FifoPolicy(PolicyConfig cfg, bool with_sink) : cfg_(std::move(cfg)), with_sink_(with_sink) {
        cfg_.layout.validate();
        sink_.resize(cfg_.n_layers);
        window_.resize(cfg_.n_layers);
    }

    PolicyId id() const override { return with_sink_ ? PolicyId::sink_fifo : PolicyId::fifo; }

    ChunkContext context() const override {
        ChunkContext ctx;
        ctx.layers.resize(cfg_.n_layers);
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            for (const auto& f : sink_[l]) detail::push_frame(ctx.layers[l], f, f.frame(), true, Tier::sink);
            for (const auto& f : window_[l]) detail::push_frame(ctx.layers[l], f, f.frame(), true, Tier::local);
        }
        std::vector<std::int64_t> q;
        for (std::size_t f = 0; f < cfg_.layout.frames_per_chunk; ++f) q.push_back(next_frame_ + static_cast<std::int64_t>(f));
        ctx.query_positions = detail::grid_positions(cfg_.layout, q);
        return ctx;
    }

    CommitReport commit(std::int64_t, std::vector<std::vector<FrameSlot>> layer_frames,
                        const AttentionTrace*) override {
        detail::check_layer_frames(cfg_, layer_frames);
        CommitReport rep;
        const std::size_t sink_cap = with_sink_ ? cfg_.layout.sink_frames : 0;
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            for (auto& f : layer_frames[l]) {
                detail::rotate_frame(f, cfg_.rotary, f.frame());
                if (sink_[l].size() < sink_cap && !sink_sealed_) sink_[l].push_back(std::move(f));
                else window_[l].push_back(std::move(f));
            }
            std::size_t evicted = 0;
            while (window_[l].size() > cfg_.layout.local_frames) {
                window_[l].pop_front();
                ++evicted;
            }
            rep.evicted_frames = evicted;
        }
        if (sink_.front().size() == sink_cap) sink_sealed_ = true;
        next_frame_ += static_cast<std::int64_t>(cfg_.layout.frames_per_chunk);
        return rep;
    }

    std::size_t cached_tokens() const override {
        return (sink_.front().size() + window_.front().size()) * cfg_.layout.tokens_per_frame();
    }

    nlohmann::json debug_state() const override {
        nlohmann::json j;
        j["policy"] = policy_name(id());
        j["sink_frames"] = sink_.front().size();
        j["window_frames"] = window_.front().size();
        j["next_frame"] = next_frame_;
        return j;
    }

private:
    PolicyConfig cfg_;
    bool with_sink_;
    bool sink_sealed_ = false;
    std::int64_t next_frame_ = 0;
    std::vector<std::vector<FrameSlot>> sink_;
    std::vector<std::deque<FrameSlot>> window_;
};

// ---------------------------------------------------------------------------
// Block-relative re-anchoring of rotated keys
// ---------------------------------------------------------------------------

struct InfinityRopeState {
    std::int64_t f_limit = 1024;
    /// Total number of frames the stored keys have been shifted back by.
    std::int64_t anchor_offset = 0;
};

/// Rotates already-rotated keys back by `shift` frames (temporal axis only)
/// and records the shift in the state.
inline void reanchor(InfinityRopeState& state, std::span<Vec> keys, std::int64_t shift, const RotaryConfig& rc) {
    if (shift == 0) return;
    const Phase back = phase_for(Coord{-shift, 0, 0}, rc);
    for (auto& k : keys) {
        Vec out(k.size());
        apply_phase_heads(back, k, out);
        k = std::move(out);
    }
    state.anchor_offset += shift;
}

/// Sink + sliding window with keys stored rotated; every step all cached keys
/// are re-rotated so that the block being generated ends at f_limit.
class InfinityRopePolicy final : public CachePolicy {
public:
    explicit InfinityRopePolicy(PolicyConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.layout.validate();
        state_.f_limit = cfg_.f_limit;
        const auto& L = cfg_.layout;
        MEMROPE_REQUIRE(cfg_.f_limit >= static_cast<std::int64_t>(L.sink_frames + L.local_frames + L.frames_per_chunk),
                        "InfinityRopePolicy: f_limit is smaller than the attended span");
        sink_.resize(cfg_.n_layers);
        window_.resize(cfg_.n_layers);
    }

    PolicyId id() const override { return PolicyId::infinity_rope; }
    const InfinityRopeState& state() const { return state_; }

    ChunkContext context() const override {
        ChunkContext ctx;
        ctx.layers.resize(cfg_.n_layers);
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            for (std::size_t i = 0; i < sink_[l].size(); ++i)
                detail::push_frame(ctx.layers[l], sink_[l][i], sink_index_[i], true, Tier::sink);
            for (std::size_t i = 0; i < window_[l].size(); ++i)
                detail::push_frame(ctx.layers[l], window_[l][i], window_index_[i], true, Tier::local);
        }
        ctx.query_positions = detail::grid_positions(cfg_.layout, query_indices());
        return ctx;
    }

    CommitReport commit(std::int64_t, std::vector<std::vector<FrameSlot>> layer_frames,
                        const AttentionTrace*) override {
        detail::check_layer_frames(cfg_, layer_frames);
        CommitReport rep;
        const auto q = query_indices();
        const std::size_t n_new = layer_frames.front().size();
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            for (std::size_t f = 0; f < n_new; ++f) {
                FrameSlot& frame = layer_frames[l][f];
                detail::rotate_frame(frame, cfg_.rotary, q[f]);
                if (!sink_sealed_ && sink_[l].size() < cfg_.layout.sink_frames) {
                    sink_[l].push_back(std::move(frame));
                    if (l == 0) sink_index_.push_back(q[f]);
                } else {
                    window_[l].push_back(std::move(frame));
                    if (l == 0) window_index_.push_back(q[f]);
                }
            }
            std::size_t evicted = 0;
            while (window_[l].size() > cfg_.layout.local_frames) {
                window_[l].pop_front();
                ++evicted;
            }
            rep.evicted_frames = evicted;
        }
        for (std::size_t i = 0; i < rep.evicted_frames; ++i) window_index_.pop_front();
        if (sink_.front().size() == cfg_.layout.sink_frames) sink_sealed_ = true;
        reanchor_all();
        return rep;
    }

    std::size_t cached_tokens() const override {
        return (sink_.front().size() + window_.front().size()) * cfg_.layout.tokens_per_frame();
    }

    nlohmann::json debug_state() const override {
        nlohmann::json j;
        j["policy"] = policy_name(id());
        j["f_limit"] = state_.f_limit;
        j["anchor_offset"] = state_.anchor_offset;
        j["sink_index"] = sink_index_;
        j["window_index"] = std::vector<std::int64_t>(window_index_.begin(), window_index_.end());
        return j;
    }

private:
    std::vector<std::int64_t> query_indices() const {
        std::vector<std::int64_t> q;
        const auto fpc = static_cast<std::int64_t>(cfg_.layout.frames_per_chunk);
        for (std::int64_t f = 0; f < fpc; ++f) q.push_back(state_.f_limit - fpc + 1 + f);
        return q;
    }

    /// Moves every stored frame to its slot in the next step's layout:
    /// [sink | window | query], with the query ending at f_limit.
    void reanchor_all() {
        const auto fpc = static_cast<std::int64_t>(cfg_.layout.frames_per_chunk);
        const auto n_local = static_cast<std::int64_t>(window_index_.size());
        const auto n_sink = static_cast<std::int64_t>(sink_index_.size());
        const std::int64_t local_start = state_.f_limit - fpc - n_local + 1;
        const std::int64_t sink_start = local_start - n_sink;
        std::int64_t steady_shift = 0;
        auto move = [&](auto& frames_by_layer, std::size_t i, std::int64_t& current, std::int64_t target) {
            const std::int64_t shift = current - target;
            if (shift == 0) return;
            for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
                FrameSlot& f = frames_by_layer[l][i];
                std::vector<Vec> keys;
                keys.reserve(f.tokens.size());
                for (auto& t : f.tokens) keys.push_back(std::move(t.key));
                InfinityRopeState scratch{state_.f_limit, 0};
                reanchor(scratch, keys, shift, cfg_.rotary);
                for (std::size_t k = 0; k < keys.size(); ++k) f.tokens[k].key = std::move(keys[k]);
            }
            current = target;
            steady_shift = std::max(steady_shift, shift);
        };
        for (std::size_t i = 0; i < sink_index_.size(); ++i)
            move(sink_, i, sink_index_[i], sink_start + static_cast<std::int64_t>(i));
        for (std::size_t i = 0; i < window_index_.size(); ++i)
            move(window_, i, window_index_[i], local_start + static_cast<std::int64_t>(i));
        state_.anchor_offset += steady_shift;
    }

    PolicyConfig cfg_;
    InfinityRopeState state_;
    bool sink_sealed_ = false;
    std::vector<std::vector<FrameSlot>> sink_;
    std::vector<std::deque<FrameSlot>> window_;
    std::vector<std::int64_t> sink_index_;
    std::deque<std::int64_t> window_index_;
};

// ---------------------------------------------------------------------------
// Participative compression
// ---------------------------------------------------------------------------

struct PcCandidate {
    TokenId id = 0;
    double score = 0.0;
    std::int64_t admit_step = 0;
};

/// Cumulative attention statistic for tokens outside the sink.
struct PCState {
    std::unordered_map<TokenId, double> cumulative_scores;
    std::size_t budget = 32;
};

/// The `budget` candidates with the highest cumulative score. Ties go to the
/// token cached earliest, then to the lower id. Returned in rank order.
inline std::vector<TokenId> pc_select(std::span<const PcCandidate> candidates, std::size_t budget) {
    MEMROPE_REQUIRE(budget <= candidates.size(), "pc_select: budget exceeds the number of candidates");
    std::vector<PcCandidate> sorted(candidates.begin(), candidates.end());
    std::stable_sort(sorted.begin(), sorted.end(), [](const PcCandidate& a, const PcCandidate& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.admit_step != b.admit_step) return a.admit_step < b.admit_step;
        return a.id < b.id;
    });
    std::vector<TokenId> out;
    out.reserve(budget);
    for (std::size_t i = 0; i < budget; ++i) out.push_back(sorted[i].id);
    return out;
}

/// Sink + a compressed tier chosen by cumulative attention + sliding window.
///
/// A reimplementation in the spirit of attention-score token selection: every
/// token outside the sink accumulates the attention mass it receives at every
/// denoising step; when frames leave the window, they compete with the current
/// compressed tokens for `budget` slots. Keys are position-free and indexed
/// block-relatively, so only the selection rule differs from MemRoPE.
class ParticipativePolicy final : public CachePolicy {
public:
    explicit ParticipativePolicy(PolicyConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.layout.validate();
        state_.budget = cfg_.effective_pc_budget();
        sink_.resize(cfg_.n_layers);
        window_.resize(cfg_.n_layers);
        compressed_.resize(cfg_.n_layers);
    }

    PolicyId id() const override { return PolicyId::participative; }
    const PCState& state() const { return state_; }

    std::vector<TokenId> retained() const {
        std::vector<TokenId> ids;
        for (const auto& t : compressed_.front()) ids.push_back(t.id);
        return ids;
    }

    ChunkContext context() const override {
        const auto& L = cfg_.layout;
        const std::size_t hw = L.tokens_per_frame();
        const std::size_t n_sink = sink_.front().size();
        const std::size_t n_comp = compressed_.front().size();
        const std::size_t comp_slots = (n_comp + hw - 1) / hw;
        const std::size_t n_local = window_.front().size();
        ChunkContext ctx;
        ctx.layers.resize(cfg_.n_layers);
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            auto& out = ctx.layers[l];
            std::int64_t t = 0;
            for (const auto& f : sink_[l]) detail::push_frame(out, f, t++, false, Tier::sink);
            for (std::size_t i = 0; i < n_comp; ++i) {
                const TokenState& tok = compressed_[l][i];
                out.push_back({tok.key, tok.value, Coord{t + static_cast<std::int64_t>(i / hw), tok.origin.h, tok.origin.w},
                               false, Tier::compressed, tok.id});
            }
            t += static_cast<std::int64_t>(comp_slots);
            for (const auto& f : window_[l]) detail::push_frame(out, f, t++, false, Tier::local);
        }
        std::vector<std::int64_t> q;
        const auto base = static_cast<std::int64_t>(n_sink + comp_slots + n_local);
        for (std::size_t f = 0; f < L.frames_per_chunk; ++f) q.push_back(base + static_cast<std::int64_t>(f));
        ctx.query_positions = detail::grid_positions(L, q);
        return ctx;
    }

    CommitReport commit(std::int64_t, std::vector<std::vector<FrameSlot>> layer_frames,
                        const AttentionTrace* trace) override {
        MEMROPE_REQUIRE(trace != nullptr, "participative policy requires an attention trace");
        detail::check_layer_frames(cfg_, layer_frames);
        accumulate(*trace);

        CommitReport rep;
        rep.retained_before = retained();
        std::vector<std::vector<FrameSlot>> evicted(cfg_.n_layers);
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            for (auto& f : layer_frames[l]) {
                if (!sink_sealed_ && sink_[l].size() < cfg_.layout.sink_frames) sink_[l].push_back(std::move(f));
                else window_[l].push_back(std::move(f));
            }
            while (window_[l].size() > cfg_.layout.local_frames) {
                evicted[l].push_back(std::move(window_[l].front()));
                window_[l].pop_front();
            }
        }
        if (sink_.front().size() == cfg_.layout.sink_frames) sink_sealed_ = true;
        rep.evicted_frames = evicted.front().size();
        if (rep.evicted_frames > 0) {
            rep.compression_update = true;
            select(evicted);
        }
        rep.retained_after = retained();
        std::unordered_set<TokenId> before(rep.retained_before.begin(), rep.retained_before.end());
        for (TokenId id : rep.retained_after)
            if (!before.count(id)) rep.admitted.push_back(id);
        return rep;
    }

    std::size_t cached_tokens() const override {
        return (sink_.front().size() + window_.front().size()) * cfg_.layout.tokens_per_frame() +
               compressed_.front().size();
    }

    nlohmann::json debug_state() const override {
        nlohmann::json j;
        j["policy"] = policy_name(id());
        j["budget"] = state_.budget;
        j["retained"] = retained();
        j["window_frames"] = window_.front().size();
        return j;
    }

private:
    void accumulate(const AttentionTrace& trace) {
        const ChunkContext ctx = context();
        if (trace.column_mass.size() != ctx.layers.size())
            throw DimensionError("participative: trace does not match the cache layers");
        for (std::size_t l = 0; l < ctx.layers.size(); ++l) {
            if (trace.column_mass[l].size() != ctx.layers[l].size())
                throw DimensionError("participative: trace does not match the cached tokens");
            for (std::size_t j = 0; j < ctx.layers[l].size(); ++j) {
                const auto& tok = ctx.layers[l][j];
                if (tok.tier == Tier::sink) continue;
                state_.cumulative_scores[tok.id] += trace.column_mass[l][j];
            }
        }
    }

    void select(std::vector<std::vector<FrameSlot>>& evicted) {
        std::vector<PcCandidate> cands;
        auto score_of = [&](TokenId id) {
            auto it = state_.cumulative_scores.find(id);
            return it == state_.cumulative_scores.end() ? 0.0 : it->second;
        };
        for (const auto& t : compressed_.front()) cands.push_back({t.id, score_of(t.id), t.admit_step});
        for (const auto& f : evicted.front())
            for (const auto& t : f.tokens) cands.push_back({t.id, score_of(t.id), t.admit_step});
        const auto keep = pc_select(cands, std::min(state_.budget, cands.size()));
        std::unordered_set<TokenId> keep_set(keep.begin(), keep.end());

        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            std::vector<TokenState> next;
            next.reserve(keep.size());
            for (auto& t : compressed_[l])
                if (keep_set.count(t.id)) next.push_back(std::move(t));
            for (auto& f : evicted[l])
                for (auto& t : f.tokens)
                    if (keep_set.count(t.id)) next.push_back(std::move(t));
            std::sort(next.begin(), next.end(), [](const TokenState& a, const TokenState& b) {
                if (a.origin.t != b.origin.t) return a.origin.t < b.origin.t;
                if (a.origin.h != b.origin.h) return a.origin.h < b.origin.h;
                return a.origin.w < b.origin.w;
            });
            compressed_[l] = std::move(next);
        }
        for (const auto& c : cands)
            if (!keep_set.count(c.id)) state_.cumulative_scores.erase(c.id);
    }

    PolicyConfig cfg_;
    PCState state_;
    bool sink_sealed_ = false;
    std::vector<std::vector<FrameSlot>> sink_;
    std::vector<std::vector<TokenState>> compressed_;
    std::vector<std::deque<FrameSlot>> window_;
};

inline std::unique_ptr<CachePolicy> make_policy(PolicyId id, const PolicyConfig& cfg) {
    switch (id) {
        case PolicyId::fifo: return std::make_unique<FifoPolicy>(cfg, false);
        case PolicyId::sink_fifo: return std::make_unique<FifoPolicy>(cfg, true);
        case PolicyId::participative: return std::make_unique<ParticipativePolicy>(cfg);
        case PolicyId::infinity_rope: return std::make_unique<InfinityRopePolicy>(cfg);
        case PolicyId::agg_with_rope: return std::make_unique<MemRopePolicy>(cfg, true);
        case PolicyId::memrope: return std::make_unique<MemRopePolicy>(cfg, false);
    }
    throw ContractError("make_policy: unknown policy");
}

}  // namespace memrope
