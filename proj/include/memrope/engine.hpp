// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "memrope/indexing.hpp"
#include "memrope/memcache.hpp"
#include "memrope/numkernel.hpp"
#include "memrope/policies.hpp"
#include "memrope/rope.hpp"

namespace memrope {

struct ModelConfig {
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t d_model = 64;
    /// Init scale of W_Q and W_K relative to 1/sqrt(d); sets attention sharpness.
    double qk_scale = 1.5;

    std::size_t head_dim() const { return d_model / n_heads; }

    void validate() const {
        MEMROPE_REQUIRE(n_layers > 0 && n_heads > 0 && d_model > 0, "ModelConfig: sizes must be positive");
        MEMROPE_REQUIRE(d_model % n_heads == 0, "ModelConfig: d_model must be divisible by n_heads");
        MEMROPE_REQUIRE(head_dim() % 2 == 0, "ModelConfig: head_dim must be even");
    }
};

/// Descending noise levels, one transformer pass each.
struct DenoiseSchedule {
    std::vector<int> timesteps{1000, 750, 500, 250};

    std::size_t steps() const { return timesteps.size(); }

    void validate() const {
        MEMROPE_REQUIRE(!timesteps.empty(), "DenoiseSchedule: need at least one step");
        for (std::size_t i = 0; i < timesteps.size(); ++i) {
            MEMROPE_REQUIRE(timesteps[i] > 0 && timesteps[i] <= 1000, "DenoiseSchedule: timesteps must be in (0, 1000]");
            if (i > 0) MEMROPE_REQUIRE(timesteps[i] < timesteps[i - 1], "DenoiseSchedule: timesteps must descend");
        }
    }
};

/// Drifting-Gaussian source for the initial noisy latents: a mean that rotates
/// slowly in a random plane, a fixed per-cell pattern, and fresh noise.
struct StreamConfig {
    double amplitude = 1.0;
    double period_frames = 240.0;
    double spatial_scale = 0.5;
    double noise = 0.5;
    double conditioning = 1.0;
};

struct EngineConfig {
    PolicyId policy = PolicyId::memrope;
    ModelConfig model;
    CacheLayout layout;
    MemoryConfig memory;
    RotaryMode rotary_mode = RotaryMode::spatiotemporal_3d;
    double rope_base = 10000.0;
    DenoiseSchedule schedule;
    StreamConfig stream;
    double denoise_gain = 0.5;
    std::size_t pc_budget = 0;
    std::int64_t f_limit = 1024;
    std::uint64_t seed = 7;

    RotaryConfig rotary() const { return RotaryConfig(model.head_dim(), rope_base, rotary_mode); }

    PolicyConfig policy_config() const {
        PolicyConfig pc;
        pc.layout = layout;
        pc.memory = memory;
        pc.rotary = rotary();
        pc.n_layers = model.n_layers;
        pc.width = model.d_model;
        pc.pc_budget = pc_budget;
        pc.f_limit = f_limit;
        return pc;
    }

    void validate() const {
        model.validate();
        layout.validate();
        schedule.validate();
        MemoryState(1, memory.alpha_long, memory.alpha_short).validate();
    }
};

/// Seeded attention and denoiser weights. Everything derives from one seed.
struct ModelWeights {
    struct Layer {
        Matrix wq, wk, wv, wo;
    };
    std::vector<Layer> layers;
    Matrix mlp_in, mlp_out;
    Vec stream_u, stream_v, conditioning;
    std::vector<Vec> spatial;  // one pattern per grid cell

    static ModelWeights from_seed(const ModelConfig& m, const CacheLayout& layout, std::uint64_t seed) {
        m.validate();
        const std::size_t d = m.d_model;
        const double s = 1.0 / std::sqrt(static_cast<double>(d));
        Rng rng(derive_seed(seed, "weights"));
        auto mat = [&](double scale) {
            Matrix w(d, d);
            for (auto& x : w.data()) x = static_cast<float>(rng.normal() * scale);
            return w;
        };
        ModelWeights w;
        for (std::size_t l = 0; l < m.n_layers; ++l) w.layers.push_back({mat(m.qk_scale * s), mat(m.qk_scale * s), mat(s), mat(0.5 * s)});
        w.mlp_in = mat(2.0 * s);
        w.mlp_out = mat(s);
        Rng srng(derive_seed(seed, "stream"));
        w.stream_u = srng.normal_vec(d);
        w.stream_v = srng.normal_vec(d);
        w.conditioning = srng.normal_vec(d);
        for (std::size_t c = 0; c < layout.tokens_per_frame(); ++c) w.spatial.push_back(srng.normal_vec(d));
        return w;
    }
};

/// frames x H x W tokens of width d, row-major.
struct ChunkLatent {
    std::size_t frames = 0, grid_h = 0, grid_w = 0, width = 0;
    int denoise_step = 0;
    std::vector<float> data;

    ChunkLatent() = default;
    ChunkLatent(std::size_t f, std::size_t h, std::size_t w, std::size_t d)
        : frames(f), grid_h(h), grid_w(w), width(d), data(f * h * w * d, 0.0f) {}

    std::size_t tokens() const { return frames * grid_h * grid_w; }
    std::span<float> token(std::size_t i) { return {data.data() + i * width, width}; }
    std::span<const float> token(std::size_t i) const { return {data.data() + i * width, width}; }
};

/// x' = x + c(sigma) * (1 - |x|) * tanh(MLP(attn_out)), MLP(a) = W2 tanh(W1 a).
///
/// MLP(0) = 0, so a zero attention output leaves x untouched, and for
/// |x| <= 1 and c <= 1 every output component stays within [-1, 1].
inline ChunkLatent toy_denoise_step(const ChunkLatent& x, int sigma, std::span<const float> attn_out,
                                    const ModelWeights& w, double gain) {
    MEMROPE_REQUIRE(sigma > 0 && sigma <= 1000, "toy_denoise_step: sigma outside the schedule range");
    if (attn_out.size() != x.data.size()) throw DimensionError("toy_denoise_step: attention output shape mismatch");
    const double c = std::min(1.0, gain * static_cast<double>(sigma) / 1000.0);
    ChunkLatent out = x;
    out.denoise_step = x.denoise_step + 1;
    Vec hidden(x.width), mlp(x.width);
    for (std::size_t i = 0; i < x.tokens(); ++i) {
        auto a = attn_out.subspan(i * x.width, x.width);
        w.mlp_in.apply(a, hidden);
        for (auto& v : hidden) v = std::tanh(v);
        w.mlp_out.apply(hidden, mlp);
        auto xi = x.token(i);
        auto oi = out.token(i);
        for (std::size_t k = 0; k < x.width; ++k) {
            const double xv = xi[k];
            oi[k] = static_cast<float>(xv + c * (1.0 - std::abs(xv)) * std::tanh(static_cast<double>(mlp[k])));
        }
    }
    return out;
}

/// Attention mass per tier, summed over (layer, step, head, query) rows.
struct TierMass {
    std::array<double, 6> mass{};
    std::size_t rows = 0;

    double share(Tier t) const { return rows ? mass[static_cast<std::size_t>(t)] / static_cast<double>(rows) : 0.0; }
};

struct ChunkResult {
    std::int64_t chunk = 0;
    ChunkLatent latent;
    CommitReport commit;
    TierMass tiers;
    AttentionTrace trace;
    /// Ids and tiers of the context tokens, aligned with trace.column_mass[l].
    std::vector<TokenId> context_ids;
    std::vector<Tier> context_tiers;
    std::vector<Coord> context_positions;
    std::vector<Coord> query_positions;
    std::int64_t min_index = 0;
    std::int64_t max_index = 0;
    std::size_t cached_tokens_after = 0;
    std::uint64_t flops = 0;
    std::int64_t wall_ns = 0;
};

/// Chunk-autoregressive loop over a toy causal transformer.
///
/// Each chunk starts from a noisy latent, runs one transformer pass per
/// schedule step against [context || current chunk], then runs one more pass
/// over the denoised chunk to produce the keys and values handed to the policy.
/// Keys leave the model unrotated; the policy decides where rotation happens.
class Engine {
public:
    explicit Engine(EngineConfig cfg)
        : cfg_(std::move(cfg)),
          rotary_((cfg_.validate(), cfg_.rotary())),
          weights_(ModelWeights::from_seed(cfg_.model, cfg_.layout, cfg_.seed)),
          noise_(derive_seed(cfg_.seed, "noise")),
          policy_(make_policy(cfg_.policy, cfg_.policy_config())) {}

    Engine(EngineConfig cfg, std::unique_ptr<CachePolicy> policy) : Engine(std::move(cfg)) {
        MEMROPE_REQUIRE(policy != nullptr, "Engine: null policy");
        policy_ = std::move(policy);
    }

    const EngineConfig& config() const { return cfg_; }
    const CachePolicy& policy() const { return *policy_; }
    const ModelWeights& weights() const { return weights_; }
    std::int64_t chunks_done() const { return next_chunk_; }

    /// Noisy starting latent of chunk `c`; draws from the engine's noise stream.
    ChunkLatent initial_latent(std::int64_t c) {
        const auto& L = cfg_.layout;
        const auto& S = cfg_.stream;
        const std::size_t d = cfg_.model.d_model;
        ChunkLatent x(L.frames_per_chunk, L.grid_h, L.grid_w, d);
        const double omega = 2.0 * 3.14159265358979323846 / S.period_frames;
        std::size_t i = 0;
        for (std::size_t f = 0; f < L.frames_per_chunk; ++f) {
            const double t = static_cast<double>(c * static_cast<std::int64_t>(L.frames_per_chunk) + static_cast<std::int64_t>(f));
            const double cu = S.amplitude * std::cos(omega * t), cv = S.amplitude * std::sin(omega * t);
            for (std::size_t cell = 0; cell < L.tokens_per_frame(); ++cell, ++i) {
                auto tok = x.token(i);
                for (std::size_t k = 0; k < d; ++k) {
                    double v = cu * weights_.stream_u[k] + cv * weights_.stream_v[k] +
                               S.spatial_scale * weights_.spatial[cell][k] + S.noise * noise_.normal();
                    if (c == 0) v += S.conditioning * weights_.conditioning[k];
                    tok[k] = static_cast<float>(std::tanh(v));
                }
            }
        }
        return x;
    }

    /// Generates one chunk and commits it to the cache.
    ChunkResult step() {
        const auto t0 = std::chrono::steady_clock::now();
        const std::int64_t c = next_chunk_;
        ChunkResult res;
        res.chunk = c;
        flops_ = 0;

        const ChunkContext ctx = policy_->context();
        Prepared prep = prepare(ctx);
        res.query_positions = ctx.query_positions;
        for (const auto& tok : ctx.layers.front()) {
            res.context_ids.push_back(tok.id);
            res.context_tiers.push_back(tok.tier);
            res.context_positions.push_back(tok.position);
        }
        res.min_index = prep.min_index;
        res.max_index = prep.max_index;
        res.trace.column_mass.assign(cfg_.model.n_layers, {});
        res.trace.current_mass.assign(cfg_.model.n_layers, 0.0);
        for (std::size_t l = 0; l < cfg_.model.n_layers; ++l) res.trace.column_mass[l].assign(ctx.layers[l].size(), 0.0);

        ChunkLatent x = initial_latent(c);
        for (int sigma : cfg_.schedule.timesteps) {
            Vec attn_out = forward(x, prep, &res, nullptr);
            x = toy_denoise_step(x, sigma, attn_out, weights_, cfg_.denoise_gain);
            flops_ += x.tokens() * 4 * cfg_.model.d_model * cfg_.model.d_model;
        }

        std::vector<std::vector<FrameSlot>> kv(cfg_.model.n_layers);
        forward(x, prep, nullptr, &kv);
        for (auto& frames : kv)
            for (auto& f : frames)
                for (auto& tok : f.tokens) tok.admit_step = c;

        res.trace.rows_per_layer = cfg_.schedule.steps() * cfg_.model.n_heads * x.tokens();
        res.commit = policy_->commit(c, std::move(kv), &res.trace);
        res.cached_tokens_after = policy_->cached_tokens();
        res.latent = std::move(x);
        res.flops = flops_;
        ++next_chunk_;
        res.wall_ns = std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - t0).count();
        return res;
    }

private:
    struct Prepared {
        std::vector<std::vector<float>> keys;    // [layer] n_ctx x d, rotated
        std::vector<std::vector<float>> values;  // [layer] n_ctx x d
        std::vector<Tier> tiers;
        std::vector<Phase> query_phase;
        std::int64_t min_index = 0;
        std::int64_t max_index = -1;
        std::size_t n_ctx = 0;
    };

    Prepared prepare(const ChunkContext& ctx) {
        const std::size_t d = cfg_.model.d_model;
        Prepared p;
        p.n_ctx = ctx.layers.front().size();
        p.keys.resize(cfg_.model.n_layers);
        p.values.resize(cfg_.model.n_layers);
        bool first = true;
        auto track = [&](std::int64_t t) {
            if (first) {
                p.min_index = p.max_index = t;
                first = false;
            }
            p.min_index = std::min(p.min_index, t);
            p.max_index = std::max(p.max_index, t);
        };
        for (std::size_t l = 0; l < cfg_.model.n_layers; ++l) {
            const auto& toks = ctx.layers[l];
            if (toks.size() != p.n_ctx) throw DimensionError("Engine: layers disagree on context size");
            p.keys[l].resize(toks.size() * d);
            p.values[l].resize(toks.size() * d);
            for (std::size_t j = 0; j < toks.size(); ++j) {
                const auto& tok = toks[j];
                if (tok.key.size() != d || tok.value.size() != d) throw DimensionError("Engine: cached token width mismatch");
                std::span<float> kout(p.keys[l].data() + j * d, d);
                if (tok.prerotated) {
                    std::copy(tok.key.begin(), tok.key.end(), kout.begin());
                } else {
                    apply_phase_heads(phase_for(tok.position, rotary_), tok.key, kout);
                    flops_ += 3 * d;
                }
                std::copy(tok.value.begin(), tok.value.end(), p.values[l].begin() + static_cast<std::ptrdiff_t>(j * d));
                if (l == 0) {
                    p.tiers.push_back(tok.tier);
                    track(tok.position.t);
                }
            }
        }
        for (const auto& q : ctx.query_positions) {
            p.query_phase.push_back(phase_for(q, rotary_));
            track(q.t);
        }
        return p;
    }

    /// One transformer pass. With `res` set, accumulates attention statistics and
    /// returns h_final - x. With `kv` set, captures each layer's raw keys/values.
    Vec forward(const ChunkLatent& x, const Prepared& p, ChunkResult* res, std::vector<std::vector<FrameSlot>>* kv) {
        const std::size_t d = cfg_.model.d_model;
        const std::size_t n_q = x.tokens();
        const std::size_t n_heads = cfg_.model.n_heads;
        const std::size_t hd = cfg_.model.head_dim();
        const std::size_t n_keys = p.n_ctx + n_q;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
        const auto& L = cfg_.layout;

        std::vector<float> h(x.data);
        std::vector<float> hn(n_q * d), q(n_q * d), k(n_q * d), v(n_q * d), qr(n_q * d), kr(n_q * d), att(n_q * d);
        std::vector<double> scores(n_keys), acc(hd);
        Vec proj(d);

        for (std::size_t l = 0; l < cfg_.model.n_layers; ++l) {
            const auto& W = weights_.layers[l];
            for (std::size_t i = 0; i < n_q; ++i) {
                std::span<const float> hi(h.data() + i * d, d);
                std::span<float> ni(hn.data() + i * d, d);
                rms_norm(hi, ni);
                W.wq.apply(ni, std::span<float>(q.data() + i * d, d));
                W.wk.apply(ni, std::span<float>(k.data() + i * d, d));
                W.wv.apply(ni, std::span<float>(v.data() + i * d, d));
                apply_phase_heads(p.query_phase[i], std::span<const float>(q.data() + i * d, d),
                                  std::span<float>(qr.data() + i * d, d));
                apply_phase_heads(p.query_phase[i], std::span<const float>(k.data() + i * d, d),
                                  std::span<float>(kr.data() + i * d, d));
            }
            flops_ += n_q * (2 * 3 * d * d + 2 * 3 * d);

            if (kv) {
                auto& frames = (*kv)[l];
                frames.resize(L.frames_per_chunk);
                for (std::size_t i = 0; i < n_q; ++i) {
                    const Coord& qp = queries_origin(i);
                    TokenState ts;
                    ts.key.assign(k.begin() + static_cast<std::ptrdiff_t>(i * d), k.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
                    ts.value.assign(v.begin() + static_cast<std::ptrdiff_t>(i * d), v.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
                    ts.origin = qp;
                    ts.id = static_cast<TokenId>(qp.t) * L.tokens_per_frame() + static_cast<TokenId>(qp.h) * L.grid_w +
                            static_cast<TokenId>(qp.w);
                    frames[i / L.tokens_per_frame()].tokens.push_back(std::move(ts));
                }
                if (l + 1 == cfg_.model.n_layers) break;
            }

            const float* ck = p.keys[l].data();
            const float* cv = p.values[l].data();
            for (std::size_t head = 0; head < n_heads; ++head) {
                const std::size_t off = head * hd;
                for (std::size_t i = 0; i < n_q; ++i) {
                    const float* qi = qr.data() + i * d + off;
                    double mx = -1e300;
                    for (std::size_t j = 0; j < n_keys; ++j) {
                        const float* kj = j < p.n_ctx ? ck + j * d + off : kr.data() + (j - p.n_ctx) * d + off;
                        const double s = detail::dot_lanes(qi, kj, hd) * inv_sqrt;
                        scores[j] = s;
                        mx = std::max(mx, s);
                    }
                    double sum = 0.0;
                    for (std::size_t j = 0; j < n_keys; ++j) {
                        scores[j] = std::exp(scores[j] - mx);
                        sum += scores[j];
                    }
                    std::fill(acc.begin(), acc.end(), 0.0);
                    for (std::size_t j = 0; j < n_keys; ++j) {
                        const double wgt = scores[j] / sum;
                        const float* vj = j < p.n_ctx ? cv + j * d + off : v.data() + (j - p.n_ctx) * d + off;
                        for (std::size_t e = 0; e < hd; ++e) acc[e] += wgt * vj[e];
                        if (res) {
                            if (j < p.n_ctx) {
                                res->trace.column_mass[l][j] += wgt;
                                res->tiers.mass[static_cast<std::size_t>(p.tiers[j])] += wgt;
                            } else {
                                res->trace.current_mass[l] += wgt;
                                res->tiers.mass[static_cast<std::size_t>(Tier::current)] += wgt;
                            }
                        }
                    }
                    float* ai = att.data() + i * d + off;
                    for (std::size_t e = 0; e < hd; ++e) ai[e] = static_cast<float>(acc[e]);
                    if (res) ++res->tiers.rows;
                }
            }
            flops_ += n_heads * n_q * n_keys * 4 * hd;

            for (std::size_t i = 0; i < n_q; ++i) {
                W.wo.apply(std::span<const float>(att.data() + i * d, d), proj);
                for (std::size_t e = 0; e < d; ++e) h[i * d + e] += proj[e];
            }
            flops_ += n_q * 2 * d * d;
        }

        Vec out(n_q * d);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = h[i] - x.data[i];
        return out;
    }

    /// Absolute origin of query token i in the chunk being generated.
    Coord queries_origin(std::size_t i) const {
        const auto& L = cfg_.layout;
        const std::size_t hw = L.tokens_per_frame();
        const std::size_t f = i / hw, cell = i % hw;
        return Coord{next_chunk_ * static_cast<std::int64_t>(L.frames_per_chunk) + static_cast<std::int64_t>(f),
                     static_cast<std::int64_t>(cell / L.grid_w), static_cast<std::int64_t>(cell % L.grid_w)};
    }

    static void rms_norm(std::span<const float> in, std::span<float> out) {
        double ss = 0.0;
        for (float v : in) ss += static_cast<double>(v) * v;
        const double inv = 1.0 / std::sqrt(ss / static_cast<double>(in.size()) + 1e-6);
        for (std::size_t i = 0; i < in.size(); ++i) out[i] = static_cast<float>(in[i] * inv);
    }

    EngineConfig cfg_;
    RotaryConfig rotary_;
    ModelWeights weights_;
    Rng noise_;
    std::unique_ptr<CachePolicy> policy_;
    std::int64_t next_chunk_ = 0;
    std::uint64_t flops_ = 0;
};

/// Runs `n_chunks` chunks, handing each result to `sink` as it is produced.
inline void generate(const EngineConfig& cfg, std::int64_t n_chunks, const std::function<void(ChunkResult&&)>& sink) {
    MEMROPE_REQUIRE(n_chunks >= 1, "generate: n_chunks must be at least 1");
    Engine engine(cfg);
    for (std::int64_t c = 0; c < n_chunks; ++c) sink(engine.step());
}

}  // namespace memrope
