// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "memrope/numkernel.hpp"

namespace memrope {

enum class RotaryMode { temporal_1d, spatiotemporal_3d };

/// Spatiotemporal token position. t is a frame index, (h, w) a grid cell.
struct Coord {
    std::int64_t t = 0;
    std::int64_t h = 0;
    std::int64_t w = 0;

    friend bool operator==(const Coord&, const Coord&) = default;
};

/// Frequency schedule for rotary embeddings.
///
/// In temporal_1d mode every pair of dimensions rotates with the frame index.
/// In spatiotemporal_3d mode the head is split into three contiguous blocks
/// (temporal, row, column), each an independent rotary embedding over its own
/// coordinate with frequencies base^(-2m/d_axis).
class RotaryConfig {
public:
    RotaryConfig() : RotaryConfig(16, 10000.0, RotaryMode::spatiotemporal_3d) {}

    RotaryConfig(std::size_t head_dim, double base_freq, RotaryMode mode)
        : RotaryConfig(head_dim, base_freq, mode, default_split(head_dim)) {}

    RotaryConfig(std::size_t head_dim, double base_freq, RotaryMode mode, std::array<std::size_t, 3> axis_split)
        : head_dim_(head_dim), base_freq_(base_freq), mode_(mode), split_(axis_split) {
        MEMROPE_REQUIRE(head_dim > 0 && head_dim % 2 == 0, "RotaryConfig: head_dim must be positive and even");
        MEMROPE_REQUIRE(base_freq > 1.0, "RotaryConfig: base_freq must exceed 1");
        if (mode_ == RotaryMode::temporal_1d) split_ = {head_dim, 0, 0};
        for (auto s : split_) MEMROPE_REQUIRE(s % 2 == 0, "RotaryConfig: every axis block must be even");
        MEMROPE_REQUIRE(split_[0] + split_[1] + split_[2] == head_dim,
                        "RotaryConfig: axis split must sum to head_dim");
        freqs_.reserve(head_dim / 2);
        axis_.reserve(head_dim / 2);
        for (int a = 0; a < 3; ++a) {
            const std::size_t d_axis = split_[a];
            for (std::size_t m = 0; m < d_axis / 2; ++m) {
                freqs_.push_back(std::pow(base_freq_, -2.0 * static_cast<double>(m) / static_cast<double>(d_axis)));
                axis_.push_back(static_cast<std::uint8_t>(a));
            }
        }
    }

    /// (d/2, d/4, d/4), rounded so every block stays even.
    static std::array<std::size_t, 3> default_split(std::size_t head_dim) {
        std::size_t quarter = (head_dim / 4) & ~std::size_t{1};
        return {head_dim - 2 * quarter, quarter, quarter};
    }

    std::size_t head_dim() const { return head_dim_; }
    double base_freq() const { return base_freq_; }
    RotaryMode mode() const { return mode_; }
    const std::array<std::size_t, 3>& axis_split() const { return split_; }
    std::span<const double> frequencies() const { return freqs_; }
    /// Axis (0 = t, 1 = h, 2 = w) driving each rotary pair.
    std::span<const std::uint8_t> pair_axes() const { return axis_; }

private:
    std::size_t head_dim_;
    double base_freq_;
    RotaryMode mode_;
    std::array<std::size_t, 3> split_;
    std::vector<double> freqs_;
    std::vector<std::uint8_t> axis_;
};

/// cos/sin of every rotary pair for one position; shared by all heads.
struct Phase {
    std::vector<double> cos;
    std::vector<double> sin;
};

/// Phase for a signed position offset. Negative components are legal here
/// (relative offsets, re-anchoring); absolute positions go through rotate().
inline Phase phase_for(const Coord& c, const RotaryConfig& cfg) {
    const auto freqs = cfg.frequencies();
    const auto axes = cfg.pair_axes();
    Phase p;
    p.cos.resize(freqs.size());
    p.sin.resize(freqs.size());
    for (std::size_t m = 0; m < freqs.size(); ++m) {
        const std::int64_t pos = axes[m] == 0 ? c.t : (axes[m] == 1 ? c.h : c.w);
        const double angle = static_cast<double>(pos) * freqs[m];
        p.cos[m] = std::cos(angle);
        p.sin[m] = std::sin(angle);
    }
    return p;
}

/// out = R * in over one head slice, interleaved-pair formulation.
inline void apply_phase(const Phase& p, std::span<const float> in, std::span<float> out) {
    if (in.size() != 2 * p.cos.size() || out.size() != in.size())
        throw DimensionError("apply_phase: vector length does not match rotary head_dim");
    for (std::size_t m = 0; m < p.cos.size(); ++m) {
        const double x0 = in[2 * m];
        const double x1 = in[2 * m + 1];
        out[2 * m] = static_cast<float>(x0 * p.cos[m] - x1 * p.sin[m]);
        out[2 * m + 1] = static_cast<float>(x0 * p.sin[m] + x1 * p.cos[m]);
    }
}

/// Applies the same phase to every head of a multi-head vector.
inline void apply_phase_heads(const Phase& p, std::span<const float> in, std::span<float> out) {
    const std::size_t hd = 2 * p.cos.size();
    if (in.size() % hd != 0 || out.size() != in.size())
        throw DimensionError("apply_phase_heads: vector length is not a multiple of head_dim");
    for (std::size_t off = 0; off < in.size(); off += hd) apply_phase(p, in.subspan(off, hd), out.subspan(off, hd));
}

inline Vec rotate_by(std::span<const float> v, const Coord& offset, const RotaryConfig& cfg) {
    if (v.size() != cfg.head_dim()) throw DimensionError("rotate: vector length must equal head_dim");
    Vec out(v.size());
    apply_phase(phase_for(offset, cfg), v, out);
    return out;
}

inline void require_valid_coord(const Coord& c) {
    MEMROPE_REQUIRE(c.t >= 0 && c.h >= 0 && c.w >= 0, "rotate: coordinates must be non-negative");
}

/// R_c * v for an absolute position c.
inline Vec rotate(std::span<const float> v, const Coord& c, const RotaryConfig& cfg) {
    require_valid_coord(c);
    return rotate_by(v, c, cfg);
}

/// Attention logit between a query at i and a key at j (both rotated).
inline double relative_score(std::span<const float> q, const Coord& i, std::span<const float> k, const Coord& j,
                             const RotaryConfig& cfg) {
    const Vec rq = rotate(q, i, cfg);
    const Vec rk = rotate(k, j, cfg);
    return dot(rq, rk);
}

/// | ||a R_j k + (1-a) R_j2 k2|| - ||a k + (1-a) k2|| |.
///
/// Rotations preserve norm, so a positive value shows that the mixture of
/// rotated keys cannot be written as any single rotation of the mixed raw keys.
/// Both norms are expanded as a^2|k|^2 + (1-a)^2|k2|^2 + 2a(1-a)<k, X k2> with
/// X = R_{j2-j} or X = I, so only the cross term differs between them.
inline double norm_mixing_gap(std::span<const float> k, const Coord& j, std::span<const float> k2, const Coord& j2,
                              double alpha, const RotaryConfig& cfg) {
    MEMROPE_REQUIRE(!(j == j2), "norm_mixing_gap: positions must differ");
    MEMROPE_REQUIRE(alpha > 0.0 && alpha <= 1.0, "norm_mixing_gap: alpha must lie in (0, 1]");
    require_valid_coord(j);
    require_valid_coord(j2);
    require_same_size(k, k2, "norm_mixing_gap");
    if (k.size() != cfg.head_dim()) throw DimensionError("norm_mixing_gap: vector length must equal head_dim");

    const Phase rel = phase_for(Coord{j2.t - j.t, j2.h - j.h, j2.w - j.w}, cfg);
    double cross_rot = 0.0;
    for (std::size_t m = 0; m < rel.cos.size(); ++m) {
        const double y0 = k2[2 * m] * rel.cos[m] - k2[2 * m + 1] * rel.sin[m];
        const double y1 = k2[2 * m] * rel.sin[m] + k2[2 * m + 1] * rel.cos[m];
        cross_rot += k[2 * m] * y0 + k[2 * m + 1] * y1;
    }
    const double beta = 1.0 - alpha;
    const double base = alpha * alpha * dot(k, k) + beta * beta * dot(k2, k2);
    const double mixed_rot = base + 2.0 * alpha * beta * cross_rot;
    const double mixed_raw = base + 2.0 * alpha * beta * dot(k, k2);
    return std::abs(std::sqrt(std::max(mixed_rot, 0.0)) - std::sqrt(std::max(mixed_raw, 0.0)));
}

}  // namespace memrope
