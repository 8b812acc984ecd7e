// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "memrope/engine.hpp"

namespace memrope {

/// One row of metrics.csv, describing chunk `chunk` and the cache update that
/// immediately preceded it.
struct StepRecord {
    std::int64_t chunk = 0;
    PolicyId policy = PolicyId::memrope;
    double retention_overlap = 1.0;
    double admitted_attention_share = 0.0;
    /// admitted share divided by the admitted tokens' fraction of the cache.
    double admitted_uniform_ratio = 0.0;
    std::size_t admitted_count = 0;
    double output_drift = 0.0;
    double memory_drift_L = 0.0;
    double memory_drift_S = 0.0;
    double attention_share_sink = 0.0;
    double attention_share_long = 0.0;
    double attention_share_short = 0.0;
    double attention_share_compressed = 0.0;
    double attention_share_local = 0.0;
    double attention_share_current = 0.0;
    std::int64_t max_index = 0;
    std::size_t cached_tokens = 0;
    std::uint64_t flops = 0;
    std::int64_t wall_ns = 0;
};

/// Jaccard overlap |A n B| / |A u B|; two empty sets count as unchanged.
inline double retention_overlap(std::span<const TokenId> prev_set, std::span<const TokenId> next_set) {
    std::unordered_set<TokenId> a(prev_set.begin(), prev_set.end());
    std::unordered_set<TokenId> b(next_set.begin(), next_set.end());
    if (a.empty() && b.empty()) return 1.0;
    std::size_t inter = 0;
    for (TokenId id : a) inter += b.count(id);
    return static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

/// Fraction of the cached-token attention mass that landed on `admitted`.
inline double admitted_attention_share(const AttentionTrace& trace, std::span<const TokenId> context_ids,
                                       std::span<const TokenId> admitted) {
    if (admitted.empty()) return 0.0;
    std::unordered_set<TokenId> adm(admitted.begin(), admitted.end());
    double hit = 0.0, total = 0.0;
    for (const auto& layer : trace.column_mass) {
        if (layer.size() != context_ids.size()) throw DimensionError("admitted_attention_share: trace/id mismatch");
        for (std::size_t j = 0; j < layer.size(); ++j) {
            total += layer[j];
            if (adm.count(context_ids[j])) hit += layer[j];
        }
    }
    return total > 0.0 ? hit / total : 0.0;
}

/// 1 - cosine similarity of the flattened latents, in [0, 2].
inline double output_drift(const ChunkLatent& prev, const ChunkLatent& cur) {
    require_same_size(prev.data, cur.data, "output_drift");
    const double na = norm(prev.data), nb = norm(cur.data);
    MEMROPE_REQUIRE(na > 0.0 && nb > 0.0, "output_drift: zero-norm latent");
    const double c = dot(prev.data, cur.data) / (na * nb);
    return 1.0 - std::clamp(c, -1.0, 1.0);
}

struct TierShares {
    double sink = 0.0, mem_long = 0.0, mem_short = 0.0, compressed = 0.0, local = 0.0, current = 0.0;

    double total() const { return sink + mem_long + mem_short + compressed + local + current; }
};

/// Softmax mass per tier, averaged over every (layer, step, head, query) row.
inline TierShares tier_attention_shares(const TierMass& m) {
    return {m.share(Tier::sink),       m.share(Tier::mem_long), m.share(Tier::mem_short),
            m.share(Tier::compressed), m.share(Tier::local),    m.share(Tier::current)};
}

/// Turns the engine's per-chunk results into StepRecords.
class MetricsTracker {
public:
    explicit MetricsTracker(PolicyId policy) : policy_(policy) {}

    StepRecord observe(const ChunkResult& r) {
        StepRecord s;
        s.chunk = r.chunk;
        s.policy = policy_;
        s.retention_overlap = retention_overlap(last_commit_.retained_before, last_commit_.retained_after);
        s.admitted_count = last_commit_.admitted.size();
        s.admitted_attention_share = admitted_attention_share(r.trace, r.context_ids, last_commit_.admitted);
        if (s.admitted_count > 0 && !r.context_ids.empty()) {
            const double uniform = static_cast<double>(s.admitted_count) / static_cast<double>(r.context_ids.size());
            s.admitted_uniform_ratio = s.admitted_attention_share / uniform;
        }
        s.output_drift = has_prev_ ? output_drift(prev_latent_, r.latent) : 0.0;
        for (const auto& layer : last_commit_.memory_updates)
            for (const auto& u : layer) {
                s.memory_drift_L += u.long_step;
                s.memory_drift_S += u.short_step;
            }
        const TierShares sh = tier_attention_shares(r.tiers);
        s.attention_share_sink = sh.sink;
        s.attention_share_long = sh.mem_long;
        s.attention_share_short = sh.mem_short;
        s.attention_share_compressed = sh.compressed;
        s.attention_share_local = sh.local;
        s.attention_share_current = sh.current;
        s.max_index = r.max_index;
        s.cached_tokens = r.cached_tokens_after;
        s.flops = r.flops;
        s.wall_ns = r.wall_ns;

        last_commit_ = r.commit;
        prev_latent_ = r.latent;
        has_prev_ = true;
        return s;
    }

private:
    PolicyId policy_;
    CommitReport last_commit_;
    ChunkLatent prev_latent_;
    bool has_prev_ = false;
};

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

inline constexpr const char* kCsvHeader =
    "chunk,policy,retention_overlap,admitted_share,output_drift,mem_drift_L,mem_drift_S,share_sink,share_L,share_S,"
    "share_local,flops,wall_ns";

inline std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline std::string csv_row(const StepRecord& s) {
    std::string row = std::to_string(s.chunk);
    row += ',';
    row += policy_name(s.policy);
    for (double v : {s.retention_overlap, s.admitted_attention_share, s.output_drift, s.memory_drift_L,
                     s.memory_drift_S, s.attention_share_sink, s.attention_share_long, s.attention_share_short,
                     s.attention_share_local}) {
        row += ',';
        row += format_real(v);
    }
    row += ',' + std::to_string(s.flops) + ',' + std::to_string(s.wall_ns);
    return row;
}

inline void write_csv(std::ostream& os, std::span<const StepRecord> records) {
    os << kCsvHeader << '\n';
    for (const auto& r : records) os << csv_row(r) << '\n';
}

// ---------------------------------------------------------------------------
// Statistics used by the failure-mode and cost analyses
// ---------------------------------------------------------------------------

/// Linear-interpolation quantile (the usual "type 7" definition).
inline double quantile(std::vector<double> xs, double q) {
    MEMROPE_REQUIRE(!xs.empty(), "quantile: empty sample");
    std::sort(xs.begin(), xs.end());
    const double pos = q * static_cast<double>(xs.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, xs.size() - 1);
    return xs[lo] + (pos - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

inline double median(const std::vector<double>& xs) { return quantile(xs, 0.5); }
inline double iqr(const std::vector<double>& xs) { return quantile(xs, 0.75) - quantile(xs, 0.25); }

/// Number of points strictly above median + k * IQR.
inline std::size_t count_spikes(const std::vector<double>& xs, double k) {
    const double thr = median(xs) + k * iqr(xs);
    return static_cast<std::size_t>(std::count_if(xs.begin(), xs.end(), [&](double x) { return x > thr; }));
}

/// Trailing moving average over up to `window` points.
inline std::vector<double> smooth(std::span<const double> xs, std::size_t window) {
    std::vector<double> out(xs.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sum += xs[i];
        if (i >= window) sum -= xs[i - window];
        out[i] = sum / static_cast<double>(std::min(i + 1, window));
    }
    return out;
}

struct SlopeFit {
    double slope = 0.0;
    double intercept = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    std::size_t n = 0;

    bool ci_contains_zero() const { return ci_low <= 0.0 && 0.0 <= ci_high; }
};

/// Ordinary least squares with a two-sided Student-t confidence interval on the slope.
inline SlopeFit fit_slope(std::span<const double> x, std::span<const double> y, double confidence = 0.95) {
    MEMROPE_REQUIRE(x.size() == y.size() && x.size() >= 3, "fit_slope: need at least three paired points");
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    MEMROPE_REQUIRE(sxx > 0.0, "fit_slope: x has no spread");
    SlopeFit f;
    f.n = x.size();
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    double sse = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double r = y[i] - (f.intercept + f.slope * x[i]);
        sse += r * r;
    }
    const double se = std::sqrt(sse / (n - 2.0) / sxx);
    const boost::math::students_t dist(n - 2.0);
    const double tcrit = boost::math::quantile(boost::math::complement(dist, (1.0 - confidence) / 2.0));
    f.ci_low = f.slope - tcrit * se;
    f.ci_high = f.slope + tcrit * se;
    return f;
}

/// Batch means: averages consecutive blocks of `batch` samples, which absorbs
/// short-range autocorrelation in timing series before a regression.
inline void batch_means(std::span<const double> x, std::span<const double> y, std::size_t batch, std::vector<double>& bx,
                        std::vector<double>& by) {
    bx.clear();
    by.clear();
    for (std::size_t start = 0; start + batch <= x.size(); start += batch) {
        double sx = 0.0, sy = 0.0;
        for (std::size_t i = start; i < start + batch; ++i) {
            sx += x[i];
            sy += y[i];
        }
        bx.push_back(sx / static_cast<double>(batch));
        by.push_back(sy / static_cast<double>(batch));
    }
}

}  // namespace memrope
