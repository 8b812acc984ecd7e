// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace memrope {

/// Raised when two operands disagree on length or shape.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a caller violates an operation's precondition.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

#define MEMROPE_REQUIRE(cond, msg)                  \
    do {                                            \
        if (!(cond)) throw ::memrope::ContractError(msg); \
    } while (0)

using Vec = std::vector<float>;

inline void require_same_size(std::span<const float> a, std::span<const float> b, const char* what) {
    if (a.size() != b.size()) {
        throw DimensionError(std::string(what) + ": length mismatch (" + std::to_string(a.size()) + " vs " +
                             std::to_string(b.size()) + ")");
    }
}

/// Sequential dot product with 64-bit accumulation. Symmetric bit-for-bit because
/// the products a_i*b_i are commutative and summed in index order.
inline double dot(std::span<const float> a, std::span<const float> b) {
    require_same_size(a, b, "dot");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return acc;
}

namespace detail {

/// Four interleaved 64-bit partial sums, combined as (s0+s1)+(s2+s3). The fixed
/// order keeps results reproducible while letting the compiler vectorize.
inline double dot_lanes(const float* a, const float* b, std::size_t n) {
    double s[4] = {0.0, 0.0, 0.0, 0.0};
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        for (std::size_t k = 0; k < 4; ++k) s[k] += static_cast<double>(a[i + k]) * static_cast<double>(b[i + k]);
    for (; i < n; ++i) s[0] += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return (s[0] + s[1]) + (s[2] + s[3]);
}

}  // namespace detail

inline double norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

inline double distance(std::span<const float> a, std::span<const float> b) {
    require_same_size(a, b, "distance");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += d * d;
    }
    return std::sqrt(acc);
}

inline bool all_finite(std::span<const float> a) {
    for (float x : a)
        if (!std::isfinite(x)) return false;
    return true;
}

/// Numerically stable softmax (max-subtracted), computed in 64-bit and returned as doubles.
inline std::vector<double> softmax(std::span<const double> scores) {
    MEMROPE_REQUIRE(!scores.empty(), "softmax: empty input");
    double mx = -std::numeric_limits<double>::infinity();
    for (double s : scores) {
        MEMROPE_REQUIRE(std::isfinite(s), "softmax: non-finite score");
        mx = std::max(mx, s);
    }
    std::vector<double> out(scores.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        out[i] = std::exp(scores[i] - mx);
        sum += out[i];
    }
    for (double& o : out) o /= sum;
    return out;
}

/// Dense row-major matrix. Naive kernels only; dimensions here stay at d <= 64.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }

    float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
    std::span<const float> data() const { return data_; }
    std::span<float> data() { return data_; }

    /// out = M * x, accumulated in 64-bit per row.
    void apply(std::span<const float> x, std::span<float> out) const {
        if (x.size() != cols_ || out.size() != rows_) throw DimensionError("Matrix::apply: shape mismatch");
        for (std::size_t r = 0; r < rows_; ++r) {
            out[r] = static_cast<float>(detail::dot_lanes(data_.data() + r * cols_, x.data(), cols_));
        }
    }

    Vec apply(std::span<const float> x) const {
        Vec out(rows_);
        apply(x, out);
        return out;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<float> data_;
};

// ---------------------------------------------------------------------------
// Random numbers
// ---------------------------------------------------------------------------

/// SplitMix64 step. Used for seeding and for deriving sub-seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Derives an independent sub-seed for a named stream: splitmix64 applied to
/// (seed XOR FNV-1a(tag)).
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : tag) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    std::uint64_t s = seed ^ h;
    return splitmix64(s);
}

/// xoshiro256** 1.0 (Blackman & Vigna), state seeded by four SplitMix64 draws.
/// Bit-exact across platforms; normals come from Box-Muller on top of it so no
/// implementation-defined std:: distribution is involved.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& s : s_) s = splitmix64(sm);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    /// Uniform in [0, 1) with 53 bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        MEMROPE_REQUIRE(n > 0, "Rng::below: n must be positive");
        return static_cast<std::uint64_t>(uniform() * static_cast<double>(n));
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    Vec normal_vec(std::size_t n, double scale = 1.0) {
        Vec v(n);
        for (auto& x : v) x = static_cast<float>(normal() * scale);
        return v;
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t s_[4]{};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// FNV-1a over the raw bytes of a float buffer; used for golden digests.
inline std::uint64_t fnv1a(std::span<const float> data, std::uint64_t h = 0xCBF29CE484222325ULL) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(data.data());
    for (std::size_t i = 0; i < data.size_bytes(); ++i) {
        h ^= bytes[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace memrope
