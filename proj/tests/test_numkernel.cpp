// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "memrope/numkernel.hpp"
#include "test_util.hpp"

using namespace memrope;
using memrope::testing::RefXoshiro;

TEST(Dot, Orthogonal) {
    const Vec a{1.0f, 0.0f}, b{0.0f, 1.0f};
    EXPECT_EQ(dot(a, b), 0.0);
}

TEST(Dot, Pythagorean) {
    const Vec v{3.0f, 4.0f};
    EXPECT_EQ(dot(v, v), 25.0);
    EXPECT_EQ(norm(v), 5.0);
}

TEST(Dot, MatchesReverseOrderLongDoubleSum) {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const Vec a = rng.normal_vec(64), b = rng.normal_vec(64);
        long double ref = 0.0L;
        for (std::size_t i = a.size(); i-- > 0;) ref += static_cast<long double>(a[i]) * b[i];
        EXPECT_NEAR(dot(a, b), static_cast<double>(ref), 1e-9);
    }
}

TEST(Dot, SymmetricBitForBit) {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const Vec a = rng.normal_vec(37), b = rng.normal_vec(37);
        EXPECT_EQ(dot(a, b), dot(b, a));
    }
}

TEST(Dot, LengthMismatchThrows) {
    const Vec a(3), b(4);
    EXPECT_THROW(dot(a, b), DimensionError);
    EXPECT_THROW(distance(a, b), DimensionError);
}

TEST(Softmax, Uniform) {
    const std::vector<double> s{0, 0, 0};
    for (double p : softmax(s)) EXPECT_DOUBLE_EQ(p, 1.0 / 3.0);
}

TEST(Softmax, LargeLogitDoesNotOverflow) {
    const std::vector<double> s{1000.0, 0.0};
    const auto p = softmax(s);
    EXPECT_TRUE(std::isfinite(p[0]) && std::isfinite(p[1]));
    EXPECT_NEAR(p[0], 1.0, 1e-12);
    EXPECT_NEAR(p[1], 0.0, 1e-12);
}

TEST(Softmax, MatchesDirectOracle) {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> s(16);
        for (auto& x : s) x = rng.normal() * 3.0;
        long double z = 0.0L;
        for (double x : s) z += std::exp(static_cast<long double>(x));
        const auto p = softmax(s);
        double total = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            EXPECT_NEAR(p[i], static_cast<double>(std::exp(static_cast<long double>(s[i])) / z), 1e-7);
            EXPECT_GE(p[i], 0.0);
            total += p[i];
        }
        EXPECT_NEAR(total, 1.0, 1e-6);
    }
}

TEST(Softmax, EmptyIsContractError) {
    const std::vector<double> s;
    EXPECT_THROW(softmax(s), ContractError);
}

TEST(Matrix, ApplyMatchesNaiveProduct) {
    Rng rng(9);
    Matrix m(7, 13);
    for (auto& x : m.data()) x = static_cast<float>(rng.normal());
    const Vec x = rng.normal_vec(13);
    Vec out(7);
    m.apply(x, out);
    for (std::size_t r = 0; r < 7; ++r) {
        long double ref = 0.0L;
        for (std::size_t c = 0; c < 13; ++c) ref += static_cast<long double>(m(r, c)) * x[c];
        EXPECT_NEAR(out[r], static_cast<double>(ref), 1e-5);
    }
    Vec bad(12);
    EXPECT_THROW(m.apply(bad, out), DimensionError);
}

TEST(Rng, SplitMixKnownOutputs) {
    std::uint64_t s = 0;
    EXPECT_EQ(splitmix64(s), 0xE220A8397B1DCDAFULL);
    EXPECT_EQ(splitmix64(s), 0x6E789E6AA1B965F4ULL);
    EXPECT_EQ(splitmix64(s), 0x06C45D188009454FULL);
}

TEST(Rng, MatchesReferenceXoshiro) {
    for (std::uint64_t seed : {0ULL, 1ULL, 7ULL, 0xDEADBEEFULL}) {
        Rng a(seed);
        RefXoshiro ref(seed);
        for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), ref.next());
    }
}

TEST(Rng, SameSeedSameMillionDraws) {
    Rng a(42), b(42);
    bool same = true;
    for (int i = 0; i < 1'000'000; ++i) same &= a.next_u64() == b.next_u64();
    EXPECT_TRUE(same);
}

TEST(Rng, DerivedSeedsDiffer) {
    EXPECT_NE(derive_seed(7, "weights"), derive_seed(7, "noise"));
    EXPECT_NE(derive_seed(7, "weights"), derive_seed(8, "weights"));
    EXPECT_EQ(derive_seed(7, "stream"), derive_seed(7, "stream"));
}

TEST(Rng, NormalMoments) {
    Rng rng(1);
    double s = 0.0, s2 = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        s += x;
        s2 += x * x;
    }
    EXPECT_NEAR(s / n, 0.0, 0.01);
    EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Rng, UniformRange) {
    Rng rng(2);
    for (int i = 0; i < 10000; ++i) {
        const double u = rng.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        ASSERT_LT(rng.below(5), 5u);
    }
    EXPECT_THROW(rng.below(0), ContractError);
}

TEST(Fnv, SensitiveToEveryBit) {
    Vec a{1.0f, 2.0f, 3.0f};
    const auto h = fnv1a(a);
    a[2] = std::nextafter(a[2], 4.0f);
    EXPECT_NE(h, fnv1a(a));
}

TEST(Finite, DetectsNanAndInf) {
    EXPECT_TRUE(all_finite(Vec{1.0f, -2.0f}));
    EXPECT_FALSE(all_finite(Vec{1.0f, std::numeric_limits<float>::quiet_NaN()}));
    EXPECT_FALSE(all_finite(Vec{std::numeric_limits<float>::infinity()}));
}
