#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>

#include "distill/common.hpp"

using namespace distill;

TEST(Rng, SameSeedSameStream)
{
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) {
        ASSERT_EQ(a(), b());
    }
}

TEST(Rng, UniformInUnitInterval)
{
    Rng r(7);
    for (int i = 0; i < 100000; ++i) {
        const double u = r.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
    }
}

TEST(Rng, BelowCoversRangeRoughlyUniformly)
{
    Rng r(3);
    std::vector<int> hist(5, 0);
    for (int i = 0; i < 50000; ++i) {
        const auto k = r.below(5);
        ASSERT_LT(k, 5u);
        ++hist[k];
    }
    for (int h : hist) {
        EXPECT_NEAR(h, 10000, 500);
    }
}

TEST(Rng, NormalMoments)
{
    Rng r(11);
    double sum = 0.0, sq = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double z = r.normal();
        sum += z;
        sq += z * z;
    }
    EXPECT_NEAR(sum / n, 0.0, 0.01);
    EXPECT_NEAR(sq / n, 1.0, 0.02);
}

TEST(Rng, ShuffleIsPermutation)
{
    Rng r(5);
    std::vector<int> v(100);
    for (int i = 0; i < 100; ++i) {
        v[static_cast<std::size_t>(i)] = i;
    }
    auto w = v;
    r.shuffle(w);
    EXPECT_NE(v, w);
    std::sort(w.begin(), w.end());
    EXPECT_EQ(v, w);
}

TEST(Seeds, DeriveIsDeterministicAndSpreads)
{
    EXPECT_EQ(derive_seed(1, 0), derive_seed(1, 0));
    EXPECT_EQ(derive_seed(1, "expert"), derive_seed(1, "expert"));
    std::set<std::uint64_t> seen;
    for (std::uint64_t j = 0; j < 1000; ++j) {
        seen.insert(derive_seed(9, j));
    }
    EXPECT_EQ(seen.size(), 1000u);
    EXPECT_NE(derive_seed(1, "expert"), derive_seed(1, "dataset"));
    EXPECT_NE(derive_seed(1, 0), derive_seed(2, 0));
}

TEST(Numbers, FormatParseRoundTripIsExact)
{
    Rng r(1);
    for (int i = 0; i < 20000; ++i) {
        const double x = (r.uniform() - 0.5) * std::pow(10.0, r.uniform(-30, 30));
        double y = 0.0;
        ASSERT_TRUE(parse_double(format_double(x), y));
        ASSERT_EQ(std::bit_cast<std::uint64_t>(x), std::bit_cast<std::uint64_t>(y));
    }
    for (double x : {0.0, -0.0, 1.0 / 3.0, std::numeric_limits<double>::min(), std::numeric_limits<double>::max(),
                     std::numeric_limits<double>::denorm_min()}) {
        double y = 1.0;
        ASSERT_TRUE(parse_double(format_double(x), y));
        EXPECT_EQ(std::bit_cast<std::uint64_t>(x), std::bit_cast<std::uint64_t>(y));
    }
}

TEST(Numbers, ParseRejectsGarbage)
{
    double v = 0;
    EXPECT_FALSE(parse_double("", v));
    EXPECT_FALSE(parse_double("1.5x", v));
    EXPECT_FALSE(parse_double("abc", v));
    int i = 0;
    EXPECT_FALSE(parse_int("3.0", i));
    EXPECT_TRUE(parse_int("-12", i));
    EXPECT_EQ(i, -12);
}

TEST(Argmax, LowestIndexOnTies)
{
    EXPECT_EQ(argmax(std::vector<double>{1, 3, 2}), 1u);
    EXPECT_EQ(argmax(std::vector<double>{2, 2, 0}), 0u);
    EXPECT_EQ(argmax(std::vector<int>{0, 5, 5}), 1u);
}

TEST(ParallelFor, MatchesSerialAndRethrows)
{
    std::vector<double> serial(257), par(257);
    const auto f = [](std::size_t i) { return std::sin(static_cast<double>(i)) * 3.0; };
    parallel_for(serial.size(), 1, [&](std::size_t i) { serial[i] = f(i); });
    parallel_for(par.size(), 4, [&](std::size_t i) { par[i] = f(i); });
    EXPECT_EQ(serial, par);
    EXPECT_THROW(parallel_for(10, 3,
                              [](std::size_t i) {
                                  if (i == 7) {
                                      throw std::runtime_error("boom");
                                  }
                              }),
                 std::runtime_error);
}
