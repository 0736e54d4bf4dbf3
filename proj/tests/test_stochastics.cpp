#include <gtest/gtest.h>

#include <cmath>

#include "convint/stochastics.hpp"

using namespace convint;

namespace {

// O(t_k) recomputed from scratch for every k.
std::vector<double> brute_force_O(const std::vector<double>& b, double dt, double a) {
  std::vector<double> O(b.size());
  for (std::size_t k = 0; k < b.size(); ++k) {
    double sup = 0.0, semi = 0.0;
    for (std::size_t i = 0; i <= k; ++i) {
      sup = std::max(sup, std::abs(b[i]));
      for (std::size_t j = i + 1; j <= k; ++j)
        semi = std::max(semi, std::abs(b[i] - b[j]) / std::pow((j - i) * dt, a));
    }
    O[k] = sup + semi;
  }
  return O;
}

}  // namespace

TEST(Wiener, ZeroGeneratorGivesZeroPath) {
  auto p = sample_wiener_with([] { return 0.0; }, 7, 1.0, 1.0);
  ASSERT_EQ(p.values.size(), 2u);
  EXPECT_EQ(p.values[0], 0.0);
  EXPECT_EQ(p.values[1], 0.0);
}

TEST(Wiener, SeedReproducesBitForBit) {
  auto a = sample_wiener(42, 1.0, 0.25);
  auto b = sample_wiener(42, 1.0, 0.25);
  EXPECT_EQ(a.values, b.values);
  EXPECT_EQ(a.values.front(), 0.0);
  auto c = sample_wiener(43, 1.0, 0.25);
  EXPECT_NE(a.values, c.values);
}

TEST(Wiener, NonIntegerGridRejected) {
  EXPECT_THROW(sample_wiener(1, 1.0, 0.3), GridError);
  EXPECT_THROW(sample_wiener(1, 1.0, -0.1), GridError);
}

TEST(Wiener, TerminalVarianceMonteCarlo) {
  const int n = 10000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    auto p = sample_wiener(1000 + i, 1.0, 1.0 / 16);
    const double x = p.values.back();
    s += x;
    s2 += x * x;
  }
  const double mean = s / n;
  const double var = s2 / n - mean * mean;
  EXPECT_GE(var, 0.95);
  EXPECT_LE(var, 1.05);
}

TEST(Wiener, CoarsenKeepsSharedGridPoints) {
  auto p = sample_wiener(3, 1.0, 1.0 / 8);
  auto q = p.coarsen(4);
  ASSERT_EQ(q.values.size(), 3u);
  EXPECT_EQ(q.values[1], p.values[4]);
  EXPECT_EQ(q.values[2], p.values[8]);
  EXPECT_THROW(p.coarsen(3), GridError);
}

TEST(Holder, ZeroPath) {
  WienerPath p{0, 1.0, 0.25, std::vector<double>(5, 0.0)};
  auto c = holder_process(p, 0.25);
  for (double o : c.O_values) EXPECT_EQ(o, 0.0);
}

TEST(Holder, SinglePair) {
  const double c0 = -0.7, dt = 0.125;
  WienerPath p{0, 0.125, dt, {0.0, c0}};
  auto c = holder_process(p, 0.25);
  EXPECT_NEAR(c.O_values[1], std::abs(c0) + std::abs(c0) * std::pow(dt, -0.25), 1e-14);
}

TEST(Holder, ThreePointTent) {
  WienerPath p{0, 1.0, 0.5, {0.0, 1.0, 0.0}};
  auto c = holder_process(p, 0.25);
  EXPECT_NEAR(c.O_values[2], 1.0 + std::pow(0.5, -0.25), 1e-14);
}

TEST(Holder, MatchesBruteForceAndIsMonotone) {
  auto p = sample_wiener(11, 1.0, 1.0 / 64);
  auto c = holder_process(p, 0.25);
  auto o = brute_force_O(p.values, p.dt, 0.25);
  ASSERT_EQ(c.O_values.size(), o.size());
  for (std::size_t k = 0; k < o.size(); ++k) EXPECT_NEAR(c.O_values[k], o[k], 1e-13);
  for (std::size_t k = 1; k < o.size(); ++k) EXPECT_GE(c.O_values[k], c.O_values[k - 1]);
  EXPECT_TRUE(c.exact);
}

TEST(Holder, WindowedIsFlaggedAndBelowExact) {
  auto p = sample_wiener(12, 1.0, 1.0 / 64);
  auto exact = holder_process(p, 0.25);
  auto approx = holder_process(p, 0.25, 4);
  EXPECT_FALSE(approx.exact);
  for (std::size_t k = 0; k < exact.O_values.size(); ++k) EXPECT_LE(approx.O_values[k], exact.O_values[k] + 1e-15);
}

TEST(Holder, ExponentOutOfRange) {
  WienerPath p{0, 1.0, 0.5, {0.0, 1.0, 0.0}};
  EXPECT_THROW(holder_process(p, 0.5), ParameterError);
  EXPECT_THROW(holder_process(p, 0.0), ParameterError);
}

TEST(StoppingTime, Examples) {
  HolderCertificate c{0.25, {0.0, 2.0, 5.0}, true};
  EXPECT_EQ(stopping_time(c, 1.0), 1u);
  EXPECT_EQ(stopping_time(c, 10.0), 2u);
  HolderCertificate z{0.25, {0.0, 0.0, 0.0, 0.0}, true};
  EXPECT_EQ(stopping_time(z, 0.1), 3u);
}

TEST(StopPath, ZeroPathUnchanged) {
  WienerPath p{0, 1.0, 0.25, std::vector<double>(5, 0.0)};
  auto s = stop_path(p, 0.25, 1.0);
  EXPECT_EQ(s.tau_index, 4u);
  EXPECT_FALSE(s.exceeded);
  EXPECT_EQ(s.values, p.values);
}

TEST(StopPath, FrozenAfterExceedanceAndNormBounded) {
  for (std::uint64_t seed = 0; seed < 16; ++seed) {
    auto p = sample_wiener(seed, 1.0, 1.0 / 256);
    auto cert = holder_process(p, 0.25);
    auto s = stop_path(p, 0.25, 1.0, &cert);
    if (s.exceeded) {
      EXPECT_GT(cert.O_values[s.exceed_index], 1.0);
      for (std::size_t k = s.exceed_index; k < s.values.size(); ++k) EXPECT_EQ(s.values[k], s.values[s.exceed_index]);
    }
    for (std::size_t k = 0; k < s.values.size(); ++k) EXPECT_EQ(s.values[k], p.values[std::min(k, s.tau_index)]);
    EXPECT_LE(holder_norm(s.values, p.dt, 0.25), 1.0);
    EXPECT_NEAR(holder_norm(s.values, p.dt, 0.25), s.norm, 1e-12);
  }
}

TEST(StopPath, MonotoneInLevel) {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    auto p = sample_wiener(seed, 1.0, 1.0 / 128);
    auto cert = holder_process(p, 0.25);
    std::size_t prev = 0;
    for (double M : {0.5, 1.0, 2.0, 4.0}) {
      auto s = stop_path(p, 0.25, M, &cert);
      EXPECT_GE(s.tau_index, prev);
      prev = s.tau_index;
    }
  }
}
