// Copyright 2026 The mdm-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "mdm/rng.hpp"

namespace mdm {
namespace {

TEST(Rng, MatchesSplitMix64ReferenceStream) {
  Rng rng(1234567);
  const std::uint64_t expected[] = {6457827717110365317ull, 3203168211198807973ull, 9817491932198370423ull,
                                    4593380528125082431ull, 16408922859458223821ull};
  for (auto e : expected) EXPECT_EQ(rng.next_u64(), e);
}

TEST(Rng, UniformInUnitInterval) {
  Rng rng(1);
  double sum = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
  }
  EXPECT_NEAR(sum / 100000, 0.5, 0.005);
}

TEST(Rng, BelowCoversRangeUniformly) {
  Rng rng(2);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) ++counts[rng.below(7)];
  for (int c : counts) EXPECT_NEAR(c, 10000, 400);
}

TEST(Rng, UniformIntInclusive) {
  Rng rng(3);
  bool lo = false, hi = false;
  for (int i = 0; i < 1000; ++i) {
    const int v = rng.uniform_int(2, 4);
    ASSERT_GE(v, 2);
    ASSERT_LE(v, 4);
    lo |= v == 2;
    hi |= v == 4;
  }
  EXPECT_TRUE(lo && hi);
  EXPECT_THROW(rng.uniform_int(3, 2), std::invalid_argument);
}

TEST(Rng, NormalMoments) {
  Rng rng(4);
  double s = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.01);
}

TEST(Rng, DerivedStreamsDiffer) {
  EXPECT_NE(Rng::derive(5, 0), Rng::derive(5, 1));
  EXPECT_NE(Rng::derive(5, 0), Rng::derive(6, 0));
  EXPECT_EQ(Rng::derive(5, 3), Rng::derive(5, 3));
}

}  // namespace
}  // namespace mdm
