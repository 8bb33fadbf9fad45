#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <vector>

#include "mvpp/rng.hpp"

using mvpp::Philox4x32;
using mvpp::RngStream;

// Known-answer vectors of the Random123 distribution.
TEST(Philox, KnownAnswerZero) {
  const auto out = Philox4x32::encrypt({0, 0, 0, 0}, {0, 0});
  EXPECT_EQ(out, (Philox4x32::Block{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
}

TEST(Philox, KnownAnswerOnes) {
  const auto out = Philox4x32::encrypt({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu});
  EXPECT_EQ(out, (Philox4x32::Block{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
}

TEST(Philox, KnownAnswerPi) {
  const auto out = Philox4x32::encrypt({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u});
  EXPECT_EQ(out, (Philox4x32::Block{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(RngStream, SameSeedSameSequence) {
  RngStream a(42), b(42);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a(), b());
}

TEST(RngStream, StreamsDiffer) {
  RngStream a(42, 0), b(42, 1), c(43, 0);
  int same_ab = 0, same_ac = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto x = a();
    same_ab += x == b();
    same_ac += x == c();
  }
  EXPECT_EQ(same_ab, 0);
  EXPECT_EQ(same_ac, 0);
}

TEST(RngStream, ReplicaStreamsAreDistinct) {
  std::set<std::uint64_t> firsts;
  for (std::uint64_t r = 0; r < 100; ++r) {
    auto s = mvpp::replica_stream(7, r);
    firsts.insert(s());
  }
  EXPECT_EQ(firsts.size(), 100u);
}

TEST(RngStream, UniformRangeAndMoments) {
  RngStream rng(1);
  const int n = 200000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
    sq += u * u;
  }
  // 5 standard errors
  EXPECT_NEAR(sum / n, 0.5, 5.0 * std::sqrt(1.0 / 12.0 / n));
  EXPECT_NEAR(sq / n, 1.0 / 3.0, 5.0 * std::sqrt(4.0 / 45.0 / n));
}

TEST(RngStream, UniformPosNeverZero) {
  RngStream rng(2);
  for (int i = 0; i < 100000; ++i) {
    const double u = rng.uniform_pos();
    ASSERT_GT(u, 0.0);
    ASSERT_LE(u, 1.0);
  }
}

TEST(RngStream, UniformIndexCoversRange) {
  RngStream rng(3);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) {
    const auto k = rng.uniform_index(7);
    ASSERT_LT(k, 7u);
    ++counts[k];
  }
  for (int c : counts) EXPECT_NEAR(c, 10000, 5.0 * std::sqrt(10000.0 * 6.0 / 7.0));
}

TEST(RngStream, NormalMoments) {
  RngStream rng(4);
  const int n = 200000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    sum += z;
    sq += z * z;
  }
  EXPECT_NEAR(sum / n, 0.0, 5.0 / std::sqrt(n));
  EXPECT_NEAR(sq / n, 1.0, 5.0 * std::sqrt(2.0 / n));
}

TEST(RngStream, ExponentialMean) {
  RngStream rng(5);
  const int n = 200000;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += rng.exponential(4.0);
  EXPECT_NEAR(sum / n, 0.25, 5.0 * 0.25 / std::sqrt(n));
}

TEST(RngStream, CopyResumesIdentically) {
  RngStream a(9);
  for (int i = 0; i < 3; ++i) a();
  RngStream b = a;
  for (int i = 0; i < 50; ++i) ASSERT_EQ(a.uniform(), b.uniform());
}
