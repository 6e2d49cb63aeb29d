#include <gtest/gtest.h>

#include <atomic>
#include <numeric>
#include <set>

#include "vesselforge/core.hpp"

using namespace vesselforge;

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 1000; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs = differs || x != c.next_u64();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, UniformRangeAndMoments) {
  Rng r(1);
  double sum = 0, sq = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
    sq += u * u;
  }
  EXPECT_NEAR(sum / n, 0.5, 0.005);
  EXPECT_NEAR(sq / n - std::pow(sum / n, 2), 1.0 / 12, 0.002);
}

TEST(Rng, UniformIntInclusiveBounds) {
  Rng r(2);
  std::set<std::int64_t> seen;
  for (int i = 0; i < 5000; ++i) {
    const auto v = r.uniform_int(-3, 3);
    ASSERT_GE(v, -3);
    ASSERT_LE(v, 3);
    seen.insert(v);
  }
  EXPECT_EQ(seen.size(), 7u);
  EXPECT_EQ(r.uniform_int(5, 5), 5);
}

TEST(Rng, NormalMoments) {
  Rng r(3);
  double sum = 0, sq = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    sum += z;
    sq += z * z;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.01);
  EXPECT_NEAR(sq / n, 1.0, 0.01);
}

TEST(Rng, ShuffleIsPermutation) {
  Rng r(4);
  std::vector<int> v(100);
  std::iota(v.begin(), v.end(), 0);
  auto w = v;
  shuffle(w.begin(), w.end(), r);
  EXPECT_NE(v, w);
  std::sort(w.begin(), w.end());
  EXPECT_EQ(v, w);
}

TEST(MixSeed, DistinctAcrossIds) {
  std::set<std::uint64_t> s;
  for (std::uint64_t seed : {0ULL, 1ULL, 42ULL})
    for (std::uint64_t id = 0; id < 100; ++id) s.insert(mix_seed(seed, id));
  EXPECT_EQ(s.size(), 300u);
  EXPECT_EQ(mix_seed(7, 3), mix_seed(7, 3));
}

TEST(ParallelFor, EachIndexOnceAnyThreadCount) {
  for (int threads : {1, 3, 8}) {
    set_num_threads(threads);
    std::vector<std::atomic<int>> hits(1000);
    parallel_for(hits.size(), [&](std::size_t i) { hits[i]++; });
    for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
  }
  set_num_threads(1);
}

TEST(ParallelFor, PropagatesExceptions) {
  set_num_threads(4);
  EXPECT_THROW(parallel_for(50, [](std::size_t i) {
                 if (i == 17) throw NumericError("boom");
               }),
               NumericError);
  set_num_threads(1);
}

TEST(Errors, KindsForExitMapping) {
  EXPECT_EQ(ConfigError("x").kind(), "config");
  EXPECT_EQ(IoError("x").kind(), "io");
  EXPECT_EQ(ShapeError("x").kind(), "shape");
  EXPECT_EQ(NumericError("x").kind(), "numeric");
  EXPECT_EQ(UnsupportedTypeError(1234).code(), 1234);
  EXPECT_EQ(FormatError("bad", 344).offset(), 344u);
  EXPECT_NE(std::string(FormatError("bad", 344).what()).find("344"), std::string::npos);
}
