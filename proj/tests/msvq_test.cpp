#include <gtest/gtest.h>

#include <cmath>

#include "scalegrpo/msvq.hpp"
#include "scalegrpo/rng.hpp"

namespace scalegrpo {
namespace {

Codebook two_entry_codebook() {
  return Codebook(2, 3, {-0.4, -0.4, -0.4, 0.4, 0.4, 0.4}, 0, 1.0);
}

FeatureGrid grid_from(int h, int w, std::vector<double> v) {
  FeatureGrid g(h, w, 1);
  g.data = std::move(v);
  return g;
}

TEST(BuildCodebook, DeterministicForSeed) {
  const auto a = build_codebook(7, 16, 3);
  const auto b = build_codebook(7, 16, 3);
  EXPECT_EQ(a.entries(), b.entries());
  EXPECT_EQ(a.entries().size(), 48u);
}

TEST(BuildCodebook, SeedChangesEntries) {
  EXPECT_NE(build_codebook(7, 16, 3).entries(), build_codebook(8, 16, 3).entries());
}

TEST(BuildCodebook, EntriesInRangeAndFloatExact) {
  const auto cb = build_codebook(3, 64, 3);
  for (double v : cb.entries()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
    EXPECT_EQ(v, static_cast<double>(static_cast<float>(v)));
  }
}

TEST(BuildCodebook, RejectsBadSizes) {
  EXPECT_THROW(build_codebook(0, 1, 3), InvalidArgument);
  EXPECT_THROW(build_codebook(0, 4, 0), InvalidArgument);
}

TEST(ScaleSchedule, RejectsNonIncreasing) {
  EXPECT_THROW(ScaleSchedule({{2, 2}, {2, 4}}), InvalidArgument);
  EXPECT_THROW(ScaleSchedule(std::vector<Scale>{}), InvalidArgument);
  const auto s = ScaleSchedule::square({1, 2, 4, 8});
  EXPECT_EQ(s.total_tokens(), 85);
  EXPECT_EQ(s.offset(3), 21);
}

TEST(Upsample, IdentityWhenShapesMatch) {
  const auto g = grid_from(2, 2, {1, 2, 3, 4});
  EXPECT_EQ(upsample(g, 2, 2).data, g.data);
}

TEST(Upsample, ConstantExtension) {
  const auto up = upsample(grid_from(1, 1, {0.3}), 5, 5);
  for (double v : up.data) EXPECT_EQ(v, 0.3);
}

TEST(Upsample, CornerAlignedBilinear) {
  const auto up = upsample(grid_from(1, 2, {0.0, 1.0}), 1, 3);
  ASSERT_EQ(up.data.size(), 3u);
  EXPECT_DOUBLE_EQ(up.data[0], 0.0);
  EXPECT_DOUBLE_EQ(up.data[1], 0.5);
  EXPECT_DOUBLE_EQ(up.data[2], 1.0);
}

TEST(Upsample, RejectsShrinking) {
  EXPECT_THROW(upsample(grid_from(2, 2, {1, 2, 3, 4}), 1, 2), InvalidArgument);
}

TEST(Downsample, Identity) {
  const auto g = grid_from(2, 2, {1, 2, 3, 4});
  EXPECT_EQ(downsample(g, 2, 2).data, g.data);
}

TEST(Downsample, MeanPooling) {
  const auto d = downsample(grid_from(2, 2, {1, 1, 0, 0}), 1, 1);
  EXPECT_DOUBLE_EQ(d.data[0], 0.5);
}

TEST(Downsample, RemainderGoesToEarlierCells) {
  const auto d = downsample(grid_from(3, 1, {1.0, 2.0, 7.0}), 2, 1);
  EXPECT_DOUBLE_EQ(d.data[0], 1.5);
  EXPECT_DOUBLE_EQ(d.data[1], 7.0);
}

TEST(Downsample, RejectsGrowing) {
  EXPECT_THROW(downsample(grid_from(1, 1, {1}), 2, 2), InvalidArgument);
}

TEST(Encode, ExactEntryGivesThatIndex) {
  // Entry 2 is exactly the shifted pixel value of the constant image.
  Codebook cb(3, 3, {0.3, 0.3, 0.3, -0.2, 0.1, 0.0, 0.25, -0.25, 0.125}, 0, 1.0);
  const ScaleSchedule sched({{4, 4}});
  const Image img(4, 4, 0.0);
  Image exact(4, 4);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      exact.set(i, j, 0, 0.75);
      exact.set(i, j, 1, 0.25);
      exact.set(i, j, 2, 0.625);
    }
  const auto t = encode(exact, sched, cb);
  for (int v : t.flat()) EXPECT_EQ(v, 2);
  EXPECT_EQ(rmse(decode(t, sched, cb), exact), 0.0);
}

TEST(Encode, NearestOfTwo) {
  const ScaleSchedule sched({{1, 1}});
  Image img(1, 1, 0.8);  // shifted value (0.3, 0.3, 0.3)
  EXPECT_EQ(encode(img, sched, two_entry_codebook()).flat()[0], 1);
}

TEST(Encode, TieGoesToLowerIndex) {
  const ScaleSchedule sched({{1, 1}});
  Image img(1, 1, 0.5);  // shifted value 0: equidistant from both entries
  EXPECT_EQ(encode(img, sched, two_entry_codebook()).flat()[0], 0);
}

TEST(Encode, ShapeMismatchRejected) {
  const auto cb = build_codebook(1, 16, 3);
  EXPECT_THROW(encode(Image(4, 4), ScaleSchedule::square({1, 2, 8}), cb), InvalidArgument);
}

TEST(Decode, ZeroEntryGivesMidGrey) {
  Codebook cb(2, 3, {0, 0, 0, 1, 1, 1}, 0, 1.0);
  const ScaleSchedule sched({{3, 3}});
  MultiScaleTokens t(sched);
  const auto img = decode(t, sched, cb);
  for (double v : img.pixels().data) EXPECT_EQ(v, 0.5);
}

TEST(Decode, ClampsToUnitRange) {
  Codebook cb(2, 3, {0.9, -0.9, 0.2, 0, 0, 0}, 0, 1.0);
  const ScaleSchedule sched({{2, 2}});
  const auto img = decode(MultiScaleTokens(sched), sched, cb);
  EXPECT_EQ(img(0, 0, 0), 1.0);
  EXPECT_EQ(img(0, 0, 1), 0.0);
  EXPECT_DOUBLE_EQ(img(0, 0, 2), 0.7);
}

TEST(Decode, RejectsOutOfRangeToken) {
  const auto cb = build_codebook(1, 4, 3);
  const ScaleSchedule sched({{1, 1}, {2, 2}});
  MultiScaleTokens t(sched);
  t.flat()[2] = 4;
  EXPECT_THROW(decode(t, sched, cb), InvalidArgument);
}

TEST(Decode, LevelGainScalesLaterScales) {
  // Scale 1 (zero-based) uses gain 0.5.
  Codebook cb(2, 3, {0, 0, 0, 0.4, 0.2, -0.2}, 0, 0.5);
  const ScaleSchedule sched({{1, 1}, {2, 2}});
  MultiScaleTokens t(sched, {0, 1, 1, 1, 1});
  const auto img = decode(t, sched, cb);
  EXPECT_DOUBLE_EQ(img(1, 1, 0), 0.7);
  EXPECT_DOUBLE_EQ(img(1, 1, 1), 0.6);
  EXPECT_DOUBLE_EQ(img(1, 1, 2), 0.4);
}

// An image whose pooled residual at every scale is exactly a gain-scaled
// codebook entry is recovered token for token, and the truncated
// reconstruction error drops with every added scale.
TEST(RoundTrip, HierarchicalImageContracts) {
  Codebook cb(4, 3, {0, 0, 0, 0.2, 0.1, -0.1, -0.1, 0.2, 0.1, 0.1, -0.2, -0.1}, 0, 0.5);
  const ScaleSchedule sched({{1, 1}, {2, 2}});
  const MultiScaleTokens truth(sched, {1, 2, 3, 3, 2});
  const auto img = decode(truth, cb);
  const auto enc = encode(img, sched, cb);
  EXPECT_EQ(enc, truth);
  const double e1 = rmse(decode(enc, cb, 1), img);
  const double e2 = rmse(decode(enc, cb, 2), img);
  EXPECT_GT(e1, 0.0);
  EXPECT_EQ(e2, 0.0);
}

TEST(RoundTrip, DatasetMeanErrorNonIncreasingInScales) {
  const auto cb = build_codebook(7, 16, 3, 0.5);
  const auto sched = ScaleSchedule::square({1, 2, 4, 8});
  Rng rng(11);
  std::vector<double> mean_err(4, 0.0);
  const int n = 200;
  for (int s = 0; s < n; ++s) {
    Image img(8, 8);
    const double base[3] = {rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)};
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j)
        for (int c = 0; c < 3; ++c) img.set(i, j, c, std::clamp(base[c] + rng.uniform(-0.05, 0.05), 0.0, 1.0));
    const auto t = encode(img, sched, cb);
    for (int k = 1; k <= 4; ++k) mean_err[static_cast<std::size_t>(k - 1)] += rmse(decode(t, cb, k), img) / n;
  }
  for (int k = 1; k < 4; ++k) EXPECT_LE(mean_err[static_cast<std::size_t>(k)], mean_err[static_cast<std::size_t>(k - 1)]);
  EXPECT_LT(mean_err[3], 0.05);
}

TEST(Determinism, EncodeDecodeBitIdentical) {
  const auto cb = build_codebook(5, 16, 3, 0.5);
  const auto sched = ScaleSchedule::square({1, 2, 4, 8});
  Rng rng(3);
  Image img(8, 8);
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j)
      for (int c = 0; c < 3; ++c) img.set(i, j, c, rng.uniform());
  const auto a = encode(img, sched, cb);
  const auto b = encode(img, sched, cb);
  EXPECT_EQ(a, b);
  EXPECT_EQ(decode(a, cb), decode(b, cb));
  for (double v : decode(a, cb).pixels().data) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Ppm, RoundTripsEightBitValues) {
  Image img(2, 3);
  img.set(0, 0, 0, 1.0);
  img.set(1, 2, 1, 128.0 / 255.0);
  const auto bytes = to_ppm(img);
  EXPECT_EQ(bytes.substr(0, 11), "P6\n3 2\n255\n");
  EXPECT_EQ(bytes.size(), 11u + 18u);
  EXPECT_EQ(from_ppm(bytes), img);
}

TEST(Ppm, RejectsOtherFormats) {
  EXPECT_THROW(from_ppm("P3\n1 1\n255\n0 0 0"), InvalidArgument);
  EXPECT_THROW(from_ppm("P6\n2 2\n255\nab"), InvalidArgument);
}

}  // namespace
}  // namespace scalegrpo
