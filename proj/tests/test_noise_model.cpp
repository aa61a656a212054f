#include <gtest/gtest.h>

#include <cmath>

#include "rawdn/noise_model.hpp"

using namespace rawdn;

namespace {

const NoiseParams kParams{0.01, 0.0004, "test"};

Image constant(float v, int c = 4, int h = 2, int w = 2) { return Image(c, h, w, v); }

std::vector<Sequence> flat_stacks(const NoiseParams& p, int levels, int frames, int size, std::uint64_t seed) {
  std::vector<Sequence> out;
  for (int k = 0; k < levels; ++k) {
    Sequence s;
    const float level = static_cast<float>(0.1 + 0.8 * k / std::max(1, levels - 1));
    for (int t = 0; t < frames; ++t) s.frames.push_back(Image(1, size, size, level));
    out.push_back(p.a == 0 && p.b == 0 ? s : add_noise(s, p, mix_seed(seed, static_cast<std::uint64_t>(k))));
  }
  return out;
}

}  // namespace

TEST(VarianceMap, ZeroSignalGivesReadNoise) {
  const auto v = variance_map(constant(0.0f), kParams);
  for (float x : v) EXPECT_FLOAT_EQ(x, 0.0004f);
}

TEST(VarianceMap, DirectEvaluation) {
  const auto v = variance_map(Tensor<double>(4, 1, 1, 0.5), kParams);
  for (double x : v) EXPECT_NEAR(x, 0.0054, 1e-15);
}

TEST(VarianceMap, NegativeInputClamped) {
  const auto v = variance_map(Tensor<double>(1, 1, 1, -0.2), kParams);
  EXPECT_NEAR(v[0], 0.0004, 1e-15);
}

TEST(VarianceMap, FloorApplied) {
  const auto v = variance_map(Tensor<double>(1, 1, 1, 0.0), NoiseParams{0.0, 0.0, ""});
  EXPECT_EQ(v[0], kVarianceFloor);
}

TEST(VarianceMap, Monotone) {
  double prev = -1.0;
  for (double y : {-0.5, 0.0, 0.1, 0.5, 0.9, 2.0}) {
    const double v = variance_map(Tensor<double>(1, 1, 1, y), kParams)[0];
    EXPECT_GE(v, prev);
    prev = v;
    EXPECT_GE(variance_map(Tensor<double>(1, 1, 1, y), NoiseParams{0.02, 0.0004, ""})[0], v);
    EXPECT_GE(variance_map(Tensor<double>(1, 1, 1, y), NoiseParams{0.01, 0.001, ""})[0], v);
  }
}

TEST(VarianceMap, RejectsNegativeCoefficients) {
  EXPECT_THROW(variance_map(constant(0.5f), NoiseParams{-0.1, 0.0, ""}), Error);
}

TEST(AddNoise, DegenerateParamsRejected) {
  Sequence s;
  s.frames = {constant(0.5f)};
  try {
    add_noise(s, NoiseParams{0.0, 0.0, ""}, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "degenerate_params");
  }
}

TEST(AddNoise, ZeroVariancePixelsUnchanged) {
  Sequence s;
  Image f(1, 2, 2, 0.0f);
  f[1] = 0.5f;
  s.frames = {f};
  const auto n = add_noise(s, NoiseParams{0.01, 0.0, ""}, 3);
  EXPECT_EQ(n.frames[0][0], 0.0f);
  EXPECT_NE(n.frames[0][1], 0.5f);
}

TEST(AddNoise, MonteCarloMeanAndVariance) {
  Sequence s;
  s.frames = {Image(1, 100, 1000, 0.5f)};
  const auto n = add_noise(s, kParams, 12345);
  double sum = 0, sq = 0;
  const double count = static_cast<double>(n.frames[0].size());
  for (float v : n.frames[0]) sum += v;
  const double mean = sum / count;
  for (float v : n.frames[0]) sq += (v - mean) * (v - mean);
  const double var = sq / (count - 1);
  const double expected = 0.01 * 0.5 + 0.0004;
  EXPECT_NEAR(mean, 0.5, 3.0 * std::sqrt(expected / count));
  EXPECT_NEAR(var, expected, 0.03 * expected);
}

TEST(AddNoise, ReproducibleAndSeedSensitive) {
  Sequence s;
  s.frames = {constant(0.3f, 4, 8, 8), constant(0.6f, 4, 8, 8)};
  EXPECT_EQ(add_noise(s, kParams, 7).frames, add_noise(s, kParams, 7).frames);
  EXPECT_NE(add_noise(s, kParams, 7).frames, add_noise(s, kParams, 8).frames);
  EXPECT_EQ(add_noise(s, kParams, 7).noise->a, kParams.a);
}

TEST(AddNoise, NoClipping) {
  Sequence s;
  s.frames = {Image(1, 64, 64, 0.0f)};
  const auto n = add_noise(s, kParams, 1);
  bool negative = false;
  for (float v : n.frames[0]) negative |= v < 0.0f;
  EXPECT_TRUE(negative);
}

TEST(Presets, SyntheticLadder) {
  const auto p = synthetic_noise_presets();
  ASSERT_EQ(p.size(), 5u);
  EXPECT_EQ(p.back().iso, "iso25600");
  EXPECT_DOUBLE_EQ(strongest_noise_preset().a, 0.01);
  EXPECT_DOUBLE_EQ(strongest_noise_preset().b, 0.0004);
  for (std::size_t i = 1; i < p.size(); ++i) EXPECT_DOUBLE_EQ(p[i].a, 2.0 * p[i - 1].a);
}

TEST(Calibrate, RecoversKnownParameters) {
  const auto res = calibrate(flat_stacks(kParams, 5, 64, 64, 99), "iso25600");
  EXPECT_NEAR(res.params.a, kParams.a, 0.05 * kParams.a);
  EXPECT_NEAR(res.params.b, kParams.b, 0.05 * kParams.b);
  EXPECT_EQ(res.params.iso, "iso25600");
  const auto j = to_json(res);
  EXPECT_TRUE(j.contains("a") && j.contains("b") && j.contains("iso") && j.contains("residual"));
}

TEST(Calibrate, NoiseFreeGivesZero) {
  const auto res = calibrate(flat_stacks(NoiseParams{0, 0, ""}, 3, 16, 8, 1));
  EXPECT_EQ(res.params.a, 0.0);
  EXPECT_EQ(res.params.b, 0.0);
}

TEST(Calibrate, SingleLevelIsRankDeficient) {
  auto stacks = flat_stacks(kParams, 1, 16, 8, 1);
  stacks.push_back(stacks.front());
  try {
    calibrate(stacks);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "rank_deficient");
  }
}

TEST(Calibrate, TooFewFrames) {
  EXPECT_THROW(calibrate(flat_stacks(kParams, 3, 8, 8, 1)), Error);
}
