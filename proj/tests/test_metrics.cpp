#include <gtest/gtest.h>

#include <cmath>

#include "rawdn/metrics.hpp"
#include "rawdn/noise_model.hpp"
#include "rawdn/random.hpp"

using namespace rawdn;

namespace {

Image random_image(int c, int h, int w, std::uint64_t seed) {
  Image im(c, h, w);
  Rng rng(seed);
  for (auto& v : im) v = static_cast<float>(rng.uniform(0.1, 0.9));
  return im;
}

Image noisy_copy(const Image& clean, double a, std::uint64_t seed) {
  Sequence s;
  s.frames = {clean};
  return add_noise(s, NoiseParams{a, a * 0.04, ""}, seed).frames[0];
}

NoisyPair make_pair(std::uint64_t seed, const std::string& iso) {
  NoisyPair p;
  const auto base = random_image(4, 16, 16, seed);
  for (int t = 0; t < 3; ++t) p.clean.frames.push_back(base);
  p.params = NoiseParams{0.01, 0.0004, iso};
  p.noise_seed = seed;
  p.noisy = add_noise(p.clean, p.params, seed);
  return p;
}

}  // namespace

TEST(Psnr, IdenticalIsInfinite) {
  const auto x = random_image(1, 4, 4, 1);
  EXPECT_TRUE(std::isinf(psnr(x, x)));
  EXPECT_GT(psnr(x, x), 0.0);
}

TEST(Psnr, ConstantOffset) {
  const Image a(1, 4, 4, 0.5f), b(1, 4, 4, 0.6f);
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-5);
  EXPECT_DOUBLE_EQ(psnr(a, b), psnr(b, a));
}

TEST(Psnr, ShapeMismatch) {
  EXPECT_THROW(psnr(Image(1, 4, 4), Image(1, 4, 5)), Error);
}

TEST(Psnr, DecreasesWithNoiseLevel) {
  const auto clean = random_image(1, 64, 64, 2);
  double prev = kInfinitePsnr;
  for (double a : {0.001, 0.004, 0.016}) {
    const double p = psnr(noisy_copy(clean, a, 3), clean);
    EXPECT_LT(p, prev);
    prev = p;
  }
}

TEST(Ssim, SelfIsExactlyOne) {
  const auto x = random_image(4, 16, 20, 4);
  EXPECT_EQ(ssim(x, x), 1.0);
}

TEST(Ssim, SymmetricAndBelowOne) {
  const auto x = random_image(1, 16, 16, 5);
  const auto y = noisy_copy(x, 0.01, 6);
  EXPECT_NEAR(ssim(x, y), ssim(y, x), 1e-12);
  EXPECT_LT(ssim(x, y), 1.0);
  Image inv = x;
  for (auto& v : inv) v = 1.0f - v;
  EXPECT_LT(ssim(inv, x), 1.0);
}

TEST(Ssim, DecreasesWithNoiseLevel) {
  const auto clean = random_image(1, 48, 48, 7);
  double prev = 1.0;
  for (double a : {0.001, 0.004, 0.016}) {
    const double s = ssim(noisy_copy(clean, a, 8), clean);
    EXPECT_LT(s, prev);
    prev = s;
  }
}

TEST(Ssim, FrameTooSmall) {
  try {
    ssim(Image(1, 10, 12), Image(1, 10, 12));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "frame_too_small");
  }
}

TEST(Ssim, GaussianWindowNormalized) {
  const auto w = detail::gaussian_window(kSsimWindow, kSsimSigma);
  ASSERT_EQ(w.size(), 11u);
  double s = 0;
  for (double v : w) s += v;
  EXPECT_NEAR(s, 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(w[0], w[10]);
  EXPECT_GT(w[5], w[4]);
}

TEST(Evaluate, CleanAsNoisyIsInfinite) {
  auto p = make_pair(1, "iso1600");
  p.noisy = p.clean;
  const auto rep = evaluate(ModelWeights<float>::initialized({}, 1), {p});
  EXPECT_TRUE(std::isinf(rep.noisy_psnr));
  EXPECT_EQ(rep.noisy_ssim, 1.0);
  const auto j = to_json(rep);
  EXPECT_EQ(j["mean"]["noisy"]["psnr"], "inf");
  EXPECT_TRUE(j.contains("iso1600"));
}

TEST(Evaluate, MeansAreConsistentAndDeterministic) {
  const auto w = ModelWeights<float>::initialized({}, 2);
  const std::vector<NoisyPair> pairs{make_pair(1, "a"), make_pair(2, "a"), make_pair(3, "b")};
  const auto rep = evaluate(w, pairs);
  ASSERT_EQ(rep.levels.size(), 2u);
  const auto& a = rep.levels.at("a");
  EXPECT_EQ(a.noisy.psnr.size(), 6u);
  double s = 0;
  for (double v : a.model.psnr) s += v;
  EXPECT_NEAR(a.model.mean_psnr, s / 6.0, 1e-12);
  EXPECT_NEAR(rep.model_psnr, 0.5 * (a.model.mean_psnr + rep.levels.at("b").model.mean_psnr), 1e-12);
  EXPECT_EQ(to_json(rep), to_json(evaluate(w, pairs)));
  EXPECT_FALSE(std::isinf(rep.noisy_psnr));
}

TEST(Evaluate, LengthMismatch) {
  auto p = make_pair(1, "");
  p.noisy.frames.pop_back();
  EXPECT_THROW(evaluate(ModelWeights<float>::zeros({}), {p}), Error);
}
