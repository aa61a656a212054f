#include <gtest/gtest.h>

#include <cmath>

#include "rawdn/gradcheck.hpp"
#include "rawdn/train_engine.hpp"

using namespace rawdn;

namespace {

const NoiseParams kNoise{0.01, 0.0004, "iso25600"};

Sequence frames_of(std::initializer_list<float> values) {
  Sequence s;
  for (float v : values) s.frames.push_back(Image(4, 2, 2, v));
  return s;
}

TrainConfig tiny_config() {
  TrainConfig c = TrainConfig::desk();
  c.epochs = 2;
  c.batch_size = 2;
  c.crop_size = 16;
  c.seq_len = 3;
  c.crops_per_scene = 2;
  c.seed = 5;
  return c;
}

std::vector<TrainExample> tiny_dataset(const TrainConfig& c) {
  std::vector<TrainExample> out;
  for (std::uint64_t s = 0; s < 2; ++s) {
    const auto scene = synth_scene(s, 4, 24, 24, 1);
    auto crops = sample_crops(scene, c, {kNoise}, mix_seed(c.seed, 100 + s));
    out.insert(out.end(), crops.begin(), crops.end());
  }
  return out;
}

}  // namespace

TEST(Config, PresetsAndValidation) {
  const auto p = TrainConfig::preset("paper");
  EXPECT_EQ(p.batch_size, 8);
  EXPECT_DOUBLE_EQ(p.learning_rate, 1e-4);
  EXPECT_EQ(p.epochs, 3000);
  EXPECT_EQ(p.crop_size, 128);
  EXPECT_EQ(p.seq_len, 25);
  EXPECT_EQ(TrainConfig::preset("desk").epochs, 200);
  try {
    TrainConfig::preset("huge");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "bad_preset");
  }
  TrainConfig bad;
  bad.crop_size = 100;  // not a multiple of 8
  EXPECT_THROW(bad.validate(), Error);
  bad = {};
  bad.seq_len = 1;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(Config, JsonRoundTrip) {
  TrainConfig c = TrainConfig::desk();
  c.seed = 77;
  c.net.denoise_hidden = 24;
  c.augment = false;
  const auto back = train_config_from_json(to_json(c), TrainConfig{});
  EXPECT_EQ(to_json(back), to_json(c));
  const auto partial = train_config_from_json({{"epochs", 9}}, TrainConfig::desk());
  EXPECT_EQ(partial.epochs, 9);
  EXPECT_EQ(partial.crop_size, 64);
}

TEST(Schedule, StepDecay) {
  const TrainConfig c;
  const std::int64_t n = 1000;
  EXPECT_DOUBLE_EQ(learning_rate_at(c, 0, n), 1e-4);
  EXPECT_DOUBLE_EQ(learning_rate_at(c, 699, n), 1e-4);
  EXPECT_NEAR(learning_rate_at(c, 750, n), 1e-5, 1e-20);
  EXPECT_NEAR(learning_rate_at(c, 950, n), 1e-6, 1e-20);
  EXPECT_EQ(total_iterations(c, 17), 3 * 3000);
}

TEST(SynthScene, StaticWhenMotionIsZero) {
  const auto s = synth_scene(3, 4, 16, 20, 0);
  ASSERT_EQ(s.length(), 4u);
  EXPECT_EQ(s.frames[0].shape(), (std::vector<int>{4, 8, 10}));
  for (const auto& f : s.frames) EXPECT_EQ(f, s.frames[0]);
}

TEST(SynthScene, DeterministicMovingAndInRange) {
  const auto a = synth_scene(4, 5, 16, 16, 2);
  EXPECT_EQ(a.frames, synth_scene(4, 5, 16, 16, 2).frames);
  EXPECT_NE(a.frames, synth_scene(5, 5, 16, 16, 2).frames);
  bool moved = false;
  for (std::size_t t = 1; t < a.length(); ++t) moved |= a.frames[t] != a.frames[0];
  EXPECT_TRUE(moved);
  for (const auto& f : a.frames)
    for (float v : f) {
      EXPECT_GE(v, 0.05f - 1e-6f);
      EXPECT_LE(v, 0.95f + 1e-6f);
    }
  EXPECT_THROW(synth_scene(1, 2, 15, 16, 0), Error);
}

TEST(SampleCrops, OffsetsShapesAndNoise) {
  const auto scene = synth_scene(1, 6, 32, 32, 1);
  TrainConfig c;
  c.crop_size = 16;
  c.seq_len = 4;
  c.crops_per_scene = 5;
  std::vector<CropRecord> rec;
  const auto crops = sample_crops(scene, c, {kNoise}, 9, &rec);
  ASSERT_EQ(crops.size(), 5u);
  ASSERT_EQ(rec.size(), 5u);
  for (std::size_t i = 0; i < crops.size(); ++i) {
    EXPECT_EQ(rec[i].raw_y % 2, 0);
    EXPECT_EQ(rec[i].raw_x % 2, 0);
    EXPECT_LE(rec[i].raw_y + 16, 32);
    EXPECT_LE(rec[i].t0 + 4, 6);
    EXPECT_EQ(crops[i].clean.length(), 4u);
    EXPECT_EQ(crops[i].clean.frames[0].shape(), (std::vector<int>{4, 8, 8}));
    const auto expect = crop_sequence(scene, rec[i].t0, 4, rec[i].raw_y / 2, rec[i].raw_x / 2, 8, 8);
    EXPECT_EQ(crops[i].clean.frames, expect.frames);
    EXPECT_EQ(crops[i].noisy.frames, add_noise(crops[i].clean, kNoise, crops[i].noise_seed).frames);
  }
  EXPECT_EQ(sample_crops(scene, c, {kNoise}, 9).front().noisy.frames, crops.front().noisy.frames);
}

TEST(SampleCrops, Errors) {
  const auto scene = synth_scene(1, 3, 16, 16, 0);
  TrainConfig c;
  c.crop_size = 32;
  c.seq_len = 2;
  try {
    sample_crops(scene, c, {kNoise}, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "crop_too_large");
  }
  c.crop_size = 8;
  c.seq_len = 4;
  EXPECT_THROW(sample_crops(scene, c, {kNoise}, 1), Error);
  c.seq_len = 2;
  EXPECT_THROW(sample_crops(scene, c, {}, 1), Error);
}

TEST(Loss, ReconstructionExamples) {
  EXPECT_EQ(reconstruction_loss(frames_of({0.3f, 0.7f}), frames_of({0.3f, 0.7f})), 0.0);
  EXPECT_NEAR(reconstruction_loss(frames_of({0.5f}), frames_of({0.4f})), 0.1, 1e-7);
  EXPECT_NEAR(reconstruction_loss(frames_of({0.5f, 0.5f}), frames_of({0.4f, 0.2f})), 0.2, 1e-7);
  EXPECT_THROW(reconstruction_loss(frames_of({0.5f}), frames_of({0.5f, 0.5f})), Error);
}

TEST(Loss, TotalAddsOrthonormality) {
  const auto a = frames_of({0.5f}), b = frames_of({0.4f});
  EXPECT_NEAR(total_loss(a, b, identity_color_kernel<double>()), 0.1, 1e-7);
  EXPECT_NEAR(total_loss(a, b, initial_color_kernel<double>()), 0.1 + 1.855448193830332e-05, 1e-7);
}

TEST(Loss, EvaluateMatchesDenoiseSequence) {
  auto ex = tiny_dataset(tiny_config()).front();
  const auto w = ModelWeights<double>::initialized({}, 3);
  const auto lb = evaluate_loss(ex, w);
  const auto out = denoise_sequence(ex.noisy, ex.params, w);
  EXPECT_NEAR(lb.reconstruction, reconstruction_loss(out, ex.clean), 1e-6);
  EXPECT_NEAR(lb.orthonormality, orthonormality_loss(w.color), 1e-15);
  EXPECT_NEAR(lb.total, lb.reconstruction + lb.orthonormality, 1e-15);
}

TEST(Adam, ZeroGradientLeavesWeights) {
  auto w = ModelWeights<double>::initialized({}, 1);
  const auto before = w;
  Adam<double> adam(w.config);
  for (int i = 0; i < 3; ++i) adam.step(w, ModelWeights<double>::zeros(w.config), 1e-3);
  EXPECT_EQ(w, before);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  NetConfig cfg;
  auto w = ModelWeights<double>::zeros(cfg);
  auto g = ModelWeights<double>::zeros(cfg);
  g.color[0] = 3.0;
  g.color[1] = -0.01;
  Adam<double> adam(cfg);
  adam.step(w, g, 0.5);
  EXPECT_NEAR(w.color[0], -0.5, 1e-7);
  EXPECT_NEAR(w.color[1], 0.5, 1e-4);
  EXPECT_EQ(w.color[2], 0.0);
}

TEST(Backward, StationaryAtZeroWithIdentityKernel) {
  TrainExample ex;
  ex.clean = synth_scene(2, 3, 16, 16, 0);
  ex.noisy = ex.clean;
  ex.params = kNoise;
  ModelWeights<double> w = ModelWeights<double>::zeros({});
  w.color = identity_color_kernel<double>();
  const auto g = backward(ex, w);
  EXPECT_NEAR(g.loss.total, 0.0, 1e-15);
  g.grad.for_each_tensor([](const std::string& name, const Tensor<double>& v) {
    for (double x : v) EXPECT_NEAR(x, 0.0, 1e-12) << name;
  });
}

TEST(Backward, DeterministicAndFinite) {
  const auto ex = tiny_dataset(tiny_config()).front();
  const auto w = ModelWeights<double>::initialized({}, 4);
  const auto a = backward(ex, w), b = backward(ex, w);
  EXPECT_EQ(a.grad, b.grad);
  EXPECT_EQ(a.loss.total, b.loss.total);
  a.grad.for_each_tensor([](const std::string& name, const Tensor<double>& v) { EXPECT_TRUE(v.all_finite()) << name; });
}

TEST(Backward, NonFiniteWeightsNamed) {
  const auto ex = tiny_dataset(tiny_config()).front();
  auto w = ModelWeights<double>::initialized({}, 4);
  w.denoise.out_bias[1] = std::numeric_limits<double>::quiet_NaN();
  try {
    backward(ex, w);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "non_finite_loss");
    EXPECT_NE(std::string(e.what()).find("denoise.out"), std::string::npos) << e.what();
  }
}

TEST(GradCheck, SmallProblemAgrees) {
  GradCheckOptions o;
  o.packed_size = 4;
  o.frames = 2;
  o.scales = 1;
  const auto rep = gradient_check(o);
  EXPECT_GT(rep.compared, 1000);
  EXPECT_LT(rep.max_rel_error, 1e-4);
  EXPECT_TRUE(rep.passed(1e-4));
}

TEST(Train, DeterministicAcrossRunsAndThreads) {
  auto c = tiny_config();
  const auto data = tiny_dataset(c);
  const auto a = train<float>(c, data);
  const auto b = train<float>(c, data);
  c.threads = 2;
  const auto d = train<float>(c, data);
  EXPECT_EQ(a.iterations, 4);
  EXPECT_EQ(a.weights, b.weights);
  EXPECT_EQ(a.weights, d.weights);
  ASSERT_EQ(a.log.size(), d.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(to_json(a.log[i]), to_json(d.log[i]));
}

TEST(Train, LogValidationAndLimit) {
  auto c = tiny_config();
  c.val_interval = 1;
  const auto data = tiny_dataset(c);
  std::vector<TrainLogEntry> seen;
  TrainExample val;
  val.clean = synth_scene(9, 3, 24, 24, 0);
  val.params = kNoise;
  val.noisy = add_noise(val.clean, kNoise, 1);
  const auto r = train<float>(c, data, {val}, [&](const TrainLogEntry& e) { seen.push_back(e); });
  ASSERT_EQ(seen.size(), r.log.size());
  EXPECT_FALSE(seen[0].psnr.has_value());
  EXPECT_TRUE(seen[1].psnr.has_value());
  EXPECT_TRUE(seen[3].ssim.has_value());
  EXPECT_EQ(to_json(seen[1]).count("psnr"), 1u);
  EXPECT_EQ(train<float>(c, data, {}, {}, 3).iterations, 3);
  EXPECT_THROW(train<float>(c, {}), Error);
}
