#pragma once

// Synthetic data, crop sampling, losses, backpropagation through the recurrence and
// the Adam training loop with a stepped learning-rate schedule.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "rawdn/autodiff.hpp"
#include "rawdn/color_transform.hpp"
#include "rawdn/denoise_net.hpp"
#include "rawdn/metrics.hpp"
#include "rawdn/noise_model.hpp"
#include "rawdn/random.hpp"
#include "rawdn/raw_data.hpp"

namespace rawdn {

using TrainExample = NoisyPair;

struct TrainConfig {
  int batch_size = 8;
  double learning_rate = 1e-4;
  int epochs = 3000;
  std::vector<double> decay_points{0.7, 0.9};
  double decay_factor = 10.0;
  int crop_size = 128;  // raw pixels; packed crops are half this
  int seq_len = 25;     // frames per training sequence
  int crops_per_scene = 16;
  int val_interval = 25;  // epochs
  std::uint64_t seed = 0;
  int threads = 1;
  bool augment = true;
  bool renoise = true;  // redraw the noise each time an example is visited
  double projection_threshold = 1e-3;
  NetConfig net;

  static TrainConfig paper() { return {}; }

  static TrainConfig desk() {
    TrainConfig c;
    c.epochs = 200;
    c.crop_size = 64;
    c.seq_len = 8;
    c.crops_per_scene = 4;
    return c;
  }

  static TrainConfig preset(const std::string& name) {
    if (name == "paper") return paper();
    if (name == "desk") return desk();
    throw usage_error("bad_preset", "unknown preset '" + name + "' (expected paper or desk)");
  }

  void validate() const {
    net.validate();
    if (batch_size < 1 || epochs < 1 || crops_per_scene < 1 || val_interval < 1 || threads < 1) {
      throw usage_error("bad_config", "batch size, epochs, crops, validation interval and threads must be positive");
    }
    if (seq_len < 2) throw usage_error("bad_config", "sequence length must be at least 2");
    const int div = 2 * (1 << (net.scales - 1));
    if (crop_size % div != 0 || crop_size / div < 2) {
      throw usage_error("bad_config", "crop size " + std::to_string(crop_size) + " must be a multiple of " +
                                          std::to_string(div) + " for " + std::to_string(net.scales) + " scales");
    }
    if (!(learning_rate > 0.0) || !(decay_factor > 0.0)) {
      throw usage_error("bad_config", "learning rate and decay factor must be positive");
    }
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},     {"learning_rate", c.learning_rate},
          {"epochs", c.epochs},             {"decay_points", c.decay_points},
          {"decay_factor", c.decay_factor}, {"crop_size", c.crop_size},
          {"seq_len", c.seq_len},           {"crops_per_scene", c.crops_per_scene},
          {"val_interval", c.val_interval}, {"seed", c.seed},
          {"threads", c.threads},           {"augment", c.augment},
          {"renoise", c.renoise},           {"projection_threshold", c.projection_threshold},
          {"net", to_json(c.net)}};
}

/// Overlays the keys present in `j` onto `base`.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base) {
  base.batch_size = j.value("batch_size", base.batch_size);
  base.learning_rate = j.value("learning_rate", base.learning_rate);
  base.epochs = j.value("epochs", base.epochs);
  base.decay_points = j.value("decay_points", base.decay_points);
  base.decay_factor = j.value("decay_factor", base.decay_factor);
  base.crop_size = j.value("crop_size", base.crop_size);
  base.seq_len = j.value("seq_len", base.seq_len);
  base.crops_per_scene = j.value("crops_per_scene", base.crops_per_scene);
  base.val_interval = j.value("val_interval", base.val_interval);
  base.seed = j.value("seed", base.seed);
  base.threads = j.value("threads", base.threads);
  base.augment = j.value("augment", base.augment);
  base.renoise = j.value("renoise", base.renoise);
  base.projection_threshold = j.value("projection_threshold", base.projection_threshold);
  if (j.contains("net")) base.net = net_config_from_json(j["net"]);
  return base;
}

/// Step schedule: divided by decay_factor once for every decay point already passed.
inline double learning_rate_at(const TrainConfig& c, std::int64_t iter, std::int64_t total) {
  double lr = c.learning_rate;
  for (double f : c.decay_points) {
    if (static_cast<double>(iter) >= f * static_cast<double>(total)) lr /= c.decay_factor;
  }
  return lr;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

namespace detail {

inline std::vector<double> blur(const std::vector<double>& img, int h, int w, double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double s = 0;
  for (int i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= s;
  auto clampi = [](int i, int n) { return std::clamp(i, 0, n - 1); };
  std::vector<double> tmp(img.size()), out(img.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * img[static_cast<std::size_t>(y) * w + clampi(x + i, w)];
      tmp[static_cast<std::size_t>(y) * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * tmp[static_cast<std::size_t>(clampi(y + i, h)) * w + x];
      out[static_cast<std::size_t>(y) * w + x] = acc;
    }
  return out;
}

inline std::vector<double> smooth_field(Rng& rng, int h, int w, double sigma) {
  std::vector<double> n(static_cast<std::size_t>(h) * w);
  for (auto& v : n) v = rng.normal();
  auto f = blur(n, h, w, sigma);
  double sd = 0;
  for (double v : f) sd += v * v;
  sd = std::sqrt(sd / static_cast<double>(f.size()));
  for (auto& v : f) v /= sd > 0 ? sd : 1.0;
  return f;
}

}  // namespace detail

/// Band-limited random color texture translated by an integer random walk (at most
/// `motion` raw pixels per frame in each axis), sampled through an RGGB mosaic and
/// packed. Values lie in [0.05, 0.95].
inline Sequence synth_scene(std::uint64_t seed, int frames, int height, int width, int motion) {
  if (frames < 1 || height < 2 || width < 2 || height % 2 || width % 2 || motion < 0) {
    throw usage_error("bad_config", "synth_scene needs frames >= 1, even positive sizes and motion >= 0");
  }
  Rng rng(mix_seed(seed, 0x5ce7e));
  const int pad = motion * (frames - 1);
  const int fh = height + 2 * pad, fw = width + 2 * pad;
  const auto coarse = detail::smooth_field(rng, fh, fw, 4.0);
  const auto fine = detail::smooth_field(rng, fh, fw, 1.5);
  const auto red = detail::smooth_field(rng, fh, fw, 6.0);
  const auto blue = detail::smooth_field(rng, fh, fw, 6.0);
  std::array<std::vector<double>, 3> rgb;  // R, G, B planes
  for (auto& p : rgb) p.resize(coarse.size());
  for (std::size_t i = 0; i < coarse.size(); ++i) {
    const double lum = 0.7 * coarse[i] + 0.45 * fine[i];
    rgb[1][i] = lum;
    rgb[0][i] = lum + 0.35 * red[i];
    rgb[2][i] = lum + 0.35 * blue[i];
  }
  double lo = rgb[0][0], hi = rgb[0][0];
  for (const auto& p : rgb)
    for (double v : p) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  const double span = hi > lo ? hi - lo : 1.0;
  for (auto& p : rgb)
    for (auto& v : p) v = 0.05 + 0.9 * (v - lo) / span;

  Sequence seq;
  seq.source_pattern = BayerPattern::RGGB;
  int dy = 0, dx = 0;
  for (int t = 0; t < frames; ++t) {
    if (t > 0) {
      dy = std::clamp(dy + static_cast<int>(rng.uniform_int(-motion, motion)), -pad, pad);
      dx = std::clamp(dx + static_cast<int>(rng.uniform_int(-motion, motion)), -pad, pad);
    }
    RawFrame raw = RawFrame::make(height, width, BayerPattern::RGGB);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const int color = (y % 2 == 0 && x % 2 == 0) ? 0 : (y % 2 == 1 && x % 2 == 1) ? 2 : 1;
        const std::size_t idx = static_cast<std::size_t>(y + pad + dy) * fw + (x + pad + dx);
        raw.data.at(0, y, x) = static_cast<float>(rgb[static_cast<std::size_t>(color)][idx]);
      }
    seq.frames.push_back(pack_cfa(raw));
  }
  return seq;
}

/// Spatial window of a packed sequence: frames [t0, t0+n), rows/cols from (y0, x0).
inline Sequence crop_sequence(const Sequence& seq, int t0, int n, int y0, int x0, int h, int w) {
  Sequence out;
  out.source_pattern = seq.source_pattern;
  out.noise = seq.noise;
  for (int t = t0; t < t0 + n; ++t) {
    const Image& f = seq.frames[static_cast<std::size_t>(t)];
    Image c(f.channels(), h, w);
    for (int ch = 0; ch < f.channels(); ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) c.at(ch, y, x) = f.at(ch, y0 + y, x0 + x);
    out.frames.push_back(std::move(c));
  }
  return out;
}

struct CropRecord {
  int raw_y = 0, raw_x = 0, t0 = 0;
};

/// `crops_per_scene` random spatio-temporal crops of a clean packed scene. Offsets are
/// drawn on even raw coordinates so the CFA phase is preserved; each crop gets its own
/// noise sub-seed and a noise level drawn uniformly from `levels`.
inline std::vector<TrainExample> sample_crops(const Sequence& clean, const TrainConfig& cfg,
                                              const std::vector<NoiseParams>& levels, std::uint64_t seed,
                                              std::vector<CropRecord>* records = nullptr) {
  clean.validate();
  if (clean.channels() != 4) throw usage_error("bad_shape", "sample_crops expects a packed sequence");
  if (levels.empty()) throw usage_error("bad_config", "sample_crops needs at least one noise level");
  const int raw_h = 2 * clean.height(), raw_w = 2 * clean.width();
  if (cfg.crop_size > raw_h || cfg.crop_size > raw_w) {
    throw usage_error("crop_too_large", "crop " + std::to_string(cfg.crop_size) + " exceeds frame " +
                                            std::to_string(raw_h) + "x" + std::to_string(raw_w));
  }
  if (cfg.seq_len > static_cast<int>(clean.length())) {
    throw usage_error("crop_too_large", "sequence length " + std::to_string(cfg.seq_len) + " exceeds the " +
                                            std::to_string(clean.length()) + " available frames");
  }
  Rng rng(mix_seed(seed, 0xc409));
  std::vector<TrainExample> out;
  const int half = cfg.crop_size / 2;
  for (int i = 0; i < cfg.crops_per_scene; ++i) {
    CropRecord rec;
    rec.raw_y = 2 * static_cast<int>(rng.uniform_int(0, (raw_h - cfg.crop_size) / 2));
    rec.raw_x = 2 * static_cast<int>(rng.uniform_int(0, (raw_w - cfg.crop_size) / 2));
    rec.t0 = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(clean.length()) - cfg.seq_len));
    const auto& params = levels[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(levels.size()) - 1))];
    TrainExample ex;
    ex.clean = crop_sequence(clean, rec.t0, cfg.seq_len, rec.raw_y / 2, rec.raw_x / 2, half, half);
    ex.params = params;
    ex.noise_seed = mix_seed(seed, 1000 + static_cast<std::uint64_t>(i));
    ex.noisy = add_noise(ex.clean, params, ex.noise_seed);
    out.push_back(std::move(ex));
    if (records) records->push_back(rec);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses

/// Mean over frames of the per-frame mean absolute error.
inline double reconstruction_loss(const Sequence& pred, const Sequence& truth) {
  if (pred.length() != truth.length() || pred.length() == 0) {
    throw usage_error("shape_mismatch", "prediction and truth must have the same nonzero length");
  }
  double total = 0.0;
  for (std::size_t t = 0; t < pred.length(); ++t) {
    require_same_shape(pred.frames[t], truth.frames[t], "reconstruction_loss");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.frames[t].size(); ++i) {
      s += std::abs(static_cast<double>(pred.frames[t][i]) - truth.frames[t][i]);
    }
    total += s / static_cast<double>(pred.frames[t].size());
  }
  return total / static_cast<double>(pred.length());
}

/// Reconstruction loss plus the orthonormality penalty, unweighted.
template <typename T>
double total_loss(const Sequence& pred, const Sequence& truth, const ColorKernel<T>& k) {
  return reconstruction_loss(pred, truth) + orthonormality_loss(k);
}

template <typename T>
struct SequenceLossVars {
  ad::Var total, reconstruction, orthonormality;
  std::vector<ad::Var> outputs;
};

/// Runs the full recurrence over the example on one tape so gradients flow back
/// through every frame and scale.
template <typename T>
SequenceLossVars<T> sequence_loss(ad::Tape<T>& t, const WeightVars<T>& wv, const TrainExample& ex,
                                  const StepOverrides<T>* ov = nullptr) {
  ex.noisy.validate();
  if (ex.noisy.length() != ex.clean.length()) throw usage_error("shape_mismatch", "noisy/clean length differ");
  SequenceLossVars<T> out;
  std::vector<ScaleVars<T>> state;
  ad::Var sum;
  for (std::size_t i = 0; i < ex.noisy.length(); ++i) {
    ad::Scope<T> scope(t, "t" + std::to_string(i));
    const auto fv = frame_forward(t, wv, state, ex.noisy.frames[i].template cast<T>(), ex.params,
                                  static_cast<int>(i), ov);
    state = fv.state;
    out.outputs.push_back(fv.output);
    const auto truth = t.constant(ex.clean.frames[i].template cast<T>(), "clean");
    const auto l = ad::mean_abs_diff(t, fv.output, truth);
    sum = sum.valid() ? ad::add(t, sum, l) : l;
  }
  out.reconstruction = ad::scale(t, sum, static_cast<T>(1.0 / static_cast<double>(ex.noisy.length())));
  out.orthonormality = ad::orthonormality(t, wv.color);
  out.total = ad::add(t, out.reconstruction, out.orthonormality);
  return out;
}

template <typename T>
struct LossBreakdown {
  double total = 0.0, reconstruction = 0.0, orthonormality = 0.0;
};

/// Loss without gradients. `branch_log` (optional) receives the piecewise-linear branch
/// decisions taken during the pass.
template <typename T>
LossBreakdown<T> evaluate_loss(const TrainExample& ex, const ModelWeights<T>& w,
                               std::vector<std::uint8_t>* branch_log = nullptr) {
  ad::Tape<T> t(false);
  t.branch_log = branch_log;
  const auto wv = bind_weights(t, w, false);
  const auto lv = sequence_loss(t, wv, ex);
  return {static_cast<double>(t.value(lv.total)[0]), static_cast<double>(t.value(lv.reconstruction)[0]),
          static_cast<double>(t.value(lv.orthonormality)[0])};
}

template <typename T>
struct Gradients {
  ModelWeights<T> grad;  // same named-tensor structure as the weights
  LossBreakdown<T> loss;
};

/// Exact gradient of total_loss for one example, by reverse accumulation through the
/// whole sequence.
template <typename T>
Gradients<T> backward(const TrainExample& ex, const ModelWeights<T>& w) {
  ad::Tape<T> t(true);
  const auto wv = bind_weights(t, w, true);
  const auto lv = sequence_loss(t, wv, ex);
  Gradients<T> g;
  g.loss = {static_cast<double>(t.value(lv.total)[0]), static_cast<double>(t.value(lv.reconstruction)[0]),
            static_cast<double>(t.value(lv.orthonormality)[0])};
  if (!std::isfinite(g.loss.total)) {
    std::string culprit;
    w.for_each_tensor([&](const std::string& name, const Tensor<T>& v) {
      if (culprit.empty() && !v.all_finite()) culprit = name;
    });
    if (culprit.empty()) culprit = t.first_non_finite();
    throw numeric_error("non_finite_loss", "loss is not finite; first offending tensor: " + culprit);
  }
  t.backward(lv.total);
  g.grad = ModelWeights<T>::zeros(w.config);
  std::vector<ad::Var> leaves;
  leaves.push_back(wv.color);
  for (const auto* s : {&wv.fusion, &wv.denoise, &wv.refine}) {
    for (auto v : {s->layer1_kernel, s->layer1_bias, s->layer2_kernel, s->layer2_bias, s->out_kernel, s->out_bias}) {
      leaves.push_back(v);
    }
  }
  std::size_t i = 0;
  g.grad.for_each_tensor([&](const std::string&, Tensor<T>& v) {
    const ad::Var leaf = leaves[i++];
    v = t.has_grad(leaf) ? t.grad(leaf) : Tensor<T>(v.shape());
  });
  return g;
}

// ---------------------------------------------------------------------------
// Optimizer

template <typename T>
struct Adam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::int64_t steps = 0;
  ModelWeights<T> m, v;

  explicit Adam(const NetConfig& cfg) : m(ModelWeights<T>::zeros(cfg)), v(ModelWeights<T>::zeros(cfg)) {}

  void step(ModelWeights<T>& w, const ModelWeights<T>& g, double lr) {
    ++steps;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
    std::vector<Tensor<T>*> ws, ms, vs;
    std::vector<const Tensor<T>*> gs;
    w.for_each_tensor([&](const std::string&, Tensor<T>& x) { ws.push_back(&x); });
    m.for_each_tensor([&](const std::string&, Tensor<T>& x) { ms.push_back(&x); });
    v.for_each_tensor([&](const std::string&, Tensor<T>& x) { vs.push_back(&x); });
    g.for_each_tensor([&](const std::string&, const Tensor<T>& x) { gs.push_back(&x); });
    for (std::size_t k = 0; k < ws.size(); ++k) {
      auto& p = *ws[k];
      auto& mk = *ms[k];
      auto& vk = *vs[k];
      const auto& gk = *gs[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = gk[i];
        mk[i] = static_cast<T>(beta1 * mk[i] + (1.0 - beta1) * gi);
        vk[i] = static_cast<T>(beta2 * vk[i] + (1.0 - beta2) * gi * gi);
        const double mhat = mk[i] / c1, vhat = vk[i] / c2;
        p[i] = static_cast<T>(p[i] - lr * mhat / (std::sqrt(vhat) + eps));
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Training loop

struct TrainLogEntry {
  std::int64_t iter = 0;
  int epoch = 0;
  double lr = 0.0, loss = 0.0, l_r = 0.0, l_c = 0.0;
  std::optional<double> psnr, ssim;
};

inline nlohmann::json to_json(const TrainLogEntry& e) {
  nlohmann::json j = {{"iter", e.iter}, {"epoch", e.epoch}, {"lr", e.lr},
                      {"loss", e.loss}, {"l_r", e.l_r},     {"l_c", e.l_c}};
  if (e.psnr) j["psnr"] = metric_json(*e.psnr);
  if (e.ssim) j["ssim"] = *e.ssim;
  return j;
}

template <typename T>
struct TrainResult {
  ModelWeights<T> weights;
  std::vector<TrainLogEntry> log;
  std::int64_t iterations = 0;
};

inline std::int64_t total_iterations(const TrainConfig& cfg, std::size_t dataset_size) {
  const std::int64_t per_epoch = (static_cast<std::int64_t>(dataset_size) + cfg.batch_size - 1) / cfg.batch_size;
  return per_epoch * cfg.epochs;
}

namespace detail {

template <typename T>
void add_scaled(ModelWeights<T>& acc, const ModelWeights<T>& g, double s) {
  std::vector<const Tensor<T>*> src;
  g.for_each_tensor([&](const std::string&, const Tensor<T>& v) { src.push_back(&v); });
  std::size_t k = 0;
  acc.for_each_tensor([&](const std::string&, Tensor<T>& v) {
    const auto& gv = *src[k++];
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(v[i] + s * gv[i]);
  });
}

/// Runs fn(i) for i in [0, n) over up to `threads` workers.
template <typename F>
void parallel_for(int n, int threads, F&& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
  for (int w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// Adam training over full sequences. Per-example gradients are computed in parallel and
/// summed in batch order, so results do not depend on the worker count.
template <typename T = float>
TrainResult<T> train(const TrainConfig& cfg, const std::vector<TrainExample>& dataset,
                     const std::vector<TrainExample>& validation = {},
                     const std::function<void(const TrainLogEntry&)>& sink = {},
                     std::optional<std::int64_t> max_iterations = std::nullopt) {
  cfg.validate();
  if (dataset.empty()) throw usage_error("empty_dataset", "training needs at least one example");
  TrainResult<T> res;
  res.weights = ModelWeights<T>::initialized(cfg.net, cfg.seed);
  Adam<T> adam(cfg.net);
  Rng order_rng(mix_seed(cfg.seed, 0x0d3e));
  const std::int64_t total = total_iterations(cfg, dataset.size());
  std::int64_t iter = 0;
  std::vector<std::size_t> order(dataset.size());
  std::vector<int> visits(dataset.size(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(order_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    }
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      if (max_iterations && iter >= *max_iterations) return res;
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const int n = static_cast<int>(end - start);

      // Per-element views (augmentation and fresh noise), decided serially for determinism.
      std::vector<TrainExample> batch(static_cast<std::size_t>(n));
      for (int b = 0; b < n; ++b) {
        const std::size_t idx = order[start + static_cast<std::size_t>(b)];
        const TrainExample& src = dataset[idx];
        TrainExample& ex = batch[static_cast<std::size_t>(b)];
        ex.params = src.params;
        const int visit = visits[idx]++;
        Augment op = Augment::none;
        if (cfg.augment) {
          const auto pick = order_rng.uniform_int(0, src.clean.height() == src.clean.width() ? 3 : 2);
          op = static_cast<Augment>(pick);
        }
        ex.clean = augment(src.clean, op);
        if (cfg.renoise) {
          ex.noise_seed = mix_seed(src.noise_seed, static_cast<std::uint64_t>(visit));
          ex.noisy = add_noise(ex.clean, src.params, ex.noise_seed);
        } else {
          ex.noise_seed = src.noise_seed;
          ex.noisy = augment(src.noisy, op);
        }
      }

      std::vector<Gradients<T>> grads(static_cast<std::size_t>(n));
      detail::parallel_for(n, cfg.threads, [&](int b) {
        grads[static_cast<std::size_t>(b)] = backward(batch[static_cast<std::size_t>(b)], res.weights);
      });

      ModelWeights<T> g = ModelWeights<T>::zeros(cfg.net);
      TrainLogEntry e;
      e.iter = iter;
      e.epoch = epoch;
      e.lr = learning_rate_at(cfg, iter, total);
      for (int b = 0; b < n; ++b) {
        detail::add_scaled(g, grads[static_cast<std::size_t>(b)].grad, 1.0 / n);
        e.l_r += grads[static_cast<std::size_t>(b)].loss.reconstruction / n;
      }
      e.l_c = grads.front().loss.orthonormality;
      e.loss = e.l_r + e.l_c;
      if (!std::isfinite(e.loss)) {
        throw numeric_error("divergence", "training diverged at iteration " + std::to_string(iter));
      }
      adam.step(res.weights, g, e.lr);
      if (orthonormality_loss(res.weights.color) > cfg.projection_threshold) {
        res.weights.color = orthonormalize_rows(res.weights.color);
      }
      ++iter;
      res.iterations = iter;
      const bool epoch_end = end == order.size();
      if (epoch_end && !validation.empty() && ((epoch + 1) % cfg.val_interval == 0 || epoch + 1 == cfg.epochs)) {
        const auto rep = evaluate(res.weights, validation);
        e.psnr = rep.model_psnr;
        e.ssim = rep.model_ssim;
      }
      res.log.push_back(e);
      if (sink) sink(e);
    }
  }
  return res;
}

}  // namespace rawdn
