#pragma once

// Recursive multi-scale denoiser: fusion -> denoising -> refinement per frame, with the
// fused frame and its propagated noise variance carried to the next frame.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rawdn/autodiff.hpp"
#include "rawdn/color_transform.hpp"
#include "rawdn/errors.hpp"
#include "rawdn/noise_model.hpp"
#include "rawdn/random.hpp"
#include "rawdn/raw_data.hpp"

namespace rawdn {

struct NetConfig {
  int fusion_hidden = 16;
  int denoise_hidden = 32;
  int refine_hidden = 16;
  int scales = 3;
  double eps_var = kVarianceFloor;

  bool operator==(const NetConfig&) const = default;

  void validate() const {
    if (fusion_hidden < 1 || denoise_hidden < 1 || refine_hidden < 1) {
      throw usage_error("bad_config", "hidden widths must be positive");
    }
    if (scales < 1 || scales > 8) throw usage_error("bad_config", "scales must be in [1, 8]");
    if (!(eps_var > 0.0)) throw usage_error("bad_config", "eps_var must be positive");
  }

  /// Packed sizes must halve cleanly S-1 times and stay at least 2x2 for the 3x3 kernels.
  void check_frame(int height, int width) const {
    const int div = 1 << (scales - 1);
    if (height % div != 0 || width % div != 0 || height / div < 2 || width / div < 2) {
      throw usage_error("bad_shape", "packed frame " + std::to_string(height) + "x" +
                                         std::to_string(width) + " must be divisible by " +
                                         std::to_string(div) + " with at least 2 pixels at the coarsest scale");
    }
  }
};

inline nlohmann::json to_json(const NetConfig& c) {
  return {{"fusion_hidden", c.fusion_hidden},
          {"denoise_hidden", c.denoise_hidden},
          {"refine_hidden", c.refine_hidden},
          {"scales", c.scales},
          {"eps_var", c.eps_var}};
}

inline NetConfig net_config_from_json(const nlohmann::json& j) {
  NetConfig c;
  c.fusion_hidden = j.value("fusion_hidden", c.fusion_hidden);
  c.denoise_hidden = j.value("denoise_hidden", c.denoise_hidden);
  c.refine_hidden = j.value("refine_hidden", c.refine_hidden);
  c.scales = j.value("scales", c.scales);
  c.eps_var = j.value("eps_var", c.eps_var);
  c.validate();
  return c;
}

enum class OutputActivation { sigmoid, none };

/// conv3x3 + ReLU, conv3x3 + ReLU, conv3x3 output (+ optional sigmoid).
template <typename T>
struct ConvStage {
  int in_channels = 0, hidden = 0, out_channels = 0;
  OutputActivation activation = OutputActivation::none;
  Tensor<T> layer1_kernel, layer1_bias, layer2_kernel, layer2_bias, out_kernel, out_bias;

  static ConvStage zeros(int in, int hidden, int out, OutputActivation act) {
    ConvStage s;
    s.in_channels = in;
    s.hidden = hidden;
    s.out_channels = out;
    s.activation = act;
    s.layer1_kernel = Tensor<T>(std::vector<int>{hidden, in, 3, 3});
    s.layer1_bias = Tensor<T>(std::vector<int>{hidden});
    s.layer2_kernel = Tensor<T>(std::vector<int>{hidden, hidden, 3, 3});
    s.layer2_bias = Tensor<T>(std::vector<int>{hidden});
    s.out_kernel = Tensor<T>(std::vector<int>{out, hidden, 3, 3});
    s.out_bias = Tensor<T>(std::vector<int>{out});
    return s;
  }

  template <typename F>
  void for_each_tensor(const std::string& prefix, F&& fn) {
    fn(prefix + ".layer1.kernel", layer1_kernel);
    fn(prefix + ".layer1.bias", layer1_bias);
    fn(prefix + ".layer2.kernel", layer2_kernel);
    fn(prefix + ".layer2.bias", layer2_bias);
    fn(prefix + ".out.kernel", out_kernel);
    fn(prefix + ".out.bias", out_bias);
  }
  template <typename F>
  void for_each_tensor(const std::string& prefix, F&& fn) const {
    const_cast<ConvStage*>(this)->for_each_tensor(
        prefix, [&](const std::string& n, Tensor<T>& v) { fn(n, static_cast<const Tensor<T>&>(v)); });
  }
};

/// Color kernel plus the three stage parameter sets, shared by every scale.
template <typename T>
struct ModelWeights {
  NetConfig config;
  Tensor<T> color;
  ConvStage<T> fusion, denoise, refine;

  /// All-zero tensors of the configured shapes (also the gradient container).
  static ModelWeights zeros(const NetConfig& cfg) {
    cfg.validate();
    ModelWeights w;
    w.config = cfg;
    w.color = Tensor<T>(std::vector<int>{4, 4});
    w.fusion = ConvStage<T>::zeros(8, cfg.fusion_hidden, 1, OutputActivation::sigmoid);
    w.denoise = ConvStage<T>::zeros(12, cfg.denoise_hidden, 4, OutputActivation::none);
    w.refine = ConvStage<T>::zeros(12, cfg.refine_hidden, 1, OutputActivation::sigmoid);
    return w;
  }

  /// Training start point: color kernel from the decorrelation matrix, hidden layers
  /// He-uniform (bound sqrt(6 / fan_in)), biases and every output layer zero. The
  /// untrained network therefore predicts gamma = omega = 0.5 and a zero residual.
  static ModelWeights initialized(const NetConfig& cfg, std::uint64_t seed) {
    ModelWeights w = zeros(cfg);
    w.color = initial_color_kernel<T>();
    Rng rng(mix_seed(seed, 0x57a6e));
    auto he = [&](Tensor<T>& k) {
      const double fan_in = static_cast<double>(k.dim(1)) * 9.0;
      const double bound = std::sqrt(6.0 / fan_in);
      for (auto& v : k) v = static_cast<T>(rng.uniform(-bound, bound));
    };
    for (ConvStage<T>* s : {&w.fusion, &w.denoise, &w.refine}) {
      he(s->layer1_kernel);
      he(s->layer2_kernel);
    }
    return w;
  }

  template <typename F>
  void for_each_tensor(F&& fn) {
    fn(std::string("color.M"), color);
    fusion.for_each_tensor("fusion", fn);
    denoise.for_each_tensor("denoise", fn);
    refine.for_each_tensor("refine", fn);
  }
  template <typename F>
  void for_each_tensor(F&& fn) const {
    const_cast<ModelWeights*>(this)->for_each_tensor(
        [&](const std::string& n, Tensor<T>& v) { fn(n, static_cast<const Tensor<T>&>(v)); });
  }

  template <typename U>
  ModelWeights<U> cast() const {
    ModelWeights<U> out = ModelWeights<U>::zeros(config);
    std::vector<const Tensor<T>*> src;
    for_each_tensor([&](const std::string&, const Tensor<T>& v) { src.push_back(&v); });
    std::size_t i = 0;
    out.for_each_tensor([&](const std::string&, Tensor<U>& v) { v = src[i++]->template cast<U>(); });
    return out;
  }

  bool operator==(const ModelWeights& o) const {
    if (config != o.config) return false;
    std::vector<const Tensor<T>*> mine, theirs;
    for_each_tensor([&](const std::string&, const Tensor<T>& v) { mine.push_back(&v); });
    o.for_each_tensor([&](const std::string&, const Tensor<T>& v) { theirs.push_back(&v); });
    for (std::size_t i = 0; i < mine.size(); ++i)
      if (!(*mine[i] == *theirs[i])) return false;
    return true;
  }
};

/// Total trainable scalars.
template <typename T>
std::int64_t count_params(const ModelWeights<T>& w) {
  std::int64_t n = 0;
  w.for_each_tensor([&](const std::string&, const Tensor<T>& v) { n += static_cast<std::int64_t>(v.size()); });
  return n;
}

/// Multiply-accumulates for denoising one sequence of `frames` packed frames of
/// height x width. Counts every 3x3 convolution at every scale as executed (the fusion
/// stage does not run on the first frame) plus the three point-wise color products
/// (forward, variance, inverse) at full resolution.
template <typename T>
std::int64_t count_macs(const ModelWeights<T>& w, int height, int width, int frames) {
  auto stage_macs = [](const ConvStage<T>& s) {
    return std::int64_t{9} * (std::int64_t{s.in_channels} * s.hidden + std::int64_t{s.hidden} * s.hidden +
                               std::int64_t{s.hidden} * s.out_channels);
  };
  const std::int64_t fusion = stage_macs(w.fusion), denoise = stage_macs(w.denoise),
                     refine = stage_macs(w.refine);
  std::int64_t per_first = 0, per_later = 0;
  for (int s = 0; s < w.config.scales; ++s) {
    const std::int64_t px = std::int64_t{height >> s} * (width >> s);
    per_first += denoise * px;
    per_later += (denoise + fusion) * px;
  }
  const std::int64_t full = std::int64_t{height} * width;
  const std::int64_t common = refine * full + 3 * 16 * full;
  if (frames <= 0) return 0;
  return per_first + common + (frames - 1) * (per_later + common);
}

// ---------------------------------------------------------------------------
// Tape-level forward pass

template <typename T>
struct StageVars {
  const ConvStage<T>* source = nullptr;
  ad::Var layer1_kernel, layer1_bias, layer2_kernel, layer2_bias, out_kernel, out_bias;
};

template <typename T>
struct WeightVars {
  const ModelWeights<T>* source = nullptr;
  ad::Var color;
  StageVars<T> fusion, denoise, refine;
};

/// Places every parameter on the tape once. `trainable` selects leaves vs constants.
template <typename T>
WeightVars<T> bind_weights(ad::Tape<T>& tape, const ModelWeights<T>& w, bool trainable) {
  WeightVars<T> v;
  v.source = &w;
  auto put = [&](const std::string& name, const Tensor<T>& x) {
    return trainable ? tape.leaf(x, name) : tape.constant(x, name);
  };
  v.color = put("color.M", w.color);
  auto stage = [&](const ConvStage<T>& s, const std::string& p) {
    StageVars<T> sv;
    sv.source = &s;
    sv.layer1_kernel = put(p + ".layer1.kernel", s.layer1_kernel);
    sv.layer1_bias = put(p + ".layer1.bias", s.layer1_bias);
    sv.layer2_kernel = put(p + ".layer2.kernel", s.layer2_kernel);
    sv.layer2_bias = put(p + ".layer2.bias", s.layer2_bias);
    sv.out_kernel = put(p + ".out.kernel", s.out_kernel);
    sv.out_bias = put(p + ".out.bias", s.out_bias);
    return sv;
  };
  v.fusion = stage(w.fusion, "fusion");
  v.denoise = stage(w.denoise, "denoise");
  v.refine = stage(w.refine, "refine");
  return v;
}

template <typename T>
ad::Var run_stage(ad::Tape<T>& t, const StageVars<T>& s, ad::Var input) {
  auto h = ad::relu(t, ad::conv3x3(t, input, s.layer1_kernel, s.layer1_bias));
  h = ad::relu(t, ad::conv3x3(t, h, s.layer2_kernel, s.layer2_bias));
  auto out = ad::conv3x3(t, h, s.out_kernel, s.out_bias);
  return s.source->activation == OutputActivation::sigmoid ? ad::sigmoid(t, out) : out;
}

/// gamma = sigmoid(Fusion(|z - prev|, var_z)), a (1, H, W) map.
template <typename T>
ad::Var fusion_weights(ad::Tape<T>& t, const WeightVars<T>& w, ad::Var z, ad::Var prev_fused,
                       ad::Var var_z) {
  ad::Scope<T> scope(t, "fusion");
  const auto diff = ad::abs(t, ad::sub(t, z, prev_fused));
  return run_stage(t, w.fusion, ad::concat(t, {diff, var_z}));
}

/// prev * (1 - gamma) + z * gamma
template <typename T>
ad::Var fuse(ad::Tape<T>& t, ad::Var z, ad::Var prev_fused, ad::Var gamma) {
  return ad::add(t, ad::broadcast_mul(t, ad::rsub_scalar(t, T(1), gamma), prev_fused),
                 ad::broadcast_mul(t, gamma, z));
}

/// gamma^2 var_z + (1 - gamma)^2 var_prev, floored.
template <typename T>
ad::Var propagate_variance(ad::Tape<T>& t, ad::Var gamma, ad::Var var_z, ad::Var var_prev, T eps) {
  const auto g2 = ad::square(t, gamma);
  const auto c2 = ad::square(t, ad::rsub_scalar(t, T(1), gamma));
  return ad::floor_at(t, ad::add(t, ad::broadcast_mul(t, g2, var_z), ad::broadcast_mul(t, c2, var_prev)), eps);
}

/// fused + Denoising(fused, z, var_fused)
template <typename T>
ad::Var denoise_stage(ad::Tape<T>& t, const WeightVars<T>& w, ad::Var fused, ad::Var z,
                      ad::Var var_fused) {
  ad::Scope<T> scope(t, "denoise");
  return ad::add(t, fused, run_stage(t, w.denoise, ad::concat(t, {fused, z, var_fused})));
}

template <typename T>
ad::Var refine_weights(ad::Tape<T>& t, const WeightVars<T>& w, ad::Var denoised, ad::Var fused,
                       ad::Var var_fused) {
  ad::Scope<T> scope(t, "refine");
  return run_stage(t, w.refine, ad::concat(t, {denoised, fused, var_fused}));
}

/// fused * (1 - omega) + denoised * omega
template <typename T>
ad::Var refine(ad::Tape<T>& t, ad::Var fused, ad::Var denoised, ad::Var omega) {
  return ad::add(t, ad::broadcast_mul(t, ad::rsub_scalar(t, T(1), omega), fused),
                 ad::broadcast_mul(t, omega, denoised));
}

/// Test hooks that replace predicted quantities.
template <typename T>
struct StepOverrides {
  /// Fusion weight map for (frame index, scale, height, width); replaces the fusion stage.
  std::function<Tensor<T>(int, int, int, int)> gamma;
  /// Constant refinement weight; replaces the refinement stage.
  std::optional<double> omega;
  /// Skip the denoising residual (denoised = fused).
  bool zero_residual = false;
  /// Called with the stage parameter bindings each time a stage runs at a scale.
  std::function<void(const char*, int, const StageVars<T>&)> on_stage;

  static std::function<Tensor<T>(int, int, int, int)> constant_gamma(std::function<double(int)> f) {
    return [f](int t, int, int h, int w) { return Tensor<T>(1, h, w, static_cast<T>(f(t))); };
  }
};

template <typename T>
struct ScaleVars {
  ad::Var fused;
  ad::Var variance;
};

template <typename T>
struct FrameVars {
  ad::Var output;                     // RGGB domain
  ad::Var z;                          // transformed input at scale 0
  std::vector<ScaleVars<T>> state;    // fused frame and variance per scale
  std::vector<ad::Var> gamma;         // per scale; invalid on the first frame
  std::vector<ad::Var> denoised;      // per scale, after coarse-to-fine combination
  ad::Var omega;
};

/// One recurrence step on a tape. `prev` is empty for the first frame.
template <typename T>
FrameVars<T> frame_forward(ad::Tape<T>& t, const WeightVars<T>& w, const std::vector<ScaleVars<T>>& prev,
                           const Tensor<T>& z_raw, const NoiseParams& params, int frame_index,
                           const StepOverrides<T>* ov = nullptr) {
  const NetConfig& cfg = w.source->config;
  const int scales = cfg.scales;
  if (z_raw.rank() != 3 || z_raw.channels() != 4) {
    throw usage_error("bad_shape", "denoiser input must be a packed 4-channel frame");
  }
  cfg.check_frame(z_raw.height(), z_raw.width());
  const bool first = prev.empty();
  if (!first) {
    if (static_cast<int>(prev.size()) != scales ||
        t.value(prev.front().fused).shape() != z_raw.shape()) {
      throw usage_error("shape_mismatch", "frame " + shape_string(z_raw.shape()) +
                                              " does not match the denoiser state");
    }
  }
  const T eps = static_cast<T>(cfg.eps_var);
  FrameVars<T> out;

  // Noise variance of the observed frame, then both into the decorrelated space.
  const auto z_in = t.constant(z_raw, "z_raw");
  const auto var_raw = t.constant(variance_map(z_raw, params), "var_raw");
  out.z = ad::channel_matmul(t, w.color, z_in);
  const auto var_z = ad::floor_at(t, ad::channel_matmul(t, ad::square(t, w.color), var_raw), eps);

  std::vector<ad::Var> zs{out.z}, vs{var_z};
  for (int s = 1; s < scales; ++s) {
    zs.push_back(ad::downsample2(t, zs.back()));
    vs.push_back(ad::floor_at(t, ad::scale(t, ad::downsample2(t, vs.back()), T(0.25)), eps));
  }

  out.state.resize(static_cast<std::size_t>(scales));
  out.gamma.resize(static_cast<std::size_t>(scales));
  out.denoised.resize(static_cast<std::size_t>(scales));
  for (int s = 0; s < scales; ++s) {
    ad::Scope<T> scope(t, "s" + std::to_string(s));
    ScaleVars<T>& st = out.state[static_cast<std::size_t>(s)];
    if (first) {
      // No history: the previous fused frame is z itself.
      st.fused = zs[s];
      st.variance = vs[s];
    } else {
      const auto& p = prev[static_cast<std::size_t>(s)];
      ad::Var gamma;
      if (ov && ov->gamma) {
        const auto& zv = t.value(zs[s]);
        gamma = t.constant(ov->gamma(frame_index, s, zv.height(), zv.width()), "gamma_override");
      } else {
        if (ov && ov->on_stage) ov->on_stage("fusion", s, w.fusion);
        gamma = fusion_weights(t, w, zs[s], p.fused, vs[s]);
      }
      out.gamma[static_cast<std::size_t>(s)] = gamma;
      st.fused = fuse(t, zs[s], p.fused, gamma);
      st.variance = propagate_variance(t, gamma, vs[s], p.variance, eps);
    }
    if (ov && ov->zero_residual) {
      out.denoised[static_cast<std::size_t>(s)] = st.fused;
    } else {
      if (ov && ov->on_stage) ov->on_stage("denoise", s, w.denoise);
      out.denoised[static_cast<std::size_t>(s)] = denoise_stage(t, w, st.fused, zs[s], st.variance);
    }
  }

  // Coarse to fine: replace the low band of each scale with the next coarser result.
  for (int s = scales - 2; s >= 0; --s) {
    auto& fine = out.denoised[static_cast<std::size_t>(s)];
    const auto coarse = out.denoised[static_cast<std::size_t>(s + 1)];
    fine = ad::add(t, fine, ad::upsample2(t, ad::sub(t, coarse, ad::downsample2(t, fine))));
  }

  const auto& top = out.state.front();
  const auto denoised = out.denoised.front();
  if (ov && ov->omega) {
    out.omega = t.constant(Tensor<T>(1, z_raw.height(), z_raw.width(), static_cast<T>(*ov->omega)),
                           "omega_override");
  } else {
    if (ov && ov->on_stage) ov->on_stage("refine", 0, w.refine);
    out.omega = refine_weights(t, w, denoised, top.fused, top.variance);
  }
  const auto refined = refine(t, top.fused, denoised, out.omega);
  out.output = ad::channel_matmul(t, ad::inverse(t, w.color), refined);
  return out;
}

// ---------------------------------------------------------------------------
// Tensor-level API

namespace detail {

template <typename T>
void require_map(const Tensor<T>& m, const Tensor<T>& like, const char* what) {
  if (m.rank() != 3 || m.channels() != 1 || m.height() != like.height() || m.width() != like.width()) {
    throw usage_error("shape_mismatch", std::string(what) + ": weight map " + shape_string(m.shape()) +
                                            " does not match image " + shape_string(like.shape()));
  }
}

template <typename T>
void require_unit_interval(const Tensor<T>& m, const char* what) {
  for (T v : m) {
    if (!(v >= T(0) && v <= T(1))) {
      throw usage_error("out_of_range", std::string(what) + " weights must lie in [0, 1]");
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> fusion_weights(const Tensor<T>& z, const Tensor<T>& prev_fused, const Tensor<T>& var_z,
                         const ModelWeights<T>& w) {
  require_same_shape(z, prev_fused, "fusion_weights");
  require_same_shape(z, var_z, "fusion_weights");
  ad::Tape<T> t(false);
  const auto wv = bind_weights(t, w, false);
  return t.value(fusion_weights(t, wv, t.constant(z), t.constant(prev_fused), t.constant(var_z)));
}

template <typename T>
Tensor<T> fuse(const Tensor<T>& z, const Tensor<T>& prev_fused, const Tensor<T>& gamma) {
  require_same_shape(z, prev_fused, "fuse");
  detail::require_map(gamma, z, "fuse");
  detail::require_unit_interval(gamma, "fusion");
  ad::Tape<T> t(false);
  return t.value(fuse(t, t.constant(z), t.constant(prev_fused), t.constant(gamma)));
}

template <typename T>
Tensor<T> propagate_variance(const Tensor<T>& gamma, const Tensor<T>& var_z, const Tensor<T>& var_prev,
                             double eps = kVarianceFloor) {
  require_same_shape(var_z, var_prev, "propagate_variance");
  detail::require_map(gamma, var_z, "propagate_variance");
  ad::Tape<T> t(false);
  return t.value(propagate_variance(t, t.constant(gamma), t.constant(var_z), t.constant(var_prev),
                                    static_cast<T>(eps)));
}

template <typename T>
Tensor<T> denoise_stage(const Tensor<T>& fused, const Tensor<T>& z, const Tensor<T>& var_fused,
                        const ModelWeights<T>& w) {
  require_same_shape(fused, z, "denoise_stage");
  require_same_shape(fused, var_fused, "denoise_stage");
  ad::Tape<T> t(false);
  const auto wv = bind_weights(t, w, false);
  return t.value(denoise_stage(t, wv, t.constant(fused), t.constant(z), t.constant(var_fused)));
}

template <typename T>
Tensor<T> refine_weights(const Tensor<T>& denoised, const Tensor<T>& fused, const Tensor<T>& var_fused,
                         const ModelWeights<T>& w) {
  require_same_shape(denoised, fused, "refine_weights");
  require_same_shape(fused, var_fused, "refine_weights");
  ad::Tape<T> t(false);
  const auto wv = bind_weights(t, w, false);
  return t.value(refine_weights(t, wv, t.constant(denoised), t.constant(fused), t.constant(var_fused)));
}

template <typename T>
Tensor<T> refine(const Tensor<T>& fused, const Tensor<T>& denoised, const Tensor<T>& omega) {
  require_same_shape(fused, denoised, "refine");
  detail::require_map(omega, fused, "refine");
  detail::require_unit_interval(omega, "refinement");
  ad::Tape<T> t(false);
  return t.value(refine(t, t.constant(fused), t.constant(denoised), t.constant(omega)));
}

/// Recurrent state: per scale, the previous fused frame (decorrelated space) and its variance.
template <typename T>
struct DenoiserState {
  struct Scale {
    Tensor<T> fused;
    Tensor<T> variance;
  };
  std::vector<Scale> scales;
  int frame_index = 0;

  bool empty() const noexcept { return scales.empty(); }
};

template <typename T>
struct StepResult {
  Tensor<T> output;  // RGGB packed
  DenoiserState<T> state;
  Tensor<T> fused;   // scale-0 fused frame, decorrelated space
  Tensor<T> z;       // scale-0 transformed input
};

/// Denoises one packed RGGB frame and advances the state.
template <typename T>
StepResult<T> step(const DenoiserState<T>& state, const Tensor<T>& z_raw, const NoiseParams& params,
                   const ModelWeights<T>& w, const StepOverrides<T>* ov = nullptr) {
  validate_noise(params);
  ad::Tape<T> t(false);
  const auto wv = bind_weights(t, w, false);
  std::vector<ScaleVars<T>> prev;
  for (const auto& s : state.scales) {
    prev.push_back({t.constant(s.fused, "prev_fused"), t.constant(s.variance, "prev_variance")});
  }
  const auto fv = frame_forward(t, wv, prev, z_raw, params, state.frame_index, ov);
  StepResult<T> r;
  r.output = t.value(fv.output);
  r.fused = t.value(fv.state.front().fused);
  r.z = t.value(fv.z);
  r.state.frame_index = state.frame_index + 1;
  for (const auto& s : fv.state) r.state.scales.push_back({t.value(s.fused), t.value(s.variance)});
  return r;
}

/// Folds step() over the frames of a packed sequence.
template <typename T>
Sequence denoise_sequence(const Sequence& seq, const NoiseParams& params, const ModelWeights<T>& w,
                          const StepOverrides<T>* ov = nullptr) {
  seq.validate();
  if (seq.channels() != 4) throw usage_error("bad_shape", "denoise_sequence expects packed frames");
  Sequence out;
  out.noise = seq.noise;
  out.source_pattern = seq.source_pattern;
  DenoiserState<T> state;
  for (const auto& f : seq.frames) {
    auto r = step(state, f.template cast<T>(), params, w, ov);
    out.frames.push_back(r.output.template cast<float>());
    state = std::move(r.state);
  }
  return out;
}

}  // namespace rawdn
