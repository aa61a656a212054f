#pragma once

// Signal-dependent Gaussian noise: variance maps, synthesis, and calibration of the
// shot/read coefficients from flat-field stacks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "rawdn/errors.hpp"
#include "rawdn/noise_params.hpp"
#include "rawdn/random.hpp"
#include "rawdn/raw_data.hpp"

namespace rawdn {

/// Lower bound applied to every variance map entry.
inline constexpr double kVarianceFloor = 1e-8;

/// Synthetic noise levels, named after the ISO ladder they stand in for. These are not
/// measured sensor values; the top level is the one used for validation.
inline std::vector<NoiseParams> synthetic_noise_presets() {
  std::vector<NoiseParams> out;
  const char* names[] = {"iso1600", "iso3200", "iso6400", "iso12800", "iso25600"};
  for (int i = 0; i < 5; ++i) {
    const double scale = std::ldexp(1.0, i - 4);
    out.push_back({0.01 * scale, 0.0004 * scale, names[i]});
  }
  return out;
}

inline NoiseParams strongest_noise_preset() { return synthetic_noise_presets().back(); }

inline void validate_noise(const NoiseParams& p) {
  if (!(p.a >= 0.0) || !(p.b >= 0.0) || !std::isfinite(p.a) || !std::isfinite(p.b)) {
    throw usage_error("bad_noise", "noise coefficients must be finite and nonnegative");
  }
}

/// Per-sample variance a*max(v,0) + b, floored at kVarianceFloor.
template <typename T>
Tensor<T> variance_map(const Tensor<T>& frame, const NoiseParams& params) {
  validate_noise(params);
  Tensor<T> out(frame.shape());
  const T a = static_cast<T>(params.a), b = static_cast<T>(params.b);
  const T floor = static_cast<T>(kVarianceFloor);
  for (std::size_t i = 0; i < frame.size(); ++i) {
    out[i] = std::max(a * std::max(frame[i], T(0)) + b, floor);
  }
  return out;
}

/// z = y + sqrt(a*y + b) * n with n ~ N(0,1) drawn in frame, channel, row, column order.
inline Image add_noise_frame(const Image& clean, const NoiseParams& params, Rng& rng) {
  Image out(clean.shape());
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const double y = clean[i];
    const double sd = std::sqrt(std::max(params.a * std::max(y, 0.0) + params.b, 0.0));
    out[i] = static_cast<float>(y + sd * rng.normal());
  }
  return out;
}

/// Noisy realization of `clean`. No clipping: the Gaussian model is kept exact.
inline Sequence add_noise(const Sequence& clean, const NoiseParams& params, std::uint64_t seed) {
  validate_noise(params);
  if (params.a == 0.0 && params.b == 0.0) {
    throw usage_error("degenerate_params", "cannot synthesize noise with a = b = 0");
  }
  clean.validate();
  Rng rng(seed);
  Sequence out;
  out.noise = params;
  out.source_pattern = clean.source_pattern;
  out.frames.reserve(clean.length());
  for (const auto& f : clean.frames) out.frames.push_back(add_noise_frame(f, params, rng));
  return out;
}

struct CalibrationResult {
  NoiseParams params;
  double residual = 0.0;  // RMS of (measured - fitted) variance over the stacks
  std::vector<double> means;
  std::vector<double> variances;
};

inline nlohmann::json to_json(const CalibrationResult& r) {
  return {{"a", r.params.a}, {"b", r.params.b}, {"iso", r.params.iso}, {"residual", r.residual}};
}

inline constexpr std::size_t kMinCalibrationFrames = 16;

/// Fits variance = a * mean + b to per-stack (mean, temporal variance) pairs.
///
/// Each stack is a run of frames of a constant scene. The temporal variance is the
/// unbiased per-pixel variance across frames, averaged over pixels. The fit is
/// weighted least squares with weights 1/var^2 (the sampling variance of a variance
/// estimate grows with its square), using an ordinary fit to set the weights.
inline CalibrationResult calibrate(const std::vector<Sequence>& flat_stacks, std::string iso = {}) {
  CalibrationResult res;
  for (const auto& stack : flat_stacks) {
    stack.validate();
    if (stack.length() < kMinCalibrationFrames) {
      throw usage_error("too_few_frames", "each flat stack needs at least 16 frames, got " +
                                              std::to_string(stack.length()));
    }
    const std::size_t n = stack.frames.front().size();
    const double frames = static_cast<double>(stack.length());
    double mean_total = 0.0, var_total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double m = 0.0;
      for (const auto& f : stack.frames) m += f[i];
      m /= frames;
      double ss = 0.0;
      for (const auto& f : stack.frames) ss += (f[i] - m) * (f[i] - m);
      mean_total += m;
      var_total += ss / (frames - 1.0);
    }
    res.means.push_back(mean_total / static_cast<double>(n));
    res.variances.push_back(var_total / static_cast<double>(n));
  }

  std::vector<double> levels = res.means;
  std::sort(levels.begin(), levels.end());
  const auto distinct = std::unique(levels.begin(), levels.end(), [](double x, double y) {
                          return std::abs(x - y) <= 1e-6 * std::max(1.0, std::abs(x));
                        }) - levels.begin();
  if (distinct < 2) {
    throw numeric_error("rank_deficient",
                        "calibration needs flats at two or more distinct intensity levels");
  }

  auto fit = [&](const std::vector<double>& w) {
    double sw = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < res.means.size(); ++i) {
      const double x = res.means[i], y = res.variances[i];
      sw += w[i];
      sx += w[i] * x;
      sy += w[i] * y;
      sxx += w[i] * x * x;
      sxy += w[i] * x * y;
    }
    const double det = sw * sxx - sx * sx;
    if (!(std::abs(det) > 0.0)) {
      throw numeric_error("rank_deficient", "calibration normal equations are singular");
    }
    const double a = (sw * sxy - sx * sy) / det;
    return std::pair{a, (sy - a * sx) / sw};
  };

  std::vector<double> weights(res.means.size(), 1.0);
  auto [a, b] = fit(weights);
  bool reweight = true;
  for (std::size_t i = 0; i < res.means.size(); ++i) {
    const double v = a * res.means[i] + b;
    if (!(v > 0.0)) reweight = false;
    weights[i] = 1.0 / (v * v);
  }
  if (reweight) std::tie(a, b) = fit(weights);

  double sq = 0.0;
  for (std::size_t i = 0; i < res.means.size(); ++i) {
    const double r = res.variances[i] - (a * res.means[i] + b);
    sq += r * r;
  }
  res.residual = std::sqrt(sq / static_cast<double>(res.means.size()));
  res.params = {std::max(a, 0.0), std::max(b, 0.0), std::move(iso)};
  return res;
}

}  // namespace rawdn
