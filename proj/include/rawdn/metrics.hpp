#pragma once

// PSNR and SSIM on packed frames, and the noisy-vs-model evaluation report.

#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "rawdn/denoise_net.hpp"
#include "rawdn/raw_data.hpp"

namespace rawdn {

/// Noisy observation of a clean sequence. `noise_seed` regenerates the noise exactly.
struct NoisyPair {
  Sequence noisy;
  Sequence clean;
  NoiseParams params;
  std::uint64_t noise_seed = 0;
};

/// PSNR of identical frames.
inline constexpr double kInfinitePsnr = std::numeric_limits<double>::infinity();

inline double psnr(const Image& x, const Image& ref, double peak = 1.0) {
  require_same_shape(x, ref, "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(ref[i]);
    se += d * d;
  }
  if (se == 0.0) return kInfinitePsnr;
  const double mse = se / static_cast<double>(x.size());
  return 10.0 * std::log10(peak * peak / mse);
}

namespace detail {

inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> w(static_cast<std::size_t>(size));
  const int r = size / 2;
  double s = 0.0;
  for (int i = 0; i < size; ++i) {
    w[static_cast<std::size_t>(i)] = std::exp(-0.5 * (i - r) * (i - r) / (sigma * sigma));
    s += w[static_cast<std::size_t>(i)];
  }
  for (auto& v : w) v /= s;
  return w;
}

/// Separable filter over fully-contained windows only.
inline std::vector<double> filter_valid(const std::vector<double>& img, int h, int w,
                                        const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  const int oh = h - n + 1, ow = w - n + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += k[static_cast<std::size_t>(i)] * img[static_cast<std::size_t>(y) * w + x + i];
      tmp[static_cast<std::size_t>(y) * ow + x] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow, 0.0);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += k[static_cast<std::size_t>(i)] * tmp[static_cast<std::size_t>(y + i) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = s;
    }
  return out;
}

}  // namespace detail

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

/// Mean over channels of the mean SSIM map (11x11 Gaussian window, sigma 1.5,
/// K1 = 0.01, K2 = 0.03, dynamic range 1).
inline double ssim(const Image& x, const Image& ref) {
  require_same_shape(x, ref, "ssim");
  const int h = x.height(), w = x.width();
  if (h < kSsimWindow || w < kSsimWindow) {
    throw usage_error("frame_too_small", "ssim needs frames of at least 11x11, got " +
                                             std::to_string(h) + "x" + std::to_string(w));
  }
  constexpr double c1 = (0.01 * 1.0) * (0.01 * 1.0);
  constexpr double c2 = (0.03 * 1.0) * (0.03 * 1.0);
  const auto k = detail::gaussian_window(kSsimWindow, kSsimSigma);
  const std::size_t hw = x.plane_size();
  double total = 0.0;
  for (int c = 0; c < x.channels(); ++c) {
    std::vector<double> a(hw), b(hw), aa(hw), bb(hw), ab(hw);
    for (std::size_t i = 0; i < hw; ++i) {
      a[i] = x.plane(c)[i];
      b[i] = ref.plane(c)[i];
      aa[i] = a[i] * a[i];
      bb[i] = b[i] * b[i];
      ab[i] = a[i] * b[i];
    }
    const auto ma = detail::filter_valid(a, h, w, k), mb = detail::filter_valid(b, h, w, k);
    const auto saa = detail::filter_valid(aa, h, w, k), sbb = detail::filter_valid(bb, h, w, k);
    const auto sab = detail::filter_valid(ab, h, w, k);
    double acc = 0.0;
    for (std::size_t i = 0; i < ma.size(); ++i) {
      const double va = saa[i] - ma[i] * ma[i];
      const double vb = sbb[i] - mb[i] * mb[i];
      const double cov = sab[i] - ma[i] * mb[i];
      const double num = (2.0 * (ma[i] * mb[i]) + c1) * (2.0 * cov + c2);
      const double den = (ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2);
      acc += num / den;
    }
    total += acc / static_cast<double>(ma.size());
  }
  return total / x.channels();
}

struct QualityScores {
  std::vector<double> psnr;  // per frame
  std::vector<double> ssim;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;

  void add(double p, double s) {
    psnr.push_back(p);
    ssim.push_back(s);
  }
  void finish() {
    auto mean = [](const std::vector<double>& v) {
      double s = 0.0;
      for (double x : v) s += x;
      return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    };
    mean_psnr = mean(psnr);
    mean_ssim = mean(ssim);
  }
};

struct LevelReport {
  QualityScores noisy;
  QualityScores model;
};

struct QualityReport {
  std::map<std::string, LevelReport> levels;
  // Means over levels, in the style of an "average" table row.
  double noisy_psnr = 0.0, noisy_ssim = 0.0, model_psnr = 0.0, model_ssim = 0.0;
};

inline nlohmann::json metric_json(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

inline nlohmann::json to_json(const QualityReport& r) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, lvl] : r.levels) {
    j[name] = {{"noisy", {{"psnr", metric_json(lvl.noisy.mean_psnr)}, {"ssim", lvl.noisy.mean_ssim}}},
               {"model", {{"psnr", metric_json(lvl.model.mean_psnr)}, {"ssim", lvl.model.mean_ssim}}}};
  }
  j["mean"] = {{"noisy", {{"psnr", metric_json(r.noisy_psnr)}, {"ssim", r.noisy_ssim}}},
               {"model", {{"psnr", metric_json(r.model_psnr)}, {"ssim", r.model_ssim}}}};
  return j;
}

/// Denoises every pair and scores noisy-vs-clean and denoised-vs-clean per frame,
/// grouped by the noise level label.
template <typename T>
QualityReport evaluate(const ModelWeights<T>& w, const std::vector<NoisyPair>& examples) {
  QualityReport rep;
  for (const auto& ex : examples) {
    if (ex.noisy.length() != ex.clean.length()) {
      throw usage_error("shape_mismatch", "noisy and clean sequences differ in length");
    }
    const auto den = denoise_sequence(ex.noisy, ex.params, w);
    auto& lvl = rep.levels[ex.params.iso.empty() ? std::string("default") : ex.params.iso];
    for (std::size_t t = 0; t < ex.clean.length(); ++t) {
      lvl.noisy.add(psnr(ex.noisy.frames[t], ex.clean.frames[t]), ssim(ex.noisy.frames[t], ex.clean.frames[t]));
      lvl.model.add(psnr(den.frames[t], ex.clean.frames[t]), ssim(den.frames[t], ex.clean.frames[t]));
    }
  }
  for (auto& [_, lvl] : rep.levels) {
    lvl.noisy.finish();
    lvl.model.finish();
    rep.noisy_psnr += lvl.noisy.mean_psnr;
    rep.noisy_ssim += lvl.noisy.mean_ssim;
    rep.model_psnr += lvl.model.mean_psnr;
    rep.model_ssim += lvl.model.mean_ssim;
  }
  if (!rep.levels.empty()) {
    const double n = static_cast<double>(rep.levels.size());
    rep.noisy_psnr /= n;
    rep.noisy_ssim /= n;
    rep.model_psnr /= n;
    rep.model_ssim /= n;
  }
  return rep;
}

}  // namespace rawdn
