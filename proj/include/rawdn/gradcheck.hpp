#pragma once

// Central finite-difference check of backward() in double precision.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "rawdn/train_engine.hpp"

namespace rawdn {

struct GradCheckOptions {
  std::uint64_t seed = 0;
  int packed_size = 8;
  int frames = 3;
  int scales = 2;
  double step = 1e-4;
  double threshold = 1e-8;  // entries with smaller |g| are not compared
  double tolerance = 1e-4;
};

struct TensorCheck {
  std::int64_t entries = 0, compared = 0, skipped_kinks = 0;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::map<std::string, TensorCheck> tensors;
  double max_rel_error = 0.0;
  std::int64_t compared = 0, skipped_kinks = 0;
  double seconds = 0.0;
  bool passed(double tolerance) const { return max_rel_error < tolerance && compared > 0; }
};

inline nlohmann::json to_json(const GradCheckReport& r) {
  nlohmann::json t = nlohmann::json::object();
  for (const auto& [name, c] : r.tensors) {
    t[name] = {{"entries", c.entries},
               {"compared", c.compared},
               {"skipped_kinks", c.skipped_kinks},
               {"max_rel_error", c.max_rel_error}};
  }
  return {{"max_rel_error", r.max_rel_error}, {"compared", r.compared}, {"skipped_kinks", r.skipped_kinks},
          {"seconds", r.seconds},             {"tensors", t}};
}

/// Small noisy example plus a generic parameter point: every layer nonzero and M
/// perturbed away from the initialization so no term sits at a flat or kinked spot.
inline std::pair<TrainExample, ModelWeights<double>> gradcheck_problem(const GradCheckOptions& o) {
  NetConfig cfg;
  cfg.scales = o.scales;
  cfg.validate();
  auto w = ModelWeights<double>::initialized(cfg, o.seed);
  Rng rng(mix_seed(o.seed, 0x9c));
  for (auto& v : w.color) v += 0.05 * rng.normal();
  for (auto* s : {&w.fusion, &w.denoise, &w.refine}) {
    for (auto* t : {&s->layer1_bias, &s->layer2_bias, &s->out_bias}) {
      for (auto& v : *t) v = rng.uniform(-0.1, 0.1);
    }
    const double bound = 1.0 / std::sqrt(9.0 * s->out_kernel.shape()[1]);
    for (auto& v : s->out_kernel) v = rng.uniform(-bound, bound);
  }
  TrainExample ex;
  ex.clean = synth_scene(mix_seed(o.seed, 1), o.frames, 2 * o.packed_size, 2 * o.packed_size, 1);
  ex.params = strongest_noise_preset();
  ex.noise_seed = mix_seed(o.seed, 2);
  ex.noisy = add_noise(ex.clean, ex.params, ex.noise_seed);
  return {std::move(ex), std::move(w)};
}

/// Compares every analytic gradient entry with (L(w+h) - L(w-h)) / 2h. Entries whose
/// perturbed evaluations take a different branch of a piecewise-linear op than the base
/// point are counted as kinks and not compared.
inline GradCheckReport gradient_check(const GradCheckOptions& o = {}) {
  const auto start = std::chrono::steady_clock::now();
  auto [ex, w] = gradcheck_problem(o);
  const auto g = backward(ex, w);
  std::vector<std::uint8_t> base_log, log_p, log_m;
  evaluate_loss(ex, w, &base_log);

  std::vector<std::pair<std::string, Tensor<double>*>> params;
  w.for_each_tensor([&](const std::string& name, Tensor<double>& v) { params.emplace_back(name, &v); });
  std::vector<const Tensor<double>*> grads;
  g.grad.for_each_tensor([&](const std::string&, const Tensor<double>& v) { grads.push_back(&v); });

  GradCheckReport rep;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& [name, p] = params[k];
    TensorCheck tc;
    tc.entries = static_cast<std::int64_t>(p->size());
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double gi = (*grads[k])[i];
      if (std::abs(gi) <= o.threshold) continue;
      const double orig = (*p)[i];
      log_p.clear();
      log_m.clear();
      (*p)[i] = orig + o.step;
      const double lp = evaluate_loss(ex, w, &log_p).total;
      (*p)[i] = orig - o.step;
      const double lm = evaluate_loss(ex, w, &log_m).total;
      (*p)[i] = orig;
      if (log_p != base_log || log_m != base_log) {
        ++tc.skipped_kinks;
        continue;
      }
      const double fd = (lp - lm) / (2.0 * o.step);
      const double rel = std::abs(gi - fd) / std::max(std::abs(gi), std::abs(fd));
      tc.max_rel_error = std::max(tc.max_rel_error, rel);
      ++tc.compared;
    }
    rep.max_rel_error = std::max(rep.max_rel_error, tc.max_rel_error);
    rep.compared += tc.compared;
    rep.skipped_kinks += tc.skipped_kinks;
    rep.tensors[name] = tc;
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

}  // namespace rawdn
