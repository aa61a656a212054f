#pragma once

// Subcommand front end: simulate, calibrate, train, denoise, eval, gradcheck, inspect.
// Results go to `out` as JSON; failures print one JSON line to `err`.

#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "rawdn/checkpoint.hpp"
#include "rawdn/gradcheck.hpp"
#include "rawdn/metrics.hpp"
#include "rawdn/noise_model.hpp"
#include "rawdn/raw_data.hpp"
#include "rawdn/train_engine.hpp"

namespace rawdn::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::usage:
      return 2;
    case ErrorKind::format:
      return 3;
    case ErrorKind::numeric:
      return 4;
  }
  return 3;
}

inline std::pair<int, int> parse_size(const std::string& s) {
  const auto x = s.find('x');
  try {
    if (x == std::string::npos) throw std::invalid_argument(s);
    std::size_t used_h = 0, used_w = 0;
    const int h = std::stoi(s.substr(0, x), &used_h);
    const int w = std::stoi(s.substr(x + 1), &used_w);
    if (used_h != x || used_w != s.size() - x - 1 || h <= 0 || w <= 0) throw std::invalid_argument(s);
    return {h, w};
  } catch (const std::logic_error&) {
    throw usage_error("bad_size", "size must look like HxW with positive integers, got '" + s + "'");
  }
}

inline void require_even(int h, int w) {
  if (h % 2 || w % 2) throw usage_error("bad_size", "raw sizes must be even");
}

inline json read_json_file(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw format_error("io", "cannot open " + p.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw format_error("bad_json", p.string() + ": " + e.what());
  }
}

inline void write_json_file(const fs::path& p, const json& j) {
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw format_error("io", "cannot open " + p.string() + " for writing");
  os << j.dump(2) << '\n';
}

inline std::string noise_label(double a, double b) {
  for (const auto& p : synthetic_noise_presets()) {
    if (p.a == a && p.b == b) return p.iso;
  }
  return "custom";
}

struct Pair {
  std::string name;
  fs::path clean, noisy;
  std::string split;
};

struct Manifest {
  NoiseParams noise;
  std::vector<Pair> scenes;
};

inline Manifest read_manifest(const fs::path& dir) {
  const json j = read_json_file(dir / "manifest.json");
  Manifest m;
  try {
    m.noise = {j.at("noise").at("a").get<double>(), j.at("noise").at("b").get<double>(),
               j.at("noise").value("iso", std::string("custom"))};
    for (const auto& s : j.at("scenes")) {
      m.scenes.push_back({s.at("name").get<std::string>(), dir / s.at("clean").get<std::string>(),
                          dir / s.at("noisy").get<std::string>(), s.at("split").get<std::string>()});
    }
  } catch (const json::exception& e) {
    throw format_error("bad_manifest", "manifest.json: " + std::string(e.what()));
  }
  return m;
}

inline std::vector<NoisyPair> load_pairs(const Manifest& m, const std::string& split) {
  std::vector<NoisyPair> out;
  for (const auto& s : m.scenes) {
    if (split != "all" && s.split != split) continue;
    NoisyPair p;
    p.clean = to_packed(read_sequence(s.clean)).first;
    p.noisy = to_packed(read_sequence(s.noisy)).first;
    p.params = m.noise;
    out.push_back(std::move(p));
  }
  return out;
}

class App {
public:
  App(std::ostream& out, std::ostream& err) : out_(out), err_(err) {
    auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err_);
    log_ = std::make_shared<spdlog::logger>("rawdn", sink);
    log_->set_pattern("[%l] %v");
    const char* env = std::getenv("RAWDN_LOG");
    const std::string level = env ? env : "info";
    log_->set_level(level == "error" ? spdlog::level::err
                    : level == "debug" ? spdlog::level::debug
                                       : spdlog::level::info);
  }

  int run(int argc, const char* const* argv) {
    CLI::App app{"Recurrent raw video denoiser"};
    app.require_subcommand(1);
    app.add_option("--threads", threads_, "worker cap; 1 gives bit-reproducible runs")
        ->check(CLI::PositiveNumber);
    setup_simulate(app);
    setup_calibrate(app);
    setup_train(app);
    setup_denoise(app);
    setup_eval(app);
    setup_gradcheck(app);
    setup_inspect(app);
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
      out_ << app.help();
      return 0;
    } catch (const CLI::ParseError& e) {
      if (e.get_exit_code() == 0) {
        out_ << app.help();
        return 0;
      }
      return fail("cli", "usage", "bad_arguments", e.what(), 2);
    }
    const std::string origin = app.get_subcommands().front()->get_name();
    try {
      action_();
      return status_;
    } catch (const Error& e) {
      return fail(origin, to_string(e.kind()), e.code(), e.what(), exit_code(e.kind()));
    } catch (const json::exception& e) {
      return fail(origin, "format", "bad_json", e.what(), 3);
    } catch (const std::exception& e) {
      return fail(origin, "format", "internal", e.what(), 3);
    }
  }

private:
  std::ostream& out_;
  std::ostream& err_;
  std::shared_ptr<spdlog::logger> log_;
  int threads_ = 1;
  int status_ = 0;
  std::function<void()> action_;

  // Shared option storage; each subcommand uses its own subset.
  int scenes_ = 8, frames_ = 8, motion_ = 2, flat_levels_ = 0, flat_frames_ = 32;
  std::string size_ = "64x64", flat_size_ = "32x32";
  std::optional<double> noise_a_, noise_b_;
  std::uint64_t seed_ = 0;
  double val_fraction_ = 0.25, tolerance_ = 1e-4;
  std::string out_path_, in_path_, data_, ckpt_, log_path_, report_, flats_, iso_, preset_ = "desk", config_,
      split_ = "val", denoised_, clean_, noisy_;
  std::optional<int> epochs_, batch_, crop_, seq_len_, crops_, val_interval_, scales_;
  std::optional<double> lr_;
  bool no_augment_ = false;

  static std::string to_string(ErrorKind k) {
    return k == ErrorKind::usage ? "usage" : k == ErrorKind::format ? "format" : "numeric";
  }

  int fail(const std::string& origin, const std::string& kind, const std::string& code, const std::string& msg,
           int status) {
    err_ << json{{"error", {{"origin", origin}, {"kind", kind}, {"code", code}, {"message", msg}}}}.dump() << '\n';
    return status;
  }

  void emit(const json& j) { out_ << j.dump(2) << '\n'; }

  void echo_config(const std::string& cmd, const json& cfg) { log_->info("{} config {}", cmd, cfg.dump()); }

  NoiseParams noise_from_flags(bool required) const {
    if (noise_a_.has_value() != noise_b_.has_value()) {
      throw usage_error("missing_noise", "--noise-a and --noise-b must be given together");
    }
    if (!noise_a_) {
      if (required) throw usage_error("missing_noise", "--noise-a and --noise-b are required");
      return strongest_noise_preset();
    }
    NoiseParams p{*noise_a_, *noise_b_, noise_label(*noise_a_, *noise_b_)};
    validate_noise(p);
    return p;
  }

  void setup_simulate(CLI::App& app) {
    auto* c = app.add_subcommand("simulate", "write synthetic clean/noisy raw sequence pairs and a manifest");
    c->add_option("--scenes", scenes_)->check(CLI::PositiveNumber);
    c->add_option("--frames", frames_)->check(CLI::PositiveNumber);
    c->add_option("--size", size_, "raw HxW");
    c->add_option("--motion", motion_)->check(CLI::NonNegativeNumber);
    c->add_option("--noise-a", noise_a_);
    c->add_option("--noise-b", noise_b_);
    c->add_option("--seed", seed_);
    c->add_option("--val-fraction", val_fraction_)->check(CLI::Range(0.0, 1.0));
    c->add_option("--flat-levels", flat_levels_, "also write this many flat-field stacks")
        ->check(CLI::NonNegativeNumber);
    c->add_option("--flat-frames", flat_frames_)->check(CLI::PositiveNumber);
    c->add_option("--flat-size", flat_size_);
    c->add_option("--out", out_path_)->required();
    c->callback([this] { action_ = [this] { simulate(); }; });
  }

  void simulate() {
    const auto [h, w] = parse_size(size_);
    require_even(h, w);
    const NoiseParams noise = noise_from_flags(false);
    if (noise.a == 0.0 && noise.b == 0.0) throw usage_error("degenerate_params", "noise a = b = 0");
    const fs::path dir = out_path_;
    fs::create_directories(dir);
    const int val = scenes_ >= 2 ? std::clamp(static_cast<int>(std::lround(scenes_ * val_fraction_)),
                                             val_fraction_ > 0 ? 1 : 0, scenes_ - 1)
                                 : 0;
    json manifest = {{"version", 1},      {"seed", seed_},   {"frames", frames_},
                     {"size", {h, w}},    {"motion", motion_}, {"val_fraction", val_fraction_},
                     {"pattern", "RGGB"}, {"noise", {{"a", noise.a}, {"b", noise.b}, {"iso", noise.iso}}}};
    echo_config("simulate", manifest);
    json scenes = json::array();
    for (int i = 0; i < scenes_; ++i) {
      const Sequence packed = synth_scene(mix_seed(seed_, static_cast<std::uint64_t>(i)), frames_, h, w, motion_);
      const Sequence clean = to_cfa(packed, BayerPattern::RGGB, FlipRecord{});
      const std::uint64_t noise_seed = mix_seed(seed_, 1000000 + static_cast<std::uint64_t>(i));
      const Sequence noisy = add_noise(clean, noise, noise_seed);
      char name[32];
      std::snprintf(name, sizeof name, "scene_%03d", i);
      write_sequence(clean, dir / (std::string(name) + "_clean.rvds"));
      write_sequence(noisy, dir / (std::string(name) + "_noisy.rvds"));
      scenes.push_back({{"name", name},
                        {"clean", std::string(name) + "_clean.rvds"},
                        {"noisy", std::string(name) + "_noisy.rvds"},
                        {"split", i >= scenes_ - val ? "val" : "train"},
                        {"noise_seed", noise_seed}});
      log_->debug("wrote {}", name);
    }
    manifest["scenes"] = scenes;
    if (flat_levels_ > 0) {
      const auto [fh, fw] = parse_size(flat_size_);
      require_even(fh, fw);
      fs::create_directories(dir / "flats");
      json flats = json::array();
      for (int k = 0; k < flat_levels_; ++k) {
        const double level = flat_levels_ == 1 ? 0.5 : 0.05 + 0.9 * k / (flat_levels_ - 1);
        Sequence flat;
        flat.source_pattern = BayerPattern::RGGB;
        for (int t = 0; t < flat_frames_; ++t) flat.frames.emplace_back(1, fh, fw, static_cast<float>(level));
        const Sequence noisy = add_noise(flat, noise, mix_seed(seed_, 2000000 + static_cast<std::uint64_t>(k)));
        char name[32];
        std::snprintf(name, sizeof name, "flat_%03d.rvds", k);
        write_sequence(noisy, dir / "flats" / name);
        flats.push_back({{"file", std::string("flats/") + name}, {"level", level}});
      }
      manifest["flats"] = flats;
    }
    write_json_file(dir / "manifest.json", manifest);
    emit({{"manifest", (dir / "manifest.json").string()}, {"scenes", scenes_}, {"val_scenes", val},
          {"flat_levels", flat_levels_}});
  }

  void setup_calibrate(CLI::App& app) {
    auto* c = app.add_subcommand("calibrate", "fit the shot/read noise coefficients from flat-field stacks");
    c->add_option("--flats", flats_, "directory of .rvds flat stacks")->required();
    c->add_option("--out", out_path_)->required();
    c->add_option("--iso", iso_);
    c->callback([this] { action_ = [this] { calibrate_cmd(); }; });
  }

  void calibrate_cmd() {
    echo_config("calibrate", {{"flats", flats_}, {"out", out_path_}, {"iso", iso_}});
    if (!fs::is_directory(flats_)) throw usage_error("bad_path", flats_ + " is not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(flats_)) {
      if (e.path().extension() == ".rvds") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<Sequence> stacks;
    for (const auto& f : files) stacks.push_back(read_sequence(f));
    const auto res = calibrate(stacks, iso_);
    json j = to_json(res);
    j["stacks"] = files.size();
    write_json_file(out_path_, j);
    emit(j);
  }

  void setup_train(CLI::App& app) {
    auto* c = app.add_subcommand("train", "train the denoiser on a simulate-style dataset");
    c->add_option("--data", data_)->required();
    c->add_option("--preset", preset_)->check(CLI::IsMember({"paper", "desk"}));
    c->add_option("--config", config_, "JSON file overriding preset fields");
    c->add_option("--epochs", epochs_);
    c->add_option("--lr", lr_);
    c->add_option("--batch", batch_);
    c->add_option("--crop", crop_, "raw crop size");
    c->add_option("--seq-len", seq_len_);
    c->add_option("--crops", crops_, "crops per scene");
    c->add_option("--val-interval", val_interval_);
    c->add_option("--scales", scales_);
    c->add_option("--seed", seed_);
    c->add_flag("--no-augment", no_augment_);
    c->add_option("--out", out_path_)->required();
    c->add_option("--log", log_path_)->required();
    c->callback([this] { action_ = [this] { train_cmd(); }; });
  }

  TrainConfig resolved_train_config() const {
    TrainConfig cfg = TrainConfig::preset(preset_);
    if (!config_.empty()) cfg = train_config_from_json(read_json_file(config_), cfg);
    if (epochs_) cfg.epochs = *epochs_;
    if (lr_) cfg.learning_rate = *lr_;
    if (batch_) cfg.batch_size = *batch_;
    if (crop_) cfg.crop_size = *crop_;
    if (seq_len_) cfg.seq_len = *seq_len_;
    if (crops_) cfg.crops_per_scene = *crops_;
    if (val_interval_) cfg.val_interval = *val_interval_;
    if (scales_) cfg.net.scales = *scales_;
    if (no_augment_) cfg.augment = false;
    cfg.seed = seed_;
    cfg.threads = threads_;
    cfg.validate();
    return cfg;
  }

  void train_cmd() {
    const TrainConfig cfg = resolved_train_config();
    echo_config("train", to_json(cfg));
    const Manifest m = read_manifest(data_);
    std::vector<TrainExample> dataset;
    std::size_t index = 0;
    for (const auto& s : m.scenes) {
      if (s.split != "train") continue;
      const Sequence clean = to_packed(read_sequence(s.clean)).first;
      auto crops = sample_crops(clean, cfg, {m.noise}, mix_seed(cfg.seed, 100 + index++));
      dataset.insert(dataset.end(), crops.begin(), crops.end());
    }
    const auto validation = load_pairs(m, "val");
    log_->info("train: {} examples, {} validation sequences, {} iterations", dataset.size(), validation.size(),
               total_iterations(cfg, dataset.size()));
    std::ofstream log(log_path_, std::ios::trunc);
    if (!log) throw format_error("io", "cannot open " + log_path_ + " for writing");
    log << json{{"config", to_json(cfg)}}.dump() << '\n';
    const auto res = train<float>(cfg, dataset, validation, [&](const TrainLogEntry& e) {
      log << to_json(e).dump() << '\n';
      log.flush();
      if (e.psnr) log_->info("iter {} loss {:.6f} psnr {:.3f} ssim {:.4f}", e.iter, e.loss, *e.psnr, *e.ssim);
      else log_->debug("iter {} loss {:.6f}", e.iter, e.loss);
    });
    save_weights(res.weights, out_path_);
    json summary = {{"checkpoint", out_path_}, {"iterations", res.iterations}, {"examples", dataset.size()}};
    if (!res.log.empty()) summary["final"] = to_json(res.log.back());
    emit(summary);
  }

  void setup_denoise(CLI::App& app) {
    auto* c = app.add_subcommand("denoise", "denoise a raw sequence with a trained checkpoint");
    c->add_option("--ckpt", ckpt_)->required();
    c->add_option("--in", in_path_)->required();
    c->add_option("--noise-a", noise_a_);
    c->add_option("--noise-b", noise_b_);
    c->add_option("--out", out_path_)->required();
    c->callback([this] { action_ = [this] { denoise_cmd(); }; });
  }

  void denoise_cmd() {
    const NoiseParams noise = noise_from_flags(true);
    echo_config("denoise", {{"ckpt", ckpt_}, {"in", in_path_}, {"out", out_path_}, {"noise_a", noise.a},
                            {"noise_b", noise.b}});
    const auto w = load_weights<float>(ckpt_);
    const Sequence in = read_sequence(in_path_);
    const auto [packed, flips] = to_packed(in);
    Sequence den = denoise_sequence(packed, noise, w);
    den.source_pattern = in.source_pattern;
    write_sequence(in.channels() == 1 ? to_cfa(den, in.source_pattern, flips) : den, out_path_);
    emit({{"out", out_path_}, {"frames", den.length()}, {"pattern", std::string(rawdn::to_string(in.source_pattern))}});
  }

  void setup_eval(CLI::App& app) {
    auto* c = app.add_subcommand("eval", "PSNR/SSIM of noisy input and denoised output against clean frames");
    c->add_option("--ckpt", ckpt_);
    c->add_option("--data", data_);
    c->add_option("--split", split_)->check(CLI::IsMember({"train", "val", "all"}));
    c->add_option("--denoised", denoised_, "score an already denoised sequence instead of running a checkpoint");
    c->add_option("--noisy", noisy_);
    c->add_option("--clean", clean_);
    c->add_option("--report", report_)->required();
    c->callback([this] { action_ = [this] { eval_cmd(); }; });
  }

  void eval_cmd() {
    QualityReport rep;
    if (!denoised_.empty()) {
      if (noisy_.empty() || clean_.empty()) {
        throw usage_error("missing_input", "--denoised needs --noisy and --clean");
      }
      echo_config("eval", {{"denoised", denoised_}, {"noisy", noisy_}, {"clean", clean_}});
      const Sequence den = to_packed(read_sequence(denoised_)).first;
      const Sequence noisy = to_packed(read_sequence(noisy_)).first;
      const Sequence clean = to_packed(read_sequence(clean_)).first;
      if (den.length() != clean.length() || noisy.length() != clean.length()) {
        throw usage_error("shape_mismatch", "sequences differ in length");
      }
      auto& lvl = rep.levels["default"];
      for (std::size_t t = 0; t < clean.length(); ++t) {
        lvl.noisy.add(psnr(noisy.frames[t], clean.frames[t]), ssim(noisy.frames[t], clean.frames[t]));
        lvl.model.add(psnr(den.frames[t], clean.frames[t]), ssim(den.frames[t], clean.frames[t]));
      }
      lvl.noisy.finish();
      lvl.model.finish();
      rep.noisy_psnr = lvl.noisy.mean_psnr;
      rep.noisy_ssim = lvl.noisy.mean_ssim;
      rep.model_psnr = lvl.model.mean_psnr;
      rep.model_ssim = lvl.model.mean_ssim;
    } else {
      if (ckpt_.empty() || data_.empty()) throw usage_error("missing_input", "eval needs --ckpt and --data");
      echo_config("eval", {{"ckpt", ckpt_}, {"data", data_}, {"split", split_}});
      const auto w = load_weights<float>(ckpt_);
      const auto pairs = load_pairs(read_manifest(data_), split_);
      if (pairs.empty()) throw usage_error("empty_split", "no scenes in split '" + split_ + "'");
      rep = evaluate(w, pairs);
    }
    const json j = to_json(rep);
    write_json_file(report_, j);
    emit(j);
  }

  void setup_gradcheck(CLI::App& app) {
    auto* c = app.add_subcommand("gradcheck", "finite-difference check of the analytic gradients");
    c->add_option("--seed", seed_);
    c->add_option("--tolerance", tolerance_)->check(CLI::PositiveNumber);
    c->callback([this] { action_ = [this] { gradcheck_cmd(); }; });
  }

  void gradcheck_cmd() {
    GradCheckOptions o;
    o.seed = seed_;
    o.tolerance = tolerance_;
    echo_config("gradcheck", {{"seed", o.seed},   {"packed_size", o.packed_size}, {"frames", o.frames},
                              {"scales", o.scales}, {"step", o.step},            {"tolerance", o.tolerance}});
    const auto rep = gradient_check(o);
    json j = to_json(rep);
    j["passed"] = rep.passed(o.tolerance);
    emit(j);
    if (!rep.passed(o.tolerance)) {
      status_ = fail("gradcheck", "numeric", "gradcheck_failed",
                     "max relative error " + std::to_string(rep.max_rel_error) + " exceeds tolerance", 4);
    }
  }

  void setup_inspect(CLI::App& app) {
    auto* c = app.add_subcommand("inspect", "list checkpoint tensors, parameter count and MACs");
    c->add_option("--ckpt", ckpt_)->required();
    c->add_option("--size", size_, "raw HxW used for the MAC count");
    c->add_option("--frames", frames_)->check(CLI::PositiveNumber);
    c->callback([this] { action_ = [this] { inspect_cmd(); }; });
  }

  void inspect_cmd() {
    const auto [h, w] = parse_size(size_);
    require_even(h, w);
    echo_config("inspect", {{"ckpt", ckpt_}, {"size", size_}, {"frames", frames_}});
    const auto weights = load_weights<float>(ckpt_);
    weights.config.check_frame(h / 2, w / 2);
    json tensors = json::array();
    weights.for_each_tensor([&](const std::string& name, const Tensor<float>& v) {
      tensors.push_back({{"name", name}, {"shape", v.shape()}, {"count", v.size()}});
    });
    emit({{"config", to_json(weights.config)},
          {"tensors", tensors},
          {"params", count_params(weights)},
          {"macs", count_macs(weights, h / 2, w / 2, frames_)},
          {"size", {h, w}},
          {"frames", frames_}});
  }
};

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  App app(out, err);
  return app.run(argc, argv);
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<const char*> argv{"rawdn"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace rawdn::cli
