#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "rawdn/cli.hpp"

using namespace rawdn;
namespace fs = std::filesystem;

namespace {

struct Result {
  int status;
  nlohmann::json out;
  std::string err;
};

Result invoke(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int status = cli::run(args, out, err);
  nlohmann::json j;
  if (!out.str().empty() && out.str().front() == '{') {
    try {
      j = nlohmann::json::parse(out.str());
    } catch (const nlohmann::json::exception&) {
    }
  }
  return {status, j, err.str()};
}

nlohmann::json error_line(const std::string& err) {
  std::istringstream is(err);
  std::string line, last;
  while (std::getline(is, line))
    if (!line.empty() && line.front() == '{') last = line;
  return nlohmann::json::parse(last);
}

class CliTest : public ::testing::Test {
protected:
  static fs::path root() {
    return fs::temp_directory_path() / ("rawdn_test_cli_" + std::to_string(::getpid()));
  }

  static void SetUpTestSuite() {
    fs::remove_all(root());
    const auto r = invoke({"simulate", "--scenes", "3", "--frames", "4", "--size", "32x32", "--motion", "1",
                           "--seed", "3", "--flat-levels", "4", "--flat-frames", "48", "--flat-size", "48x48",
                           "--out", (root() / "data").string()});
    ASSERT_EQ(r.status, 0) << r.err;
  }

  static void TearDownTestSuite() { fs::remove_all(root()); }

  static std::string p(const std::string& rel) { return (root() / rel).string(); }
};

}  // namespace

TEST_F(CliTest, SimulateWritesManifestAndSplits) {
  const auto m = cli::read_json_file(p("data/manifest.json"));
  ASSERT_EQ(m["scenes"].size(), 3u);
  EXPECT_EQ(m["scenes"][2]["split"], "val");
  EXPECT_EQ(m["scenes"][0]["split"], "train");
  EXPECT_EQ(m["pattern"], "RGGB");
  EXPECT_EQ(m["flats"].size(), 4u);
  const auto clean = read_sequence(p("data/scene_000_clean.rvds"));
  EXPECT_EQ(clean.length(), 4u);
  EXPECT_EQ(clean.channels(), 1);
  EXPECT_EQ(clean.height(), 32);
}

TEST_F(CliTest, SimulatedNoiseHasModelVariance) {
  const auto m = cli::read_json_file(p("data/manifest.json"));
  const double a = m["noise"]["a"], b = m["noise"]["b"];
  const auto clean = read_sequence(p("data/scene_000_clean.rvds"));
  const auto noisy = read_sequence(p("data/scene_000_noisy.rvds"));
  // Normalized residuals have unit variance.
  double sq = 0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < clean.length(); ++t)
    for (std::size_t i = 0; i < clean.frames[t].size(); ++i) {
      const double y = clean.frames[t][i];
      const double r = noisy.frames[t][i] - y;
      sq += r * r / (a * y + b);
      ++n;
    }
  EXPECT_NEAR(sq / static_cast<double>(n), 1.0, 0.05);
}

TEST_F(CliTest, CalibrateRecoversSimulationNoise) {
  const auto r = invoke({"calibrate", "--flats", p("data/flats"), "--out", p("calib.json"), "--iso", "iso25600"});
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_NEAR(r.out["a"].get<double>(), 0.01, 0.0005);
  EXPECT_NEAR(r.out["b"].get<double>(), 0.0004, 0.00002);
  EXPECT_EQ(cli::read_json_file(p("calib.json"))["iso"], "iso25600");
}

TEST_F(CliTest, TrainDenoiseEvalInspect) {
  const auto t = invoke({"train", "--data", p("data"), "--epochs", "1", "--crop", "16", "--seq-len", "3",
                         "--crops", "2", "--batch", "2", "--seed", "4", "--out", p("w.rvdw"), "--log",
                         p("train.jsonl")});
  ASSERT_EQ(t.status, 0) << t.err;
  EXPECT_EQ(t.out["iterations"], 2);
  std::ifstream log(p("train.jsonl"));
  std::string first, line;
  std::getline(log, first);
  EXPECT_TRUE(nlohmann::json::parse(first).contains("config"));
  int entries = 0;
  while (std::getline(log, line)) {
    const auto e = nlohmann::json::parse(line);
    EXPECT_TRUE(e.contains("loss") && e.contains("l_r") && e.contains("l_c") && e.contains("lr"));
    ++entries;
  }
  EXPECT_EQ(entries, 2);
  EXPECT_TRUE(fs::exists(p("w.rvdw.json")));

  const auto d = invoke({"denoise", "--ckpt", p("w.rvdw"), "--in", p("data/scene_002_noisy.rvds"), "--noise-a",
                         "0.01", "--noise-b", "0.0004", "--out", p("den.rvds")});
  ASSERT_EQ(d.status, 0) << d.err;
  const auto den = read_sequence(p("den.rvds"));
  EXPECT_EQ(den.channels(), 1);
  EXPECT_EQ(den.length(), 4u);

  const auto d2 = invoke({"denoise", "--ckpt", p("w.rvdw"), "--in", p("data/scene_002_noisy.rvds"), "--noise-a",
                          "0.01", "--noise-b", "0.0004", "--out", p("den2.rvds")});
  EXPECT_EQ(read_file_bytes(p("den.rvds")), read_file_bytes(p("den2.rvds")));

  const auto e = invoke({"eval", "--ckpt", p("w.rvdw"), "--data", p("data"), "--report", p("report.json")});
  ASSERT_EQ(e.status, 0) << e.err;
  EXPECT_TRUE(e.out["mean"]["model"].contains("psnr"));
  const auto f = invoke({"eval", "--denoised", p("den.rvds"), "--noisy", p("data/scene_002_noisy.rvds"), "--clean",
                         p("data/scene_002_clean.rvds"), "--report", p("report2.json")});
  ASSERT_EQ(f.status, 0) << f.err;
  EXPECT_NEAR(f.out["mean"]["model"]["psnr"].get<double>(), e.out["mean"]["model"]["psnr"].get<double>(), 1e-6);

  const auto i = invoke({"inspect", "--ckpt", p("w.rvdw"), "--size", "64x64", "--frames", "2"});
  ASSERT_EQ(i.status, 0) << i.err;
  EXPECT_EQ(i.out["params"], 21750);
  EXPECT_EQ(i.out["tensors"].size(), 19u);
  EXPECT_EQ(i.out["macs"].get<std::int64_t>(), count_macs(ModelWeights<float>::zeros({}), 32, 32, 2));
}

TEST_F(CliTest, UsageErrorsExitTwo) {
  auto r = invoke({"simulate", "--bogus", "--out", p("x")});
  EXPECT_EQ(r.status, 2);
  EXPECT_EQ(error_line(r.err)["error"]["kind"], "usage");
  EXPECT_EQ(invoke({}).status, 2);
  EXPECT_EQ(invoke({"frobnicate"}).status, 2);
  r = invoke({"simulate", "--size", "31x32", "--out", p("odd")});
  EXPECT_EQ(r.status, 2);
  EXPECT_EQ(error_line(r.err)["error"]["code"], "bad_size");
  r = invoke({"denoise", "--ckpt", p("none.rvdw"), "--in", p("data/scene_000_noisy.rvds"), "--out", p("n.rvds")});
  EXPECT_EQ(r.status, 2);
  EXPECT_EQ(error_line(r.err)["error"]["code"], "missing_noise");
  r = invoke({"train", "--data", p("data"), "--preset", "desk", "--crop", "100", "--out", p("z"), "--log", p("l")});
  EXPECT_EQ(r.status, 2);
}

TEST_F(CliTest, FormatErrorsExitThree) {
  auto r = invoke({"inspect", "--ckpt", p("missing.rvdw")});
  EXPECT_EQ(r.status, 3);
  const auto e = error_line(r.err)["error"];
  EXPECT_EQ(e["origin"], "inspect");
  EXPECT_EQ(e["kind"], "format");
  save_weights(ModelWeights<float>::zeros({}), p("fmt.rvdw"));
  std::ofstream(p("junk.rvds"), std::ios::binary) << "JUNKJUNKJUNK";
  r = invoke({"denoise", "--ckpt", p("fmt.rvdw"), "--in", p("junk.rvds"), "--noise-a", "0.01", "--noise-b", "0.0004",
              "--out", p("j.rvds")});
  EXPECT_EQ(r.status, 3);
  EXPECT_EQ(error_line(r.err)["error"]["code"], "bad_magic");
}

TEST_F(CliTest, HelpExitsZero) {
  std::ostringstream out, err;
  EXPECT_EQ(cli::run({"--help"}, out, err), 0);
  EXPECT_NE(out.str().find("simulate"), std::string::npos);
}

TEST(CliParse, SizeStrings) {
  EXPECT_EQ(cli::parse_size("64x48"), (std::pair<int, int>{64, 48}));
  for (const char* bad : {"64", "x4", "4x", "4x4x4", "-2x4", "ax4"}) EXPECT_THROW(cli::parse_size(bad), Error) << bad;
}

TEST(CliGradcheck, FailureExitsFour) {
  const auto r = invoke({"gradcheck", "--tolerance", "1e-300"});
  EXPECT_EQ(r.status, 4);
  EXPECT_FALSE(r.out["passed"].get<bool>());
  EXPECT_GT(r.out["compared"].get<int>(), 1000);
  EXPECT_EQ(error_line(r.err)["error"]["code"], "gradcheck_failed");
}
