#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "rawdn/checkpoint.hpp"

using namespace rawdn;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "rawdn_test_checkpoint";
  fs::create_directories(dir);
  return dir / name;
}

std::string code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return "";
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto w = ModelWeights<float>::initialized({}, 11);
  const auto a = scratch("a.rvdw"), b = scratch("b.rvdw");
  save_weights(w, a);
  const auto loaded = load_weights(a);
  EXPECT_EQ(loaded, w);
  save_weights(loaded, b);
  EXPECT_EQ(read_file_bytes(a), read_file_bytes(b));
}

TEST(Checkpoint, DoubleWeightsRoundTripThroughFloat) {
  const auto w = ModelWeights<double>::initialized({}, 3);
  const auto back = decode_weights<double>(encode_weights(w), w.config);
  const auto again = encode_weights(back);
  EXPECT_EQ(again, encode_weights(w));
}

TEST(Checkpoint, SidecarCarriesConfiguration) {
  NetConfig cfg;
  cfg.denoise_hidden = 8;
  cfg.scales = 2;
  const auto w = ModelWeights<float>::initialized(cfg, 1);
  const auto p = scratch("small.rvdw");
  save_weights(w, p);
  EXPECT_TRUE(fs::exists(sidecar_path(p)));
  EXPECT_EQ(load_weights(p).config, cfg);
  EXPECT_EQ(code_of([&] { load_weights(p, NetConfig{}); }), "shape_mismatch");
}

TEST(Checkpoint, WidthMismatchNamesTensor) {
  NetConfig wide;
  wide.denoise_hidden = 16;
  const auto bytes = encode_weights(ModelWeights<float>::zeros(wide));
  const auto msg = message_of([&] { decode_weights<float>(bytes, NetConfig{}); });
  EXPECT_NE(msg.find("denoise."), std::string::npos) << msg;
  EXPECT_EQ(code_of([&] { decode_weights<float>(bytes, NetConfig{}); }), "shape_mismatch");
}

TEST(Checkpoint, CorruptionErrors) {
  const auto good = encode_weights(ModelWeights<float>::zeros({}));
  auto truncated = good;
  truncated.resize(good.size() - 3);
  EXPECT_EQ(code_of([&] { decode_weights<float>(truncated, NetConfig{}); }), "truncated_payload");
  auto magic = good;
  magic[0] = 'X';
  EXPECT_EQ(code_of([&] { decode_weights<float>(magic, NetConfig{}); }), "bad_magic");
  auto version = good;
  version[4] = 9;
  EXPECT_EQ(code_of([&] { decode_weights<float>(version, NetConfig{}); }), "version_mismatch");
  auto trailing = good;
  trailing.push_back(0);
  EXPECT_EQ(code_of([&] { decode_weights<float>(trailing, NetConfig{}); }), "trailing_bytes");
}

TEST(Checkpoint, TensorSetErrors) {
  std::vector<rvdw::NamedTensor> tensors;
  ModelWeights<float>::zeros({}).for_each_tensor(
      [&](const std::string& n, const Tensor<float>& v) { tensors.push_back({n, v}); });

  auto missing = tensors;
  missing.pop_back();
  EXPECT_EQ(code_of([&] { decode_weights<float>(rvdw::encode(missing), NetConfig{}); }), "missing_tensor");

  auto dup = tensors;
  dup.push_back(tensors.front());
  EXPECT_EQ(code_of([&] { decode_weights<float>(rvdw::encode(dup), NetConfig{}); }), "duplicate_tensor");

  auto unknown = tensors;
  unknown.push_back({"extra.weight", Tensor<float>(std::vector<int>{2})});
  EXPECT_EQ(code_of([&] { decode_weights<float>(rvdw::encode(unknown), NetConfig{}); }), "unknown_tensor");
}

TEST(Checkpoint, BadSidecarAndMissingFile) {
  const auto p = scratch("side.rvdw");
  save_weights(ModelWeights<float>::zeros({}), p);
  std::ofstream(sidecar_path(p)) << "{not json";
  EXPECT_EQ(code_of([&] { load_weights(p); }), "bad_sidecar");
  const auto err = [&] {
    try {
      load_weights(scratch("absent.rvdw"));
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::usage;
  }();
  EXPECT_EQ(err, ErrorKind::format);
}

TEST(Checkpoint, RawCodecPreservesNamesAndValues) {
  Tensor<float> t(std::vector<int>{2, 3});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(i) - 2.5f;
  const auto back = rvdw::decode(rvdw::encode({{"x", t}, {"y.z", Tensor<float>(1, 1, 1, 7.0f)}}));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].name, "x");
  EXPECT_EQ(back[0].value, t);
  EXPECT_EQ(back[1].name, "y.z");
}
