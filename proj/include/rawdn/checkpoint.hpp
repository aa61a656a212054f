#pragma once

// RVDW named-tensor checkpoints plus a JSON sidecar holding the network configuration.

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "rawdn/denoise_net.hpp"
#include "rawdn/raw_data.hpp"

namespace rawdn {

namespace rvdw {

inline constexpr std::array<char, 4> kMagic{'R', 'V', 'D', 'W'};
inline constexpr std::uint32_t kVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

inline std::vector<std::uint8_t> encode(const std::vector<NamedTensor>& tensors) {
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  rvds::put_u32(out, kVersion);
  rvds::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xFFFF) throw usage_error("bad_name", "tensor name too long");
    out.push_back(static_cast<std::uint8_t>(t.name.size() & 0xFF));
    out.push_back(static_cast<std::uint8_t>(t.name.size() >> 8));
    out.insert(out.end(), t.name.begin(), t.name.end());
    rvds::put_u32(out, static_cast<std::uint32_t>(t.value.rank()));
    for (int d : t.value.shape()) rvds::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.value) rvds::put_f32(out, v);
  }
  return out;
}

class Reader {
public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  const std::uint8_t* take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw format_error("truncated_payload", std::string("checkpoint truncated while reading ") + what);
    }
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32(const char* what) { return rvds::get_u32(take(4, what)); }
  bool done() const { return pos_ == bytes_.size(); }

private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::vector<NamedTensor> decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    throw format_error("bad_magic", "not an RVDW checkpoint (bad magic)");
  }
  Reader r(bytes.subspan(4));
  const std::uint32_t version = r.u32("version");
  if (version != kVersion) {
    throw format_error("version_mismatch", "RVDW version " + std::to_string(version) + " is not supported");
  }
  const std::uint32_t count = r.u32("tensor count");
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint8_t* len = r.take(2, "name length");
    const std::size_t n = std::size_t{len[0]} | std::size_t{len[1]} << 8;
    const auto* name = reinterpret_cast<const char*>(r.take(n, "name"));
    NamedTensor t;
    t.name.assign(name, n);
    const std::uint32_t rank = r.u32("rank");
    if (rank > 8) throw format_error("bad_header", "tensor '" + t.name + "' has rank " + std::to_string(rank));
    std::vector<int> shape;
    std::uint64_t elems = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint32_t dim = r.u32("dims");
      if (dim > (1u << 24)) throw format_error("dimension_overflow", "tensor '" + t.name + "' dimension too large");
      elems *= dim;
      if (elems > (std::uint64_t{1} << 30)) {
        throw format_error("dimension_overflow", "tensor '" + t.name + "' is too large");
      }
      shape.push_back(static_cast<int>(dim));
    }
    const std::uint8_t* data = r.take(static_cast<std::size_t>(elems) * 4, "tensor data");
    t.value = Tensor<float>(shape);
    for (std::size_t k = 0; k < t.value.size(); ++k) t.value[k] = rvds::get_f32(data + 4 * k);
    out.push_back(std::move(t));
  }
  if (!r.done()) throw format_error("trailing_bytes", "checkpoint has bytes after the last tensor");
  return out;
}

}  // namespace rvdw

inline std::filesystem::path sidecar_path(const std::filesystem::path& ckpt) {
  auto p = ckpt;
  p += ".json";
  return p;
}

template <typename T>
std::vector<std::uint8_t> encode_weights(const ModelWeights<T>& w) {
  std::vector<rvdw::NamedTensor> tensors;
  w.for_each_tensor([&](const std::string& name, const Tensor<T>& v) {
    tensors.push_back({name, v.template cast<float>()});
  });
  return rvdw::encode(tensors);
}

/// Builds weights of configuration `cfg` from decoded tensors. Every expected tensor must
/// be present exactly once with the configured shape.
template <typename T>
ModelWeights<T> decode_weights(std::span<const std::uint8_t> bytes, const NetConfig& cfg) {
  const auto tensors = rvdw::decode(bytes);
  ModelWeights<T> w = ModelWeights<T>::zeros(cfg);
  std::map<std::string, Tensor<T>*> slots;
  w.for_each_tensor([&](const std::string& name, Tensor<T>& v) { slots[name] = &v; });
  std::set<std::string> seen;
  for (const auto& t : tensors) {
    auto it = slots.find(t.name);
    if (it == slots.end()) throw format_error("unknown_tensor", "unknown tensor name '" + t.name + "'");
    if (!seen.insert(t.name).second) throw format_error("duplicate_tensor", "tensor '" + t.name + "' repeated");
    if (t.value.shape() != it->second->shape()) {
      throw format_error("shape_mismatch", "tensor '" + t.name + "' has shape " + shape_string(t.value.shape()) +
                                               ", configuration expects " + shape_string(it->second->shape()));
    }
    *it->second = t.value.template cast<T>();
  }
  for (const auto& [name, _] : slots) {
    if (!seen.count(name)) throw format_error("missing_tensor", "checkpoint lacks tensor '" + name + "'");
  }
  return w;
}

template <typename T>
void save_weights(const ModelWeights<T>& w, const std::filesystem::path& path) {
  const auto bytes = encode_weights(w);
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw format_error("io", "cannot open " + path.string() + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw format_error("io", "failed writing " + path.string());
  }
  std::ofstream js(sidecar_path(path), std::ios::trunc);
  if (!js) throw format_error("io", "cannot write checkpoint sidecar");
  js << to_json(w.config).dump(2) << '\n';
}

template <typename T = float>
ModelWeights<T> load_weights(const std::filesystem::path& path, const NetConfig& cfg) {
  return decode_weights<T>(read_file_bytes(path), cfg);
}

/// Loads using the configuration recorded in the sidecar (defaults if it is absent).
template <typename T = float>
ModelWeights<T> load_weights(const std::filesystem::path& path) {
  NetConfig cfg;
  const auto side = sidecar_path(path);
  if (std::filesystem::exists(side)) {
    std::ifstream is(side);
    nlohmann::json j;
    try {
      is >> j;
    } catch (const nlohmann::json::exception& e) {
      throw format_error("bad_sidecar", std::string("checkpoint sidecar is not valid JSON: ") + e.what());
    }
    cfg = net_config_from_json(j);
  }
  return load_weights<T>(path, cfg);
}

}  // namespace rawdn
