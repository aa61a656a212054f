#pragma once

// CFA mosaics, Bayer pattern unification, 4-channel packing, Bayer-preserving
// augmentation and the RVDS sequence container.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rawdn/errors.hpp"
#include "rawdn/noise_params.hpp"
#include "rawdn/tensor.hpp"

namespace rawdn {

using Image = Tensor<float>;

/// Row-major reading of the top-left 2x2 CFA tile. Values match the RVDS pattern codes.
enum class BayerPattern : std::uint8_t { RGGB = 0, BGGR = 1, GRBG = 2, GBRG = 3 };

inline std::string_view to_string(BayerPattern p) {
  switch (p) {
    case BayerPattern::RGGB: return "RGGB";
    case BayerPattern::BGGR: return "BGGR";
    case BayerPattern::GRBG: return "GRBG";
    case BayerPattern::GBRG: return "GBRG";
  }
  return "?";
}

inline BayerPattern parse_pattern(std::string_view s) {
  for (auto p : {BayerPattern::RGGB, BayerPattern::BGGR, BayerPattern::GRBG, BayerPattern::GBRG}) {
    if (to_string(p) == s) return p;
  }
  throw usage_error("bad_pattern", "unknown Bayer pattern '" + std::string(s) + "'");
}

/// Packed channel order.
enum PackedChannel : int { kR = 0, kG1 = 1, kG2 = 2, kB = 3 };

/// Single-channel CFA mosaic, samples normalized to [0, 1].
struct RawFrame {
  BayerPattern pattern = BayerPattern::RGGB;
  Image data;  // shape (1, H, W)

  int height() const { return data.height(); }
  int width() const { return data.width(); }

  static RawFrame make(int height, int width, BayerPattern pattern, float fill = 0.0f) {
    RawFrame f{pattern, Image(1, height, width, fill)};
    f.validate();
    return f;
  }

  void validate() const {
    if (data.rank() != 3 || data.channels() != 1) {
      throw usage_error("bad_shape", "raw frame must be a single-channel plane");
    }
    if (data.height() % 2 != 0 || data.width() % 2 != 0 || data.height() == 0 ||
        data.width() == 0) {
      throw usage_error("bad_shape", "raw frame dimensions must be even and nonzero, got " +
                                         shape_string(data.shape()));
    }
    if (!data.all_finite()) throw numeric_error("non_finite", "raw frame has non-finite samples");
  }

  bool operator==(const RawFrame&) const = default;
};

/// Reflections applied by unify_pattern.
struct FlipRecord {
  bool vertical = false;
  bool horizontal = false;
  bool operator==(const FlipRecord&) const = default;
};

/// Ordered frames sharing one shape. Frames are either 1-channel CFA mosaics in
/// `source_pattern` or 4-channel packed RGGB images.
struct Sequence {
  std::vector<Image> frames;
  std::optional<NoiseParams> noise;
  BayerPattern source_pattern = BayerPattern::RGGB;

  std::size_t length() const { return frames.size(); }
  int channels() const { return frames.empty() ? 0 : frames.front().channels(); }
  int height() const { return frames.empty() ? 0 : frames.front().height(); }
  int width() const { return frames.empty() ? 0 : frames.front().width(); }

  void validate() const {
    if (frames.empty()) throw usage_error("empty_sequence", "sequence has no frames");
    for (const auto& f : frames) {
      if (f.rank() != 3 || f.shape() != frames.front().shape()) {
        throw usage_error("shape_mismatch", "sequence frames do not share one shape");
      }
    }
    if (channels() != 1 && channels() != 4) {
      throw usage_error("bad_shape", "sequence frames must have 1 or 4 channels");
    }
  }
};

namespace detail {

inline Image flip_plane(const Image& in, bool vertical, bool horizontal) {
  Image out(in.shape());
  const int h = in.height(), w = in.width();
  for (int c = 0; c < in.channels(); ++c) {
    for (int y = 0; y < h; ++y) {
      const int sy = vertical ? h - 1 - y : y;
      for (int x = 0; x < w; ++x) {
        out.at(c, y, x) = in.at(c, sy, horizontal ? w - 1 - x : x);
      }
    }
  }
  return out;
}

}  // namespace detail

/// Flips needed to bring each pattern to RGGB. Reflecting an even-sized mosaic shifts
/// the tile parity by exactly one row (vertical) or column (horizontal).
constexpr FlipRecord unify_flips(BayerPattern p) {
  switch (p) {
    case BayerPattern::RGGB: return {false, false};
    case BayerPattern::GRBG: return {false, true};
    case BayerPattern::GBRG: return {true, false};
    case BayerPattern::BGGR: return {true, true};
  }
  return {};
}

inline std::pair<RawFrame, FlipRecord> unify_pattern(const RawFrame& frame) {
  frame.validate();
  const FlipRecord flips = unify_flips(frame.pattern);
  return {RawFrame{BayerPattern::RGGB, detail::flip_plane(frame.data, flips.vertical,
                                                          flips.horizontal)},
          flips};
}

inline BayerPattern pattern_after_flips(BayerPattern p, FlipRecord flips) {
  // Row-major tile letters; a flip swaps tile rows / columns.
  auto letters = std::string(to_string(p));
  if (flips.vertical) letters = letters.substr(2, 2) + letters.substr(0, 2);
  if (flips.horizontal) letters = {letters[1], letters[0], letters[3], letters[2]};
  return parse_pattern(letters);
}

inline RawFrame undo_unify(const RawFrame& frame, FlipRecord flips) {
  if (frame.pattern != BayerPattern::RGGB) {
    throw usage_error("pattern", "undo_unify expects an RGGB frame");
  }
  frame.validate();
  if (!flips.vertical && !flips.horizontal) return frame;
  return RawFrame{pattern_after_flips(BayerPattern::RGGB, flips),
                  detail::flip_plane(frame.data, flips.vertical, flips.horizontal)};
}

/// RGGB mosaic (H, W) -> (4, H/2, W/2) in R, G1, G2, B order.
inline Image pack_cfa(const RawFrame& frame) {
  frame.validate();
  if (frame.pattern != BayerPattern::RGGB) {
    throw usage_error("pattern", std::string("pack_cfa needs RGGB input, got ") +
                                     std::string(to_string(frame.pattern)) +
                                     "; unify the pattern first");
  }
  const int h = frame.height() / 2, w = frame.width() / 2;
  Image out(4, h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      out.at(kR, y, x) = frame.data.at(0, 2 * y, 2 * x);
      out.at(kG1, y, x) = frame.data.at(0, 2 * y, 2 * x + 1);
      out.at(kG2, y, x) = frame.data.at(0, 2 * y + 1, 2 * x);
      out.at(kB, y, x) = frame.data.at(0, 2 * y + 1, 2 * x + 1);
    }
  }
  return out;
}

inline RawFrame unpack_cfa(const Image& packed) {
  if (packed.rank() != 3 || packed.channels() != 4) {
    throw usage_error("bad_shape", "unpack_cfa expects a 4-channel image");
  }
  const int h = packed.height(), w = packed.width();
  RawFrame out{BayerPattern::RGGB, Image(1, 2 * h, 2 * w)};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      out.data.at(0, 2 * y, 2 * x) = packed.at(kR, y, x);
      out.data.at(0, 2 * y, 2 * x + 1) = packed.at(kG1, y, x);
      out.data.at(0, 2 * y + 1, 2 * x) = packed.at(kG2, y, x);
      out.data.at(0, 2 * y + 1, 2 * x + 1) = packed.at(kB, y, x);
    }
  }
  return out;
}

enum class Augment { none, hflip, vflip, transpose };

inline Augment parse_augment(std::string_view s) {
  if (s == "none") return Augment::none;
  if (s == "hflip") return Augment::hflip;
  if (s == "vflip") return Augment::vflip;
  if (s == "transpose") return Augment::transpose;
  throw usage_error("bad_augment", "unknown augmentation '" + std::string(s) + "'");
}

/// Geometric augmentation of a packed frame that keeps every channel on its own CFA site.
///
/// Flips mirror whole 2x2 tiles and keep the channel order, so the R plane still holds
/// only red-site samples and the unpacked result is an RGGB mosaic. Transposing swaps
/// G1 and G2, which trade places under a raw-domain transpose.
inline Image augment_frame(const Image& packed, Augment op) {
  if (packed.rank() != 3 || packed.channels() != 4) {
    throw usage_error("bad_shape", "augment expects packed 4-channel frames");
  }
  switch (op) {
    case Augment::none: return packed;
    case Augment::hflip: return detail::flip_plane(packed, false, true);
    case Augment::vflip: return detail::flip_plane(packed, true, false);
    case Augment::transpose: {
      const int h = packed.height(), w = packed.width();
      Image out(4, w, h);
      constexpr std::array<int, 4> src{kR, kG2, kG1, kB};
      for (int c = 0; c < 4; ++c) {
        for (int y = 0; y < w; ++y) {
          for (int x = 0; x < h; ++x) out.at(c, y, x) = packed.at(src[c], x, y);
        }
      }
      return out;
    }
  }
  return packed;
}

inline Sequence augment(const Sequence& seq, Augment op) {
  seq.validate();
  Sequence out = seq;
  for (auto& f : out.frames) f = augment_frame(f, op);
  return out;
}

// ---------------------------------------------------------------------------
// RVDS container

namespace rvds {

inline constexpr std::array<char, 4> kMagic{'R', 'V', 'D', 'S'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 4 + 4 * 5 + 4;
inline constexpr std::uint8_t kDtypeF32 = 0;
// Cap on the decoded payload so a corrupt header cannot request absurd allocations.
inline constexpr std::uint64_t kMaxPayloadBytes = std::uint64_t{1} << 36;

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t{p[0]} | std::uint32_t{p[1]} << 8 | std::uint32_t{p[2]} << 16 |
         std::uint32_t{p[3]} << 24;
}

inline void put_f32(std::vector<std::uint8_t>& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  put_u32(out, bits);
}

inline float get_f32(const std::uint8_t* p) {
  const std::uint32_t bits = get_u32(p);
  float v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

inline std::vector<std::uint8_t> encode(const Sequence& seq) {
  seq.validate();
  std::vector<std::uint8_t> out;
  const std::size_t frame_values = seq.frames.front().size();
  out.reserve(kHeaderBytes + seq.length() * frame_values * 4);
  out.insert(out.end(), kMagic.begin(), kMagic.end());
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(seq.length()));
  put_u32(out, static_cast<std::uint32_t>(seq.height()));
  put_u32(out, static_cast<std::uint32_t>(seq.width()));
  put_u32(out, static_cast<std::uint32_t>(seq.channels()));
  out.push_back(static_cast<std::uint8_t>(seq.source_pattern));
  out.push_back(kDtypeF32);
  out.push_back(0);
  out.push_back(0);
  for (const auto& f : seq.frames) {
    for (float v : f) put_f32(out, v);
  }
  return out;
}

inline Sequence decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    throw format_error("bad_magic", "not an RVDS sequence (bad magic)");
  }
  if (bytes.size() < kHeaderBytes) {
    throw format_error("truncated_payload", "RVDS header is truncated");
  }
  const std::uint8_t* p = bytes.data();
  const std::uint32_t version = get_u32(p + 4);
  if (version != kVersion) {
    throw format_error("version_mismatch",
                       "RVDS version " + std::to_string(version) + " is not supported");
  }
  const std::uint32_t t = get_u32(p + 8), h = get_u32(p + 12), w = get_u32(p + 16),
                      c = get_u32(p + 20);
  const std::uint8_t pattern = p[24], dtype = p[25];
  if (c != 1 && c != 4) throw format_error("bad_header", "RVDS channel count must be 1 or 4");
  if (pattern > 3) throw format_error("bad_header", "RVDS pattern code out of range");
  if (dtype != kDtypeF32) throw format_error("bad_header", "RVDS dtype must be 0 (float32)");
  if (t == 0 || h == 0 || w == 0) throw format_error("bad_header", "RVDS dimensions are zero");
  // Each factor is < 2^32, so check the running product against the cap step by step.
  std::uint64_t payload = 4;
  for (std::uint64_t d : {std::uint64_t{c}, std::uint64_t{h}, std::uint64_t{w}, std::uint64_t{t}}) {
    if (payload > kMaxPayloadBytes / d) {
      throw format_error("dimension_overflow", "RVDS dimensions overflow the payload limit");
    }
    payload *= d;
  }
  if (bytes.size() - kHeaderBytes < payload) {
    throw format_error("truncated_payload",
                       "RVDS payload holds " + std::to_string(bytes.size() - kHeaderBytes) +
                           " bytes, header declares " + std::to_string(payload));
  }
  if (bytes.size() - kHeaderBytes > payload) {
    throw format_error("trailing_bytes", "RVDS file has bytes after the declared payload");
  }
  Sequence seq;
  seq.source_pattern = static_cast<BayerPattern>(pattern);
  seq.frames.reserve(t);
  const std::uint8_t* q = p + kHeaderBytes;
  for (std::uint32_t i = 0; i < t; ++i) {
    Image f(static_cast<int>(c), static_cast<int>(h), static_cast<int>(w));
    for (auto& v : f) {
      v = get_f32(q);
      q += 4;
    }
    seq.frames.push_back(std::move(f));
  }
  return seq;
}

}  // namespace rvds

inline void write_sequence(const Sequence& seq, const std::filesystem::path& path) {
  const auto bytes = rvds::encode(seq);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw format_error("io", "cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw format_error("io", "failed writing " + path.string());
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw format_error("io", "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline Sequence read_sequence(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return rvds::decode(bytes);
}

/// Unifies and packs every CFA frame; packed sequences are returned unchanged.
inline std::pair<Sequence, FlipRecord> to_packed(const Sequence& seq) {
  seq.validate();
  if (seq.channels() == 4) return {seq, FlipRecord{}};
  Sequence out;
  out.noise = seq.noise;
  out.source_pattern = seq.source_pattern;
  FlipRecord flips;
  for (const auto& f : seq.frames) {
    auto [unified, rec] = unify_pattern(RawFrame{seq.source_pattern, f});
    flips = rec;
    out.frames.push_back(pack_cfa(unified));
  }
  return {out, flips};
}

/// Inverse of to_packed for a sequence that originally held CFA frames.
inline Sequence to_cfa(const Sequence& packed, BayerPattern pattern, FlipRecord flips) {
  Sequence out;
  out.noise = packed.noise;
  out.source_pattern = pattern;
  for (const auto& f : packed.frames) out.frames.push_back(undo_unify(unpack_cfa(f), flips).data);
  return out;
}

}  // namespace rawdn
