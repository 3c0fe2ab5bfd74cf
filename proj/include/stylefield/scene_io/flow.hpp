#pragma once

// Flow convention used throughout the library: F^(j,i) lives on view i's
// pixel grid and stores, for each i-pixel p, the displacement d such that
// p + d is the corresponding position in view j. Backward-warping view j
// with F^(j,i) therefore produces an image aligned with view i.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "stylefield/core/archive.hpp"
#include "stylefield/scene_io/image.hpp"

namespace stylefield {

struct FlowField {
  int height = 0;
  int width = 0;
  std::vector<float> data;  // H*W*(u,v), row-major
  int src_view = -1;        // j: the view being warped
  int dst_view = -1;        // i: the grid the flow lives on

  FlowField() = default;
  FlowField(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w * 2, 0.0f) {}

  float& u(int y, int x) { return data[(static_cast<std::size_t>(y) * width + x) * 2]; }
  float& v(int y, int x) { return data[(static_cast<std::size_t>(y) * width + x) * 2 + 1]; }
  float u(int y, int x) const { return data[(static_cast<std::size_t>(y) * width + x) * 2]; }
  float v(int y, int x) const { return data[(static_cast<std::size_t>(y) * width + x) * 2 + 1]; }

  bool all_finite() const {
    for (float f : data)
      if (!std::isfinite(f)) return false;
    return true;
  }
};

struct VisibilityMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  VisibilityMask() = default;
  VisibilityMask(int h, int w, bool fill = false)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill ? 1 : 0) {}

  bool at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x] != 0; }
  void set(int y, int x, bool v) { data[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto b : data) n += b ? 1 : 0;
    return n;
  }
  double coverage() const { return data.empty() ? 0.0 : static_cast<double>(count()) / data.size(); }
};

inline constexpr float kFloMagic = 202021.25f;

/// Middlebury .flo: float32 202021.25, int32 width, int32 height, then
/// width*height interleaved (u, v) float32 pairs, all little-endian.
inline void write_flo(const FlowField& flow, const std::filesystem::path& path) {
  if (flow.data.size() != static_cast<std::size_t>(flow.width) * flow.height * 2)
    throw ValidationError("flow data size does not match its shape");
  std::ostringstream os(std::ios::binary);
  const float magic = kFloMagic;
  const std::int32_t w = flow.width, h = flow.height;
  os.write(reinterpret_cast<const char*>(&magic), 4);
  os.write(reinterpret_cast<const char*>(&w), 4);
  os.write(reinterpret_cast<const char*>(&h), 4);
  os.write(reinterpret_cast<const char*>(flow.data.data()), static_cast<std::streamsize>(flow.data.size() * 4));
  write_atomic(path, os.str());
}

inline FlowField read_flo(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open flow file: " + path.string());
  float magic = 0;
  std::int32_t w = 0, h = 0;
  if (!is.read(reinterpret_cast<char*>(&magic), 4)) throw FormatError("truncated flow header: " + path.string());
  if (std::memcmp(&magic, &kFloMagic, 4) != 0) throw FormatError("bad .flo magic number in " + path.string());
  if (!is.read(reinterpret_cast<char*>(&w), 4) || !is.read(reinterpret_cast<char*>(&h), 4))
    throw FormatError("truncated flow header: " + path.string());
  if (w <= 0 || h <= 0 || w > 100000 || h > 100000) throw FormatError("implausible flow size in " + path.string());
  FlowField f(h, w);
  if (!is.read(reinterpret_cast<char*>(f.data.data()), static_cast<std::streamsize>(f.data.size() * 4)))
    throw FormatError("truncated flow payload: " + path.string());
  return f;
}

inline void write_mask_png(const VisibilityMask& m, const std::filesystem::path& path) {
  Image img(m.height, m.width, 1);
  for (std::size_t i = 0; i < m.data.size(); ++i) img.data[i] = m.data[i] ? 1.0 : 0.0;
  write_png(img, path);
}

inline VisibilityMask read_mask_png(const std::filesystem::path& path) {
  const Image img = read_png(path);
  VisibilityMask m(img.height, img.width);
  for (std::size_t p = 0; p < m.data.size(); ++p) m.data[p] = img.data[p * 3] > 0.5 ? 1 : 0;
  return m;
}

}  // namespace stylefield
