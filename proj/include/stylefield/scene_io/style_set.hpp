#pragma once

#include <Eigen/Core>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "stylefield/scene_io/image.hpp"

namespace stylefield {

struct StyleImage {
  Image pixels;
  std::string id;
};

/// Every PNG in `dir`, sorted by file name. Images smaller than 16 px on a
/// side are rejected.
inline std::vector<StyleImage> load_style_set(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw ValidationError("style folder does not exist: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  if (files.empty()) throw ValidationError("style folder is empty: " + dir.string());
  std::sort(files.begin(), files.end());
  std::vector<StyleImage> out;
  for (const auto& f : files) {
    StyleImage s{read_png(f), f.stem().string()};
    if (s.pixels.height < 16 || s.pixels.width < 16)
      throw ValidationError("style image " + f.string() + " is smaller than 16x16");
    out.push_back(std::move(s));
  }
  return out;
}

struct StyleSplit {
  std::vector<StyleImage> train;
  std::vector<StyleImage> val;
};

/// Seeded shuffle, then the first round(ratio * n) images go to training.
/// Both halves keep the original (sorted) order.
inline StyleSplit split_styles(const std::vector<StyleImage>& styles, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ValidationError("split ratio must lie in [0,1]");
  std::vector<std::size_t> idx(styles.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  // Fisher-Yates with our own draws; std::shuffle's output is implementation-defined.
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
  const auto n_train = static_cast<std::size_t>(std::lround(ratio * static_cast<double>(styles.size())));
  std::vector<std::size_t> tr(idx.begin(), idx.begin() + n_train), va(idx.begin() + n_train, idx.end());
  std::sort(tr.begin(), tr.end());
  std::sort(va.begin(), va.end());
  StyleSplit out;
  for (auto i : tr) out.train.push_back(styles[i]);
  for (auto i : va) out.val.push_back(styles[i]);
  if (out.val.empty()) spdlog::warn("style split leaves the validation set empty (ratio {})", ratio);
  return out;
}

/// Procedural painterly texture: a random palette laid over warped stripes,
/// blobs or checks. Palettes are drawn per seed, so different seeds give
/// clearly different colour statistics.
inline StyleImage make_style_image(std::uint64_t seed, int size = 32) {
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + 17);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  Eigen::Vector3d palette[3];
  for (auto& c : palette) c = Eigen::Vector3d(uni(rng), uni(rng), uni(rng));
  // push the palette towards saturated colours
  for (auto& c : palette) {
    const double m = c.mean();
    c = ((c.array() - m) * 1.6 + m).matrix().cwiseMax(0.0).cwiseMin(1.0);
  }
  const int kind = static_cast<int>(rng() % 3);
  const double freq = 2.0 + 6.0 * uni(rng), angle = std::numbers::pi * uni(rng);
  const double warp = 0.5 + 2.0 * uni(rng), phase = 2.0 * std::numbers::pi * uni(rng);
  Image img(size, size, 3);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double u = static_cast<double>(x) / size, v = static_cast<double>(y) / size;
      const double a = std::cos(angle) * u + std::sin(angle) * v;
      const double b = -std::sin(angle) * u + std::cos(angle) * v;
      double t = 0.0;
      if (kind == 0) {
        t = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * freq * a + warp * std::sin(2 * std::numbers::pi * 2 * b) + phase);
      } else if (kind == 1) {
        t = 0.5 + 0.25 * (std::sin(2 * std::numbers::pi * freq * a + phase) + std::sin(2 * std::numbers::pi * freq * b));
      } else {
        const int cx = static_cast<int>(std::floor(freq * a + 10.0)), cy = static_cast<int>(std::floor(freq * b + 10.0));
        t = ((cx + cy) % 2 == 0) ? 0.15 : 0.85;
        t += 0.1 * std::sin(2 * std::numbers::pi * warp * (a + b) + phase);
      }
      t = std::clamp(t, 0.0, 1.0);
      const Eigen::Vector3d c = t < 0.5 ? palette[0] + 2 * t * (palette[1] - palette[0])
                                        : palette[1] + (2 * t - 1) * (palette[2] - palette[1]);
      for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = std::clamp(c[ch], 0.0, 1.0);
    }
  return {quantize8(img), "style_" + std::to_string(seed)};
}

}  // namespace stylefield
