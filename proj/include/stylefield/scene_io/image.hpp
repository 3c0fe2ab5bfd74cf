#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stylefield/core/tensor.hpp"

namespace stylefield {

/// Interleaved H x W x C image with real samples, nominally in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 3;
  std::vector<double> data;

  Image() = default;
  Image(int h, int w, int c = 3, double fill = 0.0)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  double& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  double at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
  }

  /// [H*W, C] tensor in the requested precision.
  template <class S>
  Tensor<S> to_tensor() const {
    return Tensor<S>(Shape{height * width, channels}, std::vector<S>(data.begin(), data.end()));
  }

  template <class S>
  static Image from_tensor(const Tensor<S>& t, int h, int w) {
    if (t.rank() != 2 || t.dim(0) != h * w) throw ValidationError("image tensor shape mismatch: " + shape_str(t.shape));
    Image img(h, w, t.dim(1));
    std::copy(t.data.begin(), t.data.end(), img.data.begin());
    return img;
  }
};

inline double max_abs_diff(const Image& a, const Image& b) {
  if (a.data.size() != b.data.size()) throw ValidationError("image size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

inline double psnr(const Image& a, const Image& b) {
  if (a.data.size() != b.data.size()) throw ValidationError("image size mismatch");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) mse += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
  mse /= static_cast<double>(a.data.size());
  return mse <= 0.0 ? 99.0 : -10.0 * std::log10(mse);
}

/// Box-filter downsampling by an integer factor; trailing rows/cols that do
/// not fill a whole block are dropped.
inline Image downsample_area(const Image& img, int factor) {
  if (factor < 1) throw ValidationError("downsample factor must be >= 1");
  if (factor == 1) return img;
  const int h = img.height / factor, w = img.width / factor;
  if (h < 1 || w < 1) throw ValidationError("image too small for downsample factor");
  Image out(h, w, img.channels);
  const double inv = 1.0 / (factor * factor);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < img.channels; ++c) {
        double acc = 0.0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) acc += img.at(y * factor + dy, x * factor + dx, c);
        out.at(y, x, c) = acc * inv;
      }
  return out;
}

/// Resize to (h, w): area averaging for exact integer shrink factors,
/// bilinear (pixel-centre aligned) otherwise.
inline Image resize(const Image& img, int h, int w) {
  if (h == img.height && w == img.width) return img;
  if (img.height % h == 0 && img.width % w == 0 && img.height / h == img.width / w)
    return downsample_area(img, img.height / h);
  Image out(h, w, img.channels);
  const double sy = static_cast<double>(img.height) / h, sx = static_cast<double>(img.width) / w;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height - 1.0);
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width - 1.0);
      const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
      const int y1 = std::min(y0 + 1, img.height - 1), x1 = std::min(x0 + 1, img.width - 1);
      const double ay = fy - y0, ax = fx - x0;
      for (int c = 0; c < img.channels; ++c)
        out.at(y, x, c) = (1 - ay) * ((1 - ax) * img.at(y0, x0, c) + ax * img.at(y0, x1, c)) +
                          ay * ((1 - ax) * img.at(y1, x0, c) + ax * img.at(y1, x1, c));
    }
  return out;
}

/// Reads an 8-bit PNG as RGB in [0,1].
inline Image read_png(const std::filesystem::path& path) {
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&im, path.string().c_str()))
    throw FormatError("cannot read PNG " + path.string() + ": " + im.message);
  im.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(im));
  if (!png_image_finish_read(&im, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&im);
    throw FormatError("cannot decode PNG " + path.string() + ": " + im.message);
  }
  Image out(static_cast<int>(im.height), static_cast<int>(im.width), 3);
  for (std::size_t i = 0; i < buf.size(); ++i) out.data[i] = buf[i] / 255.0;
  return out;
}

/// Writes an RGB (3-channel) or grayscale (1-channel) image as 8-bit PNG.
inline void write_png(const Image& img, const std::filesystem::path& path) {
  if (img.channels != 3 && img.channels != 1) throw ValidationError("write_png supports 1 or 3 channels");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(img.width);
  im.height = static_cast<png_uint_32>(img.height);
  im.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(img.data.size());
  for (std::size_t i = 0; i < buf.size(); ++i)
    buf[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.data[i], 0.0, 1.0) * 255.0));
  if (!png_image_write_to_file(&im, path.string().c_str(), 0, buf.data(), 0, nullptr))
    throw FormatError("cannot write PNG " + path.string() + ": " + im.message);
}

/// Rounds every sample to the nearest 8-bit level, i.e. what a PNG round trip does.
inline Image quantize8(Image img) {
  for (auto& v : img.data) v = std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return img;
}

}  // namespace stylefield
