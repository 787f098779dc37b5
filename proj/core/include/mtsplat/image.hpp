#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "mtsplat/common.hpp"

namespace mtsplat {

// Row-major interleaved image/map container.
template <class T>
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<T> data;

  Image() = default;
  Image(int w, int h, int c, T fill = T(0))
      : width(w), height(h), channels(c),
        data(static_cast<std::size_t>(w) * h * c, fill) {}

  T& at(int x, int y, int c = 0) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  const T& at(int x, int y, int c = 0) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  bool same_shape(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  template <class U>
  Image<U> cast() const {
    Image<U> out(width, height, channels);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

// Bilinear sample of one channel at continuous pixel coordinates (u, v) where
// integer pixel (i, j) has its center at (i + 0.5, j + 0.5). Clamps to edges.
template <class T>
T bilinear_sample(const Image<T>& img, T u, T v, int c) {
  T x = u - T(0.5), y = v - T(0.5);
  int x0 = static_cast<int>(std::floor(x));
  int y0 = static_cast<int>(std::floor(y));
  T fx = x - x0, fy = y - y0;
  auto cl = [](int a, int lo, int hi) { return std::min(std::max(a, lo), hi); };
  int x0c = cl(x0, 0, img.width - 1), x1c = cl(x0 + 1, 0, img.width - 1);
  int y0c = cl(y0, 0, img.height - 1), y1c = cl(y0 + 1, 0, img.height - 1);
  T v00 = img.at(x0c, y0c, c), v10 = img.at(x1c, y0c, c);
  T v01 = img.at(x0c, y1c, c), v11 = img.at(x1c, y1c, c);
  return (T(1) - fy) * ((T(1) - fx) * v00 + fx * v10) + fy * ((T(1) - fx) * v01 + fx * v11);
}

inline std::uint8_t quantize_u8(float v) {
  float q = std::round(v * 255.0f);
  return static_cast<std::uint8_t>(std::min(255.0f, std::max(0.0f, q)));
}

}  // namespace mtsplat
