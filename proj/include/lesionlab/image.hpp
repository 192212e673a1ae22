#pragma once

#include <cstdint>
#include <vector>

#include "lesionlab/error.hpp"

namespace lesionlab {

// 8-bit interleaved image (RGB order for 3-channel data).
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<uint8_t> data;

  Image() = default;
  Image(int h, int w, int c) : height(h), width(w), channels(c), data(static_cast<size_t>(h) * w * c, 0) {}

  uint8_t& at(int row, int col, int ch) {
    return data[(static_cast<size_t>(row) * width + col) * channels + ch];
  }
  uint8_t at(int row, int col, int ch) const {
    return data[(static_cast<size_t>(row) * width + col) * channels + ch];
  }

  bool operator==(const Image& other) const {
    return height == other.height && width == other.width && channels == other.channels && data == other.data;
  }
};

// Binary per-pixel lesion map; data holds 0 (background) / 1 (foreground).
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> data;

  Mask() = default;
  Mask(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w, 0) {}

  uint8_t& at(int row, int col) { return data[static_cast<size_t>(row) * width + col]; }
  uint8_t at(int row, int col) const { return data[static_cast<size_t>(row) * width + col]; }

  int64_t area() const {
    int64_t n = 0;
    for (uint8_t v : data) n += (v != 0);
    return n;
  }

  bool empty_foreground() const { return area() == 0; }

  static Mask full_frame(int h, int w) {
    Mask m(h, w);
    std::fill(m.data.begin(), m.data.end(), uint8_t{1});
    return m;
  }

  bool operator==(const Mask& other) const {
    return height == other.height && width == other.width && data == other.data;
  }
};

// Inclusive pixel-coordinate bounding box.
struct BBox {
  int row_min = 0;
  int col_min = 0;
  int row_max = 0;
  int col_max = 0;

  int height() const { return row_max - row_min + 1; }
  int width() const { return col_max - col_min + 1; }
  bool operator==(const BBox&) const = default;
};

inline double bbox_iou(const BBox& a, const BBox& b) {
  const int r0 = std::max(a.row_min, b.row_min);
  const int c0 = std::max(a.col_min, b.col_min);
  const int r1 = std::min(a.row_max, b.row_max);
  const int c1 = std::min(a.col_max, b.col_max);
  if (r1 < r0 || c1 < c0) return 0.0;
  const double inter = static_cast<double>(r1 - r0 + 1) * (c1 - c0 + 1);
  const double area_a = static_cast<double>(a.height()) * a.width();
  const double area_b = static_cast<double>(b.height()) * b.width();
  return inter / (area_a + area_b - inter);
}

}  // namespace lesionlab
