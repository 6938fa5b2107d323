// Copyright 2026 The mdm-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdm {

/// Dense row-major 2D grid. The tag parameter keeps depth, disparity and
/// image grids from being mixed up at compile time.
template <typename T, typename Tag>
class Grid {
 public:
  using value_type = T;
  using tag_type = Tag;

  Grid() = default;
  Grid(int height, int width, T fill = T{}) : height_(height), width_(width) {
    if (height < 0 || width < 0) throw std::invalid_argument("Grid: negative dimensions");
    data_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), fill);
  }
  Grid(int height, int width, std::vector<T> values) : height_(height), width_(width), data_(std::move(values)) {
    if (data_.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width))
      throw std::invalid_argument("Grid: value count does not match dimensions");
  }

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(int y, int x) { return data_[index(y, x)]; }
  const T& operator()(int y, int x) const { return data_[index(y, x)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> values() & { return data_; }
  std::span<const T> values() const& { return data_; }
  std::span<const T> values() && = delete;
  std::span<T> row(int y) { return {data_.data() + index(y, 0), static_cast<std::size_t>(width_)}; }
  std::span<const T> row(int y) const { return {data_.data() + index(y, 0), static_cast<std::size_t>(width_)}; }

  template <typename G>
  bool same_shape(const G& other) const {
    return height_ == other.height() && width_ == other.width();
  }

  friend bool operator==(const Grid&, const Grid&) = default;

 private:
  std::size_t index(int y, int x) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<T> data_;
};

struct Rgb {
  float r = 0.f;
  float g = 0.f;
  float b = 0.f;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

struct DepthTag {};
struct DisparityTag {};
struct GrayTag {};
struct RgbTag {};
struct MaskTag {};
struct ScalarTag {};

/// Metric depth in meters; invalid pixels hold exactly 0.
using DepthMap = Grid<float, DepthTag>;
/// Horizontal disparity in pixels; invalid pixels hold exactly 0.
using DisparityMap = Grid<float, DisparityTag>;
/// Intensity in [0,1].
using GrayImage = Grid<float, GrayTag>;
using RgbImage = Grid<Rgb, RgbTag>;
/// 1 = valid, 0 = invalid.
using ValidityMask = Grid<std::uint8_t, MaskTag>;
/// Untyped real field (heatmaps, intermediate scalar maps).
using ScalarMap = Grid<float, ScalarTag>;

inline bool is_valid_measurement(float v) { return std::isfinite(v) && v > 0.f; }

/// Rectified pinhole stereo pair. focal_px refers to the image the rig is used with.
struct StereoRig {
  double focal_px = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  double baseline_m = 0.0;
  double sensor_width_mm = 36.0;
  double focal_mm = 0.0;

  void validate() const {
    if (!(focal_px > 0.0) || !std::isfinite(focal_px)) throw std::invalid_argument("StereoRig: focal_px must be > 0");
    if (!(baseline_m > 0.0) || !std::isfinite(baseline_m)) throw std::invalid_argument("StereoRig: baseline_m must be > 0");
  }

  /// Same physical rig viewed at a different image resolution.
  StereoRig rescaled(double factor) const {
    StereoRig r = *this;
    r.focal_px *= factor;
    r.cx *= factor;
    r.cy *= factor;
    return r;
  }

  friend bool operator==(const StereoRig&, const StereoRig&) = default;
};

inline double focal_mm_to_px(double focal_mm, double sensor_width_mm, int image_width) {
  return focal_mm / sensor_width_mm * static_cast<double>(image_width);
}

/// Builds a rig for an image of the given size with the principal point at the image center.
inline StereoRig make_rig(double focal_mm, double baseline_m, int image_height, int image_width,
                          double sensor_width_mm = 36.0) {
  StereoRig rig;
  rig.focal_mm = focal_mm;
  rig.sensor_width_mm = sensor_width_mm;
  rig.focal_px = focal_mm_to_px(focal_mm, sensor_width_mm, image_width);
  rig.cx = 0.5 * image_width;
  rig.cy = 0.5 * image_height;
  rig.baseline_m = baseline_m;
  rig.validate();
  return rig;
}

inline DepthMap disparity_to_depth(const DisparityMap& disp, const StereoRig& rig) {
  rig.validate();
  const double fb = rig.focal_px * rig.baseline_m;
  DepthMap out(disp.height(), disp.width(), 0.f);
  for (std::size_t i = 0; i < disp.size(); ++i) {
    const float d = disp[i];
    if (is_valid_measurement(d)) out[i] = static_cast<float>(fb / static_cast<double>(d));
  }
  return out;
}

inline DisparityMap depth_to_disparity(const DepthMap& depth, const StereoRig& rig) {
  rig.validate();
  const double fb = rig.focal_px * rig.baseline_m;
  DisparityMap out(depth.height(), depth.width(), 0.f);
  for (std::size_t i = 0; i < depth.size(); ++i) {
    const float z = depth[i];
    if (is_valid_measurement(z)) out[i] = static_cast<float>(fb / static_cast<double>(z));
  }
  return out;
}

template <typename Tag>
ValidityMask validity_of(const Grid<float, Tag>& map) {
  ValidityMask mask(map.height(), map.width(), 0);
  for (std::size_t i = 0; i < map.size(); ++i) mask[i] = is_valid_measurement(map[i]) ? 1 : 0;
  return mask;
}

/// Stores exactly 0 wherever the measurement is not valid (NaN, inf, non-positive).
template <typename Tag>
Grid<float, Tag> sanitized(Grid<float, Tag> map) {
  for (auto& v : map.values())
    if (!is_valid_measurement(v)) v = 0.f;
  return map;
}

template <typename Tag>
Grid<float, Tag> apply_mask(Grid<float, Tag> map, const ValidityMask& mask) {
  if (!map.same_shape(mask)) throw std::invalid_argument("apply_mask: shape mismatch");
  for (std::size_t i = 0; i < map.size(); ++i)
    if (!mask[i]) map[i] = 0.f;
  return map;
}

/// Source index for nearest-neighbour resampling with half-pixel centers.
inline int nearest_source_index(int i, int in, int out) {
  const auto s = static_cast<long long>(std::floor((static_cast<double>(i) + 0.5) * in / out));
  return static_cast<int>(std::clamp<long long>(s, 0, in - 1));
}

template <typename T, typename Tag>
Grid<T, Tag> nearest_upsample(const Grid<T, Tag>& map, int out_h, int out_w) {
  if (out_h < map.height() || out_w < map.width())
    throw std::invalid_argument("nearest_upsample: output must not be smaller than input");
  if (map.empty()) throw std::invalid_argument("nearest_upsample: empty input");
  std::vector<int> xs(static_cast<std::size_t>(out_w));
  for (int x = 0; x < out_w; ++x) xs[static_cast<std::size_t>(x)] = nearest_source_index(x, map.width(), out_w);
  Grid<T, Tag> out(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    const int sy = nearest_source_index(y, map.height(), out_h);
    for (int x = 0; x < out_w; ++x) out(y, x) = map(sy, xs[static_cast<std::size_t>(x)]);
  }
  return out;
}

/// One output sample of a 1D linear resampling: value = (1-w)*in[i0] + w*in[i1].
struct LinearTap {
  int i0 = 0;
  int i1 = 0;
  double w = 0.0;
};

/// Taps for align-corners=false bilinear resampling (source coordinate clamped to the border).
inline std::vector<LinearTap> bilinear_taps(int in, int out) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (int i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int i0 = static_cast<int>(std::floor(src));
    const int i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(i)] = {i0, i1, src - i0};
  }
  return taps;
}

template <typename Tag>
Grid<float, Tag> bilinear_resize(const Grid<float, Tag>& map, int out_h, int out_w) {
  if (map.empty() || out_h <= 0 || out_w <= 0) throw std::invalid_argument("bilinear_resize: empty grid");
  const auto ty = bilinear_taps(map.height(), out_h);
  const auto tx = bilinear_taps(map.width(), out_w);
  Grid<float, Tag> out(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    const auto& a = ty[static_cast<std::size_t>(y)];
    for (int x = 0; x < out_w; ++x) {
      const auto& b = tx[static_cast<std::size_t>(x)];
      const double top = (1.0 - b.w) * map(a.i0, b.i0) + b.w * map(a.i0, b.i1);
      const double bot = (1.0 - b.w) * map(a.i1, b.i0) + b.w * map(a.i1, b.i1);
      out(y, x) = static_cast<float>((1.0 - a.w) * top + a.w * bot);
    }
  }
  return out;
}

inline RgbImage bilinear_resize(const RgbImage& img, int out_h, int out_w) {
  if (img.empty() || out_h <= 0 || out_w <= 0) throw std::invalid_argument("bilinear_resize: empty image");
  const auto ty = bilinear_taps(img.height(), out_h);
  const auto tx = bilinear_taps(img.width(), out_w);
  RgbImage out(out_h, out_w);
  auto lerp = [](float Rgb::*c, const Rgb& p00, const Rgb& p01, const Rgb& p10, const Rgb& p11, double wy,
                 double wx) {
    const double top = (1.0 - wx) * p00.*c + wx * p01.*c;
    const double bot = (1.0 - wx) * p10.*c + wx * p11.*c;
    return static_cast<float>((1.0 - wy) * top + wy * bot);
  };
  for (int y = 0; y < out_h; ++y) {
    const auto& a = ty[static_cast<std::size_t>(y)];
    for (int x = 0; x < out_w; ++x) {
      const auto& b = tx[static_cast<std::size_t>(x)];
      const Rgb &p00 = img(a.i0, b.i0), &p01 = img(a.i0, b.i1), &p10 = img(a.i1, b.i0), &p11 = img(a.i1, b.i1);
      out(y, x) = {lerp(&Rgb::r, p00, p01, p10, p11, a.w, b.w), lerp(&Rgb::g, p00, p01, p10, p11, a.w, b.w),
                   lerp(&Rgb::b, p00, p01, p10, p11, a.w, b.w)};
    }
  }
  return out;
}

/// Nearest-neighbour resampling in either direction (used where mixing invalid pixels is not allowed).
template <typename T, typename Tag>
Grid<T, Tag> nearest_resize(const Grid<T, Tag>& map, int out_h, int out_w) {
  Grid<T, Tag> out(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    const int sy = nearest_source_index(y, map.height(), out_h);
    for (int x = 0; x < out_w; ++x) out(y, x) = map(sy, nearest_source_index(x, map.width(), out_w));
  }
  return out;
}

template <typename T, typename Tag>
Grid<T, Tag> flip_horizontal(const Grid<T, Tag>& map) {
  Grid<T, Tag> out(map.height(), map.width());
  for (int y = 0; y < map.height(); ++y)
    for (int x = 0; x < map.width(); ++x) out(y, x) = map(y, map.width() - 1 - x);
  return out;
}

template <typename T, typename Tag>
Grid<T, Tag> crop(const Grid<T, Tag>& map, int y0, int x0, int h, int w) {
  if (y0 < 0 || x0 < 0 || h < 0 || w < 0 || y0 + h > map.height() || x0 + w > map.width())
    throw std::invalid_argument("crop: window outside grid");
  Grid<T, Tag> out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out(y, x) = map(y0 + y, x0 + x);
  return out;
}

inline GrayImage to_gray(const RgbImage& img) {
  GrayImage out(img.height(), img.width());
  for (std::size_t i = 0; i < img.size(); ++i)
    out[i] = 0.299f * img[i].r + 0.587f * img[i].g + 0.114f * img[i].b;
  return out;
}

}  // namespace mdm
