// Copyright 2026 The mdm-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>

#include "mdm/core.hpp"

namespace mdm {

namespace colormap_detail {

constexpr double poly(const double (&c)[6], double t) {
  return c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * (c[4] + t * c[5]))));
}

constexpr std::uint8_t quantize(double v) {
  v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  return static_cast<std::uint8_t>(v * 255.0 + 0.5);
}

// Polynomial fit of the Turbo colormap.
constexpr std::array<std::array<std::uint8_t, 3>, 256> make_turbo() {
  constexpr double kr[6] = {0.13572138, 4.61539260, -42.66032258, 132.13108234, -152.94239396, 59.28637943};
  constexpr double kg[6] = {0.09140261, 2.19418839, 4.84296658, -14.18503333, 4.27729857, 2.82956604};
  constexpr double kb[6] = {0.10667330, 12.64194608, -60.58204836, 110.36276771, -89.90310912, 27.34824973};
  std::array<std::array<std::uint8_t, 3>, 256> lut{};
  for (int i = 0; i < 256; ++i) {
    const double t = i / 255.0;
    lut[static_cast<std::size_t>(i)] = {quantize(poly(kr, t)), quantize(poly(kg, t)), quantize(poly(kb, t))};
  }
  return lut;
}

}  // namespace colormap_detail

inline constexpr auto kTurboLut = colormap_detail::make_turbo();

inline Rgb turbo(double t) {
  const int i = std::isfinite(t) ? static_cast<int>(std::lround(std::clamp(t, 0.0, 1.0) * 255.0)) : 0;
  const auto& c = kTurboLut[static_cast<std::size_t>(i)];
  return {c[0] / 255.f, c[1] / 255.f, c[2] / 255.f};
}

/// Maps values already in [0,1] through the lookup table.
template <typename Tag>
RgbImage colorize_unit(const Grid<float, Tag>& map) {
  RgbImage out(map.height(), map.width());
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = turbo(map[i]);
  return out;
}

/// Min-max colorization over valid pixels; invalid pixels are black.
inline RgbImage colorize_depth(const DepthMap& depth) {
  float lo = std::numeric_limits<float>::infinity(), hi = -lo;
  for (float v : depth.values())
    if (is_valid_measurement(v)) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  RgbImage out(depth.height(), depth.width(), Rgb{0.f, 0.f, 0.f});
  for (std::size_t i = 0; i < depth.size(); ++i)
    if (is_valid_measurement(depth[i])) out[i] = turbo(hi > lo ? (depth[i] - lo) / (hi - lo) : 0.0);
  return out;
}

/// Blends a [0,1] heatmap over an image.
inline RgbImage overlay_heatmap(const RgbImage& img, const ScalarMap& heat, float alpha = 0.5f) {
  if (!img.same_shape(heat)) throw std::invalid_argument("overlay_heatmap: shape mismatch");
  RgbImage out(img.height(), img.width());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const Rgb c = turbo(heat[i]);
    out[i] = {(1 - alpha) * img[i].r + alpha * c.r, (1 - alpha) * img[i].g + alpha * c.g,
              (1 - alpha) * img[i].b + alpha * c.b};
  }
  return out;
}

}  // namespace mdm
