// Copyright 2026 The mdm-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "mdm/core.hpp"

namespace mdm {

struct SgmConfig {
  int max_disparity = 64;
  int census_h = 5;
  int census_w = 5;
  int p1 = 8;
  int p2 = 96;
  int num_paths = 8;
  double lr_tolerance = 1.0;
  double uniqueness_ratio = 0.95;
  bool subpixel = true;

  void validate() const {
    if (max_disparity < 1) throw std::invalid_argument("SgmConfig: max_disparity must be >= 1");
    if (census_h % 2 == 0 || census_w % 2 == 0 || census_h < 1 || census_w < 1)
      throw std::invalid_argument("SgmConfig: census window dimensions must be odd");
    if (census_h * census_w - 1 > 64) throw std::invalid_argument("SgmConfig: census window larger than 64 bits");
    if (!(p1 > 0 && p2 > p1)) throw std::invalid_argument("SgmConfig: require p2 > p1 > 0");
    if (num_paths != 4 && num_paths != 8) throw std::invalid_argument("SgmConfig: num_paths must be 4 or 8");
    if (!(lr_tolerance >= 0.0)) throw std::invalid_argument("SgmConfig: lr_tolerance must be >= 0");
  }
};

struct CensusTag {};

/// Per-pixel census descriptor; bit k compares row-major neighbour k (center skipped).
struct CensusImage {
  Grid<std::uint64_t, CensusTag> bits;
  int num_bits = 0;
  int win_h = 0;
  int win_w = 0;
};

/// cost(y, x, d) stored at ((y * width + x) * max_disparity + d).
struct CostVolume {
  int height = 0;
  int width = 0;
  int max_disparity = 0;
  std::vector<std::uint16_t> cost;

  CostVolume() = default;
  CostVolume(int h, int w, int d, std::uint16_t fill = 0)
      : height(h), width(w), max_disparity(d), cost(static_cast<std::size_t>(h) * w * d, fill) {}

  std::uint16_t& at(int y, int x, int d) { return cost[offset(y, x) + static_cast<std::size_t>(d)]; }
  std::uint16_t at(int y, int x, int d) const { return cost[offset(y, x) + static_cast<std::size_t>(d)]; }
  std::size_t offset(int y, int x) const {
    return (static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x)) * max_disparity;
  }
};

inline CensusImage census_transform(const GrayImage& img, int win_h, int win_w) {
  if (win_h % 2 == 0 || win_w % 2 == 0 || win_h < 1 || win_w < 1)
    throw std::invalid_argument("census_transform: window dimensions must be odd");
  if (win_h * win_w - 1 > 64) throw std::invalid_argument("census_transform: window larger than 64 bits");
  const int ry = win_h / 2, rx = win_w / 2;
  CensusImage out{Grid<std::uint64_t, CensusTag>(img.height(), img.width(), 0), win_h * win_w - 1, win_h, win_w};
  for (int y = ry; y < img.height() - ry; ++y) {
    for (int x = rx; x < img.width() - rx; ++x) {
      const float center = img(y, x);
      std::uint64_t desc = 0;
      int bit = 0;
      for (int dy = -ry; dy <= ry; ++dy) {
        for (int dx = -rx; dx <= rx; ++dx) {
          if (dy == 0 && dx == 0) continue;
          if (img(y + dy, x + dx) < center) desc |= std::uint64_t{1} << bit;
          ++bit;
        }
      }
      out.bits(y, x) = desc;
    }
  }
  return out;
}

/// Hamming distance between left (x, y) and right (x - d, y); columns that fall
/// off the right image or inside its census border band get the maximum cost.
inline CostVolume build_cost_volume(const CensusImage& left, const CensusImage& right, int max_disparity) {
  if (!left.bits.same_shape(right.bits) || left.num_bits != right.num_bits)
    throw std::invalid_argument("build_cost_volume: census images differ in shape");
  if (max_disparity < 1) throw std::invalid_argument("build_cost_volume: max_disparity must be >= 1");
  const auto max_cost = static_cast<std::uint16_t>(left.num_bits);
  CostVolume cv(left.bits.height(), left.bits.width(), max_disparity, max_cost);
  for (int y = 0; y < cv.height; ++y) {
    for (int x = 0; x < cv.width; ++x) {
      const std::uint64_t l = left.bits(y, x);
      const int dmax = std::min(max_disparity - 1, x - right.win_w / 2);
      for (int d = 0; d <= dmax; ++d)
        cv.at(y, x, d) = static_cast<std::uint16_t>(std::popcount(l ^ right.bits(y, x - d)));
    }
  }
  return cv;
}

inline std::uint16_t max_cost_of(const CostVolume& cv) {
  return cv.cost.empty() ? std::uint16_t{0} : *std::max_element(cv.cost.begin(), cv.cost.end());
}

namespace detail {

struct PathDir {
  int dy;
  int dx;
};

inline constexpr std::array<PathDir, 8> kSgmPaths{{{0, 1}, {0, -1}, {1, 0}, {-1, 0}, {1, 1}, {1, -1}, {-1, 1}, {-1, -1}}};

/// One directional pass L_r, accumulated into `sum`. Keeps two scanline buffers.
inline void accumulate_path(const CostVolume& cv, PathDir r, int p1, int p2, std::vector<std::uint32_t>& sum) {
  const int H = cv.height, W = cv.width, D = cv.max_disparity;
  std::vector<std::uint32_t> prev(static_cast<std::size_t>(W) * D), cur(static_cast<std::size_t>(W) * D);
  std::vector<std::uint32_t> prev_min(static_cast<std::size_t>(W)), cur_min(static_cast<std::size_t>(W));
  const int y_begin = r.dy >= 0 ? 0 : H - 1, y_end = r.dy >= 0 ? H : -1, y_step = r.dy >= 0 ? 1 : -1;
  const int x_begin = r.dx >= 0 ? 0 : W - 1, x_end = r.dx >= 0 ? W : -1, x_step = r.dx >= 0 ? 1 : -1;
  for (int y = y_begin; y != y_end; y += y_step) {
    const int py = y - r.dy;
    for (int x = x_begin; x != x_end; x += x_step) {
      const int px = x - r.dx;
      const bool has_pred = py >= 0 && py < H && px >= 0 && px < W;
      const std::uint32_t* lp = nullptr;
      std::uint32_t lp_min = 0;
      if (has_pred) {
        const auto& buf = r.dy == 0 ? cur : prev;
        const auto& mins = r.dy == 0 ? cur_min : prev_min;
        lp = buf.data() + static_cast<std::size_t>(px) * D;
        lp_min = mins[static_cast<std::size_t>(px)];
      }
      const std::uint16_t* c = cv.cost.data() + cv.offset(y, x);
      std::uint32_t* l = cur.data() + static_cast<std::size_t>(x) * D;
      std::uint32_t best = std::numeric_limits<std::uint32_t>::max();
      std::uint32_t* s = sum.data() + cv.offset(y, x);
      for (int d = 0; d < D; ++d) {
        std::uint32_t v = c[d];
        if (has_pred) {
          std::uint32_t m = std::min(lp[d], lp_min + static_cast<std::uint32_t>(p2));
          if (d > 0) m = std::min(m, lp[d - 1] + static_cast<std::uint32_t>(p1));
          if (d + 1 < D) m = std::min(m, lp[d + 1] + static_cast<std::uint32_t>(p1));
          v += m - lp_min;
        }
        l[d] = v;
        best = std::min(best, v);
        s[d] += v;
      }
      cur_min[static_cast<std::size_t>(x)] = best;
    }
    std::swap(prev, cur);
    std::swap(prev_min, cur_min);
  }
}

}  // namespace detail

/// Semi-global aggregation: sum over directional passes of
/// L_r(p,d) = C(p,d) + min(L_r(p-r,d), L_r(p-r,d+-1) + P1, min_k L_r(p-r,k) + P2) - min_k L_r(p-r,k).
/// Penalty values are used as given, so P1 = P2 = 0 is accepted here even though sgm_match rejects it.
inline CostVolume aggregate_paths(const CostVolume& cv, const SgmConfig& cfg) {
  if (cfg.num_paths != 4 && cfg.num_paths != 8) throw std::invalid_argument("aggregate_paths: num_paths must be 4 or 8");
  if (cfg.p1 < 0 || cfg.p2 < 0) throw std::invalid_argument("aggregate_paths: negative penalty");
  const std::uint64_t bound =
      static_cast<std::uint64_t>(cfg.num_paths) * (static_cast<std::uint64_t>(max_cost_of(cv)) + cfg.p2);
  if (bound > std::numeric_limits<std::uint16_t>::max())
    throw std::invalid_argument("aggregate_paths: aggregated cost may overflow 16 bits");
  std::vector<std::uint32_t> sum(cv.cost.size(), 0);
  for (int i = 0; i < cfg.num_paths; ++i) detail::accumulate_path(cv, detail::kSgmPaths[static_cast<std::size_t>(i)], cfg.p1, cfg.p2, sum);
  CostVolume out(cv.height, cv.width, cv.max_disparity);
  for (std::size_t i = 0; i < sum.size(); ++i) out.cost[i] = static_cast<std::uint16_t>(sum[i]);
  return out;
}

/// Winner-take-all over d for a single pixel's cost curve with uniqueness test and
/// parabolic refinement. Returns 0 for invalid.
inline float select_from_costs(const std::uint16_t* c, int D, const SgmConfig& cfg) {
  int best_d = 0;
  for (int d = 1; d < D; ++d)
    if (c[d] < c[best_d]) best_d = d;
  const std::uint32_t best = c[best_d];
  bool has_second = false;
  std::uint32_t second = std::numeric_limits<std::uint32_t>::max();
  for (int d = 0; d < D; ++d) {
    if (std::abs(d - best_d) <= 1) continue;
    has_second = true;
    second = std::min<std::uint32_t>(second, c[d]);
  }
  if (has_second && (best == second || static_cast<double>(best) > cfg.uniqueness_ratio * second)) return 0.f;
  if (best_d == 0) return 0.f;
  double d = best_d;
  if (cfg.subpixel && best_d + 1 < D) {
    const double c0 = c[best_d - 1], c1 = c[best_d], c2 = c[best_d + 1];
    const double denom = c0 + c2 - 2.0 * c1;
    if (denom > 0.0) d += std::clamp((c0 - c2) / (2.0 * denom), -0.5, 0.5);
  }
  return static_cast<float>(d);
}

inline DisparityMap select_disparity(const CostVolume& agg, const SgmConfig& cfg) {
  DisparityMap out(agg.height, agg.width, 0.f);
  for (int y = 0; y < agg.height; ++y)
    for (int x = 0; x < agg.width; ++x)
      out(y, x) = select_from_costs(agg.cost.data() + agg.offset(y, x), agg.max_disparity, cfg);
  return out;
}

/// Keeps a left disparity only if the right-view disparity at the matched column agrees within tol.
inline DisparityMap left_right_check(const DisparityMap& disp_left, const DisparityMap& disp_right, double tol) {
  if (!disp_left.same_shape(disp_right)) throw std::invalid_argument("left_right_check: shape mismatch");
  DisparityMap out(disp_left.height(), disp_left.width(), 0.f);
  for (int y = 0; y < disp_left.height(); ++y) {
    for (int x = 0; x < disp_left.width(); ++x) {
      const float dl = disp_left(y, x);
      if (!is_valid_measurement(dl)) continue;
      const int xr = x - static_cast<int>(std::lround(dl));
      if (xr < 0 || xr >= disp_left.width()) continue;
      const float dr = disp_right(y, xr);
      if (!is_valid_measurement(dr)) continue;
      if (std::abs(static_cast<double>(dl) - dr) <= tol) out(y, x) = dl;
    }
  }
  return out;
}

/// Raw (unchecked) left and right disparities of a rectified pair.
struct SgmResult {
  DisparityMap left;
  DisparityMap right;
  DisparityMap checked;
};

inline DisparityMap sgm_single_view(const GrayImage& ref, const GrayImage& other, const SgmConfig& cfg) {
  const auto cr = census_transform(ref, cfg.census_h, cfg.census_w);
  const auto co = census_transform(other, cfg.census_h, cfg.census_w);
  auto disp = select_disparity(aggregate_paths(build_cost_volume(cr, co, cfg.max_disparity), cfg), cfg);
  // Census descriptors are undefined inside the border band. A minimum at the largest
  // observable disparity has no right-hand neighbour, so it is not a resolved match.
  const int ry = cfg.census_h / 2, rx = cfg.census_w / 2;
  for (int y = 0; y < disp.height(); ++y)
    for (int x = 0; x < disp.width(); ++x)
      if (y < ry || y >= disp.height() - ry || x < rx || x >= disp.width() - rx ||
          (disp(y, x) > 0.f && x - static_cast<int>(std::lround(disp(y, x))) - 1 < rx))
        disp(y, x) = 0.f;
  return disp;
}

inline SgmResult sgm_match_full(const GrayImage& left, const GrayImage& right, const SgmConfig& cfg) {
  cfg.validate();
  if (!left.same_shape(right)) throw std::invalid_argument("sgm_match: stereo images differ in shape");
  SgmResult r;
  r.left = sgm_single_view(left, right, cfg);
  // Right view: mirror both images so the right camera becomes the reference with positive disparity.
  r.right = flip_horizontal(sgm_single_view(flip_horizontal(right), flip_horizontal(left), cfg));
  r.checked = left_right_check(r.left, r.right, cfg.lr_tolerance);
  return r;
}

inline DisparityMap sgm_match(const GrayImage& left, const GrayImage& right, const SgmConfig& cfg) {
  return sgm_match_full(left, right, cfg).checked;
}

}  // namespace mdm
