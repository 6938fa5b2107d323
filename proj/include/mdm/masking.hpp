// Copyright 2026 The mdm-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "mdm/core.hpp"
#include "mdm/rng.hpp"

namespace mdm {

struct MaskingConfig {
  int patch = 14;
  double p_mixed = 0.75;
  double ratio_lo = 0.60;
  double ratio_hi = 0.90;

  void validate() const {
    if (patch < 1) throw std::invalid_argument("MaskingConfig: patch must be >= 1");
    if (p_mixed < 0.0 || p_mixed > 1.0) throw std::invalid_argument("MaskingConfig: p_mixed outside [0,1]");
    if (!(ratio_lo > 0.0 && ratio_lo <= ratio_hi && ratio_hi <= 1.0))
      throw std::invalid_argument("MaskingConfig: require 0 < ratio_lo <= ratio_hi <= 1");
  }
};

/// Fraction of valid depth pixels inside each patch, row-major over the patch grid.
struct PatchValidity {
  int grid_h = 0;
  int grid_w = 0;
  std::vector<double> valid_fraction;

  int count() const { return grid_h * grid_w; }
  double at(int r, int c) const { return valid_fraction[static_cast<std::size_t>(r * grid_w + c)]; }
};

/// true = masked (dropped from the encoder input).
using TokenMask = std::vector<std::uint8_t>;

inline PatchValidity patch_validity(const ValidityMask& mask, int patch) {
  if (patch < 1) throw std::invalid_argument("patch_validity: patch must be >= 1");
  if (mask.height() % patch != 0 || mask.width() % patch != 0)
    throw std::invalid_argument("patch_validity: image dimensions must be divisible by the patch size");
  PatchValidity pv;
  pv.grid_h = mask.height() / patch;
  pv.grid_w = mask.width() / patch;
  pv.valid_fraction.assign(static_cast<std::size_t>(pv.count()), 0.0);
  const double area = static_cast<double>(patch) * patch;
  for (int r = 0; r < pv.grid_h; ++r) {
    for (int c = 0; c < pv.grid_w; ++c) {
      int n = 0;
      for (int y = r * patch; y < (r + 1) * patch; ++y)
        for (int x = c * patch; x < (c + 1) * patch; ++x) n += mask(y, x) ? 1 : 0;
      pv.valid_fraction[static_cast<std::size_t>(r * pv.grid_w + c)] = n / area;
    }
  }
  return pv;
}

inline double sample_mask_ratio(const MaskingConfig& cfg, Rng& rng) {
  cfg.validate();
  if (cfg.ratio_lo == cfg.ratio_hi) return cfg.ratio_lo;
  return rng.uniform(cfg.ratio_lo, cfg.ratio_hi);
}

inline int target_mask_count(double target_ratio, int n) {
  // Guard against 0.75 * 100 = 75.00000000000001 style round-up.
  const double scaled = target_ratio * n;
  const double rounded = std::round(scaled);
  if (std::abs(scaled - rounded) < 1e-9) return static_cast<int>(rounded);
  return static_cast<int>(std::ceil(scaled));
}

/// Natural-mask sampling:
///   1. patches with no valid depth are always masked;
///   2. partially valid patches are masked with probability p_mixed;
///   3. fully valid patches are added uniformly without replacement until
///      ceil(target_ratio * N) tokens are masked. Overshoot from 1-2 stands.
inline TokenMask sample_token_mask(const PatchValidity& pv, double target_ratio, const MaskingConfig& cfg, Rng& rng) {
  cfg.validate();
  if (!(target_ratio > 0.0 && target_ratio <= 1.0))
    throw std::invalid_argument("sample_token_mask: target_ratio must be in (0, 1]");
  const int n = pv.count();
  TokenMask mask(static_cast<std::size_t>(n), 0);
  std::vector<int> fully_valid;
  int masked = 0;
  for (int i = 0; i < n; ++i) {
    const double f = pv.valid_fraction[static_cast<std::size_t>(i)];
    if (f <= 0.0) {
      mask[static_cast<std::size_t>(i)] = 1;
      ++masked;
    } else if (f < 1.0) {
      if (rng.bernoulli(cfg.p_mixed)) {
        mask[static_cast<std::size_t>(i)] = 1;
        ++masked;
      }
    } else {
      fully_valid.push_back(i);
    }
  }
  const int target = target_mask_count(target_ratio, n);
  // Partial Fisher-Yates over the fully valid pool.
  const int extra = std::min<int>(std::max(0, target - masked), static_cast<int>(fully_valid.size()));
  for (int k = 0; k < extra; ++k) {
    const auto j = static_cast<std::size_t>(k) + rng.below(fully_valid.size() - static_cast<std::size_t>(k));
    std::swap(fully_valid[static_cast<std::size_t>(k)], fully_valid[j]);
    mask[static_cast<std::size_t>(fully_valid[static_cast<std::size_t>(k)])] = 1;
  }
  return mask;
}

/// Depth-completion mode: only tokens with no valid pixel are masked.
inline TokenMask invalid_token_mask(const PatchValidity& pv) {
  TokenMask mask(static_cast<std::size_t>(pv.count()), 0);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = pv.valid_fraction[i] <= 0.0 ? 1 : 0;
  return mask;
}

inline int masked_count(const TokenMask& mask) {
  return std::accumulate(mask.begin(), mask.end(), 0, [](int a, std::uint8_t m) { return a + (m ? 1 : 0); });
}

inline double invalid_pixel_ratio(const ValidityMask& mask) {
  if (mask.empty()) return 0.0;
  std::size_t invalid = 0;
  for (auto v : mask.values()) invalid += v ? 0 : 1;
  return static_cast<double>(invalid) / static_cast<double>(mask.size());
}

}  // namespace mdm
