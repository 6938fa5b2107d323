// Copyright 2026 The mdm-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mdm/core.hpp"

namespace mdm {

struct MetricReport {
  double rmse = 0.0;
  double mae = 0.0;
  double rel = 0.0;
  double delta1 = 0.0;
  std::int64_t valid_count = 0;
};

struct DisparityReport {
  double epe = 0.0;
  double bp = 0.0;
  std::int64_t valid_count = 0;
};

enum class AlignMode { None, Affine, Scale, Disparity };

inline std::string_view align_name(AlignMode m) {
  switch (m) {
    case AlignMode::None: return "none";
    case AlignMode::Affine: return "affine";
    case AlignMode::Scale: return "scale";
    case AlignMode::Disparity: return "disparity";
  }
  return "?";
}

inline AlignMode parse_align(std::string_view s) {
  for (auto m : {AlignMode::None, AlignMode::Affine, AlignMode::Scale, AlignMode::Disparity})
    if (align_name(m) == s) return m;
  throw std::invalid_argument("unknown alignment mode '" + std::string(s) + "'");
}

inline constexpr double kDeltaThreshold = 1.25;

/// Metrics over pixels valid in both maps. Defined after metrics_of.
inline MetricReport metrics_of(std::span<const double> pred, std::span<const double> gt);

inline MetricReport depth_metrics(const DepthMap& pred, const DepthMap& gt) {
  if (!pred.same_shape(gt)) throw std::invalid_argument("depth_metrics: shape mismatch");
  const std::vector<double> p(pred.values().begin(), pred.values().end());
  const std::vector<double> g(gt.values().begin(), gt.values().end());
  return metrics_of(p, g);
}

/// End-point error and bad-pixel fraction (|error| strictly above threshold).
/// Evaluates entries where both maps are finite; zeros are included, unlike depth_metrics.
inline DisparityReport disparity_metrics(const DisparityMap& pred, const DisparityMap& gt, double threshold = 1.0) {
  if (!pred.same_shape(gt)) throw std::invalid_argument("disparity_metrics: shape mismatch");
  double ae = 0.0;
  std::int64_t n = 0, bad = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const float p = pred[i], g = gt[i];
    if (!std::isfinite(p) || !std::isfinite(g)) continue;
    const double e = std::abs(static_cast<double>(p) - g);
    ae += e;
    bad += e > threshold ? 1 : 0;
    ++n;
  }
  if (n == 0) throw std::invalid_argument("disparity_metrics: no pixel is valid in both maps");
  return {ae / static_cast<double>(n), static_cast<double>(bad) / static_cast<double>(n), n};
}

struct AffineFit {
  double scale = 1.0;
  double shift = 0.0;
};

/// Least-squares fit of pred to gt over entries where both are finite and positive.
/// Scale: s = sum(p g) / sum(p^2). Affine: (s, b) minimizing sum (s p + b - g)^2.
/// Disparity: affine fit on inverse values.
inline AffineFit fit_alignment(std::span<const double> pred, std::span<const double> gt, AlignMode mode) {
  if (pred.size() != gt.size()) throw std::invalid_argument("align: shape mismatch");
  if (mode == AlignMode::None) return {};
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const double p = pred[i], g = gt[i];
    if (!(std::isfinite(p) && p > 0.0 && std::isfinite(g) && g > 0.0)) continue;
    xs.push_back(mode == AlignMode::Disparity ? 1.0 / p : p);
    ys.push_back(mode == AlignMode::Disparity ? 1.0 / g : g);
  }
  if (xs.size() < 2) throw std::invalid_argument("align: need at least two jointly valid pixels");
  if (mode == AlignMode::Scale) {
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      sxy += xs[i] * ys[i];
      sxx += xs[i] * xs[i];
    }
    return {sxy / sxx, 0.0};
  }
  // Centered normal equations.
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double cxy = 0.0, cxx = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    cxy += (xs[i] - mx) * (ys[i] - my);
    cxx += (xs[i] - mx) * (xs[i] - mx);
  }
  if (!(cxx > 1e-24 * n * std::max(1.0, mx * mx)))
    throw std::invalid_argument("align: degenerate affine fit (constant prediction)");
  const double s = cxy / cxx;
  return {s, my - s * mx};
}

inline constexpr double kMinAlignedInverseDepth = 1e-6;

/// Applies the fitted transform; invalid predictions stay 0.
inline std::vector<double> align_values(std::span<const double> pred, std::span<const double> gt, AlignMode mode) {
  std::vector<double> out(pred.begin(), pred.end());
  if (mode == AlignMode::None) return out;
  const AffineFit fit = fit_alignment(pred, gt, mode);
  for (auto& p : out) {
    if (!(std::isfinite(p) && p > 0.0)) {
      p = 0.0;
      continue;
    }
    if (mode == AlignMode::Disparity) {
      p = 1.0 / std::max(fit.scale / p + fit.shift, kMinAlignedInverseDepth);
    } else {
      p = fit.scale * p + fit.shift;
    }
  }
  return out;
}

/// depth_metrics over double buffers; entries must be valid in both.
inline MetricReport metrics_of(std::span<const double> pred, std::span<const double> gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("metrics_of: shape mismatch");
  double se = 0.0, ae = 0.0, rel = 0.0;
  std::int64_t n = 0, inliers = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const double p = pred[i], g = gt[i];
    if (!(std::isfinite(p) && p > 0.0 && std::isfinite(g) && g > 0.0)) continue;
    const double e = p - g;
    se += e * e;
    ae += std::abs(e);
    rel += std::abs(e) / g;
    inliers += std::max(p / g, g / p) < kDeltaThreshold ? 1 : 0;
    ++n;
  }
  if (n == 0) throw std::invalid_argument("depth_metrics: no pixel is valid in both maps");
  const double dn = static_cast<double>(n);
  return {std::sqrt(se / dn), ae / dn, rel / dn, static_cast<double>(inliers) / dn, n};
}

inline std::vector<double> to_double(const DepthMap& m) { return {m.values().begin(), m.values().end()}; }

inline AffineFit fit_alignment(const DepthMap& pred, const DepthMap& gt, AlignMode mode) {
  if (!pred.same_shape(gt)) throw std::invalid_argument("align: shape mismatch");
  return fit_alignment(to_double(pred), to_double(gt), mode);
}

inline DepthMap align(const DepthMap& pred, const DepthMap& gt, AlignMode mode) {
  if (!pred.same_shape(gt)) throw std::invalid_argument("align: shape mismatch");
  if (mode == AlignMode::None) return pred;
  const auto v = align_values(to_double(pred), to_double(gt), mode);
  DepthMap out(pred.height(), pred.width(), 0.f);
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i]);
  return sanitized(std::move(out));
}

inline constexpr std::string_view kMetricsCsvVersion = "# mdm-metrics v1";
inline constexpr std::string_view kMetricsCsvHeader = "sample,mode,rmse,mae,rel,delta1,valid_count";

inline void write_metrics_header(std::ostream& os) { os << kMetricsCsvVersion << '\n' << kMetricsCsvHeader << '\n'; }

inline void write_metrics_row(std::ostream& os, std::string_view sample, AlignMode mode, const MetricReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g,%.9g,%lld", r.rmse, r.mae, r.rel, r.delta1,
                static_cast<long long>(r.valid_count));
  os << sample << ',' << align_name(mode) << ',' << buf << '\n';
}

}  // namespace mdm
