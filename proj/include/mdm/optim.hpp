// Copyright 2026 The mdm-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fnmatch.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mdm/model.hpp"

namespace mdm {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  double max_grad_norm = 1.0;  // <= 0 disables clipping
  std::string backbone_pattern = "*backbone*";
};

struct AdamState {
  std::int64_t step = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;

  static AdamState zeros_like(const ModelParams& params) {
    AdamState s;
    for (const auto& [name, t] : params.tensors) {
      s.m[name].assign(t.numel(), 0.0);
      s.v[name].assign(t.numel(), 0.0);
    }
    return s;
  }
  friend bool operator==(const AdamState&, const AdamState&) = default;
};

struct LearningRates {
  double backbone = 0.0;
  double rest = 0.0;
  friend bool operator==(const LearningRates&, const LearningRates&) = default;
};

inline bool in_backbone_group(const std::string& name, const std::string& pattern) {
  return ::fnmatch(pattern.c_str(), name.c_str(), 0) == 0;
}

inline double global_grad_norm(const GradMap& grads) {
  double s = 0.0;
  for (const auto& [_, g] : grads)
    for (double x : g) s += x * x;
  return std::sqrt(s);
}

/// Scales grads in place so their global L2 norm is at most max_norm; returns the pre-clip norm.
inline double clip_grad_norm(GradMap& grads, double max_norm) {
  const double norm = global_grad_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& [_, g] : grads)
      for (double& x : g) x *= scale;
  }
  return norm;
}

/// Clip, then one AdamW step with bias correction and decoupled weight decay.
/// Returns the pre-clip gradient norm.
inline double adamw_step(ModelParams& params, GradMap grads, AdamState& state, const LearningRates& lr,
                         const AdamWConfig& cfg = {}) {
  for (const auto& [name, t] : params.tensors) {
    auto g = grads.find(name);
    if (g == grads.end() || g->second.size() != t.numel())
      throw std::invalid_argument("adamw_step: gradient for '" + name + "' is missing or mis-shaped");
    if (state.m[name].size() != t.numel() || state.v[name].size() != t.numel()) {
      if (state.step != 0) throw std::invalid_argument("adamw_step: optimizer state for '" + name + "' is mis-shaped");
      state.m[name].assign(t.numel(), 0.0);
      state.v[name].assign(t.numel(), 0.0);
    }
  }
  const double norm = clip_grad_norm(grads, cfg.max_grad_norm);
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (auto& [name, t] : params.tensors) {
    const double rate = in_backbone_group(name, cfg.backbone_pattern) ? lr.backbone : lr.rest;
    const auto& g = grads.at(name);
    auto& m = state.m.at(name);
    auto& v = state.v.at(name);
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1, vhat = v[i] / bc2;
      t.data[i] -= rate * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * t.data[i]);
    }
  }
  return norm;
}

struct LrSchedule {
  double base_backbone = 1e-5;
  double base_rest = 1e-4;
  std::int64_t warmup = 2000;
  std::int64_t decay_every = 25000;
  double decay = 0.5;

  LearningRates at(std::int64_t iter) const {
    if (iter < 0) throw std::invalid_argument("lr_at: iteration must be >= 0");
    const double factor = std::pow(decay, static_cast<double>(decay_every > 0 ? iter / decay_every : 0));
    const double ramp = warmup > 0 ? std::min(1.0, static_cast<double>(iter) / static_cast<double>(warmup)) : 1.0;
    return {base_backbone * ramp * factor, base_rest * factor};
  }
};

inline LearningRates lr_at(std::int64_t iter, const LrSchedule& s = {}) { return s.at(iter); }

}  // namespace mdm
