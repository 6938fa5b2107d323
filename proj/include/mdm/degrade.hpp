// Copyright 2026 The mdm-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

#include "mdm/core.hpp"
#include "mdm/rng.hpp"

namespace mdm {

enum class DifficultyLevel { Easy = 0, Medium = 1, Hard = 2, Extreme = 3 };

inline constexpr std::array<DifficultyLevel, 4> kAllLevels{DifficultyLevel::Easy, DifficultyLevel::Medium,
                                                          DifficultyLevel::Hard, DifficultyLevel::Extreme};

inline std::string_view level_name(DifficultyLevel level) {
  switch (level) {
    case DifficultyLevel::Easy: return "easy";
    case DifficultyLevel::Medium: return "medium";
    case DifficultyLevel::Hard: return "hard";
    case DifficultyLevel::Extreme: return "extreme";
  }
  return "?";
}

inline DifficultyLevel parse_level(std::string_view name) {
  for (auto l : kAllLevels)
    if (level_name(l) == name) return l;
  throw std::invalid_argument("unknown difficulty level '" + std::string(name) + "'");
}

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

/// Corruption parameters for one difficulty level.
/// block_side is a fraction of min(H, W); gauss_sigma is relative to the pixel depth.
struct LevelParams {
  int blocks_min = 0;
  int blocks_max = 0;
  Range block_side;
  double gauss_sigma = 0.0;
  double shot_prob = 0.0;
  Range shot_scale{1.0, 1.0};

  void validate() const {
    if (blocks_min < 0 || blocks_max < blocks_min) throw std::invalid_argument("LevelParams: bad block count range");
    if (block_side.lo < 0.0 || block_side.hi < block_side.lo || block_side.hi > 1.0)
      throw std::invalid_argument("LevelParams: bad block side range");
    if (gauss_sigma < 0.0) throw std::invalid_argument("LevelParams: negative gauss_sigma");
    if (shot_prob < 0.0 || shot_prob > 1.0) throw std::invalid_argument("LevelParams: shot_prob outside [0,1]");
    if (shot_scale.lo <= 0.0 || shot_scale.hi < shot_scale.lo) throw std::invalid_argument("LevelParams: bad shot_scale");
  }
};

struct LevelTable {
  std::array<LevelParams, 4> levels;

  const LevelParams& operator[](DifficultyLevel l) const { return levels[static_cast<std::size_t>(l)]; }
  LevelParams& operator[](DifficultyLevel l) { return levels[static_cast<std::size_t>(l)]; }

  /// Every parameter is non-decreasing in severity from easy to extreme.
  bool is_monotone() const {
    for (std::size_t i = 1; i < levels.size(); ++i) {
      const auto &a = levels[i - 1], &b = levels[i];
      if (b.blocks_min < a.blocks_min || b.blocks_max < a.blocks_max) return false;
      if (b.block_side.lo < a.block_side.lo || b.block_side.hi < a.block_side.hi) return false;
      if (b.gauss_sigma < a.gauss_sigma || b.shot_prob < a.shot_prob) return false;
      if (b.shot_scale.lo > a.shot_scale.lo || b.shot_scale.hi < a.shot_scale.hi) return false;
    }
    return true;
  }
};

inline LevelTable default_level_table() {
  LevelTable t;
  t[DifficultyLevel::Easy] = {2, 4, {0.05, 0.10}, 0.005, 0.001, {0.95, 1.05}};
  t[DifficultyLevel::Medium] = {4, 8, {0.10, 0.20}, 0.01, 0.005, {0.90, 1.10}};
  t[DifficultyLevel::Hard] = {8, 16, {0.15, 0.30}, 0.02, 0.01, {0.80, 1.20}};
  t[DifficultyLevel::Extreme] = {16, 32, {0.20, 0.40}, 0.04, 0.02, {0.70, 1.30}};
  return t;
}

/// Parses "level.key = values" lines on top of the defaults. '#' starts a comment.
/// Keys: num_blocks (2 ints), block_side (2), gauss_sigma (1), shot_prob (1), shot_scale (2).
inline LevelTable parse_level_table(std::istream& in) {
  LevelTable t = default_level_table();
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fail = [&](const std::string& what) {
      throw std::invalid_argument("level table line " + std::to_string(lineno) + ": " + what);
    };
    if (eq == std::string::npos) fail("expected 'level.key = value'");
    std::istringstream key_stream(line.substr(0, eq));
    std::string key;
    key_stream >> key;
    const auto dot = key.find('.');
    if (dot == std::string::npos) fail("key must be 'level.name'");
    auto& p = t[parse_level(key.substr(0, dot))];
    const std::string field = key.substr(dot + 1);
    std::istringstream vals(line.substr(eq + 1));
    auto read_pair = [&](double& a, double& b) {
      if (!(vals >> a >> b)) fail("expected two numbers for " + field);
    };
    auto read_one = [&](double& a) {
      if (!(vals >> a)) fail("expected a number for " + field);
    };
    if (field == "num_blocks") {
      double a = 0, b = 0;
      read_pair(a, b);
      p.blocks_min = static_cast<int>(a);
      p.blocks_max = static_cast<int>(b);
    } else if (field == "block_side") {
      read_pair(p.block_side.lo, p.block_side.hi);
    } else if (field == "gauss_sigma") {
      read_one(p.gauss_sigma);
    } else if (field == "shot_prob") {
      read_one(p.shot_prob);
    } else if (field == "shot_scale") {
      read_pair(p.shot_scale.lo, p.shot_scale.hi);
    } else {
      fail("unknown key '" + field + "'");
    }
    std::string extra;
    if (vals >> extra) fail("trailing tokens");
  }
  for (const auto& p : t.levels) p.validate();
  return t;
}

inline LevelTable load_level_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open level table '" + path + "'");
  return parse_level_table(in);
}

/// Zeroes a random number of axis-aligned rectangles.
inline DepthMap block_mask(DepthMap depth, const LevelParams& p, Rng& rng) {
  p.validate();
  const int H = depth.height(), W = depth.width();
  if (H == 0 || W == 0) return depth;
  const double min_dim = std::min(H, W);
  const int count = rng.uniform_int(p.blocks_min, p.blocks_max);
  for (int b = 0; b < count; ++b) {
    const int bh = std::clamp(static_cast<int>(std::lround(rng.uniform(p.block_side.lo, p.block_side.hi) * min_dim)), 1, H);
    const int bw = std::clamp(static_cast<int>(std::lround(rng.uniform(p.block_side.lo, p.block_side.hi) * min_dim)), 1, W);
    const int y0 = rng.uniform_int(0, H - bh);
    const int x0 = rng.uniform_int(0, W - bw);
    for (int y = y0; y < y0 + bh; ++y)
      for (int x = x0; x < x0 + bw; ++x) depth(y, x) = 0.f;
  }
  for (auto& v : depth.values())
    if (!is_valid_measurement(v)) v = 0.f;
  return depth;
}

inline float quantize_mm(double z) {
  return static_cast<float>(std::max(std::round(z * 1000.0), 1.0) / 1000.0);
}

/// Depth-proportional Gaussian noise plus multiplicative shot outliers, quantized to 1 mm.
/// Disabled noise terms draw nothing from rng.
inline DepthMap add_sensor_noise(DepthMap depth, const LevelParams& p, Rng& rng) {
  p.validate();
  for (auto& v : depth.values()) {
    if (!is_valid_measurement(v)) {
      v = 0.f;
      continue;
    }
    double z = v;
    if (p.gauss_sigma > 0.0) z *= 1.0 + p.gauss_sigma * rng.normal();
    if (p.shot_prob > 0.0 && rng.bernoulli(p.shot_prob)) z *= rng.uniform(p.shot_scale.lo, p.shot_scale.hi);
    v = quantize_mm(z);
  }
  return depth;
}

inline DepthMap corrupt(const DepthMap& depth, const LevelParams& p, Rng& rng) {
  return block_mask(add_sensor_noise(depth, p, rng), p, rng);
}

inline DepthMap corrupt(const DepthMap& depth, DifficultyLevel level, std::uint64_t seed,
                        const LevelTable& table = default_level_table()) {
  Rng rng(seed);
  return corrupt(depth, table[level], rng);
}

}  // namespace mdm
