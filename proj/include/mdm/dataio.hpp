// Copyright 2026 The mdm-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <ostream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdm/binio.hpp"
#include "mdm/core.hpp"
#include "mdm/masking.hpp"

namespace mdm {

enum class DmapKind : std::uint8_t { Depth = 0, Disparity = 1, Gray = 2, Heatmap = 3 };

inline constexpr char kDmapMagic[4] = {'D', 'M', 'A', 'P'};
inline constexpr std::uint16_t kDmapVersion = 1;
inline constexpr std::size_t kDmapHeaderSize = 4 + 2 + 1 + 4 + 4;

template <typename Tag>
constexpr DmapKind dmap_kind_of() {
  if constexpr (std::is_same_v<Tag, DepthTag>) return DmapKind::Depth;
  else if constexpr (std::is_same_v<Tag, DisparityTag>) return DmapKind::Disparity;
  else if constexpr (std::is_same_v<Tag, GrayTag>) return DmapKind::Gray;
  else if constexpr (std::is_same_v<Tag, ScalarTag>) return DmapKind::Heatmap;
  else static_assert(sizeof(Tag) == 0, "no DMAP kind for this grid type");
}

/// "DMAP" u16 version, u8 kind, u32 height, u32 width, then row-major f32 values; all little-endian.
/// Depth and disparity invalids are written as 0.
template <typename Tag>
std::vector<std::uint8_t> encode_dmap(const Grid<float, Tag>& map) {
  bin::Writer w;
  w.raw(kDmapMagic, 4);
  w.u16(kDmapVersion);
  w.u8(static_cast<std::uint8_t>(dmap_kind_of<Tag>()));
  w.u32(static_cast<std::uint32_t>(map.height()));
  w.u32(static_cast<std::uint32_t>(map.width()));
  constexpr bool measurement = std::is_same_v<Tag, DepthTag> || std::is_same_v<Tag, DisparityTag>;
  for (float v : map.values()) w.f32(measurement && !is_valid_measurement(v) ? 0.f : v);
  return w.bytes();
}

template <typename Tag>
Grid<float, Tag> decode_dmap(const std::vector<std::uint8_t>& bytes) {
  bin::Reader r(bytes, "dmap");
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kDmapMagic, 4) != 0) throw std::runtime_error("dmap: bad magic");
  if (const auto v = r.u16(); v != kDmapVersion) throw std::runtime_error("dmap: unsupported version " + std::to_string(v));
  const auto kind = r.u8();
  if (kind > 3) throw std::runtime_error("dmap: unknown kind " + std::to_string(kind));
  if (kind != static_cast<std::uint8_t>(dmap_kind_of<Tag>()))
    throw std::runtime_error("dmap: kind mismatch (file has " + std::to_string(kind) + ")");
  const std::uint32_t h = r.u32(), w = r.u32();
  const std::uint64_t n = static_cast<std::uint64_t>(h) * w;
  if (r.remaining() != n * 4) throw std::runtime_error("dmap: payload length does not match header");
  Grid<float, Tag> map(static_cast<int>(h), static_cast<int>(w));
  for (auto& v : map.values()) v = r.f32();
  return map;
}

template <typename Tag>
void write_dmap(const std::filesystem::path& path, const Grid<float, Tag>& map) {
  bin::write_file_atomic(path, encode_dmap(map));
}

template <typename Map>
Map read_dmap(const std::filesystem::path& path) {
  return decode_dmap<typename Map::tag_type>(bin::read_file(path));
}

/// Per-sample record stored as manifest.json next to the sample files.
struct SampleManifest {
  std::string id;
  std::uint64_t seed = 0;
  std::string rgb = "rgb.png";
  std::string perfect_depth = "perfect_depth.dmap";
  std::string left = "left.dmap";
  std::string right = "right.dmap";
  std::string gt_disparity = "gt_disparity.dmap";
  std::string sensor_depth = "sensor_depth.dmap";
  int rgb_h = 0;
  int rgb_w = 0;
  int stereo_h = 0;
  int stereo_w = 0;
  StereoRig rig;  // for the RGB resolution
  double invalid_ratio = 0.0;

  friend bool operator==(const SampleManifest&, const SampleManifest&) = default;
};

inline constexpr int kManifestVersion = 1;

inline nlohmann::json to_json(const SampleManifest& m) {
  return {{"version", kManifestVersion},
          {"id", m.id},
          {"seed", m.seed},
          {"files",
           {{"rgb", m.rgb},
            {"perfect_depth", m.perfect_depth},
            {"left", m.left},
            {"right", m.right},
            {"gt_disparity", m.gt_disparity},
            {"sensor_depth", m.sensor_depth}}},
          {"rgb_size", {m.rgb_h, m.rgb_w}},
          {"stereo_size", {m.stereo_h, m.stereo_w}},
          {"rig",
           {{"focal_px", m.rig.focal_px},
            {"cx", m.rig.cx},
            {"cy", m.rig.cy},
            {"baseline_m", m.rig.baseline_m},
            {"sensor_width_mm", m.rig.sensor_width_mm},
            {"focal_mm", m.rig.focal_mm}}},
          {"invalid_ratio", m.invalid_ratio}};
}

inline SampleManifest manifest_from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != kManifestVersion) throw std::runtime_error("manifest: unsupported version");
    SampleManifest m;
    m.id = j.at("id").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    const auto& f = j.at("files");
    m.rgb = f.at("rgb").get<std::string>();
    m.perfect_depth = f.at("perfect_depth").get<std::string>();
    m.left = f.at("left").get<std::string>();
    m.right = f.at("right").get<std::string>();
    m.gt_disparity = f.at("gt_disparity").get<std::string>();
    m.sensor_depth = f.at("sensor_depth").get<std::string>();
    m.rgb_h = j.at("rgb_size").at(0).get<int>();
    m.rgb_w = j.at("rgb_size").at(1).get<int>();
    m.stereo_h = j.at("stereo_size").at(0).get<int>();
    m.stereo_w = j.at("stereo_size").at(1).get<int>();
    const auto& r = j.at("rig");
    m.rig.focal_px = r.at("focal_px").get<double>();
    m.rig.cx = r.at("cx").get<double>();
    m.rig.cy = r.at("cy").get<double>();
    m.rig.baseline_m = r.at("baseline_m").get<double>();
    m.rig.sensor_width_mm = r.at("sensor_width_mm").get<double>();
    m.rig.focal_mm = r.at("focal_mm").get<double>();
    m.invalid_ratio = j.at("invalid_ratio").get<double>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("manifest: ") + e.what());
  }
}

inline std::string manifest_text(const SampleManifest& m) { return to_json(m).dump(2) + "\n"; }

inline void write_manifest(const std::filesystem::path& dir, const SampleManifest& m) {
  bin::write_file_atomic(dir / "manifest.json", manifest_text(m));
}

inline SampleManifest read_manifest(const std::filesystem::path& dir) {
  const auto bytes = bin::read_file(dir / "manifest.json");
  try {
    return manifest_from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(std::string("manifest: ") + e.what());
  }
}

/// Sample directories (those holding a manifest.json) below root, sorted by name.
inline std::vector<std::filesystem::path> list_samples(const std::filesystem::path& root) {
  std::vector<std::filesystem::path> out;
  if (!std::filesystem::is_directory(root)) throw std::runtime_error("not a dataset directory: '" + root.string() + "'");
  for (const auto& e : std::filesystem::directory_iterator(root))
    if (e.is_directory() && std::filesystem::exists(e.path() / "manifest.json")) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline constexpr int kMaskHistogramBins = 20;
using MaskHistogram = std::array<std::int64_t, kMaskHistogramBins>;

inline int mask_histogram_bin(double ratio) {
  const int b = static_cast<int>(std::floor(std::clamp(ratio, 0.0, 1.0) * kMaskHistogramBins));
  return std::min(b, kMaskHistogramBins - 1);
}

inline MaskHistogram mask_histogram(const std::vector<double>& ratios) {
  MaskHistogram h{};
  for (double r : ratios) ++h[static_cast<std::size_t>(mask_histogram_bin(r))];
  return h;
}

/// Histogram of sensor-depth invalid ratios, recomputed from the stored depth maps.
inline MaskHistogram dataset_mask_histogram(const std::vector<std::filesystem::path>& sample_dirs) {
  if (sample_dirs.empty()) throw std::invalid_argument("dataset_mask_histogram: no samples");
  std::vector<double> ratios;
  for (const auto& dir : sample_dirs) {
    const auto m = read_manifest(dir);
    ratios.push_back(invalid_pixel_ratio(validity_of(read_dmap<DepthMap>(dir / m.sensor_depth))));
  }
  return mask_histogram(ratios);
}

inline void write_mask_histogram_csv(std::ostream& os, const MaskHistogram& h) {
  os << "# mdm-mask-histogram v1\nbin_lo,bin_hi,count\n";
  char buf[96];
  for (int b = 0; b < kMaskHistogramBins; ++b) {
    std::snprintf(buf, sizeof buf, "%.2f,%.2f,%lld", static_cast<double>(b) / kMaskHistogramBins,
                  static_cast<double>(b + 1) / kMaskHistogramBins, static_cast<long long>(h[static_cast<std::size_t>(b)]));
    os << buf << '\n';
  }
}

}  // namespace mdm
