// Copyright 2026 The mdm-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdm/core.hpp"
#include "mdm/dataio.hpp"
#include "mdm/png.hpp"
#include "mdm/rng.hpp"
#include "mdm/stereo_sgm.hpp"

namespace mdm {

inline constexpr double kMinSceneDepth = 0.3;
inline constexpr double kMaxSceneDepth = 20.0;

struct Primitive {
  enum class Kind { Plane, Sphere } kind = Kind::Plane;
  // Plane: z = center.z, clipped to |x - cx| <= half_w, |y - cy| <= half_h (infinite when half extents are 0).
  // Sphere: center and radius.
  double cx = 0.0, cy = 0.0, cz = 1.0;
  double half_w = 0.0, half_h = 0.0;
  double radius = 0.0;
  Rgb albedo{0.6f, 0.6f, 0.6f};
  double texture_scale = 0.1;  // meters per RGB texture cell
};

struct SceneSpec {
  std::uint64_t seed = 0;
  std::vector<Primitive> primitives;
  double speckle_density = 0.5;  // fraction of projector cells holding a dot
  double speckle_cell_px = 3.0;  // dot spacing, in left stereo-camera pixels
  double light = 1.0;

  void validate() const {
    if (primitives.empty()) throw std::invalid_argument("SceneSpec: scene has no primitives");
    for (const auto& p : primitives) {
      const double z_near = p.kind == Primitive::Kind::Sphere ? p.cz - p.radius : p.cz;
      const double z_far = p.kind == Primitive::Kind::Sphere ? p.cz + p.radius : p.cz;
      if (!(z_near > kMinSceneDepth && z_far < kMaxSceneDepth))
        throw std::invalid_argument("SceneSpec: primitive depth outside (0.3, 20) m");
    }
    if (speckle_density < 0.0 || speckle_density > 1.0) throw std::invalid_argument("SceneSpec: bad speckle density");
  }
};

struct SyntheticSample {
  RgbImage rgb;
  DepthMap perfect_depth;
  GrayImage left;
  GrayImage right;
  DisparityMap gt_disparity;  // RGB resolution
  StereoRig rig;              // RGB resolution
  StereoRig stereo_rig;       // stereo resolution
};

struct RenderConfig {
  int rgb_h = 960;
  int rgb_w = 1280;
  int stereo_h = 720;
  int stereo_w = 960;
  int supersample = 2;  // per axis, stereo images only
};

namespace synth_detail {

inline std::uint64_t hash(std::int64_t a, std::int64_t b, std::uint64_t salt) {
  std::uint64_t h = Rng::mix(static_cast<std::uint64_t>(a) * 0x9E3779B97F4A7C15ull ^ salt);
  return Rng::mix(h ^ static_cast<std::uint64_t>(b) * 0xC2B2AE3D27D4EB4Full);
}

inline double hash01(std::int64_t a, std::int64_t b, std::uint64_t salt) {
  return static_cast<double>(hash(a, b, salt) >> 11) * 0x1.0p-53;
}

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  int index = -1;
};

/// Nearest intersection of the ray o + t*d (t > 0).
inline Hit intersect(const SceneSpec& s, double ox, double oy, double oz, double dx, double dy, double dz) {
  Hit best;
  for (std::size_t i = 0; i < s.primitives.size(); ++i) {
    const auto& p = s.primitives[i];
    double t = -1.0;
    if (p.kind == Primitive::Kind::Plane) {
      if (std::abs(dz) < 1e-12) continue;
      t = (p.cz - oz) / dz;
      if (t <= 0.0) continue;
      const double x = ox + t * dx, y = oy + t * dy;
      if (p.half_w > 0.0 && std::abs(x - p.cx) > p.half_w) continue;
      if (p.half_h > 0.0 && std::abs(y - p.cy) > p.half_h) continue;
    } else {
      const double lx = ox - p.cx, ly = oy - p.cy, lz = oz - p.cz;
      const double a = dx * dx + dy * dy + dz * dz;
      const double b = 2.0 * (lx * dx + ly * dy + lz * dz);
      const double c = lx * lx + ly * ly + lz * lz - p.radius * p.radius;
      const double disc = b * b - 4.0 * a * c;
      if (disc < 0.0) continue;
      t = (-b - std::sqrt(disc)) / (2.0 * a);
      if (t <= 0.0) continue;
    }
    if (t < best.t) best = {t, static_cast<int>(i)};
  }
  return best;
}

/// Projected speckle brightness at world point P; the projector sits at the left camera center.
inline double speckle(const SceneSpec& s, double angle_cell, double px, double py, double pz) {
  if (s.speckle_density <= 0.0) return 0.0;
  const double u = px / pz / angle_cell, v = py / pz / angle_cell;
  const auto iu = static_cast<std::int64_t>(std::floor(u)), iv = static_cast<std::int64_t>(std::floor(v));
  const double sigma = 0.3;
  double acc = 0.0;
  for (std::int64_t a = iu - 1; a <= iu + 1; ++a)
    for (std::int64_t b = iv - 1; b <= iv + 1; ++b) {
      if (hash01(a, b, s.seed ^ 0x51ull) >= s.speckle_density) continue;
      const double du = u - (a + hash01(a, b, s.seed ^ 0x52ull)), dv = v - (b + hash01(a, b, s.seed ^ 0x53ull));
      const double amp = 0.5 + 0.5 * hash01(a, b, s.seed ^ 0x54ull);
      acc += amp * std::exp(-(du * du + dv * dv) / (2.0 * sigma * sigma));
    }
  return std::min(acc, 1.0);
}

/// False when another surface blocks the projector's line of sight to P.
inline bool lit_by_projector(const SceneSpec& s, double px, double py, double pz) {
  const Hit h = intersect(s, 0.0, 0.0, 0.0, px / pz, py / pz, 1.0);
  return h.t >= pz * (1.0 - 1e-9);
}

/// Surface normal used for shading.
inline void normal_at(const Primitive& p, double x, double y, double z, double& nx, double& ny, double& nz) {
  if (p.kind == Primitive::Kind::Plane) {
    nx = 0.0, ny = 0.0, nz = -1.0;
    return;
  }
  nx = (x - p.cx) / p.radius, ny = (y - p.cy) / p.radius, nz = (z - p.cz) / p.radius;
}

/// Smooth value noise in [0,1] on the primitive surface, used to texture the RGB view.
inline double surface_noise(const Primitive& p, std::uint64_t salt, double x, double y) {
  const double u = x / p.texture_scale, v = y / p.texture_scale;
  const auto iu = static_cast<std::int64_t>(std::floor(u)), iv = static_cast<std::int64_t>(std::floor(v));
  const double fu = u - iu, fv = v - iv;
  const double su = fu * fu * (3 - 2 * fu), sv = fv * fv * (3 - 2 * fv);
  const double a = hash01(iu, iv, salt), b = hash01(iu + 1, iv, salt), c = hash01(iu, iv + 1, salt),
               d = hash01(iu + 1, iv + 1, salt);
  return (a * (1 - su) + b * su) * (1 - sv) + (c * (1 - su) + d * su) * sv;
}

inline GrayImage render_gray(const SceneSpec& s, const StereoRig& rig, double cam_x, int h, int w, int ss,
                             double angle_cell) {
  GrayImage img(h, w);
  const double ambient = 0.08 * s.light;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int sy = 0; sy < ss; ++sy)
        for (int sx = 0; sx < ss; ++sx) {
          const double u = x + (sx + 0.5) / ss, v = y + (sy + 0.5) / ss;
          const double dx = (u - rig.cx) / rig.focal_px, dy = (v - rig.cy) / rig.focal_px;
          const Hit hit = intersect(s, cam_x, 0.0, 0.0, dx, dy, 1.0);
          if (hit.index < 0) continue;
          const double px = cam_x + hit.t * dx, py = hit.t * dy, pz = hit.t;
          const auto& prim = s.primitives[static_cast<std::size_t>(hit.index)];
          const double gray = 0.299 * prim.albedo.r + 0.587 * prim.albedo.g + 0.114 * prim.albedo.b;
          acc += ambient * gray;
          if (lit_by_projector(s, px, py, pz))
            acc += 0.85 * s.light * speckle(s, angle_cell, px, py, pz) * (0.5 + 0.5 * gray);
        }
      img(y, x) = static_cast<float>(std::clamp(acc / (ss * ss), 0.0, 1.0));
    }
  return img;
}

}  // namespace synth_detail

/// Ray-casts the RGB view, perfect depth and ground-truth disparity (left camera, RGB
/// resolution) and the speckled stereo pair (stereo resolution). `rig` is for the RGB resolution.
inline SyntheticSample render_synthetic(const SceneSpec& scene, const StereoRig& rig, const RenderConfig& rc = {}) {
  scene.validate();
  rig.validate();
  if (!(rig.baseline_m > 0.0 && rig.baseline_m < 0.5)) throw std::invalid_argument("render_synthetic: baseline outside (0, 0.5) m");
  if (rc.rgb_h < 1 || rc.rgb_w < 1 || rc.stereo_h < 1 || rc.stereo_w < 1 || rc.supersample < 1)
    throw std::invalid_argument("render_synthetic: bad resolution");
  SyntheticSample out;
  out.rig = rig;
  out.stereo_rig = rig.rescaled(static_cast<double>(rc.stereo_w) / rc.rgb_w);
  out.stereo_rig.cy = 0.5 * rc.stereo_h;
  const double angle_cell = scene.speckle_cell_px / out.stereo_rig.focal_px;

  out.rgb = RgbImage(rc.rgb_h, rc.rgb_w);
  out.perfect_depth = DepthMap(rc.rgb_h, rc.rgb_w, 0.f);
  out.gt_disparity = DisparityMap(rc.rgb_h, rc.rgb_w, 0.f);
  const double fb = rig.focal_px * rig.baseline_m;
  const double lx = -0.4, ly = -0.6, lz = -0.7;  // direction towards the light
  const double ln = std::sqrt(lx * lx + ly * ly + lz * lz);
  for (int y = 0; y < rc.rgb_h; ++y)
    for (int x = 0; x < rc.rgb_w; ++x) {
      const double dx = (x + 0.5 - rig.cx) / rig.focal_px, dy = (y + 0.5 - rig.cy) / rig.focal_px;
      const auto hit = synth_detail::intersect(scene, 0.0, 0.0, 0.0, dx, dy, 1.0);
      if (hit.index < 0) continue;
      const auto& p = scene.primitives[static_cast<std::size_t>(hit.index)];
      const double px = hit.t * dx, py = hit.t * dy, pz = hit.t;
      out.perfect_depth(y, x) = static_cast<float>(pz);
      out.gt_disparity(y, x) = static_cast<float>(fb / static_cast<double>(out.perfect_depth(y, x)));
      double nx, ny, nz;
      synth_detail::normal_at(p, px, py, pz, nx, ny, nz);
      const double lambert = std::max(0.0, (nx * lx + ny * ly + nz * lz) / ln);
      const double tex = 0.75 + 0.5 * synth_detail::surface_noise(p, scene.seed + static_cast<std::uint64_t>(hit.index),
                                                                    p.kind == Primitive::Kind::Plane ? px : nx,
                                                                    p.kind == Primitive::Kind::Plane ? py : ny);
      const double shade = std::clamp(scene.light * (0.3 + 0.7 * lambert) * tex, 0.0, 1.5);
      out.rgb(y, x) = {static_cast<float>(std::clamp(p.albedo.r * shade, 0.0, 1.0)),
                       static_cast<float>(std::clamp(p.albedo.g * shade, 0.0, 1.0)),
                       static_cast<float>(std::clamp(p.albedo.b * shade, 0.0, 1.0))};
    }
  out.left = synth_detail::render_gray(scene, out.stereo_rig, 0.0, rc.stereo_h, rc.stereo_w, rc.supersample, angle_cell);
  out.right = synth_detail::render_gray(scene, out.stereo_rig, rig.baseline_m, rc.stereo_h, rc.stereo_w, rc.supersample,
                                        angle_cell);
  return out;
}

/// Focal length U[16, 28] mm and baseline U[0.05, 0.2] m, for an image of the given size.
inline StereoRig sample_rig(Rng& rng, int image_h, int image_w) {
  const double focal_mm = rng.uniform(16.0, 28.0);
  const double baseline = rng.uniform(0.05, 0.2);
  return make_rig(focal_mm, baseline, image_h, image_w);
}

/// Random scene: a textured back wall plus a few floating rectangles and spheres.
/// Depths start where the stereo disparity stays below max_disparity.
inline SceneSpec sample_scene(std::uint64_t seed, const StereoRig& stereo_rig, int max_disparity) {
  Rng rng(Rng::derive(seed, 1));
  SceneSpec s;
  s.seed = seed;
  const double fb = stereo_rig.focal_px * stereo_rig.baseline_m;
  const double z_min = std::max(kMinSceneDepth + 0.05, fb / (0.85 * max_disparity));
  const double z_wall = std::min(z_min * rng.uniform(2.0, 4.0), kMaxSceneDepth - 1.0);
  auto color = [&] {
    return Rgb{static_cast<float>(rng.uniform(0.2, 0.95)), static_cast<float>(rng.uniform(0.2, 0.95)),
               static_cast<float>(rng.uniform(0.2, 0.95))};
  };
  s.speckle_density = rng.uniform(0.35, 0.6);
  s.light = rng.uniform(0.8, 1.2);
  Primitive wall;
  wall.cz = z_wall;
  wall.albedo = color();
  wall.texture_scale = 0.05 * z_wall;
  s.primitives.push_back(wall);
  const double tan_x = 0.5 * stereo_rig.cx / stereo_rig.focal_px * 2.0;
  const int planes = rng.uniform_int(1, 3), spheres = rng.uniform_int(0, 2);
  for (int i = 0; i < planes; ++i) {
    Primitive p;
    p.cz = rng.uniform(z_min, 0.9 * z_wall);
    const double span = tan_x * p.cz;
    p.cx = rng.uniform(-span, span);
    p.cy = rng.uniform(-0.75 * span, 0.75 * span);
    p.half_w = rng.uniform(0.15, 0.5) * span;
    p.half_h = rng.uniform(0.15, 0.5) * span;
    p.albedo = color();
    p.texture_scale = 0.05 * p.cz;
    s.primitives.push_back(p);
  }
  for (int i = 0; i < spheres; ++i) {
    Primitive p;
    p.kind = Primitive::Kind::Sphere;
    const double zc = rng.uniform(z_min, 0.9 * z_wall);
    const double span = tan_x * zc;
    p.radius = std::min(rng.uniform(0.1, 0.3) * span, 0.5 * (zc - z_min) + 0.05 * zc);
    p.cz = std::max(zc, z_min + p.radius);
    p.cx = rng.uniform(-span, span);
    p.cy = rng.uniform(-0.75 * span, 0.75 * span);
    p.albedo = color();
    p.texture_scale = 0.3;
    s.primitives.push_back(p);
  }
  return s;
}

/// SGM at stereo resolution, converted to metric depth and nearest-upsampled to the RGB size.
inline DepthMap make_sensor_depth(const SyntheticSample& s, const SgmConfig& cfg) {
  if (s.left.empty() || s.right.empty()) throw std::invalid_argument("make_sensor_depth: stereo pair missing");
  const auto disp = sgm_match(s.left, s.right, cfg);
  return nearest_upsample(disparity_to_depth(disp, s.stereo_rig), s.rgb.height(), s.rgb.width());
}

struct GenerateConfig {
  RenderConfig render;
  SgmConfig sgm;
};

struct GeneratedSample {
  SyntheticSample sample;
  DepthMap sensor_depth;
  SceneSpec scene;
};

/// Everything for one dataset entry, determined by (seed, index).
inline GeneratedSample generate_sample(std::uint64_t seed, std::uint64_t index, const GenerateConfig& gc) {
  const std::uint64_t sample_seed = Rng::derive(seed, index);
  Rng rng(sample_seed);
  const StereoRig rig = sample_rig(rng, gc.render.rgb_h, gc.render.rgb_w);
  StereoRig stereo = rig.rescaled(static_cast<double>(gc.render.stereo_w) / gc.render.rgb_w);
  GeneratedSample g;
  g.scene = sample_scene(sample_seed, stereo, gc.sgm.max_disparity);
  g.sample = render_synthetic(g.scene, rig, gc.render);
  g.sensor_depth = make_sensor_depth(g.sample, gc.sgm);
  return g;
}

inline SampleManifest write_sample(const std::filesystem::path& dir, const std::string& id, std::uint64_t seed,
                                   const GeneratedSample& g) {
  std::filesystem::create_directories(dir);
  SampleManifest m;
  m.id = id;
  m.seed = seed;
  m.rgb_h = g.sample.rgb.height();
  m.rgb_w = g.sample.rgb.width();
  m.stereo_h = g.sample.left.height();
  m.stereo_w = g.sample.left.width();
  m.rig = g.sample.rig;
  m.invalid_ratio = invalid_pixel_ratio(validity_of(g.sensor_depth));
  write_png(dir / m.rgb, g.sample.rgb);
  write_dmap(dir / m.perfect_depth, g.sample.perfect_depth);
  write_dmap(dir / m.left, g.sample.left);
  write_dmap(dir / m.right, g.sample.right);
  write_dmap(dir / m.gt_disparity, g.sample.gt_disparity);
  write_dmap(dir / m.sensor_depth, g.sensor_depth);
  write_manifest(dir, m);
  return m;
}

}  // namespace mdm
