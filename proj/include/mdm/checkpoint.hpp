// Copyright 2026 The mdm-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdm/binio.hpp"
#include "mdm/config_io.hpp"
#include "mdm/model.hpp"
#include "mdm/optim.hpp"

namespace mdm {

inline constexpr char kCheckpointMagic[4] = {'M', 'D', 'M', 'C'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

/// Model configuration, parameters and (optionally) optimizer state.
///
/// Layout, all little-endian:
///   "MDMC" u16 version
///   u32 len + config JSON
///   u32 tensor count, then per tensor: u32 len + name, u8 rank, u32 dims[rank], f32 values
///   u8 has_optimizer; if set: u64 step, then f32 m and v for each tensor in the same order
/// Values are stored as f32, so parameters are rounded to single precision on save.
struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  std::optional<AdamState> optimizer;
};

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  check_params(ck.params, ck.config);
  bin::Writer w;
  w.raw(kCheckpointMagic, 4);
  w.u16(kCheckpointVersion);
  w.str(to_json(ck.config).dump());
  w.u32(static_cast<std::uint32_t>(ck.params.tensors.size()));
  for (const auto& [name, t] : ck.params.tensors) {
    w.str(name);
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (int d : t.shape) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.data) w.f32(static_cast<float>(v));
  }
  w.u8(ck.optimizer ? 1 : 0);
  if (ck.optimizer) {
    w.u64(static_cast<std::uint64_t>(ck.optimizer->step));
    for (const auto& [name, t] : ck.params.tensors) {
      const auto& m = ck.optimizer->m.at(name);
      const auto& v = ck.optimizer->v.at(name);
      if (m.size() != t.numel() || v.size() != t.numel())
        throw std::invalid_argument("checkpoint: optimizer state for '" + name + "' is mis-shaped");
      for (double x : m) w.f32(static_cast<float>(x));
      for (double x : v) w.f32(static_cast<float>(x));
    }
  }
  return w.bytes();
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  bin::Reader r(bytes, "checkpoint");
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw std::runtime_error("checkpoint: bad magic");
  if (const auto v = r.u16(); v != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(v));
  Checkpoint ck;
  try {
    ck.config = model_config_from_json(nlohmann::json::parse(r.str()));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: bad config: ") + e.what());
  }
  const std::uint32_t count = r.u32();
  std::vector<std::string> order;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const int rank = r.u8();
    std::vector<int> shape(static_cast<std::size_t>(rank));
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = static_cast<int>(r.u32());
      numel *= static_cast<std::size_t>(d);
    }
    r.need(numel * 4);
    ad::Tensor t(shape);
    for (auto& v : t.data) v = r.f32();
    if (!ck.params.tensors.emplace(name, std::move(t)).second)
      throw std::runtime_error("checkpoint: duplicate tensor '" + name + "'");
    order.push_back(std::move(name));
  }
  check_params(ck.params, ck.config);
  if (r.u8()) {
    AdamState s;
    s.step = static_cast<std::int64_t>(r.u64());
    for (const auto& name : order) {
      const std::size_t n = ck.params.at(name).numel();
      r.need(n * 8);
      auto& m = s.m[name];
      auto& v = s.v[name];
      m.resize(n);
      v.resize(n);
      for (auto& x : m) x = r.f32();
      for (auto& x : v) x = r.f32();
    }
    ck.optimizer = std::move(s);
  }
  if (r.remaining() != 0) throw std::runtime_error("checkpoint: trailing bytes");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  bin::write_file_atomic(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(bin::read_file(path)); }

}  // namespace mdm
