// Copyright 2026 The mdm-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fstream>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "mdm/model.hpp"
#include "mdm/train.hpp"

namespace mdm {

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"image_h", c.image_h},
          {"image_w", c.image_w},
          {"patch", c.patch},
          {"embed_dim", c.embed_dim},
          {"encoder_layers", c.encoder_layers},
          {"heads", c.heads},
          {"mlp_ratio", c.mlp_ratio},
          {"decoder_stages", c.decoder_stages},
          {"decoder_channels", c.decoder_channels},
          {"head_hidden", c.head_hidden},
          {"depth_scale", c.depth_scale}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  const auto known = to_json(c);
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw std::invalid_argument("model config: unknown key '" + key + "'");
  c.image_h = j.value("image_h", c.image_h);
  c.image_w = j.value("image_w", c.image_w);
  c.patch = j.value("patch", c.patch);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
  c.heads = j.value("heads", c.heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.decoder_stages = j.value("decoder_stages", c.decoder_stages);
  c.decoder_channels = j.value("decoder_channels", c.decoder_channels);
  c.head_hidden = j.value("head_hidden", c.head_hidden);
  c.depth_scale = j.value("depth_scale", c.depth_scale);
  c.validate();
  return c;
}

inline void apply_train_json(TrainConfig& t, const nlohmann::json& j) {
  t.batch_size = j.value("batch_size", t.batch_size);
  t.steps = j.value("steps", t.steps);
  t.threads = j.value("threads", t.threads);
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    t.schedule.base_backbone = s.value("base_backbone", t.schedule.base_backbone);
    t.schedule.base_rest = s.value("base_rest", t.schedule.base_rest);
    t.schedule.warmup = s.value("warmup", t.schedule.warmup);
    t.schedule.decay_every = s.value("decay_every", t.schedule.decay_every);
    t.schedule.decay = s.value("decay", t.schedule.decay);
  }
  if (j.contains("optimizer")) {
    const auto& o = j["optimizer"];
    t.optimizer.beta1 = o.value("beta1", t.optimizer.beta1);
    t.optimizer.beta2 = o.value("beta2", t.optimizer.beta2);
    t.optimizer.eps = o.value("eps", t.optimizer.eps);
    t.optimizer.weight_decay = o.value("weight_decay", t.optimizer.weight_decay);
    t.optimizer.max_grad_norm = o.value("max_grad_norm", t.optimizer.max_grad_norm);
    t.optimizer.backbone_pattern = o.value("backbone_pattern", t.optimizer.backbone_pattern);
  }
  if (j.contains("masking")) {
    const auto& m = j["masking"];
    t.masking.p_mixed = m.value("p_mixed", t.masking.p_mixed);
    t.masking.ratio_lo = m.value("ratio_lo", t.masking.ratio_lo);
    t.masking.ratio_hi = m.value("ratio_hi", t.masking.ratio_hi);
  }
  if (j.contains("augment")) {
    const auto& a = j["augment"];
    t.augment.enabled = a.value("enabled", t.augment.enabled);
    t.augment.min_area = a.value("min_area", t.augment.min_area);
    t.augment.flip_prob = a.value("flip_prob", t.augment.flip_prob);
  }
}

/// A run configuration file: {"model": {...}, "train": {...}}; both sections optional.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig rc;
  for (const auto& [key, _] : j.items())
    if (key != "model" && key != "train") throw std::invalid_argument("run config: unknown section '" + key + "'");
  if (j.contains("model")) rc.model = model_config_from_json(j["model"]);
  if (j.contains("train")) apply_train_json(rc.train, j["train"]);
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config '" + path + "'");
  try {
    return parse_run_config(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config '" + path + "': " + e.what());
  }
}

}  // namespace mdm
