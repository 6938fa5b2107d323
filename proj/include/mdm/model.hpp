// Copyright 2026 The mdm-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <map>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "mdm/autodiff.hpp"
#include "mdm/core.hpp"
#include "mdm/masking.hpp"
#include "mdm/rng.hpp"

namespace mdm {

/// Architectural hyperparameters of the masked depth model.
struct ModelConfig {
  int image_h = 224;
  int image_w = 224;
  int patch = 14;
  int embed_dim = 128;
  int encoder_layers = 4;
  int heads = 4;
  int mlp_ratio = 4;
  int decoder_stages = 4;
  /// Feature channels at each decoder scale; decoder_stages + 1 entries.
  std::vector<int> decoder_channels{64, 32, 16, 16, 16};
  int head_hidden = 16;
  double depth_scale = 10.0;

  int grid_h() const { return image_h / patch; }
  int grid_w() const { return image_w / patch; }
  int num_tokens() const { return grid_h() * grid_w(); }
  int mlp_hidden() const { return embed_dim * mlp_ratio; }

  void validate() const {
    if (patch < 1 || image_h < patch || image_w < patch) throw std::invalid_argument("ModelConfig: bad patch size");
    if (image_h % patch != 0 || image_w % patch != 0)
      throw std::invalid_argument("ModelConfig: image dimensions must be divisible by the patch size");
    if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0)
      throw std::invalid_argument("ModelConfig: embed_dim must be divisible by heads");
    if (encoder_layers < 0 || mlp_ratio < 1) throw std::invalid_argument("ModelConfig: bad encoder settings");
    if (decoder_stages < 1) throw std::invalid_argument("ModelConfig: decoder_stages must be >= 1");
    if (static_cast<int>(decoder_channels.size()) != decoder_stages + 1)
      throw std::invalid_argument("ModelConfig: decoder_channels needs decoder_stages + 1 entries");
    for (int c : decoder_channels)
      if (c < 1) throw std::invalid_argument("ModelConfig: decoder channel counts must be positive");
    if (head_hidden < 1 || !(depth_scale > 0.0)) throw std::invalid_argument("ModelConfig: bad head settings");
  }

  /// ViT-L/14 with a four-stage neck, kept as reference data.
  static ModelConfig full_scale() {
    ModelConfig c;
    c.image_h = 224;
    c.image_w = 224;
    c.patch = 14;
    c.embed_dim = 1024;
    c.encoder_layers = 24;
    c.heads = 16;
    c.decoder_stages = 4;
    c.decoder_channels = {256, 128, 64, 32, 32};
    c.head_hidden = 32;
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Named learnable tensors, ordered by name.
struct ModelParams {
  std::map<std::string, ad::Tensor> tensors;

  const ad::Tensor& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::out_of_range("ModelParams: no parameter '" + name + "'");
    return it->second;
  }
  ad::Tensor& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::out_of_range("ModelParams: no parameter '" + name + "'");
    return it->second;
  }
  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors) n += t.numel();
    return n;
  }
  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

using GradMap = std::map<std::string, std::vector<double>>;

namespace model_detail {

struct ParamSpec {
  std::string name;
  std::vector<int> shape;
  enum class Init { Normal, Ones, Zeros } init = Init::Normal;
  double stddev = 0.0;
};

inline std::string block_prefix(int i) { return "backbone.blocks." + std::to_string(i) + "."; }

inline std::vector<ParamSpec> param_specs(const ModelConfig& c) {
  using I = ParamSpec::Init;
  const int n = c.embed_dim, p = c.patch, hid = c.mlp_hidden();
  std::vector<ParamSpec> s;
  auto lin = [&](const std::string& name, int in, int out, double std) {
    s.push_back({name + ".weight", {in, out}, I::Normal, std});
    s.push_back({name + ".bias", {out}, I::Zeros, 0.0});
  };
  auto norm = [&](const std::string& name, int dim) {
    s.push_back({name + ".weight", {dim}, I::Ones, 0.0});
    s.push_back({name + ".bias", {dim}, I::Zeros, 0.0});
  };
  auto conv = [&](const std::string& name, int co, int ci, int k, double gain) {
    s.push_back({name + ".weight", {co, ci, k, k}, I::Normal, gain / std::sqrt(static_cast<double>(ci * k * k))});
    s.push_back({name + ".bias", {co}, I::Zeros, 0.0});
  };
  lin("backbone.rgb_patch_proj", 3 * p * p, n, 0.02);
  lin("backbone.depth_patch_proj", p * p, n, 0.02);
  s.push_back({"backbone.spatial_pos_emb", {c.num_tokens(), n}, I::Normal, 0.02});
  s.push_back({"backbone.modality_emb", {2, n}, I::Normal, 0.02});
  s.push_back({"backbone.cls_token", {1, n}, I::Normal, 0.02});
  for (int i = 0; i < c.encoder_layers; ++i) {
    const auto b = block_prefix(i);
    norm(b + "norm1", n);
    lin(b + "attn.qkv", n, 3 * n, 0.02);
    lin(b + "attn.proj", n, n, 0.02);
    norm(b + "norm2", n);
    lin(b + "mlp.fc1", n, hid, 0.02);
    lin(b + "mlp.fc2", hid, n, 0.02);
  }
  norm("neck.token_norm", n);
  lin("neck.input_proj", n, c.decoder_channels[0], 1.0 / std::sqrt(static_cast<double>(n)));
  for (int st = 0; st <= c.decoder_stages; ++st) {
    const int ch = c.decoder_channels[static_cast<std::size_t>(st)];
    const auto sname = std::to_string(st);
    conv("neck.uv." + sname, ch, 2, 1, 1.0);
    conv("neck.res." + sname + ".conv1", ch, ch, 3, 1.0);
    conv("neck.res." + sname + ".conv2", ch, ch, 3, 0.5);
    if (st < c.decoder_stages) {
      const int co = c.decoder_channels[static_cast<std::size_t>(st) + 1];
      s.push_back({"neck.up." + sname + ".weight", {ch, co, 2, 2}, I::Normal, 1.0 / std::sqrt(static_cast<double>(ch))});
      s.push_back({"neck.up." + sname + ".bias", {co}, I::Zeros, 0.0});
    }
  }
  conv("head.conv1", c.head_hidden, c.decoder_channels.back(), 1, 1.0);
  conv("head.conv2", 1, c.head_hidden, 1, 0.1);
  return s;
}

}  // namespace model_detail

inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ModelParams params;
  for (const auto& spec : model_detail::param_specs(cfg)) {
    ad::Tensor t(spec.shape);
    switch (spec.init) {
      case model_detail::ParamSpec::Init::Ones: std::fill(t.data.begin(), t.data.end(), 1.0); break;
      case model_detail::ParamSpec::Init::Zeros: break;
      case model_detail::ParamSpec::Init::Normal:
        for (auto& v : t.data) v = spec.stddev * rng.normal();
        break;
    }
    params.tensors.emplace(spec.name, std::move(t));
  }
  return params;
}

/// Throws if names or shapes differ from what the config implies.
inline void check_params(const ModelParams& params, const ModelConfig& cfg) {
  const auto specs = model_detail::param_specs(cfg);
  if (specs.size() != params.tensors.size()) throw std::invalid_argument("ModelParams: parameter count does not match config");
  for (const auto& s : specs) {
    const auto& t = params.at(s.name);
    if (t.shape != s.shape)
      throw std::invalid_argument("ModelParams: '" + s.name + "' has shape " + ad::shape_string(t.shape) + ", expected " +
                                  ad::shape_string(s.shape));
  }
}

enum class Modality : std::uint8_t { Cls = 0, Rgb = 1, Depth = 2 };

struct TokenTag {
  Modality modality = Modality::Cls;
  int cell = -1;
  friend bool operator==(const TokenTag&, const TokenTag&) = default;
};

struct TokenSequence {
  ad::Tensor tokens;  // [count, embed_dim]
  std::vector<TokenTag> tags;
};

/// Final-layer self-attention probabilities, heads x length x length.
struct AttentionRecord {
  int heads = 0;
  int length = 0;
  int grid_h = 0;
  int grid_w = 0;
  std::vector<double> weights;
  std::vector<TokenTag> tags;

  double weight(int head, int query, int key) const {
    return weights[(static_cast<std::size_t>(head) * length + query) * length + key];
  }

  /// Sequence index of the depth token at a grid cell, or -1 if it was masked.
  int depth_token_index(int cell) const {
    for (int i = 0; i < length; ++i)
      if (tags[static_cast<std::size_t>(i)].modality == Modality::Depth && tags[static_cast<std::size_t>(i)].cell == cell) return i;
    return -1;
  }

  /// Weights of a query over the RGB keys in grid order; head = -1 averages heads.
  std::vector<double> query_to_rgb(int query, int head = -1) const {
    std::vector<double> out(static_cast<std::size_t>(grid_h * grid_w), 0.0);
    const int h0 = head < 0 ? 0 : head, h1 = head < 0 ? heads : head + 1;
    for (int k = 0; k < length; ++k) {
      const auto& tag = tags[static_cast<std::size_t>(k)];
      if (tag.modality != Modality::Rgb) continue;
      double s = 0.0;
      for (int h = h0; h < h1; ++h) s += weight(h, query, k);
      out[static_cast<std::size_t>(tag.cell)] = s / (h1 - h0);
    }
    return out;
  }
};

/// Feature-map shapes seen by the decoder, one entry per scale.
struct DecoderTrace {
  std::vector<std::vector<int>> stage_shapes;
};

namespace graph {

struct ParamVars {
  std::map<std::string, ad::Var> vars;
  ad::Var operator[](const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw std::out_of_range("missing parameter '" + name + "'");
    return it->second;
  }
};

inline ParamVars bind(ad::Tape& tape, const ModelParams& params, bool trainable) {
  ParamVars pv;
  for (const auto& [name, t] : params.tensors) pv.vars.emplace(name, trainable ? tape.leaf(t) : tape.constant(t));
  return pv;
}

struct Tokens {
  ad::Var tokens;
  std::vector<TokenTag> tags;
};

inline ad::Tensor patchify_rgb(const RgbImage& rgb, int patch) {
  const int gh = rgb.height() / patch, gw = rgb.width() / patch, f = 3 * patch * patch;
  ad::Tensor out({gh * gw, f});
  for (int r = 0; r < gh; ++r)
    for (int c = 0; c < gw; ++c) {
      double* row = out.data.data() + static_cast<std::size_t>(r * gw + c) * f;
      for (int py = 0; py < patch; ++py)
        for (int px = 0; px < patch; ++px) {
          const Rgb& v = rgb(r * patch + py, c * patch + px);
          const int k = py * patch + px;
          row[k] = 2.0 * v.r - 1.0;
          row[patch * patch + k] = 2.0 * v.g - 1.0;
          row[2 * patch * patch + k] = 2.0 * v.b - 1.0;
        }
    }
  return out;
}

/// Depth patches of the listed cells, normalized by depth_scale with invalid pixels at 0.
inline ad::Tensor patchify_depth(const DepthMap& depth, int patch, const std::vector<int>& cells, double depth_scale) {
  const int gw = depth.width() / patch, f = patch * patch;
  ad::Tensor out({static_cast<int>(cells.size()), f});
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const int r = cells[i] / gw, c = cells[i] % gw;
    for (int py = 0; py < patch; ++py)
      for (int px = 0; px < patch; ++px) {
        const float z = depth(r * patch + py, c * patch + px);
        out.data[i * f + static_cast<std::size_t>(py * patch + px)] = is_valid_measurement(z) ? z / depth_scale : 0.0;
      }
  }
  return out;
}

/// [cls] + all RGB tokens + unmasked depth tokens. depth == nullptr means no depth input at all.
inline Tokens embed(ad::Tape& t, const ParamVars& p, const RgbImage& rgb, const DepthMap* depth, const TokenMask& mask,
                    const ModelConfig& cfg) {
  cfg.validate();
  if (rgb.height() != cfg.image_h || rgb.width() != cfg.image_w)
    throw std::invalid_argument("embed_inputs: RGB size does not match the model input size");
  const int N = cfg.num_tokens();
  Tokens out;
  std::vector<ad::Var> parts;
  parts.push_back(p["backbone.cls_token"]);
  out.tags.push_back({Modality::Cls, -1});

  std::vector<int> all_cells(static_cast<std::size_t>(N));
  for (int i = 0; i < N; ++i) all_cells[static_cast<std::size_t>(i)] = i;
  const ad::Var modality_rgb = ad::slice_rows(t, p["backbone.modality_emb"], 0, 1);
  ad::Var rgb_tok = ad::linear(t, t.constant(patchify_rgb(rgb, cfg.patch)), p["backbone.rgb_patch_proj.weight"],
                               p["backbone.rgb_patch_proj.bias"]);
  rgb_tok = ad::add(t, rgb_tok, ad::gather_rows(t, p["backbone.spatial_pos_emb"], all_cells));
  rgb_tok = ad::add_row(t, rgb_tok, modality_rgb);
  parts.push_back(rgb_tok);
  for (int i = 0; i < N; ++i) out.tags.push_back({Modality::Rgb, i});

  if (depth != nullptr) {
    if (depth->height() != cfg.image_h || depth->width() != cfg.image_w)
      throw std::invalid_argument("embed_inputs: depth size does not match the model input size");
    if (static_cast<int>(mask.size()) != N) throw std::invalid_argument("embed_inputs: token mask length must equal N");
    std::vector<int> kept;
    for (int i = 0; i < N; ++i)
      if (!mask[static_cast<std::size_t>(i)]) kept.push_back(i);
    if (!kept.empty()) {
      const ad::Var modality_depth = ad::slice_rows(t, p["backbone.modality_emb"], 1, 1);
      ad::Var dep_tok = ad::linear(t, t.constant(patchify_depth(*depth, cfg.patch, kept, cfg.depth_scale)),
                                   p["backbone.depth_patch_proj.weight"], p["backbone.depth_patch_proj.bias"]);
      dep_tok = ad::add(t, dep_tok, ad::gather_rows(t, p["backbone.spatial_pos_emb"], kept));
      dep_tok = ad::add_row(t, dep_tok, modality_depth);
      parts.push_back(dep_tok);
      for (int cell : kept) out.tags.push_back({Modality::Depth, cell});
    }
  }
  out.tokens = ad::concat_rows(t, parts);
  return out;
}

/// Pre-norm transformer blocks; only the last block's output is returned.
inline Tokens encode(ad::Tape& t, const ParamVars& p, Tokens in, const ModelConfig& cfg, AttentionRecord* record) {
  ad::Var x = in.tokens;
  const int n = cfg.embed_dim;
  for (int i = 0; i < cfg.encoder_layers; ++i) {
    const auto b = model_detail::block_prefix(i);
    const ad::Var h = ad::layer_norm(t, x, p[b + "norm1.weight"], p[b + "norm1.bias"]);
    const ad::Var qkv = ad::linear(t, h, p[b + "attn.qkv.weight"], p[b + "attn.qkv.bias"]);
    const int L = t.shape(qkv)[0];
    auto columns = [&](int which) { return ad::slice_cols(t, qkv, which * n, n); };
    std::vector<double> probs;
    const bool last = i + 1 == cfg.encoder_layers;
    const ad::Var att = ad::attention(t, columns(0), columns(1), columns(2), cfg.heads, last && record ? &probs : nullptr);
    x = ad::add(t, x, ad::linear(t, att, p[b + "attn.proj.weight"], p[b + "attn.proj.bias"]));
    const ad::Var h2 = ad::layer_norm(t, x, p[b + "norm2.weight"], p[b + "norm2.bias"]);
    const ad::Var m = ad::linear(t, ad::gelu(t, ad::linear(t, h2, p[b + "mlp.fc1.weight"], p[b + "mlp.fc1.bias"])),
                                 p[b + "mlp.fc2.weight"], p[b + "mlp.fc2.bias"]);
    x = ad::add(t, x, m);
    if (last && record) {
      record->heads = cfg.heads;
      record->length = L;
      record->grid_h = cfg.grid_h();
      record->grid_w = cfg.grid_w();
      record->weights = std::move(probs);
      record->tags = in.tags;
    }
  }
  return {x, std::move(in.tags)};
}

/// Disc-mapped UV coordinates [2, h, w] for an image of aspect image_w / image_h.
inline ad::Tensor uv_encoding(int h, int w, int image_h, int image_w) {
  const double aspect = static_cast<double>(image_w) / image_h;
  const double span_u = aspect / std::sqrt(1.0 + aspect * aspect);
  const double span_v = 1.0 / std::sqrt(1.0 + aspect * aspect);
  ad::Tensor out({2, h, w});
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double u = span_u * (2.0 * (x + 0.5) / w - 1.0);
      const double v = span_v * (2.0 * (y + 0.5) / h - 1.0);
      const std::size_t k = static_cast<std::size_t>(y) * w + x;
      out.data[k] = u * std::sqrt(1.0 - 0.5 * v * v);
      out.data[hw + k] = v * std::sqrt(1.0 - 0.5 * u * u);
    }
  return out;
}

/// Drops depth tokens, adds [cls] to each RGB token and runs the convolutional
/// neck and depth head. Returns metric depth [1, image_h, image_w].
inline ad::Var decode(ad::Tape& t, const ParamVars& p, const Tokens& latent, const ModelConfig& cfg, DecoderTrace* trace) {
  const int N = cfg.num_tokens(), gh = cfg.grid_h(), gw = cfg.grid_w();
  // Row order: [cls, rgb cell 0 .. N-1]; depth tokens are discarded.
  std::vector<int> rows(static_cast<std::size_t>(1 + N), -1);
  for (std::size_t i = 0; i < latent.tags.size(); ++i) {
    const auto& tag = latent.tags[i];
    if (tag.modality == Modality::Cls) rows[0] = static_cast<int>(i);
    if (tag.modality == Modality::Rgb && tag.cell >= 0 && tag.cell < N) rows[static_cast<std::size_t>(tag.cell) + 1] = static_cast<int>(i);
  }
  if (rows[0] < 0) throw std::invalid_argument("decode: latent sequence has no [cls] token");
  if (std::find(rows.begin(), rows.end(), -1) != rows.end())
    throw std::invalid_argument("decode: latent sequence is missing RGB grid tokens");
  const ad::Var normed = ad::layer_norm(t, ad::gather_rows(t, latent.tokens, std::move(rows)), p["neck.token_norm.weight"],
                                        p["neck.token_norm.bias"]);
  const ad::Var cls = ad::slice_rows(t, normed, 0, 1);
  const ad::Var ctx = ad::add_row(t, ad::slice_rows(t, normed, 1, N), cls);
  ad::Var f = ad::tokens_to_chw(t, ad::linear(t, ctx, p["neck.input_proj.weight"], p["neck.input_proj.bias"]), gh, gw);
  int h = gh, w = gw;
  for (int s = 0; s <= cfg.decoder_stages; ++s) {
    const auto sn = std::to_string(s);
    if (trace) trace->stage_shapes.push_back(t.shape(f));
    const ad::Var uv = ad::conv2d(t, t.constant(uv_encoding(h, w, cfg.image_h, cfg.image_w)), p["neck.uv." + sn + ".weight"],
                                  p["neck.uv." + sn + ".bias"]);
    f = ad::add(t, f, uv);
    const std::string r = "neck.res." + sn;
    ad::Var y = ad::conv2d(t, ad::gelu(t, f), p[r + ".conv1.weight"], p[r + ".conv1.bias"]);
    y = ad::conv2d(t, ad::gelu(t, y), p[r + ".conv2.weight"], p[r + ".conv2.bias"]);
    f = ad::add(t, f, y);
    if (s < cfg.decoder_stages) {
      f = ad::conv_transpose2x2(t, f, p["neck.up." + sn + ".weight"], p["neck.up." + sn + ".bias"]);
      h *= 2;
      w *= 2;
    }
  }
  ad::Var logit = ad::conv2d(t, f, p["head.conv1.weight"], p["head.conv1.bias"]);
  logit = ad::conv2d(t, ad::gelu(t, logit), p["head.conv2.weight"], p["head.conv2.bias"]);
  logit = ad::resize_bilinear(t, logit, bilinear_taps(h, cfg.image_h), bilinear_taps(w, cfg.image_w));
  return ad::exp_scaled(t, logit, cfg.depth_scale);
}

}  // namespace graph

inline TokenSequence embed_inputs(const RgbImage& rgb, const DepthMap* depth, const TokenMask& mask,
                                  const ModelParams& params, const ModelConfig& cfg) {
  ad::Tape t;
  const auto pv = graph::bind(t, params, false);
  auto tok = graph::embed(t, pv, rgb, depth, mask, cfg);
  return {t.value(tok.tokens), std::move(tok.tags)};
}

inline TokenSequence encode(const TokenSequence& seq, const ModelParams& params, const ModelConfig& cfg,
                            AttentionRecord* record = nullptr) {
  ad::Tape t;
  const auto pv = graph::bind(t, params, false);
  auto out = graph::encode(t, pv, {t.constant(seq.tokens), seq.tags}, cfg, record);
  return {t.value(out.tokens), std::move(out.tags)};
}

namespace model_detail {
inline DepthMap to_depth_map(const ad::Tensor& t, int h, int w) {
  DepthMap out(h, w);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(t.data[i]);
  return out;
}
}  // namespace model_detail

inline DepthMap decode(const TokenSequence& latent, const ModelParams& params, const ModelConfig& cfg,
                       DecoderTrace* trace = nullptr) {
  ad::Tape t;
  const auto pv = graph::bind(t, params, false);
  const auto pred = graph::decode(t, pv, {t.constant(latent.tokens), latent.tags}, cfg, trace);
  return model_detail::to_depth_map(t.value(pred), cfg.image_h, cfg.image_w);
}

struct ForwardResult {
  DepthMap prediction;
  AttentionRecord attention;
};

/// embed -> encode -> decode. depth == nullptr runs RGB-only (monocular) mode.
inline ForwardResult forward(const RgbImage& rgb, const DepthMap* depth, const TokenMask& mask, const ModelParams& params,
                             const ModelConfig& cfg) {
  ad::Tape t;
  const auto pv = graph::bind(t, params, false);
  ForwardResult r;
  auto tokens = graph::encode(t, pv, graph::embed(t, pv, rgb, depth, mask, cfg), cfg, &r.attention);
  const auto pred = graph::decode(t, pv, tokens, cfg, nullptr);
  r.prediction = model_detail::to_depth_map(t.value(pred), cfg.image_h, cfg.image_w);
  return r;
}

struct LossValue {
  double loss = 0.0;
  std::int64_t count = 0;
  bool empty() const { return count == 0; }
};

/// Mean absolute error over pixels valid in gt; {0, 0} when gt has no valid pixel.
inline LossValue masked_l1_loss(const DepthMap& pred, const DepthMap& gt) {
  if (!pred.same_shape(gt)) throw std::invalid_argument("masked_l1_loss: shape mismatch");
  double sum = 0.0;
  std::int64_t n = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!is_valid_measurement(gt[i])) continue;
    sum += std::abs(static_cast<double>(pred[i]) - gt[i]);
    ++n;
  }
  return {n ? sum / static_cast<double>(n) : 0.0, n};
}

/// One supervised example: model-resolution RGB, (optional) input depth, the
/// token mask to apply, and the ground truth used by the loss.
struct TrainExample {
  RgbImage rgb;
  DepthMap input_depth;
  TokenMask mask;
  DepthMap gt_depth;
  bool has_depth = true;
};

struct GradientResult {
  double loss = 0.0;  // mean over examples with at least one valid gt pixel
  std::int64_t valid_pixels = 0;
  int contributing = 0;
  GradMap grads;
};

/// Loss and gradient of one example, unnormalized over the batch.
inline GradientResult example_gradients(const TrainExample& ex, const ModelParams& params, const ModelConfig& cfg) {
  ad::Tape t;
  const auto pv = graph::bind(t, params, true);
  auto tokens = graph::encode(t, pv, graph::embed(t, pv, ex.rgb, ex.has_depth ? &ex.input_depth : nullptr, ex.mask, cfg),
                              cfg, nullptr);
  const auto pred = graph::decode(t, pv, tokens, cfg, nullptr);
  if (!ex.gt_depth.same_shape(ex.rgb)) throw std::invalid_argument("gradients: ground truth size mismatch");
  std::vector<double> target(ex.gt_depth.size());
  std::vector<std::uint8_t> valid(ex.gt_depth.size());
  for (std::size_t i = 0; i < target.size(); ++i) {
    valid[i] = is_valid_measurement(ex.gt_depth[i]) ? 1 : 0;
    target[i] = valid[i] ? ex.gt_depth[i] : 0.0;
  }
  GradientResult r;
  r.valid_pixels = std::count(valid.begin(), valid.end(), std::uint8_t{1});
  const auto loss = ad::masked_l1(t, pred, std::move(target), std::move(valid));
  r.loss = t.value(loss).data[0];
  if (!std::isfinite(r.loss)) throw std::runtime_error("gradients: non-finite loss");
  r.contributing = r.valid_pixels > 0 ? 1 : 0;
  t.backward(loss);
  for (const auto& [name, var] : pv.vars) {
    const auto& g = t.grad(var);
    r.grads[name] = g.empty() ? std::vector<double>(params.at(name).numel(), 0.0) : g;
  }
  return r;
}

/// Batch loss is the mean of per-example masked L1 over examples with valid
/// ground truth. Examples are evaluated on up to `threads` workers and reduced
/// in example order, so the result does not depend on the thread count.
inline GradientResult gradients(const std::vector<TrainExample>& batch, const ModelParams& params, const ModelConfig& cfg,
                                int threads = 1) {
  std::vector<GradientResult> per(batch.size());
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(batch.size())));
  if (workers == 1) {
    for (std::size_t i = 0; i < batch.size(); ++i) per[i] = example_gradients(batch[i], params, cfg);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = static_cast<std::size_t>(w); i < batch.size(); i += static_cast<std::size_t>(workers))
            per[i] = example_gradients(batch[i], params, cfg);
        } catch (...) {
          errors[static_cast<std::size_t>(w)] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  GradientResult out;
  for (const auto& [name, t] : params.tensors) out.grads[name].assign(t.numel(), 0.0);
  for (const auto& r : per) {
    out.contributing += r.contributing;
    out.valid_pixels += r.valid_pixels;
  }
  if (out.contributing == 0) return out;
  const double inv = 1.0 / out.contributing;
  for (const auto& r : per) {
    if (!r.contributing) continue;
    out.loss += r.loss * inv;
    for (auto& [name, g] : out.grads) {
      const auto& src = r.grads.at(name);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i] * inv;
    }
  }
  return out;
}

struct Heatmap {
  ScalarMap map;
  bool degenerate = false;  // attention was constant; map is all zero
};

/// Head-averaged attention of the depth token at grid cell (row, col) over all
/// RGB tokens, resized to the image and min-max normalized.
inline Heatmap extract_attention(const AttentionRecord& attn, int row, int col, int out_h, int out_w) {
  if (row < 0 || col < 0 || row >= attn.grid_h || col >= attn.grid_w)
    throw std::invalid_argument("extract_attention: query cell outside the token grid");
  const int q = attn.depth_token_index(row * attn.grid_w + col);
  if (q < 0) throw std::invalid_argument("extract_attention: query depth token was masked");
  const auto w = attn.query_to_rgb(q);
  ScalarMap grid(attn.grid_h, attn.grid_w);
  for (std::size_t i = 0; i < w.size(); ++i) grid[i] = static_cast<float>(w[i]);
  Heatmap hm{bilinear_resize(grid, out_h, out_w), false};
  const auto [lo, hi] = std::minmax_element(hm.map.values().begin(), hm.map.values().end());
  const float mn = *lo, mx = *hi;
  if (!(mx > mn)) {
    hm.degenerate = true;
    std::fill(hm.map.values().begin(), hm.map.values().end(), 0.f);
    return hm;
  }
  for (auto& v : hm.map.values()) v = (v - mn) / (mx - mn);
  return hm;
}

}  // namespace mdm
