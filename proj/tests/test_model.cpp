// Copyright 2026 The mdm-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mdm/model.hpp"
#include "model_fixtures.hpp"

namespace mdm {
namespace {

using testing::identity_attention_model;
using testing::random_depth;
using testing::random_rgb;
using testing::tiny_config;

TokenMask mask_of(int n, std::initializer_list<int> masked) {
  TokenMask m(static_cast<std::size_t>(n), 0);
  for (int i : masked) m[static_cast<std::size_t>(i)] = 1;
  return m;
}

TEST(ModelConfig, ValidatesShapes) {
  EXPECT_NO_THROW(ModelConfig{}.validate());
  EXPECT_NO_THROW(ModelConfig::full_scale().validate());
  EXPECT_EQ(ModelConfig::full_scale().num_tokens(), 256);
  auto c = tiny_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.image_w = 30;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.decoder_channels.pop_back();
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(ModelParams, InitIsDeterministicAndShaped) {
  const auto c = tiny_config();
  const auto a = init_params(c, 3), b = init_params(c, 3);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, init_params(c, 4));
  EXPECT_NO_THROW(check_params(a, c));
  EXPECT_EQ(a.at("backbone.modality_emb").shape, (std::vector<int>{2, c.embed_dim}));
  EXPECT_EQ(a.at("backbone.spatial_pos_emb").shape, (std::vector<int>{c.num_tokens(), c.embed_dim}));
  auto other = c;
  other.embed_dim = 8;
  EXPECT_THROW(check_params(a, other), std::invalid_argument);
}

TEST(Embed, TokenCounts) {
  const auto c = tiny_config();
  const auto p = init_params(c, 1);
  const auto rgb = random_rgb(28, 28, 1);
  const auto d = random_depth(28, 28, 2);
  const int N = c.num_tokens();
  EXPECT_EQ(embed_inputs(rgb, &d, TokenMask(16, 0), p, c).tokens.dim(0), 1 + 2 * N);
  EXPECT_EQ(embed_inputs(rgb, &d, TokenMask(16, 1), p, c).tokens.dim(0), 1 + N);
  const auto seq = embed_inputs(rgb, &d, mask_of(N, {0, 5, 9}), p, c);
  EXPECT_EQ(seq.tokens.dim(0), 1 + N + N - 3);
  EXPECT_EQ(seq.tags.front().modality, Modality::Cls);
  for (const auto& tag : seq.tags)
    if (tag.modality == Modality::Depth) {
      EXPECT_TRUE(tag.cell != 0 && tag.cell != 5 && tag.cell != 9);
    }
}

TEST(Embed, RejectsMismatchedInputs) {
  const auto c = tiny_config();
  const auto p = init_params(c, 1);
  const auto d = random_depth(28, 28, 2);
  EXPECT_THROW(embed_inputs(random_rgb(28, 21, 1), &d, TokenMask(16, 0), p, c), std::invalid_argument);
  EXPECT_THROW(embed_inputs(random_rgb(28, 28, 1), &d, TokenMask(15, 0), p, c), std::invalid_argument);
}

TEST(Embed, ModalitiesDifferByModalityEmbedding) {
  const auto c = tiny_config();
  const auto p = init_params(c, 5);
  const RgbImage grey(28, 28, Rgb{0.5f, 0.5f, 0.5f});  // normalizes to zero
  const DepthMap empty(28, 28, 0.f);
  const auto seq = embed_inputs(grey, &empty, TokenMask(16, 0), p, c);
  const int n = c.embed_dim, N = c.num_tokens();
  const auto& mod = p.at("backbone.modality_emb").data;
  for (int cell : {0, 7, 15}) {
    const int ri = 1 + cell, di = 1 + N + cell;
    ASSERT_EQ(seq.tags[static_cast<std::size_t>(di)].cell, cell);
    for (int k = 0; k < n; ++k) {
      const double diff = seq.tokens.data[static_cast<std::size_t>(ri * n + k)] - seq.tokens.data[static_cast<std::size_t>(di * n + k)];
      EXPECT_NEAR(diff, mod[static_cast<std::size_t>(k)] - mod[static_cast<std::size_t>(n + k)], 1e-15);
    }
  }
}

TEST(Encode, ZeroLayersIsIdentity) {
  auto c = tiny_config();
  c.encoder_layers = 0;
  const auto p = init_params(c, 2);
  const auto d = random_depth(28, 28, 3);
  const auto seq = embed_inputs(random_rgb(28, 28, 4), &d, mask_of(16, {1, 2}), p, c);
  const auto out = encode(seq, p, c);
  EXPECT_EQ(out.tokens, seq.tokens);
  EXPECT_EQ(out.tags, seq.tags);
}

TEST(Encode, PreservesLengthAndIsFinite) {
  const auto c = tiny_config();
  const auto p = init_params(c, 2);
  const auto d = random_depth(28, 28, 3);
  const auto seq = embed_inputs(random_rgb(28, 28, 4), &d, mask_of(16, {3}), p, c);
  const auto out = encode(seq, p, c);
  EXPECT_EQ(out.tokens.shape, seq.tokens.shape);
  for (double v : out.tokens.data) EXPECT_TRUE(std::isfinite(v));
}

TEST(Encode, PermutationEquivariant) {
  auto c = tiny_config();
  c.embed_dim = 8;
  const auto p = init_params(c, 6);
  Rng rng(7);
  TokenSequence seq;
  seq.tokens = ad::Tensor({8, 8});
  for (auto& v : seq.tokens.data) v = rng.uniform(-1.0, 1.0);
  for (int i = 0; i < 8; ++i) seq.tags.push_back({Modality::Rgb, i});
  const std::vector<int> perm{3, 0, 7, 1, 6, 2, 5, 4};
  TokenSequence shuffled;
  shuffled.tokens = ad::Tensor({8, 8});
  for (int i = 0; i < 8; ++i) {
    std::copy_n(seq.tokens.data.begin() + perm[static_cast<std::size_t>(i)] * 8, 8, shuffled.tokens.data.begin() + i * 8);
    shuffled.tags.push_back(seq.tags[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);
  }
  const auto a = encode(seq, p, c), b = encode(shuffled, p, c);
  for (int i = 0; i < 8; ++i) {
    EXPECT_EQ(b.tags[static_cast<std::size_t>(i)], a.tags[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);
    for (int k = 0; k < 8; ++k)
      EXPECT_NEAR(b.tokens.data[static_cast<std::size_t>(i * 8 + k)],
                  a.tokens.data[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)] * 8 + k)], 1e-12);
  }
}

TEST(Decode, StageShapesDoubleAndOutputMatchesInput) {
  ModelConfig c;
  c.image_h = 28;
  c.image_w = 42;
  c.patch = 14;
  c.embed_dim = 8;
  c.encoder_layers = 1;
  c.heads = 2;
  c.mlp_ratio = 1;
  c.decoder_channels = {8, 6, 4, 4, 4};
  c.head_hidden = 4;
  const auto p = init_params(c, 8);
  DecoderTrace trace;
  const auto seq = encode(embed_inputs(random_rgb(28, 42, 9), nullptr, {}, p, c), p, c);
  const auto pred = decode(seq, p, c, &trace);
  EXPECT_EQ(pred.height(), 28);
  EXPECT_EQ(pred.width(), 42);
  ASSERT_EQ(trace.stage_shapes.size(), 5u);
  for (int s = 0; s <= 4; ++s)
    EXPECT_EQ(trace.stage_shapes[static_cast<std::size_t>(s)],
              (std::vector<int>{c.decoder_channels[static_cast<std::size_t>(s)], 2 << s, 3 << s}));
  for (float v : pred.values()) {
    EXPECT_GT(v, 0.f);
    EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Decode, RequiresFullRgbGrid) {
  const auto c = tiny_config();
  const auto p = init_params(c, 1);
  auto seq = embed_inputs(random_rgb(28, 28, 1), nullptr, {}, p, c);
  auto missing_cell = seq;
  missing_cell.tags[3].modality = Modality::Depth;
  EXPECT_THROW(decode(missing_cell, p, c), std::invalid_argument);
  auto no_cls = seq;
  no_cls.tags[0] = {Modality::Depth, 0};
  EXPECT_THROW(decode(no_cls, p, c), std::invalid_argument);
}

TEST(Decode, IgnoresDepthTokens) {
  const auto c = tiny_config();
  const auto p = init_params(c, 10);
  const auto d = random_depth(28, 28, 11);
  const auto latent = encode(embed_inputs(random_rgb(28, 28, 12), &d, mask_of(16, {2}), p, c), p, c);
  TokenSequence rgb_only;
  rgb_only.tokens = ad::Tensor({17, c.embed_dim});
  std::copy_n(latent.tokens.data.begin(), 17 * c.embed_dim, rgb_only.tokens.data.begin());
  rgb_only.tags.assign(latent.tags.begin(), latent.tags.begin() + 17);
  EXPECT_EQ(decode(latent, p, c), decode(rgb_only, p, c));
}

TEST(Forward, DeterministicAndPositive) {
  const auto c = tiny_config();
  const auto p = init_params(c, 13);
  const auto rgb = random_rgb(28, 28, 14);
  const auto d = random_depth(28, 28, 15, 0.2);
  const auto mask = mask_of(16, {0, 4, 8});
  const auto a = forward(rgb, &d, mask, p, c), b = forward(rgb, &d, mask, p, c);
  EXPECT_EQ(a.prediction, b.prediction);
  for (float v : a.prediction.values()) EXPECT_GT(v, 0.f);
}

TEST(Forward, FullMaskEqualsMonocular) {
  const auto c = tiny_config();
  const auto p = init_params(c, 16);
  const auto rgb = random_rgb(28, 28, 17);
  const auto d = random_depth(28, 28, 18);
  EXPECT_EQ(forward(rgb, &d, TokenMask(16, 1), p, c).prediction, forward(rgb, nullptr, {}, p, c).prediction);
}

TEST(Forward, DepthChangesPredictionOnlyThroughAttention) {
  const auto c = tiny_config();
  const auto p = init_params(c, 19);
  const auto rgb = random_rgb(28, 28, 20);
  const auto d = random_depth(28, 28, 21);
  const auto with = forward(rgb, &d, TokenMask(16, 0), p, c);
  const auto without = forward(rgb, nullptr, {}, p, c);
  EXPECT_NE(with.prediction, without.prediction);
  EXPECT_EQ(with.prediction.height(), without.prediction.height());
}

TEST(Forward, AttentionRowsSumToOne) {
  const auto c = tiny_config();
  const auto p = init_params(c, 22);
  const auto d = random_depth(28, 28, 23);
  const auto r = forward(random_rgb(28, 28, 24), &d, mask_of(16, {1, 3}), p, c);
  const auto& a = r.attention;
  EXPECT_EQ(a.length, 1 + 16 + 14);
  EXPECT_EQ(a.heads, c.heads);
  for (int h = 0; h < a.heads; ++h)
    for (int q = 0; q < a.length; ++q) {
      double s = 0.0;
      for (int k = 0; k < a.length; ++k) s += a.weight(h, q, k);
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
}

TEST(Loss, MaskedL1Cases) {
  const DepthMap gt(2, 2, std::vector<float>{1, 2, 0, 4});
  EXPECT_EQ(masked_l1_loss(gt, gt).loss, 0.0);
  DepthMap off = gt;
  for (auto& v : off.values()) v += 0.5f;
  const auto l = masked_l1_loss(off, gt);
  EXPECT_DOUBLE_EQ(l.loss, 0.5);
  EXPECT_EQ(l.count, 3);
  const auto e = masked_l1_loss(off, DepthMap(2, 2, 0.f));
  EXPECT_EQ(e.loss, 0.0);
  EXPECT_TRUE(e.empty());
  EXPECT_THROW(masked_l1_loss(gt, DepthMap(1, 4, 1.f)), std::invalid_argument);
}

TrainExample example(const ModelConfig& c, std::uint64_t seed, const TokenMask& mask) {
  TrainExample ex;
  ex.rgb = random_rgb(c.image_h, c.image_w, seed);
  ex.input_depth = random_depth(c.image_h, c.image_w, seed + 1, 0.1);
  ex.gt_depth = random_depth(c.image_h, c.image_w, seed + 2, 0.1);
  ex.mask = mask;
  return ex;
}

TEST(Gradients, ZeroValidPixelsGiveZeroGradients) {
  const auto c = tiny_config();
  const auto p = init_params(c, 25);
  auto ex = example(c, 26, mask_of(16, {0}));
  ex.gt_depth = DepthMap(28, 28, 0.f);
  const auto g = gradients({ex, ex}, p, c);
  EXPECT_EQ(g.contributing, 0);
  EXPECT_EQ(g.loss, 0.0);
  for (const auto& [name, v] : g.grads)
    for (double x : v) ASSERT_EQ(x, 0.0) << name;
}

TEST(Gradients, DroppedDepthTokensFeedNothing) {
  const auto c = tiny_config();
  const auto p = init_params(c, 27);
  const auto g = gradients({example(c, 28, TokenMask(16, 1))}, p, c);
  for (double x : g.grads.at("backbone.depth_patch_proj.weight")) EXPECT_EQ(x, 0.0);
  for (double x : g.grads.at("backbone.depth_patch_proj.bias")) EXPECT_EQ(x, 0.0);
  const auto& mod = g.grads.at("backbone.modality_emb");
  for (int k = 0; k < c.embed_dim; ++k) EXPECT_EQ(mod[static_cast<std::size_t>(c.embed_dim + k)], 0.0);
  EXPECT_NE(std::count(mod.begin(), mod.begin() + c.embed_dim, 0.0), c.embed_dim);
}

TEST(Gradients, MatchCentralDifferences) {
  const auto c = tiny_config();
  auto p = init_params(c, 29);
  const std::vector<TrainExample> batch{example(c, 30, mask_of(16, {1, 5, 6})), example(c, 33, mask_of(16, {0, 15}))};
  const auto g = gradients(batch, p, c);
  Rng rng(34);
  std::vector<std::string> names;
  for (const auto& [name, _] : p.tensors) names.push_back(name);
  const double eps = 1e-6;
  int checked = 0;
  for (int trial = 0; trial < 60; ++trial) {
    const auto& name = names[rng.below(names.size())];
    auto& t = p.at(name);
    const auto i = rng.below(t.numel());
    const double orig = t.data[i];
    t.data[i] = orig + eps;
    const double lp = gradients(batch, p, c).loss;
    t.data[i] = orig - eps;
    const double lm = gradients(batch, p, c).loss;
    t.data[i] = orig;
    const double numeric = (lp - lm) / (2 * eps);
    const double analytic = g.grads.at(name)[i];
    EXPECT_NEAR(analytic, numeric, 1e-3 * std::max(std::abs(numeric), 1e-4)) << name << "[" << i << "]";
    ++checked;
  }
  EXPECT_EQ(checked, 60);
}

TEST(Gradients, ThreadCountDoesNotChangeResult) {
  const auto c = tiny_config();
  const auto p = init_params(c, 35);
  std::vector<TrainExample> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(example(c, 40 + 3 * static_cast<std::uint64_t>(i), mask_of(16, {i})));
  const auto a = gradients(batch, p, c, 1), b = gradients(batch, p, c, 3);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.grads, b.grads);
}

TEST(Attention, IdentityConstructionPeaksAtColocatedCell) {
  const auto [c, p] = identity_attention_model(4, 4, 4);
  const auto d = random_depth(c.image_h, c.image_w, 50);
  const auto r = forward(random_rgb(c.image_h, c.image_w, 51), &d, mask_of(16, {6}), p, c);
  for (int cell : {0, 5, 10, 15}) {
    const auto hm = extract_attention(r.attention, cell / 4, cell % 4, 4, 4);
    EXPECT_FALSE(hm.degenerate);
    EXPECT_FLOAT_EQ(hm.map[static_cast<std::size_t>(cell)], 1.f);
    for (int k = 0; k < 16; ++k)
      if (k != cell) {
        EXPECT_LT(hm.map[static_cast<std::size_t>(k)], 1e-6f);
      }
    const auto w = r.attention.query_to_rgb(r.attention.depth_token_index(cell));
    EXPECT_EQ(std::max_element(w.begin(), w.end()) - w.begin(), cell);
  }
}

TEST(Attention, HeatmapNormalizedAndErrors) {
  const auto c = tiny_config();
  const auto p = init_params(c, 52);
  const auto d = random_depth(28, 28, 53);
  const auto r = forward(random_rgb(28, 28, 54), &d, mask_of(16, {2}), p, c);
  const auto hm = extract_attention(r.attention, 1, 1, 28, 28);
  const auto [lo, hi] = std::minmax_element(hm.map.values().begin(), hm.map.values().end());
  EXPECT_FLOAT_EQ(*lo, 0.f);
  EXPECT_FLOAT_EQ(*hi, 1.f);
  EXPECT_THROW(extract_attention(r.attention, 0, 2, 28, 28), std::invalid_argument);
  EXPECT_THROW(extract_attention(r.attention, 4, 0, 28, 28), std::invalid_argument);
}

TEST(Attention, UniformWeightsAreDegenerate) {
  AttentionRecord a;
  a.heads = 1;
  a.length = 3;
  a.grid_h = 1;
  a.grid_w = 2;
  a.tags = {{Modality::Rgb, 0}, {Modality::Rgb, 1}, {Modality::Depth, 0}};
  a.weights.assign(9, 1.0 / 3.0);
  const auto hm = extract_attention(a, 0, 0, 4, 4);
  EXPECT_TRUE(hm.degenerate);
  for (float v : hm.map.values()) EXPECT_EQ(v, 0.f);
}

}  // namespace
}  // namespace mdm
