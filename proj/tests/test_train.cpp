// Copyright 2026 The mdm-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "mdm/train.hpp"
#include "model_fixtures.hpp"

namespace mdm {
namespace {

using testing::random_depth;
using testing::random_rgb;
using testing::tiny_config;

std::vector<TrainSample> dataset(int count, int h, int w) {
  std::vector<TrainSample> data;
  for (int i = 0; i < count; ++i) {
    const auto s = static_cast<std::uint64_t>(10 * i);
    data.push_back({random_rgb(h, w, s), random_depth(h, w, s + 1, 0.2), random_depth(h, w, s + 2, 0.05)});
  }
  return data;
}

TrainConfig quick_config(std::int64_t steps) {
  TrainConfig tc;
  tc.batch_size = 2;
  tc.steps = steps;
  tc.seed = 9;
  tc.schedule.base_backbone = 1e-3;
  tc.schedule.base_rest = 1e-3;
  tc.schedule.warmup = 2;
  return tc;
}

TEST(Train, PrepareExampleFitsModelSize) {
  const auto c = tiny_config();
  const auto data = dataset(1, 40, 36);
  auto tc = quick_config(1);
  Rng rng(1);
  for (int i = 0; i < 10; ++i) {
    const auto ex = prepare_example(data[0], c, tc, rng);
    EXPECT_EQ(ex.rgb.height(), 28);
    EXPECT_EQ(ex.input_depth.width(), 28);
    EXPECT_EQ(ex.gt_depth.height(), 28);
    EXPECT_EQ(ex.mask.size(), 16u);
    EXPECT_GE(masked_count(ex.mask), target_mask_count(0.6, 16));
  }
}

TEST(Train, DepthAugmentationNeverInventsValues) {
  const auto c = tiny_config();
  const auto data = dataset(1, 56, 56);
  auto tc = quick_config(1);
  std::set<float> src(data[0].input_depth.values().begin(), data[0].input_depth.values().end());
  Rng rng(2);
  for (int i = 0; i < 20; ++i) {
    const auto ex = prepare_example(data[0], c, tc, rng);
    for (float v : ex.input_depth.values()) ASSERT_TRUE(src.count(v));
  }
}

TEST(Train, WithoutAugmentationIsIdentityResize) {
  const auto c = tiny_config();
  const auto data = dataset(1, 28, 28);
  auto tc = quick_config(1);
  tc.augment.enabled = false;
  Rng rng(3);
  const auto ex = prepare_example(data[0], c, tc, rng);
  EXPECT_EQ(ex.rgb, data[0].rgb);
  EXPECT_EQ(ex.gt_depth, data[0].gt_depth);
}

TEST(Train, SeedIdenticalRunsGiveIdenticalTraces) {
  const auto c = tiny_config();
  const auto data = dataset(3, 28, 28);
  const auto tc = quick_config(4);
  auto p1 = init_params(c, 1), p2 = init_params(c, 1);
  const auto t1 = train_loop(data, c, tc, p1);
  const auto t2 = train_loop(data, c, tc, p2);
  ASSERT_EQ(t1.rows.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(t1.rows[i].loss, t2.rows[i].loss);
    EXPECT_EQ(t1.rows[i].grad_norm, t2.rows[i].grad_norm);
  }
  EXPECT_EQ(p1, p2);
  auto other = tc;
  other.seed = 10;
  auto p3 = init_params(c, 1);
  EXPECT_NE(train_loop(data, c, other, p3).rows[0].loss, t1.rows[0].loss);
}

TEST(Train, TraceReplaysSchedule) {
  const auto c = tiny_config();
  const auto data = dataset(2, 28, 28);
  const auto tc = quick_config(5);
  auto p = init_params(c, 2);
  const auto t = train_loop(data, c, tc, p);
  for (const auto& row : t.rows) {
    EXPECT_EQ(row.lr, tc.schedule.at(row.step - 1));
    EXPECT_GT(row.valid_pixels, 0);
  }
  EXPECT_EQ(t.rows.front().lr.backbone, 0.0);
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  const auto c = tiny_config();
  const auto data = dataset(3, 28, 28);
  const auto tc = quick_config(6);
  TrainState full{init_params(c, 4), {}};
  const auto t_full = train_loop(data, c, tc, full);

  auto first = tc;
  first.steps = 3;
  TrainState part{init_params(c, 4), {}};
  const auto t_a = train_loop(data, c, first, part);
  const auto t_b = train_loop(data, c, tc, part);
  ASSERT_EQ(t_a.rows.size() + t_b.rows.size(), 6u);
  EXPECT_EQ(t_b.rows.front().step, 4);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(t_b.rows[i].loss, t_full.rows[3 + i].loss);
  EXPECT_EQ(part.params, full.params);
  EXPECT_EQ(part.optim, full.optim);
}

TEST(Train, ThreadCountDoesNotChangeTrace) {
  const auto c = tiny_config();
  const auto data = dataset(4, 28, 28);
  auto tc = quick_config(2);
  tc.batch_size = 4;
  auto p1 = init_params(c, 5), p2 = init_params(c, 5);
  const auto a = train_loop(data, c, tc, p1);
  tc.threads = 4;
  const auto b = train_loop(data, c, tc, p2);
  EXPECT_EQ(a.rows.back().loss, b.rows.back().loss);
  EXPECT_EQ(p1, p2);
}

TEST(Train, NonFiniteLossAbortsWithTrace) {
  const auto c = tiny_config();
  const auto data = dataset(2, 28, 28);
  auto p = init_params(c, 6);
  p.at("head.conv2.bias").data[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    train_loop(data, c, quick_config(3), p);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_TRUE(e.trace().rows.empty());
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos);
  }
}

TEST(Train, RejectsBadInputs) {
  const auto c = tiny_config();
  auto p = init_params(c, 7);
  EXPECT_THROW(train_loop({}, c, quick_config(1), p), std::invalid_argument);
  auto data = dataset(1, 28, 28);
  data[0].gt_depth = DepthMap(10, 10, 1.f);
  EXPECT_THROW(train_loop(data, c, quick_config(1), p), std::invalid_argument);
  EXPECT_EQ(p, init_params(c, 7));
}

TEST(LossCsv, Format) {
  std::ostringstream os;
  write_loss_csv_header(os);
  write_loss_csv_row(os, {3, 0.25, {1e-5, 1e-4}, 2.5, 100, 12});
  EXPECT_EQ(os.str(),
            "# mdm-loss v1\nstep,loss,lr_backbone,lr_rest,grad_norm,valid_pixels,masked_tokens\n3,0.25,1e-05,0.0001,2.5,100,12\n");
}

}  // namespace
}  // namespace mdm
