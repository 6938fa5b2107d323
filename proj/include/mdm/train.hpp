// Copyright 2026 The mdm-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <functional>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mdm/masking.hpp"
#include "mdm/model.hpp"
#include "mdm/optim.hpp"
#include "mdm/rng.hpp"

namespace mdm {

/// A dataset entry: RGB, the sensor depth fed to the model, and the perfect depth it is supervised with.
struct TrainSample {
  RgbImage rgb;
  DepthMap input_depth;
  DepthMap gt_depth;
};

struct AugmentConfig {
  bool enabled = true;
  double min_area = 0.5;  // random resized crop keeps this fraction of the area or more
  double flip_prob = 0.5;
};

struct TrainConfig {
  int batch_size = 8;
  std::int64_t steps = 500;
  std::uint64_t seed = 0;
  int threads = 1;
  LrSchedule schedule;
  AdamWConfig optimizer;
  MaskingConfig masking;
  AugmentConfig augment;
};

struct TraceRow {
  std::int64_t step = 0;  // 1-based
  double loss = 0.0;
  LearningRates lr;
  double grad_norm = 0.0;
  std::int64_t valid_pixels = 0;
  int masked_tokens = 0;
};

struct LossTrace {
  std::vector<TraceRow> rows;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, LossTrace trace) : std::runtime_error(what), trace_(std::move(trace)) {}
  const LossTrace& trace() const { return trace_; }

 private:
  LossTrace trace_;
};

inline constexpr std::string_view kLossCsvHeader = "step,loss,lr_backbone,lr_rest,grad_norm,valid_pixels,masked_tokens";

inline void write_loss_csv_header(std::ostream& os) { os << "# mdm-loss v1\n" << kLossCsvHeader << '\n'; }

inline void write_loss_csv_row(std::ostream& os, const TraceRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%lld,%d", static_cast<long long>(r.step), r.loss, r.lr.backbone,
                r.lr.rest, r.grad_norm, static_cast<long long>(r.valid_pixels), r.masked_tokens);
  os << buf << '\n';
}

/// Crop/flip one sample to the model input size and draw its token mask.
inline TrainExample prepare_example(const TrainSample& s, const ModelConfig& mc, const TrainConfig& tc, Rng& rng) {
  if (!s.input_depth.same_shape(s.rgb) || !s.gt_depth.same_shape(s.rgb))
    throw std::invalid_argument("train: sample maps differ in size");
  int y0 = 0, x0 = 0, ch = s.rgb.height(), cw = s.rgb.width();
  bool flip = false;
  if (tc.augment.enabled) {
    const double area = rng.uniform(tc.augment.min_area, 1.0);
    const double side = std::sqrt(area);
    ch = std::clamp(static_cast<int>(std::lround(side * s.rgb.height())), 1, s.rgb.height());
    cw = std::clamp(static_cast<int>(std::lround(side * s.rgb.width())), 1, s.rgb.width());
    y0 = rng.uniform_int(0, s.rgb.height() - ch);
    x0 = rng.uniform_int(0, s.rgb.width() - cw);
    flip = rng.bernoulli(tc.augment.flip_prob);
  }
  TrainExample ex;
  auto fit_rgb = [&](const RgbImage& img) {
    auto c = crop(img, y0, x0, ch, cw);
    if (c.height() != mc.image_h || c.width() != mc.image_w) c = bilinear_resize(c, mc.image_h, mc.image_w);
    return flip ? flip_horizontal(c) : c;
  };
  auto fit_depth = [&](const DepthMap& d) {
    auto c = nearest_resize(crop(d, y0, x0, ch, cw), mc.image_h, mc.image_w);
    return flip ? flip_horizontal(c) : c;
  };
  ex.rgb = fit_rgb(s.rgb);
  ex.input_depth = fit_depth(s.input_depth);
  ex.gt_depth = fit_depth(s.gt_depth);
  MaskingConfig m = tc.masking;
  m.patch = mc.patch;
  const auto pv = patch_validity(validity_of(ex.input_depth), mc.patch);
  ex.mask = sample_token_mask(pv, sample_mask_ratio(m, rng), m, rng);
  return ex;
}

/// Batch for a step: indices drawn without replacement (with reuse once the dataset is exhausted).
inline std::vector<TrainExample> sample_batch(const std::vector<TrainSample>& data, const ModelConfig& mc,
                                              const TrainConfig& tc, std::int64_t step) {
  Rng rng(Rng::derive(tc.seed, static_cast<std::uint64_t>(step)));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<TrainExample> batch;
  for (int b = 0; b < tc.batch_size; ++b) {
    const std::size_t k = static_cast<std::size_t>(b) % data.size();
    if (k == 0) {
      for (std::size_t i = 0; i + 1 < order.size(); ++i) std::swap(order[i], order[i + rng.below(order.size() - i)]);
    }
    batch.push_back(prepare_example(data[order[k]], mc, tc, rng));
  }
  return batch;
}

struct TrainState {
  ModelParams params;
  AdamState optim;
};

/// Runs steps [state.optim.step + 1, tc.steps]. Each step's randomness depends only on
/// (seed, step), so a resumed run reproduces the uninterrupted trace.
inline LossTrace train_loop(const std::vector<TrainSample>& data, const ModelConfig& mc, const TrainConfig& tc,
                            TrainState& state, const std::function<void(const TraceRow&)>& on_step = {}) {
  mc.validate();
  if (data.empty()) throw std::invalid_argument("train_loop: empty dataset");
  if (tc.batch_size < 1) throw std::invalid_argument("train_loop: batch_size must be >= 1");
  check_params(state.params, mc);
  LossTrace trace;
  for (std::int64_t step = state.optim.step + 1; step <= tc.steps; ++step) {
    const auto batch = sample_batch(data, mc, tc, step);
    GradientResult g;
    try {
      g = gradients(batch, state.params, mc, tc.threads);
    } catch (const std::runtime_error& e) {
      throw TrainingDiverged(std::string(e.what()) + " at step " + std::to_string(step), trace);
    }
    TraceRow row;
    row.step = step;
    row.loss = g.loss;
    row.valid_pixels = g.valid_pixels;
    for (const auto& ex : batch) row.masked_tokens += masked_count(ex.mask);
    if (!std::isfinite(g.loss)) throw TrainingDiverged("train_loop: non-finite loss at step " + std::to_string(step), trace);
    row.lr = tc.schedule.at(step - 1);
    row.grad_norm = adamw_step(state.params, std::move(g.grads), state.optim, row.lr, tc.optimizer);
    for (const auto& [name, t] : state.params.tensors)
      for (double v : t.data)
        if (!std::isfinite(v)) {
          trace.rows.push_back(row);
          throw TrainingDiverged("train_loop: parameter '" + name + "' became non-finite at step " + std::to_string(step),
                                 trace);
        }
    trace.rows.push_back(row);
    if (on_step) on_step(row);
  }
  return trace;
}

inline LossTrace train_loop(const std::vector<TrainSample>& data, const ModelConfig& mc, const TrainConfig& tc,
                            ModelParams& params) {
  TrainState st{params, {}};
  st.optim = AdamState::zeros_like(st.params);
  auto trace = train_loop(data, mc, tc, st);
  params = std::move(st.params);
  return trace;
}

}  // namespace mdm
