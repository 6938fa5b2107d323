// Copyright 2026 The mdm-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "mdm/autodiff.hpp"
#include "mdm/core.hpp"
#include "mdm/rng.hpp"

namespace mdm::ad {
namespace {

Tensor random_tensor(Rng& rng, std::vector<int> shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = scale * rng.uniform(-1.0, 1.0);
  return t;
}

// sum_i w_i * x_i with fixed weights, so every output entry is checked.
Var weighted_sum(Tape& t, Var x, std::vector<double> w) {
  const auto& xv = t.value(x).data;
  double s = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) s += w[i] * xv[i];
  return t.push(Tensor({1}, {s}), t.requires_grad(x), [x, w = std::move(w)](Tape& tp, int self) {
    const double g = tp.grad(Var{self})[0];
    auto& gx = tp.grad_mut(x);
    for (std::size_t i = 0; i < w.size(); ++i) gx[i] += g * w[i];
  });
}

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

// Compares analytic gradients of every input against central differences.
void gradcheck(const std::vector<Tensor>& inputs, const Builder& f, std::uint64_t seed, double tol = 1e-6) {
  Rng rng(seed);
  std::vector<double> weights;
  auto eval = [&](const std::vector<Tensor>& in, std::vector<std::vector<double>>* grads) {
    Tape t;
    std::vector<Var> leaves;
    for (const auto& x : in) leaves.push_back(t.leaf(x));
    const Var out = f(t, leaves);
    if (weights.empty())
      for (std::size_t i = 0; i < t.value(out).numel(); ++i) weights.push_back(rng.uniform(-1.0, 1.0));
    const Var s = weighted_sum(t, out, weights);
    if (grads) {
      t.backward(s);
      for (Var l : leaves) {
        auto g = t.grad(l);
        if (g.empty()) g.assign(t.value(l).numel(), 0.0);
        grads->push_back(g);
      }
    }
    return t.value(s).data[0];
  };
  std::vector<std::vector<double>> analytic;
  eval(inputs, &analytic);
  const double eps = 1e-6;
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    for (std::size_t i = 0; i < inputs[a].numel(); ++i) {
      auto plus = inputs, minus = inputs;
      plus[a].data[i] += eps;
      minus[a].data[i] -= eps;
      const double numeric = (eval(plus, nullptr) - eval(minus, nullptr)) / (2 * eps);
      const double an = analytic[a][i];
      EXPECT_NEAR(an, numeric, tol * std::max(1.0, std::abs(numeric))) << "input " << a << " entry " << i;
    }
  }
}

TEST(Autodiff, Linear) {
  Rng rng(1);
  gradcheck({random_tensor(rng, {3, 4}), random_tensor(rng, {4, 5}), random_tensor(rng, {5})},
            [](Tape& t, const std::vector<Var>& v) { return linear(t, v[0], v[1], v[2]); }, 11);
}

TEST(Autodiff, AddAndAddRow) {
  Rng rng(2);
  gradcheck({random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4}), random_tensor(rng, {4})},
            [](Tape& t, const std::vector<Var>& v) { return add_row(t, add(t, v[0], v[1]), v[2]); }, 12);
}

TEST(Autodiff, GatherConcatSlice) {
  Rng rng(3);
  gradcheck({random_tensor(rng, {4, 3}), random_tensor(rng, {2, 3})},
            [](Tape& t, const std::vector<Var>& v) {
              const Var g = gather_rows(t, v[0], {2, 0, 2, 3});
              const Var c = concat_rows(t, {g, v[1]});
              return slice_cols(t, slice_rows(t, c, 1, 4), 1, 2);
            },
            13);
}

TEST(Autodiff, LayerNorm) {
  Rng rng(4);
  gradcheck({random_tensor(rng, {3, 6}), random_tensor(rng, {6}), random_tensor(rng, {6})},
            [](Tape& t, const std::vector<Var>& v) { return layer_norm(t, v[0], v[1], v[2]); }, 14);
}

TEST(Autodiff, GeluAndExp) {
  Rng rng(5);
  gradcheck({random_tensor(rng, {2, 5}, 2.0)},
            [](Tape& t, const std::vector<Var>& v) { return exp_scaled(t, gelu(t, v[0]), 3.0); }, 15);
}

TEST(Autodiff, Attention) {
  Rng rng(6);
  gradcheck({random_tensor(rng, {5, 4}), random_tensor(rng, {5, 4}), random_tensor(rng, {5, 4})},
            [](Tape& t, const std::vector<Var>& v) { return attention(t, v[0], v[1], v[2], 2); }, 16);
}

TEST(Autodiff, AttentionRowsAreDistributions) {
  Rng rng(7);
  Tape t;
  const Var q = t.constant(random_tensor(rng, {6, 8}, 3.0));
  const Var k = t.constant(random_tensor(rng, {6, 8}, 3.0));
  std::vector<double> probs;
  attention(t, q, k, q, 4, &probs);
  ASSERT_EQ(probs.size(), 4u * 6 * 6);
  for (std::size_t r = 0; r < 4 * 6; ++r) {
    double s = 0.0;
    for (int j = 0; j < 6; ++j) s += probs[r * 6 + static_cast<std::size_t>(j)];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Autodiff, TokensToChw) {
  Rng rng(8);
  const auto x = random_tensor(rng, {6, 2});
  Tape t;
  const Var y = tokens_to_chw(t, t.constant(x), 2, 3);
  EXPECT_EQ(t.shape(y), (std::vector<int>{2, 2, 3}));
  EXPECT_EQ(t.value(y).data[1 * 6 + 4], x.data[4 * 2 + 1]);
  gradcheck({x}, [](Tape& tp, const std::vector<Var>& v) { return tokens_to_chw(tp, v[0], 2, 3); }, 17);
}

TEST(Autodiff, Conv2d) {
  Rng rng(9);
  gradcheck({random_tensor(rng, {2, 4, 5}), random_tensor(rng, {3, 2, 3, 3}), random_tensor(rng, {3})},
            [](Tape& t, const std::vector<Var>& v) { return conv2d(t, v[0], v[1], v[2]); }, 18);
  gradcheck({random_tensor(rng, {2, 3, 3}), random_tensor(rng, {2, 2, 1, 1}), random_tensor(rng, {2})},
            [](Tape& t, const std::vector<Var>& v) { return conv2d(t, v[0], v[1], v[2]); }, 19);
}

TEST(Autodiff, Conv2dMatchesDirectSum) {
  Rng rng(10);
  const auto x = random_tensor(rng, {2, 4, 5}), w = random_tensor(rng, {3, 2, 3, 3}), b = random_tensor(rng, {3});
  Tape t;
  const auto& y = t.value(conv2d(t, t.constant(x), t.constant(w), t.constant(b))).data;
  for (int o = 0; o < 3; ++o)
    for (int yy = 0; yy < 4; ++yy)
      for (int xx = 0; xx < 5; ++xx) {
        double s = b.data[static_cast<std::size_t>(o)];
        for (int i = 0; i < 2; ++i)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int sy = yy + ky - 1, sx = xx + kx - 1;
              if (sy < 0 || sy >= 4 || sx < 0 || sx >= 5) continue;
              s += w.data[static_cast<std::size_t>(((o * 2 + i) * 3 + ky) * 3 + kx)] *
                   x.data[static_cast<std::size_t>((i * 4 + sy) * 5 + sx)];
            }
        EXPECT_NEAR(y[static_cast<std::size_t>((o * 4 + yy) * 5 + xx)], s, 1e-12);
      }
}

TEST(Autodiff, ConvTranspose) {
  Rng rng(11);
  const auto x = random_tensor(rng, {2, 2, 3}), w = random_tensor(rng, {2, 3, 2, 2}), b = random_tensor(rng, {3});
  Tape t;
  const Var y = conv_transpose2x2(t, t.constant(x), t.constant(w), t.constant(b));
  EXPECT_EQ(t.shape(y), (std::vector<int>{3, 4, 6}));
  // Output pixel (2y+dy, 2x+dx) sees only input pixel (y, x).
  const auto& yv = t.value(y).data;
  const double expect = b.data[1] + w.data[(0 * 3 + 1) * 4 + 3] * x.data[0 * 6 + 1 * 3 + 2] +
                        w.data[(1 * 3 + 1) * 4 + 3] * x.data[1 * 6 + 1 * 3 + 2];
  EXPECT_NEAR(yv[(1 * 4 + 3) * 6 + 5], expect, 1e-12);
  gradcheck({x, w, b}, [](Tape& tp, const std::vector<Var>& v) { return conv_transpose2x2(tp, v[0], v[1], v[2]); }, 20);
}

TEST(Autodiff, ResizeBilinear) {
  Rng rng(12);
  const auto ty = bilinear_taps(3, 7), tx = bilinear_taps(4, 5);
  gradcheck({random_tensor(rng, {2, 3, 4})},
            [&](Tape& t, const std::vector<Var>& v) { return resize_bilinear(t, v[0], ty, tx); }, 21);
}

TEST(Autodiff, MaskedL1) {
  Rng rng(13);
  const auto x = random_tensor(rng, {8});
  std::vector<double> target(8);
  for (auto& v : target) v = rng.uniform(-1.0, 1.0);
  const std::vector<std::uint8_t> valid{1, 0, 1, 1, 0, 1, 1, 1};
  Tape t;
  const Var l = masked_l1(t, t.leaf(x), target, valid);
  double expect = 0.0;
  for (std::size_t i = 0; i < 8; ++i)
    if (valid[i]) expect += std::abs(x.data[i] - target[i]);
  EXPECT_NEAR(t.value(l).data[0], expect / 6.0, 1e-12);
  gradcheck({x}, [&](Tape& tp, const std::vector<Var>& v) { return masked_l1(tp, v[0], target, valid); }, 22);
}

TEST(Autodiff, MaskedL1WithoutValidEntriesHasNoGradient) {
  Tape t;
  const Var x = t.leaf(Tensor({3}, 1.0));
  const Var l = masked_l1(t, x, {0.0, 0.0, 0.0}, {0, 0, 0});
  EXPECT_EQ(t.value(l).data[0], 0.0);
  t.backward(l);
  EXPECT_TRUE(t.grad(x).empty());
}

TEST(Autodiff, ConstantsReceiveNoGradient) {
  Tape t;
  const Var c = t.constant(Tensor({2, 2}, 1.0));
  const Var w = t.leaf(Tensor({2, 2}, 0.5));
  const Var y = linear(t, c, w, t.constant(Tensor({2}, 0.0)));
  t.backward(masked_l1(t, y, {0, 0, 0, 0}, {1, 1, 1, 1}));
  EXPECT_TRUE(t.grad(c).empty());
  EXPECT_EQ(t.grad(w).size(), 4u);
}

TEST(Autodiff, ShapeErrors) {
  Tape t;
  const Var a = t.constant(Tensor({2, 3}));
  const Var b = t.constant(Tensor({2, 3}));
  EXPECT_THROW(linear(t, a, b, t.constant(Tensor({3}))), std::invalid_argument);
  EXPECT_THROW(attention(t, a, a, a, 2), std::invalid_argument);
  EXPECT_THROW(t.backward(a), std::invalid_argument);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1.0}), std::invalid_argument);
}

}  // namespace
}  // namespace mdm::ad
