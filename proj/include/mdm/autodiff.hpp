// Copyright 2026 The mdm-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mdm::ad {

/// Dense row-major double tensor.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)), data(numel_of(shape), fill) {}
  Tensor(std::vector<int> s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != numel_of(shape)) throw std::invalid_argument("Tensor: value count does not match shape");
  }

  static std::size_t numel_of(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }
  std::size_t numel() const { return data.size(); }
  int dim(std::size_t i) const { return shape.at(i); }
  int rank() const { return static_cast<int>(shape.size()); }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline std::string shape_string(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

struct Var {
  int id = -1;
};

/// Records operations for a single reverse sweep. Nodes whose inputs are all
/// constants carry no backward function.
class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  Var constant(Tensor t) { return push(std::move(t), false, nullptr); }
  Var leaf(Tensor t) { return push(std::move(t), true, nullptr); }

  const Tensor& value(Var v) const { return node(v).value; }
  const std::vector<int>& shape(Var v) const { return node(v).value.shape; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Gradient of the last backward() target; empty when nothing flowed into v.
  const std::vector<double>& grad(Var v) const { return node(v).grad; }

  std::vector<double>& grad_mut(Var v) {
    auto& n = nodes_.at(static_cast<std::size_t>(v.id));
    if (n.grad.empty()) n.grad.assign(n.value.numel(), 0.0);
    return n.grad;
  }

  Var push(Tensor value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, requires_grad ? std::move(backward) : nullptr});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  void backward(Var target) {
    if (node(target).value.numel() != 1) throw std::invalid_argument("Tape::backward: target must be a scalar");
    for (auto& n : nodes_) n.grad.clear();
    if (!node(target).requires_grad) return;
    grad_mut(target)[0] = 1.0;
    for (int i = target.id; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && !n.grad.empty()) n.backward(*this, i);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    bool requires_grad = false;
    Backward backward;
  };

  const Node& node(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw std::out_of_range("Tape: invalid variable");
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  std::vector<Node> nodes_;
};

namespace detail {

inline void require(bool cond, const char* what) {
  if (!cond) throw std::invalid_argument(what);
}

inline bool any_grad(const Tape& t, std::initializer_list<Var> vs) {
  return std::any_of(vs.begin(), vs.end(), [&](Var v) { return t.requires_grad(v); });
}

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    double* ci = c + static_cast<std::size_t>(i) * n;
    const double* ai = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m,k] += A[m,n] * B[k,n]^T
inline void gemm_nt(const double* a, const double* b, double* c, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * n;
    double* ci = c + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double* bp = b + static_cast<std::size_t>(p) * n;
      double s = 0.0;
      for (int j = 0; j < n; ++j) s += ai[j] * bp[j];
      ci[p] += s;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
inline void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    const double* bi = b + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      double* cp = c + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

}  // namespace detail

/// X[m,k] * W[k,n] + b[n]
inline Var linear(Tape& t, Var x, Var w, Var b) {
  const auto& xs = t.shape(x);
  const auto& ws = t.shape(w);
  detail::require(xs.size() == 2 && ws.size() == 2 && xs[1] == ws[0], "linear: shape mismatch");
  const int m = xs[0], k = xs[1], n = ws[1];
  detail::require(t.shape(b) == std::vector<int>{n}, "linear: bias shape mismatch");
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) std::copy_n(t.value(b).data.data(), n, out.data.data() + static_cast<std::size_t>(i) * n);
  detail::gemm_nn(t.value(x).data.data(), t.value(w).data.data(), out.data.data(), m, k, n);
  return t.push(std::move(out), detail::any_grad(t, {x, w, b}), [x, w, b, m, k, n](Tape& tp, int self) {
    const auto& g = tp.grad(Var{self});
    if (tp.requires_grad(x)) detail::gemm_nt(g.data(), tp.value(w).data.data(), tp.grad_mut(x).data(), m, n, k);
    if (tp.requires_grad(w)) detail::gemm_tn(tp.value(x).data.data(), g.data(), tp.grad_mut(w).data(), m, k, n);
    if (tp.requires_grad(b)) {
      auto& gb = tp.grad_mut(b);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) gb[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i) * n + j];
    }
  });
}

inline Var add(Tape& t, Var a, Var b) {
  detail::require(t.shape(a) == t.shape(b), "add: shape mismatch");
  Tensor out = t.value(a);
  const auto& bv = t.value(b).data;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += bv[i];
  return t.push(std::move(out), detail::any_grad(t, {a, b}), [a, b](Tape& tp, int self) {
    const auto& g = tp.grad(Var{self});
    for (Var v : {a, b}) {
      if (!tp.requires_grad(v)) continue;
      auto& gv = tp.grad_mut(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

/// X[m,n] + r, where r holds n values (any shape); r is broadcast over rows.
inline Var add_row(Tape& t, Var x, Var r) {
  const auto& xs = t.shape(x);
  detail::require(xs.size() == 2, "add_row: x must be a matrix");
  const int m = xs[0], n = xs[1];
  detail::require(t.value(r).numel() == static_cast<std::size_t>(n), "add_row: row length mismatch");
  Tensor out = t.value(x);
  const auto& rv = t.value(r).data;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.data[static_cast<std::size_t>(i) * n + j] += rv[static_cast<std::size_t>(j)];
  return t.push(std::move(out), detail::any_grad(t, {x, r}), [x, r, m, n](Tape& tp, int self) {
    const auto& g = tp.grad(Var{self});
    if (tp.requires_grad(x)) {
      auto& gx = tp.grad_mut(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (tp.requires_grad(r)) {
      auto& gr = tp.grad_mut(r);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) gr[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i) * n + j];
    }
  });
}

/// Rows of table[r,n] selected by index.
inline Var gather_rows(Tape& t, Var table, std::vector<int> rows) {
  const auto& ts = t.shape(table);
  detail::require(ts.size() == 2, "gather_rows: table must be a matrix");
  const int n = ts[1];
  Tensor out({static_cast<int>(rows.size()), n});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    detail::require(rows[i] >= 0 && rows[i] < ts[0], "gather_rows: index out of range");
    std::copy_n(t.value(table).data.data() + static_cast<std::size_t>(rows[i]) * n, n, out.data.data() + i * n);
  }
  return t.push(std::move(out), t.requires_grad(table), [table, rows = std::move(rows), n](Tape& tp, int self) {
    const auto& g = tp.grad(Var{self});
    auto& gt = tp.grad_mut(table);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (int j = 0; j < n; ++j) gt[static_cast<std::size_t>(rows[i]) * n + j] += g[i * n + j];
  });
}

inline Var concat_rows(Tape& t, const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  const int n = t.shape(parts[0]).at(1);
  int m = 0;
  bool rg = false;
  for (Var p : parts) {
    detail::require(t.shape(p).size() == 2 && t.shape(p)[1] == n, "concat_rows: column mismatch");
    m += t.shape(p)[0];
    rg = rg || t.requires_grad(p);
  }
  Tensor out({m, n});
  std::size_t off = 0;
  for (Var p : parts) {
    const auto& v = t.value(p).data;
    std::copy(v.begin(), v.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += v.size();
  }
  return t.push(std::move(out), rg, [parts](Tape& tp, int self) {
    const auto& g = tp.grad(Var{self});
    std::size_t o = 0;
    for (Var p : parts) {
      const std::size_t len = tp.value(p).numel();
      if (tp.requires_grad(p)) {
        auto& gp = tp.grad_mut(p);
        for (std::size_t i = 0; i < len; ++i) gp[i] += g[o + i];
      }
      o += len;
    }
  });
}

inline Var slice_rows(Tape& t, Var x, int begin, int count) {
  const auto& xs = t.shape(x);
  detail::require(xs.size() == 2 && begin >= 0 && count >= 0 && begin + count <= xs[0], "slice_rows: bad range");
  const int n = xs[1];
  const auto first = t.value(x).data.begin() + static_cast<std::ptrdiff_t>(begin) * n;
  Tensor out({count, n}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count) * n));
  return t.push(std::move(out), t.requires_grad(x), [x, begin, n](Tape& tp, int self) {
    const auto& g = tp.grad(Var{self});
    auto& gx = tp.grad_mut(x);
    const std::size_t off = static_cast<std::size_t>(begin) * n;
    for (std::size_t i = 0; i < g.size(); ++i) gx[off + i] += g[i];
  });
}

inline Var slice_cols(Tape& t, Var x, int begin, int count) {
  const auto& xs = t.shape(x);
  detail::require(xs.size() == 2 && begin >= 0 && count >= 0 && begin + count <= xs[1], "slice_cols: bad range");
  const int m = xs[0], n = xs[1];
  Tensor out({m, count});
  const auto& xv = t.value(x).data;
  for (int r = 0; r < m; ++r)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(r) * n + begin, count,
                out.data.begin() + static_cast<std::ptrdiff_t>(r) * count);
  return t.push(std::move(out), t.requires_grad(x), [x, begin, count, m, n](Tape& tp, int self) {
    const auto& g = tp.grad(Var{self});
    auto& gx = tp.grad_mut(x);
    for (int r = 0; r < m; ++r)
      for (int c = 0; c < count; ++c)
        gx[static_cast<std::size_t>(r) * n + begin + c] += g[static_cast<std::size_t>(r) * count + c];
  });
}

inline Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps = 1e-6) {
  const auto& xs = t.shape(x);
  detail::require(xs.size() == 2, "layer_norm: x must be a matrix");
  const int m = xs[0], n = xs[1];
  detail::require(t.value(gamma).numel() == static_cast<std::size_t>(n) && t.value(beta).numel() == static_cast<std::size_t>(n),
                  "layer_norm: affine shape mismatch");
  auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m) * n);
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m));
  Tensor out({m, n});
  const auto& xv = t.value(x).data;
  const auto& gv = t.value(gamma).data;
  const auto& bv = t.value(beta).data;
  for (int i = 0; i < m; ++i) {
    const double* row = xv.data() + static_cast<std::size_t>(i) * n;
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += row[j];
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= n;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < n; ++j) {
      const std::size_t k = static_cast<std::size_t>(i) * n + j;
      (*xhat)[k] = (row[j] - mean) * is;
      out.data[k] = gv[static_cast<std::size_t>(j)] * (*xhat)[k] + bv[static_cast<std::size_t>(j)];
    }
  }
  return t.push(std::move(out), detail::any_grad(t, {x, gamma, beta}),
                [x, gamma, beta, m, n, xhat, inv_std](Tape& tp, int self) {
                  const auto& g = tp.grad(Var{self});
                  const auto& gv = tp.value(gamma).data;
                  if (tp.requires_grad(gamma) || tp.requires_grad(beta)) {
                    auto* gg = tp.requires_grad(gamma) ? &tp.grad_mut(gamma) : nullptr;
                    auto* gb = tp.requires_grad(beta) ? &tp.grad_mut(beta) : nullptr;
                    for (int i = 0; i < m; ++i)
                      for (int j = 0; j < n; ++j) {
                        const std::size_t k = static_cast<std::size_t>(i) * n + j;
                        if (gg) (*gg)[static_cast<std::size_t>(j)] += g[k] * (*xhat)[k];
                        if (gb) (*gb)[static_cast<std::size_t>(j)] += g[k];
                      }
                  }
                  if (!tp.requires_grad(x)) return;
                  auto& gx = tp.grad_mut(x);
                  std::vector<double> dxhat(static_cast<std::size_t>(n));
                  for (int i = 0; i < m; ++i) {
                    double mean_d = 0.0, mean_dx = 0.0;
                    for (int j = 0; j < n; ++j) {
                      const std::size_t k = static_cast<std::size_t>(i) * n + j;
                      dxhat[static_cast<std::size_t>(j)] = g[k] * gv[static_cast<std::size_t>(j)];
                      mean_d += dxhat[static_cast<std::size_t>(j)];
                      mean_dx += dxhat[static_cast<std::size_t>(j)] * (*xhat)[k];
                    }
                    mean_d /= n;
                    mean_dx /= n;
                    const double is = (*inv_std)[static_cast<std::size_t>(i)];
                    for (int j = 0; j < n; ++j) {
                      const std::size_t k = static_cast<std::size_t>(i) * n + j;
                      gx[k] += is * (dxhat[static_cast<std::size_t>(j)] - mean_d - (*xhat)[k] * mean_dx);
                    }
                  }
                });
}

/// tanh-approximated GELU.
inline Var gelu(Tape& t, Var x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  Tensor out = t.value(x);
  for (auto& v : out.data) v = 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v)));
  return t.push(std::move(out), t.requires_grad(x), [x](Tape& tp, int self) {
    const auto& g = tp.grad(Var{self});
    const auto& xv = tp.value(x).data;
    auto& gx = tp.grad_mut(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double u = c * (v + 0.044715 * v * v * v);
      const double th = std::tanh(u);
      const double du = c * (1.0 + 3.0 * 0.044715 * v * v);
      gx[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
    }
  });
}

/// scale * exp(x)
inline Var exp_scaled(Tape& t, Var x, double scale) {
  Tensor out = t.value(x);
  for (auto& v : out.data) v = scale * std::exp(v);
  return t.push(std::move(out), t.requires_grad(x), [x](Tape& tp, int self) {
    const auto& g = tp.grad(Var{self});
    const auto& y = tp.value(Var{self}).data;
    auto& gx = tp.grad_mut(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i];
  });
}

/// Multi-head scaled dot-product attention over rows of q, k, v [L, n].
/// Softmax probabilities (heads x L x L) are copied to `probs_out` when given.
inline Var attention(Tape& t, Var q, Var k, Var v, int heads, std::vector<double>* probs_out = nullptr) {
  const auto& qs = t.shape(q);
  detail::require(qs.size() == 2 && t.shape(k) == qs && t.shape(v) == qs, "attention: q, k, v shapes differ");
  const int L = qs[0], n = qs[1];
  detail::require(heads > 0 && n % heads == 0, "attention: embed dim not divisible by heads");
  const int dh = n / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(heads) * L * L);
  const auto& qv = t.value(q).data;
  const auto& kv = t.value(k).data;
  const auto& vv = t.value(v).data;
  Tensor out({L, n});
  for (int h = 0; h < heads; ++h) {
    double* P = probs->data() + static_cast<std::size_t>(h) * L * L;
    for (int i = 0; i < L; ++i) {
      double* pi = P + static_cast<std::size_t>(i) * L;
      const double* qi = qv.data() + static_cast<std::size_t>(i) * n + h * dh;
      double mx = -INFINITY;
      for (int j = 0; j < L; ++j) {
        const double* kj = kv.data() + static_cast<std::size_t>(j) * n + h * dh;
        double s = 0.0;
        for (int c = 0; c < dh; ++c) s += qi[c] * kj[c];
        pi[j] = s * scale;
        mx = std::max(mx, pi[j]);
      }
      double z = 0.0;
      for (int j = 0; j < L; ++j) {
        pi[j] = std::exp(pi[j] - mx);
        z += pi[j];
      }
      for (int j = 0; j < L; ++j) pi[j] /= z;
      double* oi = out.data.data() + static_cast<std::size_t>(i) * n + h * dh;
      for (int j = 0; j < L; ++j) {
        const double p = pi[j];
        const double* vj = vv.data() + static_cast<std::size_t>(j) * n + h * dh;
        for (int c = 0; c < dh; ++c) oi[c] += p * vj[c];
      }
    }
  }
  if (probs_out) *probs_out = *probs;
  return t.push(std::move(out), detail::any_grad(t, {q, k, v}), [q, k, v, heads, L, n, dh, scale, probs](Tape& tp, int self) {
    const auto& g = tp.grad(Var{self});
    const auto& qv = tp.value(q).data;
    const auto& kv = tp.value(k).data;
    const auto& vv = tp.value(v).data;
    const bool gq = tp.requires_grad(q), gk = tp.requires_grad(k), gv = tp.requires_grad(v);
    double* dq = gq ? tp.grad_mut(q).data() : nullptr;
    double* dk = gk ? tp.grad_mut(k).data() : nullptr;
    double* dv = gv ? tp.grad_mut(v).data() : nullptr;
    std::vector<double> dp(static_cast<std::size_t>(L));
    for (int h = 0; h < heads; ++h) {
      const double* P = probs->data() + static_cast<std::size_t>(h) * L * L;
      for (int i = 0; i < L; ++i) {
        const double* pi = P + static_cast<std::size_t>(i) * L;
        const double* gi = g.data() + static_cast<std::size_t>(i) * n + h * dh;
        double dot = 0.0;
        for (int j = 0; j < L; ++j) {
          const double* vj = vv.data() + static_cast<std::size_t>(j) * n + h * dh;
          double s = 0.0;
          for (int c = 0; c < dh; ++c) s += gi[c] * vj[c];
          dp[static_cast<std::size_t>(j)] = s;
          dot += s * pi[j];
          if (dv) {
            double* dvj = dv + static_cast<std::size_t>(j) * n + h * dh;
            for (int c = 0; c < dh; ++c) dvj[c] += pi[j] * gi[c];
          }
        }
        const double* qi = qv.data() + static_cast<std::size_t>(i) * n + h * dh;
        for (int j = 0; j < L; ++j) {
          const double ds = pi[j] * (dp[static_cast<std::size_t>(j)] - dot) * scale;
          if (ds == 0.0) continue;
          const double* kj = kv.data() + static_cast<std::size_t>(j) * n + h * dh;
          if (dq) {
            double* dqi = dq + static_cast<std::size_t>(i) * n + h * dh;
            for (int c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
          }
          if (dk) {
            double* dkj = dk + static_cast<std::size_t>(j) * n + h * dh;
            for (int c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
          }
        }
      }
    }
  });
}

/// Token matrix [h*w, c] (row-major grid) to channel-first feature map [c, h, w].
inline Var tokens_to_chw(Tape& t, Var x, int h, int w) {
  const auto& xs = t.shape(x);
  detail::require(xs.size() == 2 && xs[0] == h * w, "tokens_to_chw: token count does not match grid");
  const int c = xs[1];
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Tensor out({c, h, w});
  const auto& xv = t.value(x).data;
  for (std::size_t p = 0; p < hw; ++p)
    for (int ch = 0; ch < c; ++ch) out.data[static_cast<std::size_t>(ch) * hw + p] = xv[p * c + ch];
  return t.push(std::move(out), t.requires_grad(x), [x, c, hw](Tape& tp, int self) {
    const auto& g = tp.grad(Var{self});
    auto& gx = tp.grad_mut(x);
    for (std::size_t p = 0; p < hw; ++p)
      for (int ch = 0; ch < c; ++ch) gx[p * c + ch] += g[static_cast<std::size_t>(ch) * hw + p];
  });
}

/// Stride-1 convolution with zero "same" padding. x [ci,H,W], w [co,ci,k,k], b [co].
inline Var conv2d(Tape& t, Var x, Var w, Var b) {
  const auto& xs = t.shape(x);
  const auto& ws = t.shape(w);
  detail::require(xs.size() == 3 && ws.size() == 4 && ws[1] == xs[0] && ws[2] == ws[3] && ws[2] % 2 == 1,
                  "conv2d: shape mismatch");
  const int ci = xs[0], H = xs[1], W = xs[2], co = ws[0], k = ws[2], pad = k / 2;
  detail::require(t.value(b).numel() == static_cast<std::size_t>(co), "conv2d: bias shape mismatch");
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  Tensor out({co, H, W});
  const auto& xv = t.value(x).data;
  const auto& wv = t.value(w).data;
  const auto& bv = t.value(b).data;
  // Visits every (output, input) pixel pair of one kernel tap with x clipped to the image.
  auto for_tap = [H, W, pad](int ky, int kx, auto&& body) {
    const int oy = ky - pad, ox = kx - pad;
    const int y0 = std::max(0, -oy), y1 = std::min(H, H - oy);
    const int x0 = std::max(0, -ox), x1 = std::min(W, W - ox);
    for (int y = y0; y < y1; ++y) body(y * W, (y + oy) * W + ox, x0, x1);
  };
  for (int o = 0; o < co; ++o) {
    double* op = out.data.data() + static_cast<std::size_t>(o) * hw;
    std::fill(op, op + hw, bv[static_cast<std::size_t>(o)]);
    for (int i = 0; i < ci; ++i) {
      const double* ip = xv.data() + static_cast<std::size_t>(i) * hw;
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const double wt = wv[((static_cast<std::size_t>(o) * ci + i) * k + ky) * k + kx];
          for_tap(ky, kx, [&](int orow, int irow, int x0, int x1) {
            for (int xx = x0; xx < x1; ++xx) op[orow + xx] += wt * ip[irow + xx];
          });
        }
    }
  }
  return t.push(std::move(out), detail::any_grad(t, {x, w, b}), [x, w, b, ci, co, k, hw, for_tap](Tape& tp, int self) {
    const auto& g = tp.grad(Var{self});
    const auto& xv = tp.value(x).data;
    const auto& wv = tp.value(w).data;
    double* gx = tp.requires_grad(x) ? tp.grad_mut(x).data() : nullptr;
    double* gw = tp.requires_grad(w) ? tp.grad_mut(w).data() : nullptr;
    if (tp.requires_grad(b)) {
      auto& gb = tp.grad_mut(b);
      for (int o = 0; o < co; ++o) {
        const double* gp = g.data() + static_cast<std::size_t>(o) * hw;
        gb[static_cast<std::size_t>(o)] += std::accumulate(gp, gp + hw, 0.0);
      }
    }
    for (int o = 0; o < co; ++o) {
      const double* gp = g.data() + static_cast<std::size_t>(o) * hw;
      for (int i = 0; i < ci; ++i) {
        const double* ip = xv.data() + static_cast<std::size_t>(i) * hw;
        double* gip = gx ? gx + static_cast<std::size_t>(i) * hw : nullptr;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const std::size_t widx = ((static_cast<std::size_t>(o) * ci + i) * k + ky) * k + kx;
            const double wt = wv[widx];
            double acc = 0.0;
            for_tap(ky, kx, [&](int orow, int irow, int x0, int x1) {
              for (int xx = x0; xx < x1; ++xx) {
                acc += gp[orow + xx] * ip[irow + xx];
                if (gip) gip[irow + xx] += wt * gp[orow + xx];
              }
            });
            if (gw) gw[widx] += acc;
          }
      }
    }
  });
}

/// Transposed convolution, kernel 2, stride 2: x [ci,H,W], w [ci,co,2,2], b [co] -> [co,2H,2W].
inline Var conv_transpose2x2(Tape& t, Var x, Var w, Var b) {
  const auto& xs = t.shape(x);
  const auto& ws = t.shape(w);
  detail::require(xs.size() == 3 && ws.size() == 4 && ws[0] == xs[0] && ws[2] == 2 && ws[3] == 2,
                  "conv_transpose2x2: shape mismatch");
  const int ci = xs[0], H = xs[1], W = xs[2], co = ws[1];
  detail::require(t.value(b).numel() == static_cast<std::size_t>(co), "conv_transpose2x2: bias shape mismatch");
  const int OH = 2 * H, OW = 2 * W;
  const std::size_t ihw = static_cast<std::size_t>(H) * W, ohw = static_cast<std::size_t>(OH) * OW;
  Tensor out({co, OH, OW});
  const auto& xv = t.value(x).data;
  const auto& wv = t.value(w).data;
  const auto& bv = t.value(b).data;
  for (int o = 0; o < co; ++o) std::fill_n(out.data.data() + static_cast<std::size_t>(o) * ohw, ohw, bv[static_cast<std::size_t>(o)]);
  for (int i = 0; i < ci; ++i) {
    const double* ip = xv.data() + static_cast<std::size_t>(i) * ihw;
    for (int o = 0; o < co; ++o) {
      double* op = out.data.data() + static_cast<std::size_t>(o) * ohw;
      const double* wk = wv.data() + (static_cast<std::size_t>(i) * co + o) * 4;
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) {
          const double v = ip[static_cast<std::size_t>(y) * W + xx];
          double* o0 = op + static_cast<std::size_t>(2 * y) * OW + 2 * xx;
          o0[0] += v * wk[0];
          o0[1] += v * wk[1];
          o0[OW] += v * wk[2];
          o0[OW + 1] += v * wk[3];
        }
    }
  }
  return t.push(std::move(out), detail::any_grad(t, {x, w, b}), [x, w, b, ci, co, H, W, OW, ihw, ohw](Tape& tp, int self) {
    const auto& g = tp.grad(Var{self});
    const auto& xv = tp.value(x).data;
    const auto& wv = tp.value(w).data;
    double* gx = tp.requires_grad(x) ? tp.grad_mut(x).data() : nullptr;
    double* gw = tp.requires_grad(w) ? tp.grad_mut(w).data() : nullptr;
    if (tp.requires_grad(b)) {
      auto& gb = tp.grad_mut(b);
      for (int o = 0; o < co; ++o) {
        const double* gp = g.data() + static_cast<std::size_t>(o) * ohw;
        gb[static_cast<std::size_t>(o)] += std::accumulate(gp, gp + ohw, 0.0);
      }
    }
    for (int i = 0; i < ci; ++i) {
      const double* ip = xv.data() + static_cast<std::size_t>(i) * ihw;
      for (int o = 0; o < co; ++o) {
        const double* gp = g.data() + static_cast<std::size_t>(o) * ohw;
        const std::size_t wbase = (static_cast<std::size_t>(i) * co + o) * 4;
        const double* wk = wv.data() + wbase;
        double acc[4] = {0, 0, 0, 0};
        for (int y = 0; y < H; ++y)
          for (int xx = 0; xx < W; ++xx) {
            const double* g0 = gp + static_cast<std::size_t>(2 * y) * OW + 2 * xx;
            const double v = ip[static_cast<std::size_t>(y) * W + xx];
            acc[0] += v * g0[0];
            acc[1] += v * g0[1];
            acc[2] += v * g0[OW];
            acc[3] += v * g0[OW + 1];
            if (gx) gx[static_cast<std::size_t>(i) * ihw + static_cast<std::size_t>(y) * W + xx] +=
                wk[0] * g0[0] + wk[1] * g0[1] + wk[2] * g0[OW] + wk[3] * g0[OW + 1];
          }
        if (gw)
          for (int q = 0; q < 4; ++q) gw[wbase + static_cast<std::size_t>(q)] += acc[q];
      }
    }
  });
}

/// Per-channel bilinear resampling (align-corners=false, clamped source) of x [c,H,W].
/// `taps_y`/`taps_x` follow mdm::bilinear_taps.
template <typename Taps>
Var resize_bilinear(Tape& t, Var x, const Taps& taps_y, const Taps& taps_x) {
  const auto& xs = t.shape(x);
  detail::require(xs.size() == 3, "resize_bilinear: expected [c,H,W]");
  const int c = xs[0], H = xs[1], W = xs[2];
  const int OH = static_cast<int>(taps_y.size()), OW = static_cast<int>(taps_x.size());
  Tensor out({c, OH, OW});
  const auto& xv = t.value(x).data;
  for (int ch = 0; ch < c; ++ch) {
    const double* ip = xv.data() + static_cast<std::size_t>(ch) * H * W;
    double* op = out.data.data() + static_cast<std::size_t>(ch) * OH * OW;
    for (int y = 0; y < OH; ++y) {
      const auto& a = taps_y[static_cast<std::size_t>(y)];
      for (int xx = 0; xx < OW; ++xx) {
        const auto& b = taps_x[static_cast<std::size_t>(xx)];
        const double top = (1.0 - b.w) * ip[a.i0 * W + b.i0] + b.w * ip[a.i0 * W + b.i1];
        const double bot = (1.0 - b.w) * ip[a.i1 * W + b.i0] + b.w * ip[a.i1 * W + b.i1];
        op[static_cast<std::size_t>(y) * OW + xx] = (1.0 - a.w) * top + a.w * bot;
      }
    }
  }
  return t.push(std::move(out), t.requires_grad(x), [x, c, H, W, OH, OW, taps_y, taps_x](Tape& tp, int self) {
    const auto& g = tp.grad(Var{self});
    auto& gx = tp.grad_mut(x);
    for (int ch = 0; ch < c; ++ch) {
      double* gp = gx.data() + static_cast<std::size_t>(ch) * H * W;
      const double* go = g.data() + static_cast<std::size_t>(ch) * OH * OW;
      for (int y = 0; y < OH; ++y) {
        const auto& a = taps_y[static_cast<std::size_t>(y)];
        for (int xx = 0; xx < OW; ++xx) {
          const auto& b = taps_x[static_cast<std::size_t>(xx)];
          const double gv = go[static_cast<std::size_t>(y) * OW + xx];
          gp[a.i0 * W + b.i0] += gv * (1.0 - a.w) * (1.0 - b.w);
          gp[a.i0 * W + b.i1] += gv * (1.0 - a.w) * b.w;
          gp[a.i1 * W + b.i0] += gv * a.w * (1.0 - b.w);
          gp[a.i1 * W + b.i1] += gv * a.w * b.w;
        }
      }
    }
  });
}

/// Mean |pred - target| over entries with valid[i] != 0; 0 when none are valid.
inline Var masked_l1(Tape& t, Var pred, std::vector<double> target, std::vector<std::uint8_t> valid) {
  const auto& pv = t.value(pred).data;
  detail::require(pv.size() == target.size() && target.size() == valid.size(), "masked_l1: size mismatch");
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < pv.size(); ++i)
    if (valid[i]) {
      sum += std::abs(pv[i] - target[i]);
      ++count;
    }
  const double loss = count ? sum / static_cast<double>(count) : 0.0;
  return t.push(Tensor({1}, {loss}), t.requires_grad(pred) && count > 0,
                [pred, target = std::move(target), valid = std::move(valid), count](Tape& tp, int self) {
                  const double g = tp.grad(Var{self})[0] / static_cast<double>(count);
                  const auto& pv = tp.value(pred).data;
                  auto& gp = tp.grad_mut(pred);
                  for (std::size_t i = 0; i < pv.size(); ++i) {
                    if (!valid[i]) continue;
                    const double d = pv[i] - target[i];
                    gp[i] += d > 0.0 ? g : (d < 0.0 ? -g : 0.0);
                  }
                });
}

}  // namespace mdm::ad
