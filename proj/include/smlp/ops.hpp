#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "smlp/rng.hpp"
#include "smlp/tensor.hpp"

// Differentiable tensor operations. Every reduction runs in a fixed
// left-to-right order so forward and backward are bitwise deterministic for
// identical inputs. Causal variants restrict the loops structurally instead
// of adding -inf masks, so masked positions contribute nothing at all.

namespace smlp {

namespace opdetail {

inline void check_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace opdetail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  opdetail::check_rank2(a, "matmul");
  opdetail::check_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor out = Tensor::zeros({m, n});
  {
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double av = pa[i * k + kk];
        const double* rb = pb + kk * n;
        double* ro = po + i * n;
        for (std::size_t j = 0; j < n; ++j) ro[j] += av * rb[j];
      }
  }
  record_op({a, b}, out, [a, b, out, m, k, n]() mutable {
    if (!out.has_grad()) return;
    const double* g = out.grad().data();
    if (a.tracks_grad()) {
      double* ga = a.grad_data();
      const double* pb = b.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t kk = 0; kk < k; ++kk) {
          const double* rg = g + i * n;
          const double* rb = pb + kk * n;
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += rg[j] * rb[j];
          ga[i * k + kk] += acc;
        }
    }
    if (b.tracks_grad()) {
      double* gb = b.grad_data();
      const double* pa = a.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t kk = 0; kk < k; ++kk) {
          const double av = pa[i * k + kk];
          const double* rg = g + i * n;
          double* rb = gb + kk * n;
          for (std::size_t j = 0; j < n; ++j) rb[j] += av * rg[j];
        }
    }
  });
  return out;
}

// y[t,:] = sum_{j<=t} w[t,j] * x[j,:]. Only the lower triangle of w (diagonal
// included) is ever read, so row t of the output cannot depend on rows > t.
inline Tensor lower_tri_matmul(const Tensor& w, const Tensor& x) {
  opdetail::check_rank2(w, "lower_tri_matmul");
  opdetail::check_rank2(x, "lower_tri_matmul");
  const std::size_t t_len = w.shape()[0], c = x.shape()[1];
  if (w.shape()[1] != t_len)
    throw ShapeError("lower_tri_matmul: spatial weights must be square, got " +
                     shape_str(w.shape()));
  if (x.shape()[0] != t_len)
    throw ShapeError("lower_tri_matmul: sequence length mismatch, " + shape_str(w.shape()) +
                     " vs " + shape_str(x.shape()));
  Tensor out = Tensor::zeros({t_len, c});
  {
    const double* pw = w.data();
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t j = 0; j <= t; ++j) {
        const double wv = pw[t * t_len + j];
        const double* rx = px + j * c;
        double* ro = po + t * c;
        for (std::size_t cc = 0; cc < c; ++cc) ro[cc] += wv * rx[cc];
      }
  }
  record_op({w, x}, out, [w, x, out, t_len, c]() mutable {
    if (!out.has_grad()) return;
    const double* g = out.grad().data();
    if (w.tracks_grad()) {
      double* gw = w.grad_data();
      const double* px = x.data();
      for (std::size_t t = 0; t < t_len; ++t)
        for (std::size_t j = 0; j <= t; ++j) {
          const double* rg = g + t * c;
          const double* rx = px + j * c;
          double acc = 0.0;
          for (std::size_t cc = 0; cc < c; ++cc) acc += rg[cc] * rx[cc];
          gw[t * t_len + j] += acc;
        }
    }
    if (x.tracks_grad()) {
      double* gx = x.grad_data();
      const double* pw = w.data();
      for (std::size_t t = 0; t < t_len; ++t)
        for (std::size_t j = 0; j <= t; ++j) {
          const double wv = pw[t * t_len + j];
          const double* rg = g + t * c;
          double* rx = gx + j * c;
          for (std::size_t cc = 0; cc < c; ++cc) rx[cc] += wv * rg[cc];
        }
    }
  });
  return out;
}

inline Tensor transpose(const Tensor& a) {
  opdetail::check_rank2(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out = Tensor::zeros({n, m});
  {
    const double* pa = a.data();
    double* po = out.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) po[j * m + i] = pa[i * n + j];
  }
  record_op({a}, out, [a, out, m, n]() mutable {
    if (!out.has_grad() || !a.tracks_grad()) return;
    const double* g = out.grad().data();
    double* ga = a.grad_data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  opdetail::check_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  {
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  }
  record_op({a, b}, out, [a, b, out, n]() mutable {
    if (!out.has_grad()) return;
    const double* g = out.grad().data();
    if (a.tracks_grad()) {
      double* ga = a.grad_data();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    }
    if (b.tracks_grad()) {
      double* gb = b.grad_data();
      for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
    }
  });
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  opdetail::check_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  {
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  }
  record_op({a, b}, out, [a, b, out, n]() mutable {
    if (!out.has_grad()) return;
    const double* g = out.grad().data();
    if (a.tracks_grad()) {
      double* ga = a.grad_data();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    }
    if (b.tracks_grad()) {
      double* gb = b.grad_data();
      for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
    }
  });
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  opdetail::check_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  {
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  }
  record_op({a, b}, out, [a, b, out, n]() mutable {
    if (!out.has_grad()) return;
    const double* g = out.grad().data();
    if (a.tracks_grad()) {
      double* ga = a.grad_data();
      const double* pb = b.data();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * pb[i];
    }
    if (b.tracks_grad()) {
      double* gb = b.grad_data();
      const double* pa = a.data();
      for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * pa[i];
    }
  });
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  {
    const double* pa = a.data();
    double* po = out.data();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * c;
  }
  record_op({a}, out, [a, out, c, n]() mutable {
    if (!out.has_grad() || !a.tracks_grad()) return;
    const double* g = out.grad().data();
    double* ga = a.grad_data();
    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * c;
  });
  return out;
}

inline Tensor add_scalar(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  {
    const double* pa = a.data();
    double* po = out.data();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + c;
  }
  record_op({a}, out, [a, out, n]() mutable {
    if (!out.has_grad() || !a.tracks_grad()) return;
    const double* g = out.grad().data();
    double* ga = a.grad_data();
    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
  });
  return out;
}

inline Tensor gelu(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  {
    const double* pa = a.data();
    double* po = out.data();
    for (std::size_t i = 0; i < n; ++i) {
      const double x = pa[i];
      po[i] = 0.5 * x * (1.0 + std::erf(x * opdetail::kInvSqrt2));
    }
  }
  record_op({a}, out, [a, out, n]() mutable {
    if (!out.has_grad() || !a.tracks_grad()) return;
    const double* g = out.grad().data();
    const double* pa = a.data();
    double* ga = a.grad_data();
    for (std::size_t i = 0; i < n; ++i) {
      const double x = pa[i];
      const double phi_big = 0.5 * (1.0 + std::erf(x * opdetail::kInvSqrt2));
      const double phi_small = opdetail::kInvSqrt2Pi * std::exp(-0.5 * x * x);
      ga[i] += g[i] * (phi_big + x * phi_small);
    }
  });
  return out;
}

inline Tensor sigmoid(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  {
    const double* pa = a.data();
    double* po = out.data();
    for (std::size_t i = 0; i < n; ++i) po[i] = opdetail::stable_sigmoid(pa[i]);
  }
  record_op({a}, out, [a, out, n]() mutable {
    if (!out.has_grad() || !a.tracks_grad()) return;
    const double* g = out.grad().data();
    const double* po = out.data();
    double* ga = a.grad_data();
    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * po[i] * (1.0 - po[i]);
  });
  return out;
}

// Inverted dropout: each element is kept with probability 1-p and scaled by
// 1/(1-p), or zeroed. Consumes exactly numel() draws from `rng` in row-major
// order, so results are a pure function of the rng state.
inline Tensor dropout(const Tensor& a, double p, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0))
    throw ConfigError("dropout: probability " + std::to_string(p) + " outside [0, 1)");
  if (p == 0.0) return a;
  const std::size_t n = a.numel();
  auto mask = std::make_shared<std::vector<double>>(n);
  const double keep_scale = 1.0 / (1.0 - p);
  Tensor out = Tensor::zeros(a.shape());
  {
    const double* pa = a.data();
    double* po = out.data();
    for (std::size_t i = 0; i < n; ++i) {
      (*mask)[i] = rng.next_double() < p ? 0.0 : keep_scale;
      po[i] = pa[i] * (*mask)[i];
    }
  }
  record_op({a}, out, [a, out, mask, n]() mutable {
    if (!out.has_grad() || !a.tracks_grad()) return;
    const double* g = out.grad().data();
    double* ga = a.grad_data();
    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * (*mask)[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Broadcast bias adds

// out[i,j] = x[i,j] + b[j]  (bias per column, broadcast over rows)
inline Tensor add_col_bias(const Tensor& x, const Tensor& b) {
  opdetail::check_rank2(x, "add_col_bias");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (b.rank() != 1 || b.shape()[0] != n)
    throw ShapeError("add_col_bias: bias " + shape_str(b.shape()) + " does not match columns of " +
                     shape_str(x.shape()));
  Tensor out = Tensor::zeros(x.shape());
  {
    const double* px = x.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) po[i * n + j] = px[i * n + j] + pb[j];
  }
  record_op({x, b}, out, [x, b, out, m, n]() mutable {
    if (!out.has_grad()) return;
    const double* g = out.grad().data();
    if (x.tracks_grad()) {
      double* gx = x.grad_data();
      for (std::size_t i = 0; i < m * n; ++i) gx[i] += g[i];
    }
    if (b.tracks_grad()) {
      double* gb = b.grad_data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
  return out;
}

// out[i,j] = x[i,j] + b[i]  (bias per row, broadcast over columns)
inline Tensor add_row_bias(const Tensor& x, const Tensor& b) {
  opdetail::check_rank2(x, "add_row_bias");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (b.rank() != 1 || b.shape()[0] != m)
    throw ShapeError("add_row_bias: bias " + shape_str(b.shape()) + " does not match rows of " +
                     shape_str(x.shape()));
  Tensor out = Tensor::zeros(x.shape());
  {
    const double* px = x.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) po[i * n + j] = px[i * n + j] + pb[i];
  }
  record_op({x, b}, out, [x, b, out, m, n]() mutable {
    if (!out.has_grad()) return;
    const double* g = out.grad().data();
    if (x.tracks_grad()) {
      double* gx = x.grad_data();
      for (std::size_t i = 0; i < m * n; ++i) gx[i] += g[i];
    }
    if (b.tracks_grad()) {
      double* gb = b.grad_data();
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j];
        gb[i] += acc;
      }
    }
  });
  return out;
}

// Per-row scaling: out[i,:] = x[i,:] * s[i].
inline Tensor scale_rows(const Tensor& x, const Tensor& s) {
  opdetail::check_rank2(x, "scale_rows");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (s.rank() != 1 || s.shape()[0] != m)
    throw ShapeError("scale_rows: scale vector " + shape_str(s.shape()) +
                     " does not match rows of " + shape_str(x.shape()));
  Tensor out = Tensor::zeros(x.shape());
  {
    const double* px = x.data();
    const double* ps = s.data();
    double* po = out.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) po[i * n + j] = px[i * n + j] * ps[i];
  }
  record_op({x, s}, out, [x, s, out, m, n]() mutable {
    if (!out.has_grad()) return;
    const double* g = out.grad().data();
    if (x.tracks_grad()) {
      double* gx = x.grad_data();
      const double* ps = s.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i * n + j] * ps[i];
    }
    if (s.tracks_grad()) {
      double* gs = s.grad_data();
      const double* px = x.data();
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * px[i * n + j];
        gs[i] += acc;
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and softmax

inline Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                        double eps = 1e-5) {
  opdetail::check_rank2(x, "layernorm");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (gain.rank() != 1 || gain.shape()[0] != n || bias.rank() != 1 || bias.shape()[0] != n)
    throw ShapeError("layernorm: gain/bias must be length-" + std::to_string(n) + " vectors");
  Tensor out = Tensor::zeros(x.shape());
  // Keep normalized activations and inverse stddevs for the backward pass.
  auto xhat = std::make_shared<std::vector<double>>(m * n);
  auto rstd = std::make_shared<std::vector<double>>(m);
  {
    const double* px = x.data();
    const double* pg = gain.data();
    const double* pb = bias.data();
    double* po = out.data();
    for (std::size_t i = 0; i < m; ++i) {
      const double* rx = px + i * n;
      double mean = 0.0;
      for (std::size_t j = 0; j < n; ++j) mean += rx[j];
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double d = rx[j] - mean;
        var += d * d;
      }
      var /= static_cast<double>(n);
      const double r = 1.0 / std::sqrt(var + eps);
      (*rstd)[i] = r;
      for (std::size_t j = 0; j < n; ++j) {
        const double h = (rx[j] - mean) * r;
        (*xhat)[i * n + j] = h;
        po[i * n + j] = pg[j] * h + pb[j];
      }
    }
  }
  record_op({x, gain, bias}, out, [x, gain, bias, out, xhat, rstd, m, n]() mutable {
    if (!out.has_grad()) return;
    const double* g = out.grad().data();
    const double* pg = gain.data();
    if (gain.tracks_grad()) {
      double* gg = gain.grad_data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * (*xhat)[i * n + j];
    }
    if (bias.tracks_grad()) {
      double* gb = bias.grad_data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
    if (x.tracks_grad()) {
      double* gx = x.grad_data();
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t i = 0; i < m; ++i) {
        const double r = (*rstd)[i];
        double sum_dh = 0.0, sum_dh_h = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double dh = g[i * n + j] * pg[j];
          sum_dh += dh;
          sum_dh_h += dh * (*xhat)[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) {
          const double dh = g[i * n + j] * pg[j];
          const double h = (*xhat)[i * n + j];
          gx[i * n + j] += r * (dh - inv_n * sum_dh - h * inv_n * sum_dh_h);
        }
      }
    }
  });
  return out;
}

namespace opdetail {

// Softmax over a strided slice; max-subtraction for stability.
inline void softmax_slice(const double* x, double* p, std::size_t len, std::size_t stride) {
  double mx = x[0];
  for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, x[i * stride]);
  double sum = 0.0;
  for (std::size_t i = 0; i < len; ++i) {
    const double e = std::exp(x[i * stride] - mx);
    p[i * stride] = e;
    sum += e;
  }
  for (std::size_t i = 0; i < len; ++i) p[i * stride] /= sum;
}

inline void softmax_slice_backward(const double* p, const double* g, double* gx, std::size_t len,
                                   std::size_t stride) {
  double dot = 0.0;
  for (std::size_t i = 0; i < len; ++i) dot += g[i * stride] * p[i * stride];
  for (std::size_t i = 0; i < len; ++i)
    gx[i * stride] += p[i * stride] * (g[i * stride] - dot);
}

}  // namespace opdetail

// Softmax along `axis` (rank-1 tensors use axis 0; rank-2 support both axes).
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (x.rank() == 1) {
    if (axis != 0) throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for rank-1");
    Tensor out = Tensor::zeros(x.shape());
    opdetail::softmax_slice(x.data(), out.data(), x.numel(), 1);
    record_op({x}, out, [x, out]() mutable {
      if (!out.has_grad() || !x.tracks_grad()) return;
      opdetail::softmax_slice_backward(out.data(), out.grad().data(), x.grad_data(), x.numel(), 1);
    });
    return out;
  }
  opdetail::check_rank2(x, "softmax");
  if (axis > 1) throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for rank-2");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  Tensor out = Tensor::zeros(x.shape());
  if (axis == 1) {
    for (std::size_t i = 0; i < m; ++i)
      opdetail::softmax_slice(x.data() + i * n, out.data() + i * n, n, 1);
  } else {
    for (std::size_t j = 0; j < n; ++j)
      opdetail::softmax_slice(x.data() + j, out.data() + j, m, n);
  }
  record_op({x}, out, [x, out, axis, m, n]() mutable {
    if (!out.has_grad() || !x.tracks_grad()) return;
    const double* g = out.grad().data();
    double* gx = x.grad_data();
    if (axis == 1) {
      for (std::size_t i = 0; i < m; ++i)
        opdetail::softmax_slice_backward(out.data() + i * n, g + i * n, gx + i * n, n, 1);
    } else {
      for (std::size_t j = 0; j < n; ++j)
        opdetail::softmax_slice_backward(out.data() + j, g + j, gx + j, m, n);
    }
  });
  return out;
}

// Row-wise softmax over the causal prefix: row i is normalized over columns
// 0..i only, columns above the diagonal come out exactly zero.
inline Tensor causal_row_softmax(const Tensor& x) {
  opdetail::check_rank2(x, "causal_row_softmax");
  const std::size_t t_len = x.shape()[0];
  if (x.shape()[1] != t_len)
    throw ShapeError("causal_row_softmax: expected square scores, got " + shape_str(x.shape()));
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < t_len; ++i)
    opdetail::softmax_slice(x.data() + i * t_len, out.data() + i * t_len, i + 1, 1);
  record_op({x}, out, [x, out, t_len]() mutable {
    if (!out.has_grad() || !x.tracks_grad()) return;
    const double* g = out.grad().data();
    double* gx = x.grad_data();
    for (std::size_t i = 0; i < t_len; ++i)
      opdetail::softmax_slice_backward(out.data() + i * t_len, g + i * t_len, gx + i * t_len,
                                       i + 1, 1);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  Tensor out = Tensor::scalar(0.0);
  const std::size_t n = x.numel();
  {
    const double* px = x.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += px[i];
    out.set(0, acc);
  }
  record_op({x}, out, [x, out, n]() mutable {
    if (!out.has_grad() || !x.tracks_grad()) return;
    const double g = out.grad()[0];
    double* gx = x.grad_data();
    for (std::size_t i = 0; i < n; ++i) gx[i] += g;
  });
  return out;
}

// Column means: out[j] = mean_i x[i,j].
inline Tensor mean_axis0(const Tensor& x) {
  opdetail::check_rank2(x, "mean_axis0");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (m == 0) throw ShapeError("mean_axis0: empty tensor");
  Tensor out = Tensor::zeros({n});
  {
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) po[j] += px[i * n + j];
    for (std::size_t j = 0; j < n; ++j) po[j] /= static_cast<double>(m);
  }
  record_op({x}, out, [x, out, m, n]() mutable {
    if (!out.has_grad() || !x.tracks_grad()) return;
    const double* g = out.grad().data();
    double* gx = x.grad_data();
    const double inv_m = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j] * inv_m;
  });
  return out;
}

// Dot product with a constant weight vector.
inline Tensor weighted_sum(const Tensor& x, std::vector<double> weights) {
  if (x.rank() != 1 || x.shape()[0] != weights.size())
    throw ShapeError("weighted_sum: vector " + shape_str(x.shape()) + " vs " +
                     std::to_string(weights.size()) + " weights");
  Tensor out = Tensor::scalar(0.0);
  const std::size_t n = x.numel();
  {
    const double* px = x.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += px[i] * weights[i];
    out.set(0, acc);
  }
  record_op({x}, out, [x, out, weights, n]() mutable {
    if (!out.has_grad() || !x.tracks_grad()) return;
    const double g = out.grad()[0];
    double* gx = x.grad_data();
    for (std::size_t i = 0; i < n; ++i) gx[i] += g * weights[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Indexing, slicing, concatenation

inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  opdetail::check_rank2(table, "embedding");
  const std::size_t v = table.shape()[0], h = table.shape()[1];
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= v)
      throw ConfigError("embedding: token id " + std::to_string(id) + " out of range [0, " +
                        std::to_string(v) + ")");
  const std::size_t t_len = ids.size();
  Tensor out = Tensor::zeros({t_len, h});
  {
    const double* pt = table.data();
    double* po = out.data();
    for (std::size_t t = 0; t < t_len; ++t) {
      const double* src = pt + static_cast<std::size_t>(ids[t]) * h;
      double* dst = po + t * h;
      for (std::size_t j = 0; j < h; ++j) dst[j] = src[j];
    }
  }
  record_op({table}, out, [table, out, ids, t_len, h]() mutable {
    if (!out.has_grad() || !table.tracks_grad()) return;
    const double* g = out.grad().data();
    double* gt = table.grad_data();
    for (std::size_t t = 0; t < t_len; ++t) {
      double* dst = gt + static_cast<std::size_t>(ids[t]) * h;
      const double* src = g + t * h;
      for (std::size_t j = 0; j < h; ++j) dst[j] += src[j];
    }
  });
  return out;
}

inline Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) {
  opdetail::check_rank2(x, "slice_rows");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (r0 > r1 || r1 > m)
    throw ShapeError("slice_rows: range [" + std::to_string(r0) + ", " + std::to_string(r1) +
                     ") invalid for " + shape_str(x.shape()));
  const std::size_t rows = r1 - r0;
  Tensor out = Tensor::zeros({rows, n});
  std::copy(x.data() + r0 * n, x.data() + r1 * n, out.data());
  record_op({x}, out, [x, out, r0, rows, n]() mutable {
    if (!out.has_grad() || !x.tracks_grad()) return;
    const double* g = out.grad().data();
    double* gx = x.grad_data();
    for (std::size_t i = 0; i < rows * n; ++i) gx[r0 * n + i] += g[i];
  });
  return out;
}

inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
  opdetail::check_rank2(x, "slice_cols");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  if (c0 > c1 || c1 > n)
    throw ShapeError("slice_cols: range [" + std::to_string(c0) + ", " + std::to_string(c1) +
                     ") invalid for " + shape_str(x.shape()));
  const std::size_t cols = c1 - c0;
  Tensor out = Tensor::zeros({m, cols});
  {
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < cols; ++j) po[i * cols + j] = px[i * n + c0 + j];
  }
  record_op({x}, out, [x, out, c0, cols, m, n]() mutable {
    if (!out.has_grad() || !x.tracks_grad()) return;
    const double* g = out.grad().data();
    double* gx = x.grad_data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < cols; ++j) gx[i * n + c0 + j] += g[i * cols + j];
  });
  return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const std::size_t n = parts[0].cols();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    opdetail::check_rank2(p, "concat_rows");
    if (p.cols() != n)
      throw ShapeError("concat_rows: column mismatch, " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    total += p.rows();
  }
  Tensor out = Tensor::zeros({total, n});
  {
    double* po = out.data();
    std::size_t off = 0;
    for (const Tensor& p : parts) {
      std::copy(p.data(), p.data() + p.numel(), po + off);
      off += p.numel();
    }
  }
  std::vector<Tensor> held = parts;
  record_op(held, out, [held, out]() mutable {
    if (!out.has_grad()) return;
    const double* g = out.grad().data();
    std::size_t off = 0;
    for (Tensor& p : held) {
      if (p.tracks_grad()) {
        double* gp = p.grad_data();
        for (std::size_t i = 0; i < p.numel(); ++i) gp[i] += g[off + i];
      }
      off += p.numel();
    }
  });
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const std::size_t m = parts[0].rows();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    opdetail::check_rank2(p, "concat_cols");
    if (p.rows() != m)
      throw ShapeError("concat_cols: row mismatch, " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    total += p.cols();
  }
  Tensor out = Tensor::zeros({m, total});
  {
    double* po = out.data();
    std::size_t off = 0;
    for (const Tensor& p : parts) {
      const std::size_t pc = p.cols();
      const double* pp = p.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < pc; ++j) po[i * total + off + j] = pp[i * pc + j];
      off += pc;
    }
  }
  std::vector<Tensor> held = parts;
  record_op(held, out, [held, out, m, total]() mutable {
    if (!out.has_grad()) return;
    const double* g = out.grad().data();
    std::size_t off = 0;
    for (Tensor& p : held) {
      const std::size_t pc = p.cols();
      if (p.tracks_grad()) {
        double* gp = p.grad_data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < pc; ++j) gp[i * pc + j] += g[i * total + off + j];
      }
      off += pc;
    }
  });
  return out;
}

// Splits into `k` equal blocks along `axis` (0: rows, 1: columns).
inline std::vector<Tensor> chunk(const Tensor& x, std::size_t axis, std::size_t k) {
  opdetail::check_rank2(x, "chunk");
  if (axis > 1) throw ShapeError("chunk: axis " + std::to_string(axis) + " invalid for rank-2");
  const std::size_t extent = x.shape()[axis];
  if (k == 0 || extent % k != 0)
    throw ShapeError("chunk: extent " + std::to_string(extent) + " not divisible by " +
                     std::to_string(k));
  const std::size_t step = extent / k;
  std::vector<Tensor> parts;
  parts.reserve(k);
  for (std::size_t i = 0; i < k; ++i)
    parts.push_back(axis == 0 ? slice_rows(x, i * step, (i + 1) * step)
                              : slice_cols(x, i * step, (i + 1) * step));
  return parts;
}

// Contiguous slice of a rank-1 tensor.
inline Tensor slice_vec(const Tensor& x, std::size_t i0, std::size_t i1) {
  if (x.rank() != 1)
    throw ShapeError("slice_vec: expected rank-1 tensor, got " + shape_str(x.shape()));
  const std::size_t n = x.shape()[0];
  if (i0 > i1 || i1 > n)
    throw ShapeError("slice_vec: range [" + std::to_string(i0) + ", " + std::to_string(i1) +
                     ") invalid for " + shape_str(x.shape()));
  Tensor out = Tensor::zeros({i1 - i0});
  std::copy(x.data() + i0, x.data() + i1, out.data());
  record_op({x}, out, [x, out, i0]() mutable {
    if (!out.has_grad() || !x.tracks_grad()) return;
    const double* g = out.grad().data();
    double* gx = x.grad_data();
    for (std::size_t i = 0; i < out.numel(); ++i) gx[i0 + i] += g[i];
  });
  return out;
}

// Gathers rows by index; indices may repeat.
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx) {
  opdetail::check_rank2(x, "gather_rows");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  for (std::size_t i : idx)
    if (i >= m) throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range");
  Tensor out = Tensor::zeros({idx.size(), n});
  {
    const double* px = x.data();
    double* po = out.data();
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy(px + idx[i] * n, px + (idx[i] + 1) * n, po + i * n);
  }
  record_op({x}, out, [x, out, idx, n]() mutable {
    if (!out.has_grad() || !x.tracks_grad()) return;
    const double* g = out.grad().data();
    double* gx = x.grad_data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double* dst = gx + idx[i] * n;
      const double* src = g + i * n;
      for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
    }
  });
  return out;
}

// Places row i of src at row positions[i] of an otherwise-zero [total x n]
// tensor. Positions must be distinct: scatter is the inverse of a gather.
inline Tensor scatter_rows(const Tensor& src, const std::vector<std::size_t>& positions,
                           std::size_t total_rows) {
  opdetail::check_rank2(src, "scatter_rows");
  if (positions.size() != src.rows())
    throw ShapeError("scatter_rows: " + std::to_string(positions.size()) + " positions for " +
                     std::to_string(src.rows()) + " rows");
  std::vector<char> seen(total_rows, 0);
  for (std::size_t p : positions) {
    if (p >= total_rows)
      throw ShapeError("scatter_rows: position " + std::to_string(p) + " out of range");
    if (seen[p]) throw ShapeError("scatter_rows: duplicate position " + std::to_string(p));
    seen[p] = 1;
  }
  const std::size_t n = src.cols();
  Tensor out = Tensor::zeros({total_rows, n});
  {
    const double* ps = src.data();
    double* po = out.data();
    for (std::size_t i = 0; i < positions.size(); ++i)
      std::copy(ps + i * n, ps + (i + 1) * n, po + positions[i] * n);
  }
  record_op({src}, out, [src, out, positions, n]() mutable {
    if (!out.has_grad() || !src.tracks_grad()) return;
    const double* g = out.grad().data();
    double* gs = src.grad_data();
    for (std::size_t i = 0; i < positions.size(); ++i) {
      const double* row = g + positions[i] * n;
      double* dst = gs + i * n;
      for (std::size_t j = 0; j < n; ++j) dst[j] += row[j];
    }
  });
  return out;
}

// out[i] = x[rows[i], cols[i]] — scalar gather used to pick gate values.
inline Tensor select_at(const Tensor& x, const std::vector<std::size_t>& rows,
                        const std::vector<std::size_t>& cols) {
  opdetail::check_rank2(x, "select_at");
  if (rows.size() != cols.size()) throw ShapeError("select_at: rows/cols length mismatch");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (rows[i] >= m || cols[i] >= n)
      throw ShapeError("select_at: index (" + std::to_string(rows[i]) + ", " +
                       std::to_string(cols[i]) + ") out of range for " + shape_str(x.shape()));
  Tensor out = Tensor::zeros({rows.size()});
  for (std::size_t i = 0; i < rows.size(); ++i) out.set(i, x.at(rows[i], cols[i]));
  record_op({x}, out, [x, out, rows, cols, n]() mutable {
    if (!out.has_grad() || !x.tracks_grad()) return;
    const double* g = out.grad().data();
    double* gx = x.grad_data();
    for (std::size_t i = 0; i < rows.size(); ++i) gx[rows[i] * n + cols[i]] += g[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Loss

// Mean negative log-likelihood over unmasked positions. Masked positions
// contribute nothing to the value or the gradient.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<bool>& mask) {
  opdetail::check_rank2(logits, "cross_entropy");
  const std::size_t t_len = logits.shape()[0], v = logits.shape()[1];
  if (targets.size() != t_len || mask.size() != t_len)
    throw ShapeError("cross_entropy: " + std::to_string(t_len) + " rows vs " +
                     std::to_string(targets.size()) + " targets, " + std::to_string(mask.size()) +
                     " mask entries");
  std::size_t count = 0;
  for (std::size_t t = 0; t < t_len; ++t) {
    if (!mask[t]) continue;
    ++count;
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= v)
      throw ConfigError("cross_entropy: target id " + std::to_string(targets[t]) +
                        " out of range [0, " + std::to_string(v) + ")");
  }
  if (count == 0) throw DataError("cross_entropy: degenerate batch, every position is masked");

  Tensor out = Tensor::scalar(0.0);
  {
    const double* pl = logits.data();
    double acc = 0.0;
    for (std::size_t t = 0; t < t_len; ++t) {
      if (!mask[t]) continue;
      const double* row = pl + t * v;
      double mx = row[0];
      for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      double sum = 0.0;
      for (std::size_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
      acc += mx + std::log(sum) - row[static_cast<std::size_t>(targets[t])];
    }
    out.set(0, acc / static_cast<double>(count));
  }
  record_op({logits}, out, [logits, out, targets, mask, t_len, v, count]() mutable {
    if (!out.has_grad() || !logits.tracks_grad()) return;
    const double g = out.grad()[0] / static_cast<double>(count);
    const double* pl = logits.data();
    double* gl = logits.grad_data();
    for (std::size_t t = 0; t < t_len; ++t) {
      if (!mask[t]) continue;
      const double* row = pl + t * v;
      double* grow = gl + t * v;
      double mx = row[0];
      for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      double sum = 0.0;
      for (std::size_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
      for (std::size_t j = 0; j < v; ++j) {
        const double p = std::exp(row[j] - mx) / sum;
        grow[j] += g * (p - (j == static_cast<std::size_t>(targets[t]) ? 1.0 : 0.0));
      }
    }
  });
  return out;
}

// Row-wise log-softmax values without tape recording; used for scoring.
inline std::vector<double> log_softmax_row(const Tensor& logits, std::size_t row) {
  opdetail::check_rank2(logits, "log_softmax_row");
  const std::size_t v = logits.shape()[1];
  const double* r = logits.data() + row * v;
  double mx = r[0];
  for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, r[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < v; ++j) sum += std::exp(r[j] - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(v);
  for (std::size_t j = 0; j < v; ++j) out[j] = r[j] - lse;
  return out;
}

}  // namespace smlp
