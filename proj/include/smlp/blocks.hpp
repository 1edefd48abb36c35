#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "smlp/ops.hpp"
#include "smlp/rng.hpp"
#include "smlp/tensor.hpp"

// Dense building blocks: spatial gating unit (the token-mixing linear map
// Y = W_s X), its multi-head form, position-wise FFN, multi-head
// self-attention, and layer normalization parameters.
//
// Initialization draws from the provided Rng in the declared field order, so
// a fixed seed fully determines every parameter.

namespace smlp {

// Parameters are handed around as (name, tensor) pairs; names double as
// checkpoint record keys.
using NamedParams = std::vector<std::pair<std::string, Tensor>>;

inline Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return Tensor::randu({fan_in, fan_out}, rng, -a, a, true);
}

struct LayerNormParams {
  Tensor gain, bias;

  static LayerNormParams init(std::size_t h) {
    LayerNormParams p;
    p.gain = Tensor::full({h}, 1.0, true);
    p.bias = Tensor::zeros({h}, true);
    return p;
  }

  Tensor forward(const Tensor& x) const { return layernorm(x, gain, bias); }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".gain", gain);
    out.emplace_back(prefix + ".bias", bias);
  }
};

// ---------------------------------------------------------------------------
// Spatial gating unit

struct SguParams {
  Tensor w_s;  // [T x T] spatial weights
  Tensor b_s;  // [T] per-position bias
  bool causal = true;

  // Near-zero spatial weights start close to a pass-through of the residual
  // branch and keep early training stable; the scale shrinks with T.
  static SguParams init(std::size_t t_len, bool causal, Rng& rng) {
    SguParams p;
    const double a = 1e-3 / static_cast<double>(t_len);
    p.w_s = Tensor::randu({t_len, t_len}, rng, -a, a, true);
    p.b_s = Tensor::zeros({t_len}, true);
    p.causal = causal;
    p.remask();
    return p;
  }

  std::size_t t_len() const { return w_s.rows(); }

  // Hard-zeros the upper triangle. Called at init and after every optimizer
  // step so causal W_s never carries weight above the diagonal.
  void remask() {
    if (!causal) return;
    const std::size_t t = w_s.rows();
    double* w = w_s.data();
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = i + 1; j < t; ++j) w[i * t + j] = 0.0;
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".w_s", w_s);
    out.emplace_back(prefix + ".b_s", b_s);
  }
};

// Y = W_s·X + b_s (bias broadcast along the hidden axis). The causal variant
// computes row t from input rows <= t only — the loop bound, not a mask,
// carries the guarantee.
inline Tensor sgu_forward(const SguParams& p, const Tensor& x) {
  if (x.rank() != 2 || x.rows() != p.w_s.rows())
    throw ShapeError("sgu_forward: input " + shape_str(x.shape()) +
                     " does not match spatial weights " + shape_str(p.w_s.shape()));
  Tensor y = p.causal ? lower_tri_matmul(p.w_s, x) : matmul(p.w_s, x);
  return add_row_bias(y, p.b_s);
}

// SGU applied to a length-l prefix of its capacity: uses the top-left l x l
// corner of W_s and the first l bias entries. Position j of the subsequence
// is treated as absolute position j. Equals sgu_forward when l == T.
inline Tensor sgu_forward_prefix(const SguParams& p, const Tensor& x) {
  const std::size_t l = x.rows();
  if (l > p.w_s.rows())
    throw ShapeError("sgu_forward_prefix: subsequence of " + std::to_string(l) +
                     " rows exceeds spatial capacity " + std::to_string(p.w_s.rows()));
  Tensor w_sub = slice_cols(slice_rows(p.w_s, 0, l), 0, l);
  Tensor b_sub = slice_vec(p.b_s, 0, l);
  Tensor y = p.causal ? lower_tri_matmul(w_sub, x) : matmul(w_sub, x);
  return add_row_bias(y, b_sub);
}

// Columns of X split into h blocks; block i runs through its own SGU; results
// concatenated back in block order. h=1 is exactly sgu_forward.
inline Tensor multi_head_sgu(const std::vector<SguParams>& heads, const Tensor& x) {
  if (heads.empty()) throw ShapeError("multi_head_sgu: no heads");
  if (heads.size() == 1) return sgu_forward(heads[0], x);
  if (x.rank() != 2 || x.cols() % heads.size() != 0)
    throw ShapeError("multi_head_sgu: hidden dim of " + shape_str(x.shape()) +
                     " not divisible by " + std::to_string(heads.size()) + " heads");
  std::vector<Tensor> parts = chunk(x, 1, heads.size());
  std::vector<Tensor> outs;
  outs.reserve(parts.size());
  for (std::size_t i = 0; i < parts.size(); ++i) outs.push_back(sgu_forward(heads[i], parts[i]));
  return concat_cols(outs);
}

// ---------------------------------------------------------------------------
// Multi-head self-attention

struct AttentionParams {
  std::vector<Tensor> w_q, w_k, w_v;  // per head: [H x d]
  std::vector<Tensor> b_q, b_k, b_v;  // per head: [d]
  Tensor w_o;                         // [H x H]
  Tensor b_o;                         // [H]

  static AttentionParams init(std::size_t h_dim, std::size_t n_heads, Rng& rng) {
    if (n_heads == 0 || h_dim % n_heads != 0)
      throw ConfigError("attention: embed dim " + std::to_string(h_dim) +
                        " not divisible by " + std::to_string(n_heads) + " heads");
    const std::size_t d = h_dim / n_heads;
    AttentionParams p;
    for (std::size_t i = 0; i < n_heads; ++i) {
      p.w_q.push_back(glorot_uniform(h_dim, d, rng));
      p.b_q.push_back(Tensor::zeros({d}, true));
      p.w_k.push_back(glorot_uniform(h_dim, d, rng));
      p.b_k.push_back(Tensor::zeros({d}, true));
      p.w_v.push_back(glorot_uniform(h_dim, d, rng));
      p.b_v.push_back(Tensor::zeros({d}, true));
    }
    p.w_o = glorot_uniform(h_dim, h_dim, rng);
    p.b_o = Tensor::zeros({h_dim}, true);
    return p;
  }

  std::size_t heads() const { return w_q.size(); }
  std::size_t h_dim() const { return w_o.rows(); }

  void collect(const std::string& prefix, NamedParams& out) const {
    for (std::size_t i = 0; i < w_q.size(); ++i) {
      const std::string hp = prefix + ".head" + std::to_string(i);
      out.emplace_back(hp + ".w_q", w_q[i]);
      out.emplace_back(hp + ".b_q", b_q[i]);
      out.emplace_back(hp + ".w_k", w_k[i]);
      out.emplace_back(hp + ".b_k", b_k[i]);
      out.emplace_back(hp + ".w_v", w_v[i]);
      out.emplace_back(hp + ".b_v", b_v[i]);
    }
    out.emplace_back(prefix + ".w_o", w_o);
    out.emplace_back(prefix + ".b_o", b_o);
  }
};

// Scaled dot-product attention per head, heads concatenated, then the output
// projection. The causal path normalizes each row's scores over the prefix
// only (structural, no -inf arithmetic), so later tokens cannot contribute.
inline Tensor self_attention(const AttentionParams& p, const Tensor& x, bool causal) {
  if (x.rank() != 2 || x.cols() != p.h_dim())
    throw ShapeError("self_attention: input " + shape_str(x.shape()) + " vs embed dim " +
                     std::to_string(p.h_dim()));
  const std::size_t d = p.h_dim() / p.heads();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<Tensor> outs;
  outs.reserve(p.heads());
  for (std::size_t i = 0; i < p.heads(); ++i) {
    Tensor q = add_col_bias(matmul(x, p.w_q[i]), p.b_q[i]);
    Tensor k = add_col_bias(matmul(x, p.w_k[i]), p.b_k[i]);
    Tensor v = add_col_bias(matmul(x, p.w_v[i]), p.b_v[i]);
    Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
    Tensor attn = causal ? causal_row_softmax(scores) : softmax(scores, 1);
    outs.push_back(matmul(attn, v));
  }
  Tensor cat = outs.size() == 1 ? outs[0] : concat_cols(outs);
  return add_col_bias(matmul(cat, p.w_o), p.b_o);
}

// ---------------------------------------------------------------------------
// Position-wise feed-forward

struct FfnParams {
  Tensor w1;  // [H x F]
  Tensor b1;  // [F]
  Tensor w2;  // [F x H]
  Tensor b2;  // [H]

  static FfnParams init(std::size_t h_dim, std::size_t f_dim, Rng& rng) {
    FfnParams p;
    p.w1 = glorot_uniform(h_dim, f_dim, rng);
    p.b1 = Tensor::zeros({f_dim}, true);
    p.w2 = glorot_uniform(f_dim, h_dim, rng);
    p.b2 = Tensor::zeros({h_dim}, true);
    return p;
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".w1", w1);
    out.emplace_back(prefix + ".b1", b1);
    out.emplace_back(prefix + ".w2", w2);
    out.emplace_back(prefix + ".b2", b2);
  }
};

// gelu(X·W1 + b1)·W2 + b2, row-wise: row t of the output is a function of
// row t of the input alone.
inline Tensor ffn_forward(const FfnParams& p, const Tensor& x) {
  if (x.rank() != 2 || x.cols() != p.w1.rows())
    throw ShapeError("ffn_forward: input " + shape_str(x.shape()) + " vs weights " +
                     shape_str(p.w1.shape()));
  return add_col_bias(matmul(gelu(add_col_bias(matmul(x, p.w1), p.b1)), p.w2), p.b2);
}

inline std::size_t param_count(const NamedParams& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

}  // namespace smlp
