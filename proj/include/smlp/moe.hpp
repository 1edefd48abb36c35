#pragma once

#include <string>
#include <vector>

#include "smlp/blocks.hpp"
#include "smlp/ops.hpp"
#include "smlp/routing.hpp"
#include "smlp/tensor.hpp"

// Sparse layers. tMoE routes token representations to FFN experts; sMoE
// routes hidden dimensions (rows of the transposed representation) to SGU
// experts; the naive token-routed gMLP layer is the negative control whose
// experts mix tokens only within their own subsequence.
//
// Dispatch works the same way everywhere: group items by expert in ascending
// expert order (ascending item order within a group), run each expert on its
// gathered block, then reassemble with a single inverse-permutation gather.
// Reassembly moves elements without any arithmetic, so results are bitwise
// identical to the dense computation in the degenerate cases.

namespace smlp {

inline std::size_t partial_prefix_len(std::size_t t_len) {
  const std::size_t t1 = t_len / 5;  // floor(0.2*T)
  return t1 == 0 ? 1 : t1;
}

// ---------------------------------------------------------------------------
// Expert pools

struct FfnExpertPool {
  std::vector<FfnParams> experts;

  static FfnExpertPool init(std::size_t n, std::size_t h_dim, std::size_t f_dim, Rng& rng) {
    FfnExpertPool pool;
    for (std::size_t e = 0; e < n; ++e) pool.experts.push_back(FfnParams::init(h_dim, f_dim, rng));
    return pool;
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    for (std::size_t e = 0; e < experts.size(); ++e)
      experts[e].collect(prefix + ".expert" + std::to_string(e), out);
  }
};

struct SguExpertPool {
  std::vector<SguParams> experts;

  static SguExpertPool init(std::size_t n, std::size_t t_len, Rng& rng) {
    SguExpertPool pool;
    for (std::size_t e = 0; e < n; ++e) pool.experts.push_back(SguParams::init(t_len, true, rng));
    return pool;
  }

  void remask() {
    for (auto& e : experts) e.remask();
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    for (std::size_t e = 0; e < experts.size(); ++e)
      experts[e].collect(prefix + ".expert" + std::to_string(e), out);
  }
};

// Expert of the naive token-routed layer: a full pre-norm gMLP block
// (spatial gate + FFN) with spatial capacity for the whole sequence.
struct GmlpExpertPool {
  struct Expert {
    LayerNormParams ln1;
    SguParams sgu;
    LayerNormParams ln2;
    FfnParams ffn;
  };
  std::vector<Expert> experts;

  static GmlpExpertPool init(std::size_t n, std::size_t t_cap, std::size_t h_dim,
                             std::size_t f_dim, Rng& rng) {
    GmlpExpertPool pool;
    for (std::size_t e = 0; e < n; ++e) {
      Expert ex;
      ex.ln1 = LayerNormParams::init(h_dim);
      ex.sgu = SguParams::init(t_cap, true, rng);
      ex.ln2 = LayerNormParams::init(h_dim);
      ex.ffn = FfnParams::init(h_dim, f_dim, rng);
      pool.experts.push_back(ex);
    }
    return pool;
  }

  void remask() {
    for (auto& e : experts) e.sgu.remask();
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    for (std::size_t e = 0; e < experts.size(); ++e) {
      const std::string ep = prefix + ".expert" + std::to_string(e);
      experts[e].ln1.collect(ep + ".ln1", out);
      experts[e].sgu.collect(ep + ".sgu", out);
      experts[e].ln2.collect(ep + ".ln2", out);
      experts[e].ffn.collect(ep + ".ffn", out);
    }
  }
};

namespace moedetail {

// Items grouped by expert for one top-k slot: group e lists item indices in
// ascending order; dispatch_order is their concatenation; inverse[i] is the
// position of item i inside dispatch_order.
struct SlotGroups {
  std::vector<std::vector<std::size_t>> by_expert;
  std::vector<std::size_t> dispatch_order;
  std::vector<std::size_t> inverse;
};

inline SlotGroups group_slot(const RoutingPlan& plan, std::size_t slot) {
  SlotGroups g;
  g.by_expert.resize(plan.n_experts);
  for (std::size_t i = 0; i < plan.assignments.size(); ++i) {
    if (slot >= plan.assignments[i].size())
      throw ConfigError("routing plan item " + std::to_string(i) + " has no top-" +
                        std::to_string(slot + 1) + " choice");
    g.by_expert[plan.assignments[i][slot].expert].push_back(i);
  }
  g.inverse.resize(plan.assignments.size());
  for (const auto& group : g.by_expert)
    for (std::size_t i : group) {
      g.inverse[i] = g.dispatch_order.size();
      g.dispatch_order.push_back(i);
    }
  return g;
}

// Differentiable gate values for one expert group. For softmax-family
// routers the scores are probabilities; balanced assignment stores raw
// affinities and gates through a sigmoid.
inline Tensor group_gates(const RoutingPlan& plan, const std::vector<std::size_t>& rows,
                          std::size_t expert) {
  Tensor picked = select_at(plan.scores, rows, std::vector<std::size_t>(rows.size(), expert));
  return plan.kind == RouterKind::balanced_assignment ? sigmoid(picked) : picked;
}

}  // namespace moedetail

// ---------------------------------------------------------------------------
// tMoE: token-routed FFN experts

// Gate-weighted sum of expert outputs per token, no residual. With a single
// expert this is exactly one dense FFN forward (gate pinned to 1 for every
// router kind).
inline Tensor tmoe_combine(const FfnExpertPool& pool, const RouterParams& router,
                           const Tensor& x, bool training,
                           const std::vector<int>& token_ids = {},
                           RoutingPlan* plan_out = nullptr) {
  if (!is_token_router(router.kind))
    throw ConfigError("tmoe: hidden-dimension router " +
                      std::string(router_kind_name(router.kind)) + " given to a token layer");
  if (pool.experts.size() != router.n_experts)
    throw ConfigError("tmoe: pool of " + std::to_string(pool.experts.size()) + " experts vs " +
                      std::to_string(router.n_experts) + " in router");
  const std::size_t t_len = x.rows();

  if (router.n_experts == 1) {
    if (plan_out) {
      plan_out->kind = router.kind;
      plan_out->n_experts = 1;
      plan_out->assignments.assign(t_len, {{0, 1.0}});
      plan_out->scores = Tensor();
    }
    return ffn_forward(pool.experts[0], x);
  }

  RoutingPlan plan;
  switch (router.kind) {
    case RouterKind::softmax_topk:
      plan = softmax_topk_route(router, x);
      break;
    case RouterKind::balanced_assignment:
      plan = balanced_assignment_route(router, x, training);
      break;
    case RouterKind::hash:
      if (token_ids.size() != t_len)
        throw ConfigError("tmoe: hash router needs one token id per row, got " +
                          std::to_string(token_ids.size()) + " ids for " +
                          std::to_string(t_len) + " rows");
      plan = hash_route(router, token_ids);
      break;
    default:
      throw ConfigError("tmoe: unsupported router");
  }

  const std::size_t k = plan.assignments.empty() ? 1 : plan.assignments[0].size();
  Tensor acc;
  for (std::size_t slot = 0; slot < k; ++slot) {
    moedetail::SlotGroups g = moedetail::group_slot(plan, slot);
    std::vector<Tensor> pieces;
    for (std::size_t e = 0; e < plan.n_experts; ++e) {
      const auto& rows = g.by_expert[e];
      if (rows.empty()) continue;
      Tensor out_e = ffn_forward(pool.experts[e], gather_rows(x, rows));
      if (plan.scores.defined())
        out_e = scale_rows(out_e, moedetail::group_gates(plan, rows, e));
      pieces.push_back(out_e);
    }
    Tensor slot_out = gather_rows(concat_rows(pieces), g.inverse);
    acc = acc.defined() ? add(acc, slot_out) : slot_out;
  }
  if (plan_out) *plan_out = plan;
  return acc;
}

// Spec surface: y = x + sum_{i in top-k} p_i * E_i(x).
inline Tensor tmoe_forward(const FfnExpertPool& pool, const RouterParams& router,
                           const Tensor& x, bool training = false,
                           const std::vector<int>& token_ids = {},
                           RoutingPlan* plan_out = nullptr) {
  return add(x, tmoe_combine(pool, router, x, training, token_ids, plan_out));
}

// ---------------------------------------------------------------------------
// sMoE: hidden-dimension-routed SGU experts

// Core combine, no residual: transpose to V = X^T, dispatch hidden rows to
// experts, run each expert's causal SGU along the token axis, reassemble,
// transpose back. For partial prediction the experts see only the last-80%
// slice and the result is scattered to those positions (rows before the
// prefix boundary come back all-zero).
inline Tensor smoe_combine(const SguExpertPool& pool, const RouterParams& router,
                           const Tensor& x, RoutingPlan* plan_out = nullptr) {
  if (!is_hidden_router(router.kind))
    throw ConfigError("smoe: token router " + std::string(router_kind_name(router.kind)) +
                      " given to a hidden-dimension layer");
  if (pool.experts.size() != router.n_experts)
    throw ConfigError("smoe: pool of " + std::to_string(pool.experts.size()) + " experts vs " +
                      std::to_string(router.n_experts) + " in router");
  const std::size_t t_len = x.rows(), h_dim = x.cols();

  Tensor v = transpose(x);  // [H x T]
  RoutingPlan plan;
  Tensor v_work = v;
  std::size_t t1 = 0;
  switch (router.kind) {
    case RouterKind::deterministic_chunk:
      plan = deterministic_chunk_route(h_dim, router.n_experts);
      break;
    case RouterKind::partial_prediction:
      if (!router.w_r.defined())
        throw ConfigError("smoe: partial-prediction router has no routing weight");
      t1 = router.w_r.shape()[0];  // routing prefix length the router was built for
      if (t1 >= t_len)
        throw ConfigError("smoe: sequence of " + std::to_string(t_len) +
                          " leaves no positions to predict after the routing prefix of " +
                          std::to_string(t1));
      plan = partial_prediction_route(router, slice_cols(v, 0, t1));
      v_work = slice_cols(v, t1, t_len);
      break;
    case RouterKind::naive_smoe:
      plan = naive_smoe_route(router, v);
      break;
    default:
      throw ConfigError("smoe: unsupported router");
  }

  const std::size_t t_expert = t_len - t1;  // token span each expert covers
  for (const auto& ex : pool.experts)
    if (ex.t_len() != t_expert)
      throw ConfigError("smoe: expert spatial capacity " + std::to_string(ex.t_len()) +
                        " does not match routed span " + std::to_string(t_expert));

  moedetail::SlotGroups g = moedetail::group_slot(plan, 0);
  std::vector<Tensor> pieces;
  for (std::size_t e = 0; e < plan.n_experts; ++e) {
    const auto& dims = g.by_expert[e];
    if (dims.empty()) continue;
    Tensor xe = transpose(gather_rows(v_work, dims));      // [T' x c_e]
    Tensor ye = transpose(sgu_forward(pool.experts[e], xe));  // back to [c_e x T']
    if (plan.scores.defined()) ye = scale_rows(ye, moedetail::group_gates(plan, dims, e));
    pieces.push_back(ye);
  }
  Tensor combined = transpose(gather_rows(concat_rows(pieces), g.inverse));  // [T' x H]
  if (plan_out) *plan_out = plan;
  if (t1 == 0) return combined;
  std::vector<std::size_t> tail(t_expert);
  for (std::size_t i = 0; i < t_expert; ++i) tail[i] = t1 + i;
  return scatter_rows(combined, tail, t_len);
}

// Spec surface, no residual: the transformed representation itself. Under
// partial prediction the first floor(0.2*T) positions pass through unchanged.
inline Tensor smoe_forward(const SguExpertPool& pool, const RouterParams& router,
                           const Tensor& x, RoutingPlan* plan_out = nullptr) {
  if (router.kind == RouterKind::partial_prediction) {
    RoutingPlan plan;
    Tensor delta = smoe_combine(pool, router, x, &plan);
    const std::size_t t1 = router.w_r.shape()[0];
    Tensor out = concat_rows(
        {slice_rows(x, 0, t1), slice_rows(delta, t1, x.rows())});
    if (plan_out) *plan_out = plan;
    return out;
  }
  return smoe_combine(pool, router, x, plan_out);
}

// ---------------------------------------------------------------------------
// Naive token-routed gMLP layer (negative control)

// Each expert runs a full pre-norm gMLP block on its own subsequence; token
// position j within the subsequence uses spatial row j. A token routed alone
// therefore mixes with nothing — the pathology this layer exists to exhibit.
// Output is a full block output (internal residuals), not a residual delta.
// Learned gates blend expert output with the untouched input:
// (1-p)*x + p*E(x); gate-1 routers place E(x) directly.
inline Tensor naive_gmlp_token_moe_forward(const GmlpExpertPool& pool,
                                           const RouterParams& router, const Tensor& x,
                                           bool training = false,
                                           const std::vector<int>& token_ids = {},
                                           RoutingPlan* plan_out = nullptr) {
  if (!is_token_router(router.kind))
    throw ConfigError("naive gmlp moe: hidden-dimension router " +
                      std::string(router_kind_name(router.kind)) + " given to a token layer");
  if (pool.experts.size() != router.n_experts)
    throw ConfigError("naive gmlp moe: pool of " + std::to_string(pool.experts.size()) +
                      " experts vs " + std::to_string(router.n_experts) + " in router");
  if (router.k != 1)
    throw ConfigError("naive gmlp moe: only top-1 routing is supported");
  const std::size_t t_len = x.rows();

  RoutingPlan plan;
  switch (router.kind) {
    case RouterKind::softmax_topk:
      plan = softmax_topk_route(router, x);
      break;
    case RouterKind::balanced_assignment:
      plan = balanced_assignment_route(router, x, training);
      break;
    case RouterKind::hash:
      if (token_ids.size() != t_len)
        throw ConfigError("naive gmlp moe: hash router needs one token id per row, got " +
                          std::to_string(token_ids.size()) + " ids for " +
                          std::to_string(t_len) + " rows");
      plan = hash_route(router, token_ids);
      break;
    default:
      throw ConfigError("naive gmlp moe: unsupported router");
  }

  moedetail::SlotGroups g = moedetail::group_slot(plan, 0);
  std::vector<Tensor> pieces;
  for (std::size_t e = 0; e < plan.n_experts; ++e) {
    const auto& rows = g.by_expert[e];
    if (rows.empty()) continue;
    const auto& ex = pool.experts[e];
    if (rows.size() > ex.sgu.t_len())
      throw ShapeError("naive gmlp moe: subsequence of " + std::to_string(rows.size()) +
                       " tokens exceeds expert capacity " + std::to_string(ex.sgu.t_len()));
    Tensor sub = gather_rows(x, rows);
    Tensor u = add(sub, sgu_forward_prefix(ex.sgu, ex.ln1.forward(sub)));
    Tensor y = add(u, ffn_forward(ex.ffn, ex.ln2.forward(u)));
    if (plan.scores.defined()) {
      Tensor p = moedetail::group_gates(plan, rows, e);
      Tensor q = add_scalar(scale(p, -1.0), 1.0);  // 1 - p
      y = add(scale_rows(sub, q), scale_rows(y, p));
    }
    pieces.push_back(y);
  }
  if (plan_out) *plan_out = plan;
  return gather_rows(concat_rows(pieces), g.inverse);
}

}  // namespace smlp
