#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "smlp/blocks.hpp"
#include "smlp/ops.hpp"
#include "smlp/rng.hpp"
#include "smlp/tensor.hpp"

// Routing strategies. Every router produces a RoutingPlan: an inspectable
// per-item list of (expert, gate) choices, plus — for learned routers — the
// differentiable score tensor the MoE layer re-selects gates from so that
// gradient flows into W_r.

namespace smlp {

enum class RouterKind {
  softmax_topk,         // learned token router, full softmax then top-k
  balanced_assignment,  // learned token router with equal (+/-1) expert loads
  hash,                 // stateless token-id hash
  deterministic_chunk,  // parameter-free contiguous hidden-dimension chunks
  partial_prediction,   // hidden-dimension router learned from the first 20%
  naive_smoe            // hidden-dimension router over the full sequence (leaky control)
};

inline const char* router_kind_name(RouterKind k) {
  switch (k) {
    case RouterKind::softmax_topk: return "softmax_topk";
    case RouterKind::balanced_assignment: return "balanced_assignment";
    case RouterKind::hash: return "hash";
    case RouterKind::deterministic_chunk: return "deterministic_chunk";
    case RouterKind::partial_prediction: return "partial_prediction";
    case RouterKind::naive_smoe: return "naive_smoe";
  }
  return "?";
}

inline RouterKind router_kind_from_name(const std::string& name) {
  for (RouterKind k : {RouterKind::softmax_topk, RouterKind::balanced_assignment, RouterKind::hash,
                       RouterKind::deterministic_chunk, RouterKind::partial_prediction,
                       RouterKind::naive_smoe})
    if (name == router_kind_name(k)) return k;
  throw ConfigError("unknown router kind \"" + name + "\"");
}

inline bool is_token_router(RouterKind k) {
  return k == RouterKind::softmax_topk || k == RouterKind::balanced_assignment ||
         k == RouterKind::hash;
}

inline bool is_hidden_router(RouterKind k) {
  return k == RouterKind::deterministic_chunk || k == RouterKind::partial_prediction ||
         k == RouterKind::naive_smoe;
}

struct RouterParams {
  RouterKind kind = RouterKind::deterministic_chunk;
  Tensor w_r;                  // learned routers only
  std::size_t k = 1;           // top-k width (softmax_topk)
  std::size_t n_experts = 1;
  std::uint64_t hash_seed = 0;
  double balance_coeff = 0.01;  // weight of the auxiliary balance loss

  // Learned router: in_dim is H for token routers, floor(0.2*T) for
  // partial_prediction, T for naive_smoe.
  static RouterParams learned(RouterKind kind, std::size_t in_dim, std::size_t n,
                              std::size_t k, Rng& rng) {
    if (n == 0) throw ConfigError("router: expert count must be positive");
    if (k == 0 || k > n)
      throw ConfigError("router: top-k width " + std::to_string(k) + " outside [1, " +
                        std::to_string(n) + "]");
    RouterParams p;
    p.kind = kind;
    p.w_r = glorot_uniform(in_dim, n, rng);
    p.k = k;
    p.n_experts = n;
    return p;
  }

  static RouterParams hashed(std::size_t n, std::uint64_t seed) {
    if (n == 0) throw ConfigError("router: expert count must be positive");
    RouterParams p;
    p.kind = RouterKind::hash;
    p.n_experts = n;
    p.hash_seed = seed;
    return p;
  }

  static RouterParams deterministic(std::size_t n) {
    if (n == 0) throw ConfigError("router: expert count must be positive");
    RouterParams p;
    p.kind = RouterKind::deterministic_chunk;
    p.n_experts = n;
    return p;
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    if (w_r.defined()) out.emplace_back(prefix + ".w_r", w_r);
  }
};

struct RoutingPlan {
  struct Choice {
    std::size_t expert;
    double gate;  // recorded value; the differentiable version lives in scores
  };

  RouterKind kind = RouterKind::deterministic_chunk;
  std::size_t n_experts = 0;
  // Per routed item, ordered by descending gate, length k, distinct experts.
  std::vector<std::vector<Choice>> assignments;
  // Differentiable router scores [M x N]: softmax probabilities for the
  // softmax family, raw affinities (pre-sigmoid) for balanced assignment.
  // Undefined for hash/deterministic routers, whose gates are exactly 1.
  Tensor scores;

  std::size_t n_items() const { return assignments.size(); }

  // Per-expert item counts in expert order.
  std::vector<std::size_t> loads() const {
    std::vector<std::size_t> l(n_experts, 0);
    for (const auto& item : assignments)
      for (const auto& c : item) ++l[c.expert];
    return l;
  }
};

namespace routedetail {

// Indices of the k largest entries of `p`, descending; equal values keep
// ascending index order, so ties resolve toward the lower expert.
inline std::vector<std::size_t> topk_desc(const double* p, std::size_t n, std::size_t k) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [p](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  order.resize(k);
  return order;
}

}  // namespace routedetail

// ---------------------------------------------------------------------------
// Learned softmax top-k (token router)

inline RoutingPlan softmax_topk_route(const RouterParams& p, const Tensor& items) {
  if (p.kind != RouterKind::softmax_topk)
    throw ConfigError("softmax_topk_route: router kind is " +
                      std::string(router_kind_name(p.kind)));
  if (!p.w_r.defined() || items.rank() != 2 || p.w_r.rows() != items.cols())
    throw ShapeError("softmax_topk_route: items " + shape_str(items.shape()) +
                     " vs router weights " +
                     (p.w_r.defined() ? shape_str(p.w_r.shape()) : std::string("(none)")));
  if (p.k > p.n_experts)
    throw ConfigError("softmax_topk_route: k " + std::to_string(p.k) + " > experts " +
                      std::to_string(p.n_experts));
  const std::size_t m = items.rows(), n = p.n_experts;
  RoutingPlan plan;
  plan.kind = p.kind;
  plan.n_experts = n;
  plan.scores = softmax(matmul(items, p.w_r), 1);
  plan.assignments.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = plan.scores.data() + i * n;
    for (std::size_t e : routedetail::topk_desc(row, n, p.k))
      plan.assignments[i].push_back({e, row[e]});
  }
  return plan;
}

// Load-balancing auxiliary loss: N * sum_i f_i * P_i, where f_i is the
// fraction of items whose top choice is expert i (constant) and P_i the mean
// probability mass on expert i (differentiable). Equals 1 at perfect balance,
// N when everything lands on one expert.
inline Tensor switch_balance_loss(const RoutingPlan& plan, const Tensor& full_probs) {
  const std::size_t m = plan.n_items(), n = plan.n_experts;
  if (m == 0) throw DataError("switch_balance_loss: empty plan");
  if (full_probs.rank() != 2 || full_probs.rows() != m || full_probs.cols() != n)
    throw ShapeError("switch_balance_loss: probs " + shape_str(full_probs.shape()) +
                     " vs plan of " + std::to_string(m) + " items, " + std::to_string(n) +
                     " experts");
  std::vector<double> f(n, 0.0);
  for (const auto& item : plan.assignments) f[item[0].expert] += 1.0 / static_cast<double>(m);
  return scale(weighted_sum(mean_axis0(full_probs), f), static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Balanced assignment (token router)

// Training mode: exact maximum-affinity assignment under the balanced load
// profile (exactly M mod N experts at ceil(M/N), the rest at floor(M/N), so
// max load - min load <= 1 for every input). Each expert exposes floor(M/N)
// regular slots plus one extra slot carrying a penalty larger than any
// achievable affinity spread; the optimum therefore uses the fewest possible
// extra slots, which is exactly the balanced profile. The penalized slot
// assignment is solved with shortest augmenting paths (O(M * slots^2),
// negligible at the sequence lengths routed here). Inference mode: plain
// per-item argmax.
inline RoutingPlan balanced_assignment_route(const RouterParams& p, const Tensor& items,
                                             bool training) {
  if (p.kind != RouterKind::balanced_assignment)
    throw ConfigError("balanced_assignment_route: router kind is " +
                      std::string(router_kind_name(p.kind)));
  if (!p.w_r.defined() || items.rank() != 2 || p.w_r.rows() != items.cols())
    throw ShapeError("balanced_assignment_route: items " + shape_str(items.shape()) +
                     " vs router weights " +
                     (p.w_r.defined() ? shape_str(p.w_r.shape()) : std::string("(none)")));
  const std::size_t m = items.rows(), n = p.n_experts;
  RoutingPlan plan;
  plan.kind = p.kind;
  plan.n_experts = n;
  plan.scores = matmul(items, p.w_r);  // raw affinities; gates are sigmoid(a)
  plan.assignments.resize(m);
  if (m == 0) return plan;
  const double* a = plan.scores.data();

  if (!training) {
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t e = routedetail::topk_desc(a + i * n, n, 1)[0];
      plan.assignments[i].push_back({e, opdetail::stable_sigmoid(a[i * n + e])});
    }
    return plan;
  }

  const std::size_t base = m / n;
  const std::size_t slots = n * (base + 1);  // expert-major; last slot of each expert is "extra"
  double lo = a[0], hi = a[0];
  for (std::size_t i = 1; i < m * n; ++i) {
    lo = std::min(lo, a[i]);
    hi = std::max(hi, a[i]);
  }
  const double penalty = (hi - lo + 1.0) * static_cast<double>(m + 1);
  std::vector<double> cost(m * slots);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t e = 0; e < n; ++e)
      for (std::size_t t = 0; t <= base; ++t)
        cost[i * slots + e * (base + 1) + t] = -a[i * n + e] + (t == base ? penalty : 0.0);

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> pot_item(m + 1, 0.0), pot_slot(slots + 1, 0.0);
  std::vector<std::size_t> owner(slots + 1, 0), way(slots + 1, 0);
  for (std::size_t i = 1; i <= m; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(slots + 1, inf);
    std::vector<char> used(slots + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = owner[j0];
      std::size_t j1 = 0;
      double delta = inf;
      for (std::size_t j = 1; j <= slots; ++j)
        if (!used[j]) {
          const double cur = cost[(i0 - 1) * slots + (j - 1)] - pot_item[i0] - pot_slot[j];
          if (cur < minv[j]) {
            minv[j] = cur;
            way[j] = j0;
          }
          if (minv[j] < delta) {
            delta = minv[j];
            j1 = j;
          }
        }
      for (std::size_t j = 0; j <= slots; ++j)
        if (used[j]) {
          pot_item[owner[j]] += delta;
          pot_slot[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  for (std::size_t j = 1; j <= slots; ++j)
    if (owner[j] != 0) {
      const std::size_t item = owner[j] - 1, e = (j - 1) / (base + 1);
      plan.assignments[item].push_back({e, opdetail::stable_sigmoid(a[item * n + e])});
    }
  return plan;
}

// ---------------------------------------------------------------------------
// Hash routing (token router)

inline RoutingPlan hash_route(const RouterParams& p, const std::vector<int>& token_ids) {
  if (p.kind != RouterKind::hash)
    throw ConfigError("hash_route: router kind is " + std::string(router_kind_name(p.kind)));
  RoutingPlan plan;
  plan.kind = p.kind;
  plan.n_experts = p.n_experts;
  plan.assignments.reserve(token_ids.size());
  for (int id : token_ids) {
    const std::size_t e = static_cast<std::size_t>(
        hash64(static_cast<std::uint64_t>(static_cast<std::int64_t>(id)), p.hash_seed) %
        p.n_experts);
    plan.assignments.push_back({{e, 1.0}});
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Deterministic hidden-chunk routing

inline RoutingPlan deterministic_chunk_route(std::size_t h_dim, std::size_t n) {
  if (n == 0) throw ConfigError("deterministic_chunk_route: expert count must be positive");
  if (h_dim % n != 0)
    throw ConfigError("deterministic_chunk_route: hidden dim " + std::to_string(h_dim) +
                      " not divisible by " + std::to_string(n) + " experts");
  const std::size_t chunk = h_dim / n;
  RoutingPlan plan;
  plan.kind = RouterKind::deterministic_chunk;
  plan.n_experts = n;
  plan.assignments.reserve(h_dim);
  for (std::size_t d = 0; d < h_dim; ++d) plan.assignments.push_back({{d / chunk, 1.0}});
  return plan;
}

// ---------------------------------------------------------------------------
// Partial-prediction routing (hidden router, reads only the first 20%)

// v1: [H x t1] — each hidden dimension's representation restricted to the
// first floor(0.2*T) tokens. The plan is a pure function of v1.
inline RoutingPlan partial_prediction_route(const RouterParams& p, const Tensor& v1) {
  if (p.kind != RouterKind::partial_prediction)
    throw ConfigError("partial_prediction_route: router kind is " +
                      std::string(router_kind_name(p.kind)));
  if (!p.w_r.defined() || v1.rank() != 2 || p.w_r.rows() != v1.cols())
    throw ShapeError("partial_prediction_route: prefix " + shape_str(v1.shape()) +
                     " vs router weights " +
                     (p.w_r.defined() ? shape_str(p.w_r.shape()) : std::string("(none)")));
  const std::size_t h = v1.rows(), n = p.n_experts;
  RoutingPlan plan;
  plan.kind = p.kind;
  plan.n_experts = n;
  plan.scores = softmax(matmul(v1, p.w_r), 1);
  plan.assignments.resize(h);
  for (std::size_t d = 0; d < h; ++d) {
    const double* row = plan.scores.data() + d * n;
    const std::size_t e = routedetail::topk_desc(row, n, 1)[0];
    plan.assignments[d].push_back({e, row[e]});
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Naive hidden-dimension gating (leaky negative control)

// v: [H x T] — the router reads the whole sequence, future tokens included.
// Kept only to make the information leak observable; never use for training
// a causal model.
inline RoutingPlan naive_smoe_route(const RouterParams& p, const Tensor& v) {
  if (p.kind != RouterKind::naive_smoe)
    throw ConfigError("naive_smoe_route: router kind is " +
                      std::string(router_kind_name(p.kind)));
  if (!p.w_r.defined() || v.rank() != 2 || p.w_r.rows() != v.cols())
    throw ShapeError("naive_smoe_route: input " + shape_str(v.shape()) + " vs router weights " +
                     (p.w_r.defined() ? shape_str(p.w_r.shape()) : std::string("(none)")));
  const std::size_t h = v.rows(), n = p.n_experts;
  RoutingPlan plan;
  plan.kind = p.kind;
  plan.n_experts = n;
  plan.scores = softmax(matmul(v, p.w_r), 1);
  plan.assignments.resize(h);
  for (std::size_t d = 0; d < h; ++d) {
    const double* row = plan.scores.data() + d * n;
    const std::size_t e = routedetail::topk_desc(row, n, 1)[0];
    plan.assignments[d].push_back({e, row[e]});
  }
  return plan;
}

}  // namespace smlp
