#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "smlp/model.hpp"

// Structural accounting and probes: parameter/FLOPs counts per module,
// the future-token leak probe, and expert load-balance metrics.

namespace smlp {

// ---------------------------------------------------------------------------
// Cost accounting

struct CostEntry {
  std::string name;
  std::size_t params = 0;
  std::uint64_t flops = 0;  // forward, one sequence of T tokens
};

struct CostReport {
  std::vector<CostEntry> entries;
  std::size_t total_params = 0;
  std::uint64_t total_flops = 0;
  // The counting convention the numbers were produced under.
  std::string convention =
      "forward pass, one sequence of T tokens; multiply-accumulate = 2 FLOPs; "
      "softmax/layernorm/gelu = 5 FLOPs per element; biases counted; "
      "token-routed expert mixing counted at an even expert split";

  void push(CostEntry e) {
    total_params += e.params;
    total_flops += e.flops;
    entries.push_back(std::move(e));
  }
};

// Multi-head self-attention over [T x H] with h heads: params are
// head-invariant, 4*H*(H+1); FLOPs pick up a small h-dependent softmax term.
inline CostEntry attention_costs(std::size_t h_dim, std::size_t t_len, std::size_t n_heads) {
  const std::uint64_t H = h_dim, T = t_len, h = n_heads;
  CostEntry e;
  e.name = "attention";
  e.params = 4 * h_dim * (h_dim + 1);
  e.flops = 8 * T * H * H  // Q/K/V/O projections
            + 4 * T * H    // projection biases
            + 4 * T * T * H  // scores and attention-weighted values
            + 6 * h * T * T;  // score scaling + row softmax (5/elem)
  return e;
}

// Multi-head spatial gating over [T x H]: params h*(T^2+T), linear in head
// count and quadratic in sequence length; FLOPs are head-invariant.
inline CostEntry sgu_costs(std::size_t t_len, std::size_t h_dim, std::size_t n_heads) {
  const std::uint64_t H = h_dim, T = t_len;
  CostEntry e;
  e.name = "sgu";
  e.params = n_heads * (t_len * t_len + t_len);
  e.flops = 2 * T * T * H + T * H;
  return e;
}

inline CostEntry ffn_costs(std::size_t h_dim, std::size_t f_dim, std::size_t t_len) {
  const std::uint64_t H = h_dim, F = f_dim, T = t_len;
  CostEntry e;
  e.name = "ffn";
  e.params = 2 * h_dim * f_dim + f_dim + h_dim;
  e.flops = 4 * T * H * F + 6 * T * F + T * H;  // two matmuls, biases, gelu
  return e;
}

inline CostEntry layernorm_costs(std::size_t h_dim, std::size_t t_len, const std::string& name) {
  CostEntry e;
  e.name = name;
  e.params = 2 * h_dim;
  e.flops = 5 * static_cast<std::uint64_t>(t_len) * h_dim;
  return e;
}

// Full-model accounting. Parameter counts are exact (they must equal a
// brute-force enumeration of the built model); FLOPs follow the report's
// convention, counting only activated experts (top-1 token routing).
inline CostReport count_costs(const ModelConfig& cfg) {
  modeldetail::validate(cfg);
  const std::uint64_t T = cfg.seq_len, H = cfg.embed_dim, V = cfg.vocab_size, N = cfg.n_experts;
  const std::size_t t1 = cfg.uses_partial() ? cfg.prefix_len() : 0;
  const std::uint64_t Ts = T - t1;  // token span inside sMoE experts

  CostReport rep;
  rep.push({"embed", cfg.vocab_size * cfg.embed_dim, 0});
  if (cfg.uses_attention()) rep.push({"pos_embed", cfg.seq_len * cfg.embed_dim, T * H});

  const std::vector<std::size_t> after = placement(cfg.n_dense, cfg.n_sparse);
  std::size_t next_sparse = 0, block_no = 0;

  auto dense_block = [&](const std::string& p) {
    rep.push(layernorm_costs(cfg.embed_dim, cfg.seq_len, p + ".ln1"));
    if (cfg.uses_attention()) {
      CostEntry a = attention_costs(cfg.embed_dim, cfg.seq_len, cfg.n_heads);
      a.name = p + ".attn";
      rep.push(a);
    } else {
      CostEntry s = sgu_costs(cfg.seq_len, cfg.embed_dim, cfg.n_heads);
      s.name = p + ".sgu";
      rep.push(s);
    }
    rep.push(layernorm_costs(cfg.embed_dim, cfg.seq_len, p + ".ln2"));
    CostEntry f = ffn_costs(cfg.embed_dim, cfg.ffn_dim, cfg.seq_len);
    f.name = p + ".ffn";
    rep.push(f);
    rep.push({p + ".residual", 0, 2 * T * H});
  };

  auto sparse_block = [&](const std::string& p) {
    switch (cfg.arch) {
      case Arch::smlp: {
        rep.push(layernorm_costs(cfg.embed_dim, cfg.seq_len, p + ".ln1"));
        CostEntry smoe;
        smoe.name = p + ".smoe";
        smoe.params = cfg.n_experts * (Ts * Ts + Ts);
        smoe.flops = 2 * Ts * Ts * H + Ts * H;  // expert spatial maps, evenly chunked
        if (cfg.router_kind == RouterKind::partial_prediction) {
          smoe.params += t1 * cfg.n_experts;
          smoe.flops += 2 * H * t1 * N + 5 * H * N  // routing affinities + softmax
                        + H * Ts;                   // gate scaling
        } else if (cfg.router_kind == RouterKind::naive_smoe) {
          smoe.params += cfg.seq_len * cfg.n_experts;
          smoe.flops += 2 * H * T * N + 5 * H * N + H * Ts;
        }
        rep.push(smoe);
        rep.push(layernorm_costs(cfg.embed_dim, cfg.seq_len, p + ".ln2"));
        CostEntry tmoe;
        tmoe.name = p + ".tmoe";
        tmoe.params = cfg.n_experts * (2 * cfg.embed_dim * cfg.ffn_dim + cfg.ffn_dim +
                                       cfg.embed_dim) +
                      cfg.embed_dim * cfg.n_experts;  // balanced-assignment router
        tmoe.flops = ffn_costs(cfg.embed_dim, cfg.ffn_dim, cfg.seq_len).flops  // activated
                     + 2 * T * H * N + 5 * T * N  // affinities + gates
                     + T * H;                     // gate scaling
        rep.push(tmoe);
        rep.push({p + ".residual", 0, 2 * T * H});
        break;
      }
      case Arch::transformer_moe: {
        rep.push(layernorm_costs(cfg.embed_dim, cfg.seq_len, p + ".ln1"));
        CostEntry a = attention_costs(cfg.embed_dim, cfg.seq_len, cfg.n_heads);
        a.name = p + ".attn";
        rep.push(a);
        rep.push(layernorm_costs(cfg.embed_dim, cfg.seq_len, p + ".ln2"));
        CostEntry tmoe;
        tmoe.name = p + ".tmoe";
        tmoe.params =
            cfg.n_experts * (2 * cfg.embed_dim * cfg.ffn_dim + cfg.ffn_dim + cfg.embed_dim);
        tmoe.flops = ffn_costs(cfg.embed_dim, cfg.ffn_dim, cfg.seq_len).flops;
        if (cfg.router_kind != RouterKind::hash) {
          tmoe.params += cfg.embed_dim * cfg.n_experts;
          tmoe.flops += 2 * T * H * N + 5 * T * N + T * H;
        }
        rep.push(tmoe);
        rep.push({p + ".residual", 0, 2 * T * H});
        break;
      }
      case Arch::gmlp_token_moe: {
        CostEntry naive;
        naive.name = p + ".naive";
        naive.params = cfg.n_experts * (2 * cfg.embed_dim            // ln1
                                        + cfg.seq_len * cfg.seq_len + cfg.seq_len  // sgu
                                        + 2 * cfg.embed_dim                        // ln2
                                        + 2 * cfg.embed_dim * cfg.ffn_dim + cfg.ffn_dim +
                                        cfg.embed_dim);  // ffn
        // Activated cost at an even split: spatial mixing shrinks by 1/N,
        // everything else is per-token.
        naive.flops = 10 * T * H                        // two layernorms
                      + 2 * T * T * H / N + T * H      // spatial maps
                      + ffn_costs(cfg.embed_dim, cfg.ffn_dim, cfg.seq_len).flops
                      + 2 * T * H;  // internal residuals
        if (cfg.router_kind != RouterKind::hash) {
          naive.params += cfg.embed_dim * cfg.n_experts;
          naive.flops += 2 * T * H * N + 5 * T * N + 3 * T * H;  // gate blend
        }
        rep.push(naive);
        break;
      }
      default:
        break;
    }
  };

  for (std::size_t i = 1; i <= cfg.n_dense; ++i) {
    dense_block("block" + std::to_string(block_no++));
    while (next_sparse < after.size() && after[next_sparse] == i) {
      sparse_block("block" + std::to_string(block_no++));
      ++next_sparse;
    }
  }

  rep.push(layernorm_costs(cfg.embed_dim, cfg.seq_len, "final_ln"));
  rep.push({"lm_head(tied)", 0, 2 * T * H * V});
  return rep;
}

// 4198400 -> "4.198M", 12989861888 -> "12.990G"; small counts print raw.
inline std::string human_count(std::uint64_t n) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  if (n >= 1000000000ull)
    os << static_cast<double>(n) / 1e9 << "G";
  else if (n >= 1000000ull)
    os << static_cast<double>(n) / 1e6 << "M";
  else if (n >= 1000ull)
    os << static_cast<double>(n) / 1e3 << "K";
  else
    os << n;
  return os.str();
}

inline std::string format_cost_report(const CostReport& rep) {
  std::size_t w = 12;
  for (const auto& e : rep.entries) w = std::max(w, e.name.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(w)) << "module" << std::right << std::setw(16)
     << "params" << std::setw(10) << "" << std::setw(18) << "flops" << std::setw(10) << ""
     << "\n";
  auto line = [&](const std::string& name, std::uint64_t params, std::uint64_t flops) {
    os << std::left << std::setw(static_cast<int>(w)) << name << std::right << std::setw(16)
       << params << std::setw(10) << human_count(params) << std::setw(18) << flops
       << std::setw(10) << human_count(flops) << "\n";
  };
  for (const auto& e : rep.entries) line(e.name, e.params, e.flops);
  line("total", rep.total_params, rep.total_flops);
  os << "convention: " << rep.convention << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Leak probe

struct LeakReport {
  std::size_t t = 0;        // probed position
  std::size_t u = 0;        // perturbed (later) position
  double max_delta = 0.0;   // max |delta logit| over positions <= t
  bool causal = true;       // max_delta <= threshold

  static constexpr double threshold = 1e-9;
};

// Replace token u with a different id and measure how much the logits at
// positions <= t move. Forward runs in inference mode: a causal model must
// show exactly zero movement.
inline LeakReport probe_causality(const Model& m, const std::vector<int>& tokens, std::size_t t,
                                  std::size_t u) {
  if (u <= t)
    throw ConfigError("probe: perturbed position " + std::to_string(u) +
                      " must lie after probed position " + std::to_string(t));
  if (u >= tokens.size())
    throw ConfigError("probe: position " + std::to_string(u) + " outside sequence of " +
                      std::to_string(tokens.size()));
  Tensor base = forward_lm(m, tokens).logits;
  std::vector<int> pert = tokens;
  pert[u] = (tokens[u] + 1) % static_cast<int>(m.cfg.vocab_size);
  Tensor moved = forward_lm(m, pert).logits;

  LeakReport rep;
  rep.t = t;
  rep.u = u;
  const std::size_t v = m.cfg.vocab_size;
  for (std::size_t i = 0; i <= t; ++i)
    for (std::size_t j = 0; j < v; ++j)
      rep.max_delta = std::max(rep.max_delta, std::abs(moved.at(i, j) - base.at(i, j)));
  rep.causal = rep.max_delta <= LeakReport::threshold;
  return rep;
}

// Worst report over every (t, u) pair with u > t.
inline LeakReport probe_causality_all(const Model& m, const std::vector<int>& tokens) {
  LeakReport worst;
  bool first = true;
  for (std::size_t u = 1; u < tokens.size(); ++u) {
    // One probe at t = u-1 covers all t < u: its max runs over positions <= t.
    LeakReport rep = probe_causality(m, tokens, u - 1, u);
    if (first || rep.max_delta > worst.max_delta) worst = rep;
    first = false;
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Load balance

struct BalanceMetrics {
  std::size_t max_load = 0;
  std::size_t min_load = 0;
  double imbalance_ratio = 0.0;  // max_load / (M/N)
};

inline BalanceMetrics balance_metrics(const RoutingPlan& plan) {
  const std::size_t m = plan.n_items(), n = plan.n_experts;
  if (m == 0) throw DataError("balance_metrics: empty routing plan");
  std::vector<std::size_t> loads = plan.loads();
  BalanceMetrics bm;
  bm.max_load = 0;
  bm.min_load = loads.empty() ? 0 : loads[0];
  for (std::size_t l : loads) {
    bm.max_load = std::max(bm.max_load, l);
    bm.min_load = std::min(bm.min_load, l);
  }
  bm.imbalance_ratio =
      static_cast<double>(bm.max_load) / (static_cast<double>(m) / static_cast<double>(n));
  return bm;
}

}  // namespace smlp
