#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "smlp/blocks.hpp"
#include "smlp/moe.hpp"
#include "smlp/ops.hpp"
#include "smlp/routing.hpp"
#include "smlp/tensor.hpp"

// Full language models: a stack of N1 dense blocks with N2 sparse blocks
// inserted at evenly spread positions, between a tied embedding/output
// projection. All blocks are pre-norm and causal.

namespace smlp {

enum class Arch {
  smlp,             // dense gMLP blocks + sparse blocks {sMoE + tMoE}
  gmlp,             // dense gMLP blocks only
  transformer,      // dense attention blocks only
  transformer_moe,  // dense attention blocks + sparse blocks {attention + tMoE}
  gmlp_token_moe    // dense gMLP blocks + naive token-routed gMLP layers (control)
};

inline const char* arch_name(Arch a) {
  switch (a) {
    case Arch::smlp: return "smlp";
    case Arch::gmlp: return "gmlp";
    case Arch::transformer: return "transformer";
    case Arch::transformer_moe: return "transformer_moe";
    case Arch::gmlp_token_moe: return "gmlp_token_moe";
  }
  return "?";
}

inline Arch arch_from_name(const std::string& name) {
  for (Arch a : {Arch::smlp, Arch::gmlp, Arch::transformer, Arch::transformer_moe,
                 Arch::gmlp_token_moe})
    if (name == arch_name(a)) return a;
  throw ConfigError("unknown arch \"" + name + "\"");
}

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t seq_len = 0;    // T
  std::size_t embed_dim = 0;  // H
  std::size_t ffn_dim = 0;    // F
  std::size_t n_dense = 0;    // N1
  std::size_t n_sparse = 0;   // N2
  std::size_t n_experts = 1;  // N
  std::size_t n_heads = 1;    // h
  RouterKind router_kind = RouterKind::deterministic_chunk;
  Arch arch = Arch::smlp;
  double partial_fraction = 0.2;
  std::uint64_t seed = 0;

  bool uses_attention() const {
    return arch == Arch::transformer || arch == Arch::transformer_moe;
  }
  bool uses_partial() const {
    return arch == Arch::smlp && router_kind == RouterKind::partial_prediction;
  }
  // Routing-prefix length under partial prediction: floor(fraction*T), min 1.
  std::size_t prefix_len() const {
    const double raw = std::floor(partial_fraction * static_cast<double>(seq_len) + 1e-9);
    const std::size_t t1 = raw < 1.0 ? 0 : static_cast<std::size_t>(raw);
    return t1 == 0 ? 1 : t1;
  }
};

// Insertion points for sparse blocks: "after dense layer i" for each returned
// i = floor(j*(N1+N2)/(N2+1)), j = 1..N2. Rejects placements that the dense
// stack cannot host.
inline std::vector<std::size_t> placement(std::size_t n_dense, std::size_t n_sparse) {
  std::vector<std::size_t> idx;
  std::size_t prev = 0;
  for (std::size_t j = 1; j <= n_sparse; ++j) {
    const std::size_t i = j * (n_dense + n_sparse) / (n_sparse + 1);
    if (i < 1 || i > n_dense)
      throw ConfigError("placement: sparse block " + std::to_string(j) +
                        " lands after dense layer " + std::to_string(i) +
                        ", outside [1, " + std::to_string(n_dense) + "]");
    if (i <= prev)
      throw ConfigError("placement: sparse blocks " + std::to_string(j - 1) + " and " +
                        std::to_string(j) + " collide after dense layer " + std::to_string(i));
    idx.push_back(i);
    prev = i;
  }
  return idx;
}

enum class BlockKind { dense_gmlp, dense_transformer, sparse_smlp, sparse_tmoe, naive_gmlp_moe };

// One block of the stack; which members are live depends on `kind`.
struct Block {
  BlockKind kind = BlockKind::dense_gmlp;
  LayerNormParams ln1, ln2;
  std::vector<SguParams> sgu_heads;  // dense_gmlp
  AttentionParams attn;              // dense_transformer, sparse_tmoe
  FfnParams ffn;                     // dense blocks
  SguExpertPool smoe_pool;           // sparse_smlp
  RouterParams smoe_router;
  FfnExpertPool tmoe_pool;           // sparse_smlp, sparse_tmoe
  RouterParams tmoe_router;
  GmlpExpertPool naive_pool;  // naive_gmlp_moe
  RouterParams naive_router;
};

struct Model {
  ModelConfig cfg;
  Tensor embed;      // [V x H]; also the (tied) output projection
  Tensor pos_embed;  // [T x H]; attention archs only, otherwise undefined
  std::vector<Block> blocks;
  LayerNormParams final_ln;

  // Every parameter with a stable, unique name, in forward order.
  NamedParams params() const {
    NamedParams out;
    out.emplace_back("embed", embed);
    if (pos_embed.defined()) out.emplace_back("pos_embed", pos_embed);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const Block& blk = blocks[b];
      const std::string p = "block" + std::to_string(b);
      switch (blk.kind) {
        case BlockKind::dense_gmlp:
          blk.ln1.collect(p + ".ln1", out);
          for (std::size_t h = 0; h < blk.sgu_heads.size(); ++h)
            blk.sgu_heads[h].collect(p + ".sgu.head" + std::to_string(h), out);
          blk.ln2.collect(p + ".ln2", out);
          blk.ffn.collect(p + ".ffn", out);
          break;
        case BlockKind::dense_transformer:
          blk.ln1.collect(p + ".ln1", out);
          blk.attn.collect(p + ".attn", out);
          blk.ln2.collect(p + ".ln2", out);
          blk.ffn.collect(p + ".ffn", out);
          break;
        case BlockKind::sparse_smlp:
          blk.ln1.collect(p + ".ln1", out);
          blk.smoe_pool.collect(p + ".smoe", out);
          blk.smoe_router.collect(p + ".smoe.router", out);
          blk.ln2.collect(p + ".ln2", out);
          blk.tmoe_pool.collect(p + ".tmoe", out);
          blk.tmoe_router.collect(p + ".tmoe.router", out);
          break;
        case BlockKind::sparse_tmoe:
          blk.ln1.collect(p + ".ln1", out);
          blk.attn.collect(p + ".attn", out);
          blk.ln2.collect(p + ".ln2", out);
          blk.tmoe_pool.collect(p + ".tmoe", out);
          blk.tmoe_router.collect(p + ".tmoe.router", out);
          break;
        case BlockKind::naive_gmlp_moe:
          blk.naive_pool.collect(p + ".naive", out);
          blk.naive_router.collect(p + ".naive.router", out);
          break;
      }
    }
    final_ln.collect("final_ln", out);
    return out;
  }

  // Re-zero the strictly-upper triangles of every causal spatial weight
  // (needed after optimizer steps, which touch all entries).
  void remask() {
    for (Block& blk : blocks) {
      for (SguParams& h : blk.sgu_heads) h.remask();
      blk.smoe_pool.remask();
      blk.naive_pool.remask();
    }
  }
};

namespace modeldetail {

inline Tensor normal_init(std::vector<std::size_t> shape, double stddev, Rng& rng) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal(0.0, stddev);
  return Tensor::from(std::move(shape), std::move(v), true);
}

inline void validate(const ModelConfig& cfg) {
  if (cfg.vocab_size < 2) throw ConfigError("model: vocab_size must be at least 2");
  if (cfg.seq_len < 1) throw ConfigError("model: seq_len must be positive");
  if (cfg.embed_dim < 1) throw ConfigError("model: embed_dim must be positive");
  if (cfg.ffn_dim < 1) throw ConfigError("model: ffn_dim must be positive");
  if (cfg.n_heads < 1) throw ConfigError("model: n_heads must be positive");
  if (cfg.embed_dim % cfg.n_heads != 0)
    throw ConfigError("model: embed_dim " + std::to_string(cfg.embed_dim) +
                      " not divisible by n_heads " + std::to_string(cfg.n_heads));
  const bool sparse_arch = cfg.arch == Arch::smlp || cfg.arch == Arch::transformer_moe ||
                           cfg.arch == Arch::gmlp_token_moe;
  if (!sparse_arch && cfg.n_sparse != 0)
    throw ConfigError(std::string("model: arch ") + arch_name(cfg.arch) +
                      " is dense but n_sparse = " + std::to_string(cfg.n_sparse));
  if (cfg.n_sparse > 0) {
    if (cfg.n_experts < 1) throw ConfigError("model: n_experts must be positive");
    if (cfg.arch == Arch::smlp) {
      if (!is_hidden_router(cfg.router_kind))
        throw ConfigError(std::string("model: smlp needs a hidden-dimension router, got ") +
                          router_kind_name(cfg.router_kind));
      if (cfg.router_kind == RouterKind::deterministic_chunk &&
          cfg.embed_dim % cfg.n_experts != 0)
        throw ConfigError("model: deterministic routing needs embed_dim " +
                          std::to_string(cfg.embed_dim) + " divisible by n_experts " +
                          std::to_string(cfg.n_experts));
    } else {
      if (!is_token_router(cfg.router_kind))
        throw ConfigError(std::string("model: arch ") + arch_name(cfg.arch) +
                          " needs a token router, got " + router_kind_name(cfg.router_kind));
    }
    if (cfg.uses_partial()) {
      if (!(cfg.partial_fraction > 0.0 && cfg.partial_fraction < 1.0))
        throw ConfigError("model: partial_fraction must lie in (0, 1)");
      if (cfg.prefix_len() >= cfg.seq_len)
        throw ConfigError("model: routing prefix " + std::to_string(cfg.prefix_len()) +
                          " leaves no positions to predict in seq_len " +
                          std::to_string(cfg.seq_len));
    }
  }
  placement(cfg.n_dense, cfg.n_sparse);  // throws on impossible placements
}

inline RouterParams make_token_router(const ModelConfig& cfg, RouterKind kind, Rng& rng) {
  switch (kind) {
    case RouterKind::softmax_topk:
      return RouterParams::learned(RouterKind::softmax_topk, cfg.embed_dim, cfg.n_experts, 1, rng);
    case RouterKind::balanced_assignment:
      return RouterParams::learned(RouterKind::balanced_assignment, cfg.embed_dim, cfg.n_experts,
                                   1, rng);
    case RouterKind::hash:
      return RouterParams::hashed(cfg.n_experts, cfg.seed);
    default:
      throw ConfigError(std::string("model: ") + router_kind_name(kind) +
                        " is not a token router");
  }
}

inline Block make_dense_block(const ModelConfig& cfg, Rng& rng) {
  Block blk;
  blk.ln1 = LayerNormParams::init(cfg.embed_dim);
  if (cfg.uses_attention()) {
    blk.kind = BlockKind::dense_transformer;
    blk.attn = AttentionParams::init(cfg.embed_dim, cfg.n_heads, rng);
  } else {
    blk.kind = BlockKind::dense_gmlp;
    for (std::size_t h = 0; h < cfg.n_heads; ++h)
      blk.sgu_heads.push_back(SguParams::init(cfg.seq_len, true, rng));
  }
  blk.ln2 = LayerNormParams::init(cfg.embed_dim);
  blk.ffn = FfnParams::init(cfg.embed_dim, cfg.ffn_dim, rng);
  return blk;
}

inline Block make_sparse_block(const ModelConfig& cfg, Rng& rng) {
  Block blk;
  switch (cfg.arch) {
    case Arch::smlp: {
      blk.kind = BlockKind::sparse_smlp;
      blk.ln1 = LayerNormParams::init(cfg.embed_dim);
      const std::size_t t1 = cfg.uses_partial() ? cfg.prefix_len() : 0;
      blk.smoe_pool = SguExpertPool::init(cfg.n_experts, cfg.seq_len - t1, rng);
      switch (cfg.router_kind) {
        case RouterKind::deterministic_chunk:
          blk.smoe_router = RouterParams::deterministic(cfg.n_experts);
          break;
        case RouterKind::partial_prediction:
          blk.smoe_router =
              RouterParams::learned(RouterKind::partial_prediction, t1, cfg.n_experts, 1, rng);
          break;
        case RouterKind::naive_smoe:
          blk.smoe_router =
              RouterParams::learned(RouterKind::naive_smoe, cfg.seq_len, cfg.n_experts, 1, rng);
          break;
        default:
          throw ConfigError("model: smlp sparse block needs a hidden-dimension router");
      }
      blk.ln2 = LayerNormParams::init(cfg.embed_dim);
      blk.tmoe_pool = FfnExpertPool::init(cfg.n_experts, cfg.embed_dim, cfg.ffn_dim, rng);
      // The token half of the sparse block follows the balanced-assignment
      // MoE the architecture builds on.
      blk.tmoe_router = make_token_router(cfg, RouterKind::balanced_assignment, rng);
      break;
    }
    case Arch::transformer_moe:
      blk.kind = BlockKind::sparse_tmoe;
      blk.ln1 = LayerNormParams::init(cfg.embed_dim);
      blk.attn = AttentionParams::init(cfg.embed_dim, cfg.n_heads, rng);
      blk.ln2 = LayerNormParams::init(cfg.embed_dim);
      blk.tmoe_pool = FfnExpertPool::init(cfg.n_experts, cfg.embed_dim, cfg.ffn_dim, rng);
      blk.tmoe_router = make_token_router(cfg, cfg.router_kind, rng);
      break;
    case Arch::gmlp_token_moe:
      blk.kind = BlockKind::naive_gmlp_moe;
      blk.naive_pool = GmlpExpertPool::init(cfg.n_experts, cfg.seq_len, cfg.embed_dim,
                                            cfg.ffn_dim, rng);
      blk.naive_router = make_token_router(cfg, cfg.router_kind, rng);
      break;
    default:
      throw ConfigError(std::string("model: arch ") + arch_name(cfg.arch) +
                        " has no sparse blocks");
  }
  return blk;
}

}  // namespace modeldetail

inline Model build_model(const ModelConfig& cfg) {
  modeldetail::validate(cfg);
  Model m;
  m.cfg = cfg;
  Rng rng(cfg.seed);
  m.embed = modeldetail::normal_init({cfg.vocab_size, cfg.embed_dim}, 0.02, rng);
  if (cfg.uses_attention())
    m.pos_embed = modeldetail::normal_init({cfg.seq_len, cfg.embed_dim}, 0.02, rng);

  const std::vector<std::size_t> after = placement(cfg.n_dense, cfg.n_sparse);
  std::size_t next_sparse = 0;
  for (std::size_t i = 1; i <= cfg.n_dense; ++i) {
    m.blocks.push_back(modeldetail::make_dense_block(cfg, rng));
    while (next_sparse < after.size() && after[next_sparse] == i) {
      m.blocks.push_back(modeldetail::make_sparse_block(cfg, rng));
      ++next_sparse;
    }
  }
  m.final_ln = LayerNormParams::init(cfg.embed_dim);
  return m;
}

struct ForwardResult {
  Tensor logits;               // [T x V] next-token logits
  std::vector<bool> loss_mask;  // per position; false = excluded from the loss
  // Sum of switch-style balance losses over softmax-routed token layers;
  // undefined when no layer contributes (inference, or no such layer).
  Tensor aux_loss;
  // One routing plan per token-routed sparse layer, in block order.
  std::vector<RoutingPlan> token_plans;
  // One plan per hidden-dimension-routed (sMoE) layer, in block order.
  std::vector<RoutingPlan> hidden_plans;
};

// Dropout (training only) applies to the embedding output and to every
// residual branch; pass a live rng and a rate to enable it.
inline ForwardResult forward_lm(const Model& m, const std::vector<int>& tokens,
                                bool training = false, Rng* drop_rng = nullptr,
                                double drop_p = 0.0) {
  const ModelConfig& cfg = m.cfg;
  if (tokens.size() != cfg.seq_len)
    throw ShapeError("forward: got " + std::to_string(tokens.size()) + " tokens for seq_len " +
                     std::to_string(cfg.seq_len));
  ForwardResult res;
  auto drop = [&](Tensor t) {
    return (training && drop_rng && drop_p > 0.0) ? dropout(t, drop_p, *drop_rng) : t;
  };

  Tensor x = embedding(m.embed, tokens);
  if (m.pos_embed.defined()) x = add(x, m.pos_embed);
  x = drop(x);

  auto note_token_plan = [&](const RoutingPlan& plan) {
    res.token_plans.push_back(plan);
    if (training && plan.kind == RouterKind::softmax_topk && plan.scores.defined()) {
      Tensor piece = switch_balance_loss(plan, plan.scores);
      res.aux_loss = res.aux_loss.defined() ? add(res.aux_loss, piece) : piece;
    }
  };

  for (const Block& blk : m.blocks) {
    switch (blk.kind) {
      case BlockKind::dense_gmlp: {
        Tensor u = add(x, drop(multi_head_sgu(blk.sgu_heads, blk.ln1.forward(x))));
        x = add(u, drop(ffn_forward(blk.ffn, blk.ln2.forward(u))));
        break;
      }
      case BlockKind::dense_transformer: {
        Tensor u = add(x, drop(self_attention(blk.attn, blk.ln1.forward(x), true)));
        x = add(u, drop(ffn_forward(blk.ffn, blk.ln2.forward(u))));
        break;
      }
      case BlockKind::sparse_smlp: {
        RoutingPlan splan;
        Tensor u = add(
            x, drop(smoe_combine(blk.smoe_pool, blk.smoe_router, blk.ln1.forward(x), &splan)));
        res.hidden_plans.push_back(splan);
        RoutingPlan plan;
        x = add(u, drop(tmoe_combine(blk.tmoe_pool, blk.tmoe_router, blk.ln2.forward(u), training,
                                     tokens, &plan)));
        note_token_plan(plan);
        break;
      }
      case BlockKind::sparse_tmoe: {
        Tensor u = add(x, drop(self_attention(blk.attn, blk.ln1.forward(x), true)));
        RoutingPlan plan;
        x = add(u, drop(tmoe_combine(blk.tmoe_pool, blk.tmoe_router, blk.ln2.forward(u), training,
                                     tokens, &plan)));
        note_token_plan(plan);
        break;
      }
      case BlockKind::naive_gmlp_moe: {
        RoutingPlan plan;
        x = naive_gmlp_token_moe_forward(blk.naive_pool, blk.naive_router, x, training, tokens,
                                         &plan);
        note_token_plan(plan);
        break;
      }
    }
  }

  Tensor h = m.final_ln.forward(x);
  res.logits = matmul(h, transpose(m.embed));

  res.loss_mask.assign(cfg.seq_len, true);
  if (cfg.uses_partial())
    for (std::size_t t = 0; t < cfg.prefix_len(); ++t) res.loss_mask[t] = false;
  return res;
}

}  // namespace smlp
