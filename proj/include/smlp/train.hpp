#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "smlp/analysis.hpp"
#include "smlp/checkpoint.hpp"
#include "smlp/corpus.hpp"
#include "smlp/model.hpp"

// The optimization loop: Adam with decoupled weight decay, inverse-sqrt
// learning-rate schedule with linear warmup, global-norm gradient clipping,
// and causal re-masking after every step. Fully deterministic: batching is a
// pure function of (seed, step) and the only live rng (dropout) is part of
// the checkpointed state.

namespace smlp {

struct TrainConfig {
  std::size_t steps = 200;
  std::size_t batch_size = 2;
  std::size_t log_every = 10;
  double lr = 5e-4;             // peak, reached at the end of warmup
  double warmup_init = 1e-7;    // lr at step 0 of the linear warmup
  std::size_t warmup_steps = 4000;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.1;    // decoupled
  double clip_norm = 1.0;       // global gradient norm ceiling
  double balance_coeff = 0.01;  // weight of the router balance loss
  double dropout = 0.0;         // reference recipe used 0.1; off at this scale
  double valid_fraction = 0.1;
};

// Inverse-sqrt schedule: linear warmup from warmup_init to lr over
// warmup_steps, then lr * sqrt(warmup_steps / step). Steps are 1-indexed.
inline double lr_at(const TrainConfig& c, std::size_t step) {
  if (c.warmup_steps == 0) return c.lr;
  if (step == 0) return c.warmup_init;
  if (step < c.warmup_steps)
    return c.warmup_init + (c.lr - c.warmup_init) * static_cast<double>(step) /
                               static_cast<double>(c.warmup_steps);
  return c.lr * std::sqrt(static_cast<double>(c.warmup_steps) / static_cast<double>(step));
}

// One Adam step with decoupled weight decay over a raw parameter span.
// `step` is the 1-indexed update count (bias correction).
inline void adam_update(double* w, const double* g, double* m, double* v, std::size_t n,
                        std::size_t step, double lr, const TrainConfig& c) {
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    w[i] -= lr * mhat / (std::sqrt(vhat) + c.eps);
    w[i] -= lr * c.weight_decay * w[i];
  }
}

struct TrainState {
  std::size_t step = 0;                   // completed update count
  std::vector<std::vector<double>> m, v;  // moments, aligned with model params
  Rng rng{0};                             // dropout stream
};

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0.0;  // optimization objective (LM loss + weighted balance loss)
  double ppl = 0.0;   // exp of the LM loss alone
  double lr = 0.0;
  double imbalance_ratio = 1.0;  // worst token-routing imbalance this batch
  double wall_ms = 0.0;
};

inline std::string metrics_line(const StepMetrics& s) {
  std::ostringstream os;
  os.precision(12);
  os << "step=" << s.step << " loss=" << s.loss << " ppl=" << s.ppl << " lr=" << s.lr
     << " imbalance_ratio=" << s.imbalance_ratio << " wall_ms=" << s.wall_ms;
  return os.str();
}

class Trainer {
 public:
  Model model;
  TrainState state;
  TrainConfig cfg;

  Trainer(Model mdl, const Corpus& corpus, TrainConfig tcfg)
      : model(std::move(mdl)), cfg(tcfg), corpus_(corpus) {
    window_ = model.cfg.seq_len + 1;
    n_train_ = corpus_.n_train_windows(window_);
    if (n_train_ == 0)
      throw DataError("train: corpus provides no training window of " +
                      std::to_string(window_) + " tokens");
    if (corpus_.vocab.size() != model.cfg.vocab_size)
      throw ConfigError("train: model vocab " + std::to_string(model.cfg.vocab_size) +
                        " != corpus vocab " + std::to_string(corpus_.vocab.size()));
    params_ = model.params();
    if (state.m.empty()) {
      for (const auto& [name, t] : params_) {
        state.m.emplace_back(t.numel(), 0.0);
        state.v.emplace_back(t.numel(), 0.0);
      }
      state.rng = Rng(hash64(model.cfg.seed, 0xD20Dull));
    }
  }

  // Resume from a loaded state (moments must match the model's parameters).
  Trainer(Model mdl, const Corpus& corpus, TrainConfig tcfg, TrainState resumed)
      : Trainer(std::move(mdl), corpus, tcfg) {
    if (resumed.m.size() != params_.size() || resumed.v.size() != params_.size())
      throw IoError("train: resumed optimizer state does not match the model");
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (resumed.m[i].size() != params_[i].second.numel() ||
          resumed.v[i].size() != params_[i].second.numel())
        throw IoError("train: resumed moment shapes do not match parameter " +
                      params_[i].first);
    state = std::move(resumed);
  }

  const NamedParams& params() const { return params_; }
  std::size_t n_train_windows() const { return n_train_; }

  // Training window for the g-th batch slot overall: a pure function of
  // (seed, g), so any step can be replayed independently.
  std::vector<int> train_sequence(std::size_t g) const {
    const std::size_t epoch = g / n_train_, pos = g % n_train_;
    if (perm_epoch_ != epoch) {
      perm_.resize(n_train_);
      for (std::size_t i = 0; i < n_train_; ++i) perm_[i] = i;
      Rng shuffle_rng(hash64(hash64(model.cfg.seed, 0xBA7C4ull), epoch));
      for (std::size_t i = n_train_ - 1; i > 0; --i) {
        const std::size_t j = static_cast<std::size_t>(shuffle_rng.next_below(i + 1));
        std::swap(perm_[i], perm_[j]);
      }
      perm_epoch_ = epoch;
    }
    return corpus_.train_window(perm_[pos], window_);
  }

  StepMetrics train_step() {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t step = state.step + 1;
    const double lr = lr_at(cfg, step);
    const std::size_t t_len = model.cfg.seq_len;

    Tape tape;
    TapeScope scope(tape);
    Tensor lm_loss, aux_loss;
    double imbalance = 1.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const std::vector<int> seq = train_sequence((step - 1) * cfg.batch_size + b);
      const std::vector<int> inputs(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(t_len));
      const std::vector<int> targets(seq.begin() + 1, seq.end());
      ForwardResult r = forward_lm(model, inputs, true, &state.rng, cfg.dropout);
      Tensor ce = cross_entropy(r.logits, targets, r.loss_mask);
      lm_loss = lm_loss.defined() ? add(lm_loss, ce) : ce;
      if (r.aux_loss.defined())
        aux_loss = aux_loss.defined() ? add(aux_loss, r.aux_loss) : r.aux_loss;
      for (const RoutingPlan& plan : r.token_plans)
        if (plan.n_items() > 0)
          imbalance = std::max(imbalance, balance_metrics(plan).imbalance_ratio);
    }
    lm_loss = scale(lm_loss, 1.0 / static_cast<double>(cfg.batch_size));
    Tensor objective = lm_loss;
    if (aux_loss.defined())
      objective = add(objective,
                      scale(aux_loss, cfg.balance_coeff / static_cast<double>(cfg.batch_size)));

    const double loss_value = objective.item();
    if (!std::isfinite(loss_value))
      throw TrainError("training diverged (non-finite loss) at step " + std::to_string(step));
    tape.backward(objective);

    // Global-norm clipping in fixed parameter order.
    double sq_norm = 0.0;
    for (const auto& [name, t] : params_)
      if (t.has_grad())
        for (double gi : t.grad()) sq_norm += gi * gi;
    const double gnorm = std::sqrt(sq_norm);
    const double clip_scale = (cfg.clip_norm > 0.0 && gnorm > cfg.clip_norm)
                                  ? cfg.clip_norm / gnorm : 1.0;

    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor t = params_[i].second;
      std::vector<double>& g = t.ensure_grad();
      if (clip_scale != 1.0)
        for (double& gi : g) gi *= clip_scale;
      adam_update(t.data(), g.data(), state.m[i].data(), state.v[i].data(), t.numel(), step, lr,
                  cfg);
      t.zero_grad();
    }
    model.remask();
    state.step = step;

    StepMetrics out;
    out.step = step;
    out.loss = loss_value;
    out.ppl = std::exp(lm_loss.item());
    out.lr = lr;
    out.imbalance_ratio = imbalance;
    out.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                      .count();
    return out;
  }

  // Mean masked NLL over the validation split, in window order.
  double evaluate_nll() const {
    const std::size_t n_valid = corpus_.n_valid_windows(window_);
    if (n_valid == 0) throw DataError("eval: validation split has no full window");
    const std::size_t t_len = model.cfg.seq_len;
    double total = 0.0;
    for (std::size_t w = 0; w < n_valid; ++w) {
      const std::vector<int> seq = corpus_.valid_window(w, window_);
      const std::vector<int> inputs(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(t_len));
      const std::vector<int> targets(seq.begin() + 1, seq.end());
      ForwardResult r = forward_lm(model, inputs, false);
      total += cross_entropy(r.logits, targets, r.loss_mask).item();
    }
    return total / static_cast<double>(n_valid);
  }

  double evaluate_ppl() const { return std::exp(evaluate_nll()); }

 private:
  const Corpus& corpus_;
  std::size_t window_ = 0, n_train_ = 0;
  NamedParams params_;
  mutable std::vector<std::size_t> perm_;
  mutable std::size_t perm_epoch_ = static_cast<std::size_t>(-1);
};

// ---------------------------------------------------------------------------
// Checkpoint mapping for a full training state

inline void save_checkpoint(const Model& model, const TrainState& state, const Vocab& vocab,
                            const std::string& path) {
  std::vector<Record> records;
  ckptdetail::append_config(model.cfg, records);
  {
    Record vr;
    vr.name = "vocab.codepoints";
    vr.shape = {vocab.codepoints.size()};
    for (std::uint32_t cp : vocab.codepoints) vr.data.push_back(static_cast<double>(cp));
    records.push_back(std::move(vr));
  }
  const NamedParams params = model.params();
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw IoError("checkpoint: optimizer state does not match the model");
  for (const auto& [name, t] : params) records.push_back({name, t.shape(), t.values()});
  for (std::size_t i = 0; i < params.size(); ++i)
    records.push_back({"opt.m." + params[i].first, params[i].second.shape(), state.m[i]});
  for (std::size_t i = 0; i < params.size(); ++i)
    records.push_back({"opt.v." + params[i].first, params[i].second.shape(), state.v[i]});
  records.push_back(ckptdetail::scalar("meta.step", static_cast<double>(state.step)));
  records.push_back(
      ckptdetail::scalar("meta.rng", ckptdetail::bits_to_double(state.rng.state())));
  write_records(path, records);
}

struct Checkpoint {
  ModelConfig cfg;
  Vocab vocab;
  Model model;
  TrainState state;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  const std::vector<Record> records = read_records(path);
  std::map<std::string, const Record*> by_name;
  for (const Record& r : records) by_name[r.name] = &r;

  Checkpoint ck;
  ck.cfg = ckptdetail::config_from(by_name);
  ck.model = build_model(ck.cfg);

  auto vit = by_name.find("vocab.codepoints");
  if (vit == by_name.end()) throw IoError("checkpoint: missing record vocab.codepoints");
  for (double d : vit->second->data)
    ck.vocab.codepoints.push_back(static_cast<std::uint32_t>(d));

  NamedParams model_params = ck.model.params();
  for (auto& [name, t] : model_params) {
    auto fill = [&](const std::string& key, double* dst) {
      auto it = by_name.find(key);
      if (it == by_name.end()) throw IoError("checkpoint: missing record " + key);
      if (it->second->shape != t.shape())
        throw IoError("checkpoint: record " + key + " shape does not match the model");
      std::copy(it->second->data.begin(), it->second->data.end(), dst);
    };
    fill(name, t.data());
    std::vector<double> m_buf(t.numel()), v_buf(t.numel());
    fill("opt.m." + name, m_buf.data());
    fill("opt.v." + name, v_buf.data());
    ck.state.m.push_back(std::move(m_buf));
    ck.state.v.push_back(std::move(v_buf));
  }
  ck.state.step = static_cast<std::size_t>(ckptdetail::need(by_name, "meta.step"));
  ck.state.rng.set_state(ckptdetail::double_to_bits(ckptdetail::need(by_name, "meta.rng")));
  return ck;
}

}  // namespace smlp
