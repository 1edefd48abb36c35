#pragma once

#include <cstdlib>
#include <fstream>
#include <string>

#include "json.hpp"
#include "smlp/model.hpp"
#include "smlp/train.hpp"

// JSON config file: {"model": {...}, "train": {...}}. Keys mirror the
// ModelConfig / TrainConfig fields; enum-valued keys take the enum's name.
// Unknown keys are rejected so typos cannot silently fall back to defaults.

namespace smlp {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

namespace configdetail {

template <typename T>
void take(const nlohmann::json& j, const char* key, T& into) {
  if (!j.contains(key)) return;
  try {
    into = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: bad value for ") + key + ": " + e.what());
  }
}

inline void check_keys(const nlohmann::json& j, const char* section,
                       std::initializer_list<const char*> known) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok)
      throw ConfigError("config: unknown key \"" + key + "\" in " + section);
  }
}

}  // namespace configdetail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  configdetail::check_keys(j, "top level", {"model", "train"});
  RunConfig rc;

  if (j.contains("model")) {
    const nlohmann::json& m = j.at("model");
    configdetail::check_keys(m, "model",
                             {"vocab_size", "seq_len", "embed_dim", "ffn_dim", "n_dense",
                              "n_sparse", "n_experts", "n_heads", "router_kind", "arch",
                              "partial_fraction", "seed"});
    configdetail::take(m, "vocab_size", rc.model.vocab_size);
    configdetail::take(m, "seq_len", rc.model.seq_len);
    configdetail::take(m, "embed_dim", rc.model.embed_dim);
    configdetail::take(m, "ffn_dim", rc.model.ffn_dim);
    configdetail::take(m, "n_dense", rc.model.n_dense);
    configdetail::take(m, "n_sparse", rc.model.n_sparse);
    configdetail::take(m, "n_experts", rc.model.n_experts);
    configdetail::take(m, "n_heads", rc.model.n_heads);
    configdetail::take(m, "partial_fraction", rc.model.partial_fraction);
    configdetail::take(m, "seed", rc.model.seed);
    if (m.contains("router_kind")) {
      std::string name;
      configdetail::take(m, "router_kind", name);
      rc.model.router_kind = router_kind_from_name(name);
    }
    if (m.contains("arch")) {
      std::string name;
      configdetail::take(m, "arch", name);
      rc.model.arch = arch_from_name(name);
    }
  }

  if (j.contains("train")) {
    const nlohmann::json& t = j.at("train");
    configdetail::check_keys(t, "train",
                             {"steps", "batch_size", "log_every", "lr", "warmup_init",
                              "warmup_steps", "beta1", "beta2", "eps", "weight_decay",
                              "clip_norm", "balance_coeff", "dropout", "valid_fraction"});
    configdetail::take(t, "steps", rc.train.steps);
    configdetail::take(t, "batch_size", rc.train.batch_size);
    configdetail::take(t, "log_every", rc.train.log_every);
    configdetail::take(t, "lr", rc.train.lr);
    configdetail::take(t, "warmup_init", rc.train.warmup_init);
    configdetail::take(t, "warmup_steps", rc.train.warmup_steps);
    configdetail::take(t, "beta1", rc.train.beta1);
    configdetail::take(t, "beta2", rc.train.beta2);
    configdetail::take(t, "eps", rc.train.eps);
    configdetail::take(t, "weight_decay", rc.train.weight_decay);
    configdetail::take(t, "clip_norm", rc.train.clip_norm);
    configdetail::take(t, "balance_coeff", rc.train.balance_coeff);
    configdetail::take(t, "dropout", rc.train.dropout);
    configdetail::take(t, "valid_fraction", rc.train.valid_fraction);
  }
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

// The SMLP_SEED environment variable overrides the configured model seed.
inline void apply_seed_override(ModelConfig& cfg) {
  const char* env = std::getenv("SMLP_SEED");
  if (env == nullptr || *env == '\0') return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (end == nullptr || *end != '\0')
    throw ConfigError(std::string("SMLP_SEED is not an unsigned integer: ") + env);
  cfg.seed = static_cast<std::uint64_t>(v);
}

}  // namespace smlp
