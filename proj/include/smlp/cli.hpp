#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "smlp/analysis.hpp"
#include "smlp/config_io.hpp"
#include "smlp/score.hpp"
#include "smlp/train.hpp"

// Subcommand driver behind the `smlp` binary. Exit codes: 0 success (and
// "causal" for probe-leak), 1 usage/config/data error, 2 leak detected.

namespace smlp {

namespace clidetail {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitLeak = 2;

inline Model model_for_analysis(const std::string& config_path) {
  RunConfig rc = load_run_config(config_path);
  apply_seed_override(rc.model);
  return build_model(rc.model);
}

inline int cmd_train(const std::string& config_path, const std::string& corpus_path,
                     const std::string& out_dir, std::ostream& out) {
  RunConfig rc = load_run_config(config_path);
  apply_seed_override(rc.model);
  Corpus corpus = Corpus::load(corpus_path, rc.train.valid_fraction);
  if (rc.model.vocab_size == 0)
    rc.model.vocab_size = corpus.vocab.size();

  std::filesystem::create_directories(out_dir);
  const std::string metrics_path = (std::filesystem::path(out_dir) / "metrics.txt").string();
  const std::string ckpt_path = (std::filesystem::path(out_dir) / "checkpoint.bin").string();
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw IoError("train: cannot write " + metrics_path);

  Trainer trainer(build_model(rc.model), corpus, rc.train);
  for (std::size_t s = 0; s < rc.train.steps; ++s) {
    const StepMetrics sm = trainer.train_step();
    if (rc.train.log_every > 0 &&
        (sm.step % rc.train.log_every == 0 || sm.step == rc.train.steps)) {
      const std::string line = metrics_line(sm);
      out << line << "\n";
      metrics << line << "\n";
    }
  }
  metrics.flush();
  save_checkpoint(trainer.model, trainer.state, corpus.vocab, ckpt_path);
  if (corpus.n_valid_windows(rc.model.seq_len + 1) > 0)
    out << "valid_ppl=" << trainer.evaluate_ppl() << "\n";
  out << "checkpoint=" << ckpt_path << "\n";
  return kExitOk;
}

inline int cmd_eval(const std::string& ckpt_path, const std::string& corpus_path,
                    double valid_fraction, std::ostream& out) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  Corpus corpus =
      Corpus::from_text_with_vocab(ck.vocab, read_text_file(corpus_path), valid_fraction);
  TrainConfig tc;
  tc.valid_fraction = valid_fraction;
  Trainer trainer(std::move(ck.model), corpus, tc);
  out << "valid_ppl=" << trainer.evaluate_ppl() << "\n";
  return kExitOk;
}

inline int cmd_analyze(const std::string& config_path, std::ostream& out) {
  RunConfig rc = load_run_config(config_path);
  apply_seed_override(rc.model);
  out << format_cost_report(count_costs(rc.model));
  return kExitOk;
}

inline int cmd_probe_leak(const std::string& config_path, const std::string& ckpt_path,
                          std::ostream& out) {
  Model model = [&] {
    if (!ckpt_path.empty()) return load_checkpoint(ckpt_path).model;
    return model_for_analysis(config_path);
  }();
  const std::size_t t_len = model.cfg.seq_len;
  if (t_len > 32)
    throw ConfigError("probe-leak: seq_len " + std::to_string(t_len) +
                      " exceeds the probe budget of 32");

  Rng rng(hash64(model.cfg.seed, 0x9B0BEull));
  std::vector<int> tokens(t_len);
  for (int& tok : tokens)
    tok = static_cast<int>(rng.next_below(model.cfg.vocab_size));

  double worst = 0.0;
  std::size_t worst_t = 0, worst_u = 0;
  bool causal = true;
  for (std::size_t u = 1; u < t_len; ++u)
    for (std::size_t t = 0; t < u; ++t) {
      const LeakReport r = probe_causality(model, tokens, t, u);
      if (r.max_delta > worst) {
        worst = r.max_delta;
        worst_t = t;
        worst_u = u;
      }
      causal = causal && r.causal;
    }
  out << "pairs=" << t_len * (t_len - 1) / 2 << " max_delta=" << worst << " at(t=" << worst_t
      << ",u=" << worst_u << ") causal=" << (causal ? "yes" : "no") << "\n";
  return causal ? kExitOk : kExitLeak;
}

inline int cmd_score(const std::string& ckpt_path, const std::string& task_path,
                     const std::string& normalize, std::ostream& out, std::ostream& err) {
  if (!normalize.empty() && normalize != "per-token")
    throw ConfigError("score: --normalize accepts only \"per-token\"");
  Checkpoint ck = load_checkpoint(ckpt_path);
  const ChoiceTask task = load_choice_task(task_path);
  const ScoreReport rep =
      score_choices(ck.model, ck.vocab, task, normalize == "per-token", &err);
  for (std::size_t i = 0; i < rep.items.size(); ++i) {
    const ItemScore& item = rep.items[i];
    out << "item=" << i;
    if (item.skipped) {
      out << " skipped=yes correct=no\n";
      continue;
    }
    out << " picked=" << item.picked << " gold=" << task.items[i].gold
        << " correct=" << (item.correct ? "yes" : "no") << " scores=";
    for (std::size_t c = 0; c < item.scores.size(); ++c)
      out << (c ? "," : "") << item.scores[c];
    out << "\n";
  }
  out << "scored=" << rep.n_scored << " skipped=" << rep.n_skipped
      << " correct=" << rep.n_correct << " accuracy=" << rep.accuracy << "\n";
  return kExitOk;
}

}  // namespace clidetail

// `args` holds the command-line arguments without the program name.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"sparse all-MLP language models: train, evaluate, analyze"};
  app.require_subcommand(1);

  std::string config_path, corpus_path, out_dir, ckpt_path, task_path, normalize;
  double valid_fraction = 0.1;

  CLI::App* train = app.add_subcommand("train", "train a model and write checkpoint + metrics");
  train->add_option("--config", config_path, "JSON config file")->required();
  train->add_option("--corpus", corpus_path, "UTF-8 text corpus")->required();
  train->add_option("--out", out_dir, "output directory")->required();

  CLI::App* eval = app.add_subcommand("eval", "report validation perplexity of a checkpoint");
  eval->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  eval->add_option("--corpus", corpus_path, "UTF-8 text corpus")->required();
  eval->add_option("--valid-fraction", valid_fraction, "validation tail fraction");

  CLI::App* analyze = app.add_subcommand("analyze", "print the parameter/FLOP cost table");
  analyze->add_option("--config", config_path, "JSON config file")->required();

  CLI::App* probe = app.add_subcommand("probe-leak",
                                       "perturb future tokens and measure causality leaks");
  probe->add_option("--config", config_path, "JSON config file")->required();
  probe->add_option("--ckpt", ckpt_path, "probe this checkpoint instead of a fresh model");

  CLI::App* score = app.add_subcommand("score", "zero-shot multiple-choice accuracy");
  score->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  score->add_option("--task", task_path, "task file, one JSON object per line")->required();
  score->add_option("--normalize", normalize, "\"per-token\" divides scores by length");

  std::vector<const char*> argv;
  argv.push_back("smlp");
  for (const std::string& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return clidetail::kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return clidetail::kExitError;
  }

  try {
    if (train->parsed()) return clidetail::cmd_train(config_path, corpus_path, out_dir, out);
    if (eval->parsed()) return clidetail::cmd_eval(ckpt_path, corpus_path, valid_fraction, out);
    if (analyze->parsed()) return clidetail::cmd_analyze(config_path, out);
    if (probe->parsed()) return clidetail::cmd_probe_leak(config_path, ckpt_path, out);
    if (score->parsed())
      return clidetail::cmd_score(ckpt_path, task_path, normalize, out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return clidetail::kExitError;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return clidetail::kExitError;
  }
  return clidetail::kExitError;
}

}  // namespace smlp
