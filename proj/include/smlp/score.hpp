#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "smlp/corpus.hpp"
#include "smlp/model.hpp"

// Zero-shot multiple-choice scoring: each candidate completion is appended to
// the prompt and scored by the sum of its own tokens' log-probabilities under
// the model; the highest-scoring candidate wins.

namespace smlp {

struct ChoiceItem {
  std::string prompt;
  std::vector<std::string> candidates;
  std::size_t gold = 0;
};

struct ChoiceTask {
  std::vector<ChoiceItem> items;
};

// One JSON object per line: {"prompt": ..., "candidates": [...], "gold": n}.
inline ChoiceTask parse_choice_task(std::istream& in, const std::string& origin) {
  ChoiceTask task;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("task: " + where + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("prompt") || !j.contains("candidates") ||
        !j.contains("gold"))
      throw DataError("task: " + where + ": need prompt, candidates, gold");
    ChoiceItem item;
    try {
      item.prompt = j.at("prompt").get<std::string>();
      for (const auto& c : j.at("candidates")) item.candidates.push_back(c.get<std::string>());
      item.gold = j.at("gold").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError("task: " + where + ": " + e.what());
    }
    if (item.prompt.empty()) throw DataError("task: " + where + ": empty prompt");
    if (item.candidates.size() < 2)
      throw DataError("task: " + where + ": need at least 2 candidates");
    for (const std::string& c : item.candidates)
      if (c.empty()) throw DataError("task: " + where + ": empty candidate");
    if (item.gold >= item.candidates.size())
      throw DataError("task: " + where + ": gold index " + std::to_string(item.gold) +
                      " out of range");
    task.items.push_back(std::move(item));
  }
  if (task.items.empty()) throw DataError("task: " + origin + ": no items");
  return task;
}

inline ChoiceTask load_choice_task(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("task: cannot open " + path);
  return parse_choice_task(in, path);
}

struct ItemScore {
  std::vector<double> scores;  // one per candidate; NaN when the item is skipped
  std::size_t picked = 0;
  bool skipped = false;  // prompt+candidate did not fit in the context
  bool correct = false;
};

struct ScoreReport {
  std::vector<ItemScore> items;
  std::size_t n_scored = 0, n_skipped = 0, n_correct = 0;
  double accuracy = 0.0;  // over all items; skipped count as incorrect
};

// Sum of log p(candidate token | prompt, earlier candidate tokens). The
// prompt's own tokens contribute nothing. Inputs shorter than the model
// context are padded on the right, which cannot influence earlier positions
// in a causal model.
inline double score_completion(const Model& m, const std::vector<int>& prompt_ids,
                               const std::vector<int>& cand_ids, bool normalize) {
  const std::size_t t_len = m.cfg.seq_len;
  std::vector<int> padded = prompt_ids;
  padded.insert(padded.end(), cand_ids.begin(), cand_ids.end());
  const std::size_t used = padded.size();
  padded.resize(t_len, Vocab::pad_id);
  const Tensor logits = forward_lm(m, padded).logits;
  double total = 0.0;
  for (std::size_t i = prompt_ids.size(); i < used; ++i)
    total += log_softmax_row(logits, i - 1)[static_cast<std::size_t>(padded[i])];
  if (normalize) total /= static_cast<double>(cand_ids.size());
  return total;
}

inline ScoreReport score_choices(const Model& m, const Vocab& vocab, const ChoiceTask& task,
                                 bool normalize, std::ostream* warnings = nullptr) {
  if (vocab.size() != m.cfg.vocab_size)
    throw ConfigError("score: model vocab " + std::to_string(m.cfg.vocab_size) +
                      " != task vocab " + std::to_string(vocab.size()));
  ScoreReport rep;
  for (std::size_t idx = 0; idx < task.items.size(); ++idx) {
    const ChoiceItem& item = task.items[idx];
    ItemScore out;
    const std::vector<int> prompt_ids = vocab.encode(item.prompt);
    bool fits = true;
    std::vector<std::vector<int>> cand_ids;
    for (const std::string& cand : item.candidates) {
      cand_ids.push_back(vocab.encode(cand));
      if (cand_ids.back().empty() ||
          prompt_ids.size() + cand_ids.back().size() > m.cfg.seq_len)
        fits = false;
    }
    if (prompt_ids.empty()) fits = false;
    if (!fits) {
      if (warnings)
        *warnings << "warning: item " << idx << " does not fit in a context of "
                  << m.cfg.seq_len << " tokens; counted as incorrect\n";
      out.skipped = true;
      out.scores.assign(item.candidates.size(), std::nan(""));
      rep.n_skipped += 1;
      rep.items.push_back(std::move(out));
      continue;
    }
    for (const std::vector<int>& ids : cand_ids)
      out.scores.push_back(score_completion(m, prompt_ids, ids, normalize));
    out.picked = 0;
    for (std::size_t c = 1; c < out.scores.size(); ++c)
      if (out.scores[c] > out.scores[out.picked]) out.picked = c;  // ties keep the lowest index
    out.correct = out.picked == item.gold;
    rep.n_scored += 1;
    rep.n_correct += out.correct ? 1 : 0;
    rep.items.push_back(std::move(out));
  }
  rep.accuracy = static_cast<double>(rep.n_correct) / static_cast<double>(task.items.size());
  return rep;
}

}  // namespace smlp
