// Deterministic pseudo-English corpus generator: weighted word draws arranged
// into sentences and paragraphs. Same (seed, bytes) always yields the same
// file, so the committed corpus can be regenerated and checked.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "smlp/rng.hpp"

namespace {

struct WordEntry {
  const char* word;
  std::uint32_t weight;
};

// Rough Zipf-like weights: function words dominate, content words trail off.
constexpr WordEntry kWords[] = {
    {"the", 420}, {"of", 220},  {"and", 210}, {"to", 200},  {"a", 190},   {"in", 160},
    {"is", 110},  {"it", 100},  {"was", 95},  {"that", 90}, {"he", 85},   {"for", 80},
    {"on", 75},   {"with", 72}, {"as", 70},   {"his", 65},  {"they", 60}, {"at", 58},
    {"be", 56},   {"this", 54}, {"from", 52}, {"had", 50},  {"by", 48},   {"not", 46},
    {"but", 44},  {"what", 40}, {"all", 38},  {"were", 36}, {"when", 34}, {"your", 32},
    {"said", 30}, {"there", 29}, {"each", 28}, {"she", 27}, {"which", 26}, {"their", 25},
    {"time", 24}, {"will", 23}, {"way", 22},  {"about", 21}, {"many", 20}, {"then", 19},
    {"them", 18}, {"would", 17}, {"like", 16}, {"these", 15}, {"her", 15}, {"long", 14},
    {"make", 14}, {"thing", 13}, {"see", 13}, {"him", 12},  {"two", 12},  {"has", 11},
    {"look", 11}, {"more", 10}, {"day", 10},  {"could", 10}, {"come", 9}, {"did", 9},
    {"sound", 9}, {"most", 8},  {"people", 8}, {"over", 8}, {"know", 8},  {"water", 7},
    {"than", 7},  {"call", 7},  {"first", 7}, {"who", 7},   {"may", 6},   {"down", 6},
    {"side", 6},  {"been", 6},  {"now", 6},   {"find", 6},  {"any", 5},   {"new", 5},
    {"work", 5},  {"part", 5},  {"take", 5},  {"get", 5},   {"place", 5}, {"made", 5},
    {"live", 4},  {"where", 4}, {"after", 4}, {"back", 4},  {"little", 4}, {"only", 4},
    {"round", 4}, {"man", 4},   {"year", 4},  {"came", 4},  {"show", 3},  {"every", 3},
    {"good", 3},  {"give", 3},  {"under", 3}, {"name", 3},  {"very", 3},  {"through", 3},
    {"just", 3},  {"form", 3},  {"sentence", 2}, {"great", 2}, {"think", 2}, {"say", 2},
    {"help", 2},  {"low", 2},   {"line", 2},  {"differ", 2}, {"turn", 2}, {"cause", 2},
    {"much", 2},  {"mean", 2},  {"before", 2}, {"move", 2}, {"right", 2}, {"boy", 2},
    {"old", 2},   {"too", 2},   {"same", 2},  {"tell", 1},  {"does", 1},  {"set", 1},
    {"three", 1}, {"want", 1},  {"air", 1},   {"well", 1},  {"also", 1},  {"play", 1},
    {"small", 1}, {"end", 1},   {"put", 1},   {"home", 1},  {"read", 1},  {"hand", 1},
    {"port", 1},  {"large", 1}, {"spell", 1}, {"add", 1},   {"even", 1},  {"land", 1},
};

class WordSampler {
 public:
  WordSampler() {
    std::uint64_t acc = 0;
    for (const WordEntry& e : kWords) {
      acc += e.weight;
      cumulative_.push_back(acc);
    }
  }

  const char* draw(smlp::Rng& rng) const {
    const std::uint64_t r = rng.next_below(cumulative_.back());
    std::size_t lo = 0, hi = cumulative_.size() - 1;
    while (lo < hi) {
      const std::size_t mid = (lo + hi) / 2;
      if (cumulative_[mid] <= r)
        lo = mid + 1;
      else
        hi = mid;
    }
    return kWords[lo].word;
  }

 private:
  std::vector<std::uint64_t> cumulative_;
};

std::string generate(std::uint64_t seed, std::size_t min_bytes) {
  smlp::Rng rng(seed);
  WordSampler sampler;
  std::string out;
  out.reserve(min_bytes + 128);
  std::size_t sentences_in_paragraph = 0;
  std::size_t paragraph_target = 5 + rng.next_below(5);
  while (out.size() < min_bytes) {
    const std::size_t n_words = 4 + rng.next_below(9);
    for (std::size_t w = 0; w < n_words; ++w) {
      out += sampler.draw(rng);
      if (w + 1 < n_words) {
        if (n_words > 6 && rng.next_below(100) < 12) out += ',';
        out += ' ';
      }
    }
    out += '.';
    if (++sentences_in_paragraph >= paragraph_target) {
      out += '\n';
      sentences_in_paragraph = 0;
      paragraph_target = 5 + rng.next_below(5);
    } else {
      out += ' ';
    }
  }
  if (out.back() == ' ') out.back() = '\n';
  if (out.back() != '\n') out += '\n';
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"generate a deterministic pseudo-English character corpus"};
  std::string out_path = "corpus.txt";
  std::uint64_t seed = 1;
  std::size_t bytes = 1100000;
  app.add_option("--out", out_path, "output file");
  app.add_option("--seed", seed, "generator seed");
  app.add_option("--bytes", bytes, "minimum size; generation stops at the next sentence end");
  CLI11_PARSE(app, argc, argv);

  const std::string text = generate(seed, bytes);
  std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
  if (!out) {
    std::cerr << "error: cannot write " << out_path << "\n";
    return 1;
  }
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  std::cout << out_path << ": " << text.size() << " bytes\n";
  return 0;
}
