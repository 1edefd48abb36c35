#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "smlp/error.hpp"

// Character-level corpus handling: a vocabulary of sorted unique code points
// behind two specials (pad = 0, unk = 1), the encoded token stream, and a
// train/validation split by token offset.

namespace smlp {

namespace textdetail {

// Minimal UTF-8 decoder; rejects malformed input rather than guessing.
inline std::vector<std::uint32_t> decode_utf8(const std::string& bytes) {
  std::vector<std::uint32_t> cps;
  std::size_t i = 0;
  const std::size_t n = bytes.size();
  auto cont = [&](std::size_t j) -> std::uint32_t {
    if (j >= n || (static_cast<unsigned char>(bytes[j]) & 0xC0) != 0x80)
      throw DataError("corpus: malformed UTF-8 near byte " + std::to_string(j));
    return static_cast<unsigned char>(bytes[j]) & 0x3F;
  };
  while (i < n) {
    const unsigned char b = static_cast<unsigned char>(bytes[i]);
    if (b < 0x80) {
      cps.push_back(b);
      i += 1;
    } else if ((b & 0xE0) == 0xC0) {
      std::uint32_t cp = (static_cast<std::uint32_t>(b & 0x1F) << 6) | cont(i + 1);
      if (cp < 0x80) throw DataError("corpus: overlong UTF-8 near byte " + std::to_string(i));
      cps.push_back(cp);
      i += 2;
    } else if ((b & 0xF0) == 0xE0) {
      std::uint32_t cp = (static_cast<std::uint32_t>(b & 0x0F) << 12) | (cont(i + 1) << 6) |
                         cont(i + 2);
      if (cp < 0x800) throw DataError("corpus: overlong UTF-8 near byte " + std::to_string(i));
      cps.push_back(cp);
      i += 3;
    } else if ((b & 0xF8) == 0xF0) {
      std::uint32_t cp = (static_cast<std::uint32_t>(b & 0x07) << 18) | (cont(i + 1) << 12) |
                         (cont(i + 2) << 6) | cont(i + 3);
      if (cp < 0x10000 || cp > 0x10FFFF)
        throw DataError("corpus: invalid UTF-8 near byte " + std::to_string(i));
      cps.push_back(cp);
      i += 4;
    } else {
      throw DataError("corpus: malformed UTF-8 near byte " + std::to_string(i));
    }
  }
  return cps;
}

inline void encode_utf8(std::uint32_t cp, std::string& out) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

}  // namespace textdetail

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("corpus: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Vocab {
  static constexpr int pad_id = 0;
  static constexpr int unk_id = 1;

  // Sorted unique code points; id of codepoints[i] is i + 2.
  std::vector<std::uint32_t> codepoints;

  std::size_t size() const { return codepoints.size() + 2; }

  static Vocab from_codepoints(std::vector<std::uint32_t> cps) {
    std::sort(cps.begin(), cps.end());
    cps.erase(std::unique(cps.begin(), cps.end()), cps.end());
    Vocab v;
    v.codepoints = std::move(cps);
    return v;
  }

  int encode_cp(std::uint32_t cp) const {
    auto it = std::lower_bound(codepoints.begin(), codepoints.end(), cp);
    if (it == codepoints.end() || *it != cp) return unk_id;
    return static_cast<int>(it - codepoints.begin()) + 2;
  }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    for (std::uint32_t cp : textdetail::decode_utf8(text)) ids.push_back(encode_cp(cp));
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id == pad_id) continue;
      if (id == unk_id) {
        out.push_back('?');
        continue;
      }
      const std::size_t k = static_cast<std::size_t>(id) - 2;
      if (id < 2 || k >= codepoints.size())
        throw DataError("vocab: id " + std::to_string(id) + " outside vocabulary of " +
                        std::to_string(size()));
      textdetail::encode_utf8(codepoints[k], out);
    }
    return out;
  }
};

struct Corpus {
  Vocab vocab;
  std::vector<int> stream;  // whole corpus, encoded
  std::size_t train_len = 0;  // stream[0, train_len) trains; the rest validates

  std::size_t valid_len() const { return stream.size() - train_len; }

  // Non-overlapping windows of length window (= seq_len + 1 for causal LM
  // pairs) inside each split.
  std::size_t n_train_windows(std::size_t window) const { return train_len / window; }
  std::size_t n_valid_windows(std::size_t window) const { return valid_len() / window; }

  std::vector<int> train_window(std::size_t w, std::size_t window) const {
    return std::vector<int>(stream.begin() + static_cast<std::ptrdiff_t>(w * window),
                            stream.begin() + static_cast<std::ptrdiff_t>((w + 1) * window));
  }
  std::vector<int> valid_window(std::size_t w, std::size_t window) const {
    const std::size_t base = train_len + w * window;
    return std::vector<int>(stream.begin() + static_cast<std::ptrdiff_t>(base),
                            stream.begin() + static_cast<std::ptrdiff_t>(base + window));
  }

  static Corpus from_text(const std::string& text, double valid_fraction) {
    if (text.empty()) throw DataError("corpus: empty text");
    std::vector<std::uint32_t> cps = textdetail::decode_utf8(text);
    Corpus c;
    c.vocab = Vocab::from_codepoints(cps);
    c.stream.reserve(cps.size());
    for (std::uint32_t cp : cps) c.stream.push_back(c.vocab.encode_cp(cp));
    c.split(valid_fraction);
    return c;
  }

  // Encode under an existing vocabulary (evaluating text against a trained
  // model); characters outside it become unk.
  static Corpus from_text_with_vocab(const Vocab& vocab, const std::string& text,
                                     double valid_fraction) {
    if (text.empty()) throw DataError("corpus: empty text");
    Corpus c;
    c.vocab = vocab;
    c.stream = vocab.encode(text);
    c.split(valid_fraction);
    return c;
  }

  static Corpus load(const std::string& path, double valid_fraction) {
    return from_text(read_text_file(path), valid_fraction);
  }

 private:
  void split(double valid_fraction) {
    if (!(valid_fraction >= 0.0 && valid_fraction < 1.0))
      throw ConfigError("corpus: valid_fraction " + std::to_string(valid_fraction) +
                        " outside [0, 1)");
    const std::size_t n_valid =
        static_cast<std::size_t>(valid_fraction * static_cast<double>(stream.size()));
    train_len = stream.size() - n_valid;
  }
};

}  // namespace smlp
