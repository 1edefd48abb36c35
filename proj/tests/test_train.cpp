#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "catch2/catch_amalgamated.hpp"
#include "smlp/train.hpp"
#include "testutil.hpp"

using namespace smlp;
using testutil::bitwise_equal;

namespace {

std::string repeated_pangram(std::size_t repeats) {
  std::string out;
  for (std::size_t i = 0; i < repeats; ++i) out += "sphinx of black quartz, judge my vow. ";
  return out;
}

// Aperiodic five-letter text so every training window is distinct.
std::string scrambled_text(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::string out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(static_cast<char>('a' + rng.next_below(5)));
  return out;
}

ModelConfig tiny_cfg(const Corpus& corpus, RouterKind rk) {
  ModelConfig cfg;
  cfg.vocab_size = corpus.vocab.size();
  cfg.seq_len = 8;
  cfg.embed_dim = 16;
  cfg.ffn_dim = 24;
  cfg.n_dense = 1;
  cfg.n_sparse = 1;
  cfg.n_experts = 2;
  cfg.n_heads = 1;
  cfg.router_kind = rk;
  cfg.arch = Arch::smlp;
  cfg.seed = 1234;
  return cfg;
}

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spew(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::vector<double>> snapshot(const Model& m) {
  std::vector<std::vector<double>> out;
  for (const auto& [name, t] : m.params()) out.push_back(t.values());
  return out;
}

}  // namespace

TEST_CASE("vocabulary round-trips corpus text") {
  const std::string text = "abc " "\xC3\xA9" " " "\xD0\x96" " " "\xF0\x9F\x99\x82" " zz";
  Corpus c = Corpus::from_text(text, 0.0);

  for (std::size_t i = 1; i < c.vocab.codepoints.size(); ++i)
    REQUIRE(c.vocab.codepoints[i - 1] < c.vocab.codepoints[i]);
  CHECK(c.vocab.size() == c.vocab.codepoints.size() + 2);

  CHECK(c.vocab.decode(c.stream) == text);
  CHECK(c.vocab.encode(text) == c.stream);
  CHECK(c.train_len == c.stream.size());

  SECTION("specials") {
    CHECK(c.vocab.encode("Q") == std::vector<int>{Vocab::unk_id});
    CHECK(c.vocab.decode({Vocab::unk_id}) == "?");
    CHECK(c.vocab.decode({Vocab::pad_id}) == "");
    CHECK_THROWS_AS(c.vocab.decode({static_cast<int>(c.vocab.size())}), DataError);
  }

  SECTION("construction sorts and deduplicates") {
    Vocab v = Vocab::from_codepoints({66, 65, 66});
    CHECK(v.size() == 4);
    CHECK(v.encode_cp(65) == 2);
    CHECK(v.encode_cp(66) == 3);
    CHECK(v.encode_cp(67) == Vocab::unk_id);
  }
}

TEST_CASE("malformed byte streams and bad splits are rejected") {
  CHECK_THROWS_AS(Corpus::from_text("\x80", 0.0), DataError);          // stray continuation
  CHECK_THROWS_AS(Corpus::from_text("ok" "\xC3", 0.0), DataError);     // truncated sequence
  CHECK_THROWS_AS(Corpus::from_text("\xC0\xAF", 0.0), DataError);      // overlong 2-byte
  CHECK_THROWS_AS(Corpus::from_text("\xE0\x80\xAF", 0.0), DataError);  // overlong 3-byte
  CHECK_THROWS_AS(Corpus::from_text("\xF4\x90\x80\x80", 0.0), DataError);  // beyond U+10FFFF
  CHECK_THROWS_AS(Corpus::from_text("\xFF", 0.0), DataError);
  CHECK_THROWS_AS(Corpus::from_text("", 0.1), DataError);
  CHECK_THROWS_AS(Corpus::from_text("abc", 1.0), ConfigError);
  CHECK_THROWS_AS(Corpus::from_text("abc", -0.1), ConfigError);
  CHECK_THROWS_AS(Corpus::load("/nonexistent/corpus.txt", 0.1), IoError);
}

TEST_CASE("train/validation split covers the stream without overlap") {
  std::string text;
  for (std::size_t i = 0; i < 103; ++i) text.push_back(static_cast<char>('a' + i % 7));
  Corpus c = Corpus::from_text(text, 0.25);

  CHECK(c.stream.size() == 103);
  CHECK(c.valid_len() == 25);
  CHECK(c.train_len == 78);

  const std::size_t window = 8;
  REQUIRE(c.n_train_windows(window) == 9);
  REQUIRE(c.n_valid_windows(window) == 3);

  for (std::size_t w = 0; w < 9; ++w) {
    const std::vector<int> win = c.train_window(w, window);
    REQUIRE(win.size() == window);
    for (std::size_t i = 0; i < window; ++i) CHECK(win[i] == c.stream[w * window + i]);
  }
  for (std::size_t w = 0; w < 3; ++w) {
    const std::vector<int> win = c.valid_window(w, window);
    REQUIRE(win.size() == window);
    for (std::size_t i = 0; i < window; ++i)
      CHECK(win[i] == c.stream[c.train_len + w * window + i]);
  }
}

TEST_CASE("learning-rate schedule hits its anchors exactly") {
  TrainConfig c;  // warmup 1e-7 -> 5e-4 over 4000 steps, then inverse-sqrt

  CHECK(lr_at(c, 0) == 1e-7);
  CHECK(lr_at(c, 4000) == 5e-4);
  CHECK(lr_at(c, 16000) == 2.5e-4);
  CHECK(lr_at(c, 2000) ==
        Catch::Approx(1e-7 + (5e-4 - 1e-7) * 0.5).epsilon(1e-14));

  for (std::size_t s : {1u, 999u, 2500u, 3999u}) CHECK(lr_at(c, s) < lr_at(c, s + 1));
  CHECK(lr_at(c, 4001) < 5e-4);
  CHECK(lr_at(c, 10001) < lr_at(c, 9999));

  TrainConfig flat = c;
  flat.warmup_steps = 0;
  CHECK(lr_at(flat, 0) == c.lr);
  CHECK(lr_at(flat, 123) == c.lr);

  TrainConfig quick = c;
  quick.warmup_steps = 10;
  CHECK(lr_at(quick, 10) == c.lr);
  CHECK(lr_at(quick, 40) == Catch::Approx(c.lr * 0.5).epsilon(1e-14));
}

TEST_CASE("optimizer step matches a scalar reference") {
  TrainConfig c;  // betas 0.9/0.98, eps 1e-8, decoupled decay 0.1

  SECTION("one step in closed form") {
    double w = 0.5, g = 1.0, m = 0.0, v = 0.0;
    adam_update(&w, &g, &m, &v, 1, 1, 0.003, c);
    // mhat and vhat are exactly 1 on the first step, so the update is
    // lr / (1 + eps) followed by the multiplicative decay.
    double expect = 0.5 - 0.003 / (1.0 + c.eps);
    expect -= 0.003 * c.weight_decay * expect;
    CHECK(w == Catch::Approx(expect).epsilon(1e-15));
    CHECK(m == Catch::Approx(0.1).epsilon(1e-15));
    CHECK(v == Catch::Approx(0.02).epsilon(1e-15));
  }

  SECTION("trajectory against an independent implementation") {
    std::vector<double> w{0.5, -1.25, 2.0}, m(3, 0.0), v(3, 0.0);
    std::vector<double> rw = w, rm(3, 0.0), rv(3, 0.0);
    Rng rng(77);
    for (std::size_t step = 1; step <= 25; ++step) {
      std::vector<double> g(3);
      for (double& gi : g) gi = rng.normal(0.0, 1.0);
      const double lr = lr_at(c, step);
      adam_update(w.data(), g.data(), m.data(), v.data(), 3, step, lr, c);
      for (std::size_t i = 0; i < 3; ++i) {
        rm[i] = c.beta1 * rm[i] + (1.0 - c.beta1) * g[i];
        rv[i] = c.beta2 * rv[i] + (1.0 - c.beta2) * g[i] * g[i];
        const double mhat = rm[i] / (1.0 - std::pow(c.beta1, static_cast<double>(step)));
        const double vhat = rv[i] / (1.0 - std::pow(c.beta2, static_cast<double>(step)));
        rw[i] = (rw[i] - lr * mhat / (std::sqrt(vhat) + c.eps)) * (1.0 - lr * c.weight_decay);
      }
      for (std::size_t i = 0; i < 3; ++i) REQUIRE(std::abs(w[i] - rw[i]) <= 1e-12);
    }
  }
}

TEST_CASE("first optimization step starts near uniform prediction") {
  Corpus corpus = Corpus::from_text(repeated_pangram(40), 0.1);
  ModelConfig cfg = tiny_cfg(corpus, RouterKind::deterministic_chunk);
  TrainConfig tc;

  Trainer tr(build_model(cfg), corpus, tc);
  const StepMetrics s1 = tr.train_step();

  const double lnv = std::log(static_cast<double>(corpus.vocab.size()));
  CHECK(std::abs(s1.loss - lnv) < 0.05 * lnv);
  CHECK(s1.step == 1);
  CHECK(s1.lr == lr_at(tc, 1));
  CHECK(s1.ppl == std::exp(s1.loss));  // no balance loss with this router
  CHECK(s1.imbalance_ratio == 1.0);    // balanced hidden mixing, 8 tokens over 2 experts
  CHECK(s1.wall_ms > 0.0);

  const std::string line = metrics_line(s1);
  for (const char* key :
       {"step=1", " loss=", " ppl=", " lr=", " imbalance_ratio=", " wall_ms="})
    CHECK(line.find(key) != std::string::npos);
}

TEST_CASE("a short run reduces loss and replays bitwise") {
  Corpus corpus = Corpus::from_text(repeated_pangram(40), 0.1);
  ModelConfig cfg = tiny_cfg(corpus, RouterKind::deterministic_chunk);
  cfg.seed = 42;
  TrainConfig tc;
  tc.warmup_steps = 25;

  auto run = [&](std::vector<double>& losses) {
    Trainer tr(build_model(cfg), corpus, tc);
    const double fresh_nll = tr.evaluate_nll();
    for (std::size_t s = 0; s < 500; ++s) losses.push_back(tr.train_step().loss);
    const double trained_nll = tr.evaluate_nll();
    CHECK(trained_nll < fresh_nll);
    return snapshot(tr.model);
  };

  std::vector<double> la, lb;
  const auto pa = run(la);
  const auto pb = run(lb);

  REQUIRE(bitwise_equal(la, lb));
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) REQUIRE(bitwise_equal(pa[i], pb[i]));

  double tail = 0.0;
  for (std::size_t s = 490; s < 500; ++s) tail += la[s];
  tail /= 10.0;
  CHECK(tail < 0.8 * la.front());
  CHECK(la.back() < la.front());
}

TEST_CASE("training rejects non-finite loss with the failing step") {
  Corpus corpus = Corpus::from_text(repeated_pangram(30), 0.1);
  ModelConfig cfg = tiny_cfg(corpus, RouterKind::deterministic_chunk);
  TrainConfig tc;

  Trainer tr(build_model(cfg), corpus, tc);
  tr.train_step();

  tr.model.params()[0].second.data()[0] = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_AS(tr.train_step(), TrainError);
  REQUIRE_THROWS_WITH(tr.train_step(), Catch::Matchers::ContainsSubstring("step 2"));
  CHECK(tr.state.step == 1);  // the poisoned step never completed
}

TEST_CASE("spatial masks hold after optimizer updates") {
  Corpus corpus = Corpus::from_text(repeated_pangram(30), 0.1);
  ModelConfig cfg = tiny_cfg(corpus, RouterKind::deterministic_chunk);
  TrainConfig tc;
  tc.warmup_steps = 5;

  Trainer tr(build_model(cfg), corpus, tc);
  for (int s = 0; s < 5; ++s) tr.train_step();

  bool saw_spatial = false, saw_nonzero = false;
  for (const auto& [name, t] : tr.model.params()) {
    if (name.find("w_s") == std::string::npos) continue;
    saw_spatial = true;
    REQUIRE(t.shape().size() == 2);
    for (std::size_t r = 0; r < t.shape()[0]; ++r)
      for (std::size_t c = 0; c < t.shape()[1]; ++c) {
        if (c > r)
          REQUIRE(t.at(r, c) == 0.0);
        else if (t.at(r, c) != 0.0)
          saw_nonzero = true;
      }
  }
  REQUIRE(saw_spatial);
  CHECK(saw_nonzero);  // updates reached the unmasked triangle
}

TEST_CASE("record files survive a write/read cycle and reject corruption") {
  const std::string p = tmp_path("smlp_train_records.bin");
  std::vector<Record> recs;
  recs.push_back({"alpha", {2, 2}, {1.0, -2.0, 3.5, 4.25}});
  recs.push_back({"beta", {}, {ckptdetail::bits_to_double(0xDEADBEEFCAFEF00Dull)}});
  recs.push_back({"gamma", {0}, {}});
  write_records(p, recs);

  SECTION("round trip") {
    const std::vector<Record> back = read_records(p);
    REQUIRE(back.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(back[i].name == recs[i].name);
      CHECK(back[i].shape == recs[i].shape);
      REQUIRE(bitwise_equal(back[i].data, recs[i].data));
    }
    CHECK(ckptdetail::double_to_bits(back[1].data[0]) == 0xDEADBEEFCAFEF00Dull);
  }

  SECTION("bad magic") {
    std::string bytes = slurp(p);
    bytes[0] = 'X';
    spew(p, bytes);
    REQUIRE_THROWS_WITH(read_records(p), Catch::Matchers::ContainsSubstring("not a checkpoint"));
  }

  SECTION("unsupported version") {
    std::string bytes = slurp(p);
    bytes[4] = static_cast<char>(bytes[4] + 1);
    spew(p, bytes);
    REQUIRE_THROWS_WITH(read_records(p), Catch::Matchers::ContainsSubstring("version"));
  }

  SECTION("payload corruption trips the checksum") {
    std::string bytes = slurp(p);
    // header 12 + name field 9 + rank 4 + extents 16 = payload of "alpha" at 41
    bytes[45] = static_cast<char>(bytes[45] ^ 0x40);
    spew(p, bytes);
    REQUIRE_THROWS_WITH(read_records(p),
                        Catch::Matchers::ContainsSubstring("checksum failure in record alpha"));
  }

  SECTION("truncation") {
    std::string bytes = slurp(p);
    spew(p, bytes.substr(0, bytes.size() - 2));
    REQUIRE_THROWS_AS(read_records(p), IoError);
  }

  SECTION("record count runs past the data") {
    std::string bytes = slurp(p);
    bytes[8] = static_cast<char>(bytes[8] + 1);
    spew(p, bytes);
    REQUIRE_THROWS_AS(read_records(p), IoError);
  }

  SECTION("mismatched shape and payload refuse to serialize") {
    CHECK_THROWS_AS(write_records(p, {{"bad", {3}, {1.0}}}), IoError);
  }

  SECTION("a bare record file is not a training checkpoint") {
    REQUIRE_THROWS_WITH(load_checkpoint(p), Catch::Matchers::ContainsSubstring("cfg."));
  }
}

TEST_CASE("checkpoint save-load-save is byte-identical") {
  Corpus corpus = Corpus::from_text(repeated_pangram(40), 0.1);
  ModelConfig cfg = tiny_cfg(corpus, RouterKind::partial_prediction);
  cfg.seed = 31337;
  TrainConfig tc;
  tc.dropout = 0.1;  // exercises the checkpointed rng stream

  Trainer tr(build_model(cfg), corpus, tc);
  for (int s = 0; s < 5; ++s) tr.train_step();

  const std::string pa = tmp_path("smlp_train_ckpt_a.bin");
  const std::string pb = tmp_path("smlp_train_ckpt_b.bin");
  save_checkpoint(tr.model, tr.state, corpus.vocab, pa);

  Checkpoint ck = load_checkpoint(pa);
  CHECK(ck.cfg.vocab_size == cfg.vocab_size);
  CHECK(ck.cfg.seq_len == cfg.seq_len);
  CHECK(ck.cfg.embed_dim == cfg.embed_dim);
  CHECK(ck.cfg.ffn_dim == cfg.ffn_dim);
  CHECK(ck.cfg.n_dense == cfg.n_dense);
  CHECK(ck.cfg.n_sparse == cfg.n_sparse);
  CHECK(ck.cfg.n_experts == cfg.n_experts);
  CHECK(ck.cfg.n_heads == cfg.n_heads);
  CHECK(ck.cfg.router_kind == cfg.router_kind);
  CHECK(ck.cfg.arch == cfg.arch);
  CHECK(ck.cfg.partial_fraction == cfg.partial_fraction);
  CHECK(ck.cfg.seed == cfg.seed);
  CHECK(ck.vocab.codepoints == corpus.vocab.codepoints);
  CHECK(ck.state.step == 5);
  CHECK(ck.state.rng.state() == tr.state.rng.state());

  const NamedParams orig = tr.model.params();
  const NamedParams loaded = ck.model.params();
  REQUIRE(orig.size() == loaded.size());
  for (std::size_t i = 0; i < orig.size(); ++i) {
    CHECK(orig[i].first == loaded[i].first);
    REQUIRE(bitwise_equal(orig[i].second, loaded[i].second));
  }
  REQUIRE(ck.state.m.size() == tr.state.m.size());
  for (std::size_t i = 0; i < ck.state.m.size(); ++i) {
    REQUIRE(bitwise_equal(ck.state.m[i], tr.state.m[i]));
    REQUIRE(bitwise_equal(ck.state.v[i], tr.state.v[i]));
  }

  save_checkpoint(ck.model, ck.state, ck.vocab, pb);
  REQUIRE(slurp(pa) == slurp(pb));
}

TEST_CASE("resume reproduces the uninterrupted run bitwise") {
  // Small corpus so the run crosses epoch boundaries after resuming.
  Corpus corpus = Corpus::from_text(scrambled_text(120, 5), 0.2);
  ModelConfig cfg = tiny_cfg(corpus, RouterKind::partial_prediction);
  cfg.seed = 7;
  TrainConfig tc;
  tc.warmup_steps = 10;
  tc.dropout = 0.1;

  std::vector<double> straight;
  Trainer a(build_model(cfg), corpus, tc);
  for (int s = 0; s < 12; ++s) straight.push_back(a.train_step().loss);

  const std::string p = tmp_path("smlp_train_resume.bin");
  std::vector<double> replay;
  {
    Trainer b(build_model(cfg), corpus, tc);
    for (int s = 0; s < 7; ++s) replay.push_back(b.train_step().loss);
    save_checkpoint(b.model, b.state, corpus.vocab, p);
  }
  Checkpoint ck = load_checkpoint(p);
  Trainer c(std::move(ck.model), corpus, tc, std::move(ck.state));
  CHECK(c.state.step == 7);
  for (int s = 0; s < 5; ++s) replay.push_back(c.train_step().loss);

  REQUIRE(replay.size() == straight.size());
  REQUIRE(bitwise_equal(replay, straight));

  const auto pa = snapshot(a.model), pc = snapshot(c.model);
  REQUIRE(pa.size() == pc.size());
  for (std::size_t i = 0; i < pa.size(); ++i) REQUIRE(bitwise_equal(pa[i], pc[i]));
  CHECK(a.evaluate_nll() == c.evaluate_nll());
}

TEST_CASE("validation metrics are consistent") {
  Corpus corpus = Corpus::from_text(repeated_pangram(40), 0.2);
  ModelConfig cfg = tiny_cfg(corpus, RouterKind::deterministic_chunk);
  TrainConfig tc;
  Trainer tr(build_model(cfg), corpus, tc);

  const double nll = tr.evaluate_nll();
  const double lnv = std::log(static_cast<double>(corpus.vocab.size()));
  CHECK(std::abs(nll - lnv) < 0.05 * lnv);
  CHECK(tr.evaluate_ppl() == std::exp(nll));
  CHECK(tr.evaluate_nll() == nll);  // evaluation is deterministic

  Corpus no_valid = Corpus::from_text(repeated_pangram(40), 0.0);
  ModelConfig cfg2 = tiny_cfg(no_valid, RouterKind::deterministic_chunk);
  Trainer tr2(build_model(cfg2), no_valid, tc);
  CHECK_THROWS_AS(tr2.evaluate_nll(), DataError);
}

TEST_CASE("trainer constructor validates its inputs") {
  TrainConfig tc;
  Corpus tiny = Corpus::from_text("ab", 0.0);
  ModelConfig cfg = tiny_cfg(tiny, RouterKind::deterministic_chunk);
  CHECK_THROWS_AS(Trainer(build_model(cfg), tiny, tc), DataError);  // no full window

  Corpus corpus = Corpus::from_text(repeated_pangram(20), 0.1);
  ModelConfig bad = tiny_cfg(corpus, RouterKind::deterministic_chunk);
  bad.vocab_size += 1;
  CHECK_THROWS_AS(Trainer(build_model(bad), corpus, tc), ConfigError);

  ModelConfig good = tiny_cfg(corpus, RouterKind::deterministic_chunk);
  TrainState stub;
  stub.m.resize(1);
  stub.v.resize(1);
  CHECK_THROWS_AS(Trainer(build_model(good), corpus, tc, stub), IoError);

  Trainer fresh(build_model(good), corpus, tc);
  TrainState wrong = fresh.state;
  wrong.m[0].resize(wrong.m[0].size() + 1);
  CHECK_THROWS_AS(Trainer(build_model(good), corpus, tc, wrong), IoError);
}

TEST_CASE("batching is a seed-keyed permutation of the training windows") {
  Corpus corpus = Corpus::from_text(scrambled_text(97, 3), 0.0);
  ModelConfig cfg = tiny_cfg(corpus, RouterKind::deterministic_chunk);
  TrainConfig tc;
  Trainer tr(build_model(cfg), corpus, tc);

  const std::size_t window = cfg.seq_len + 1;
  REQUIRE(tr.n_train_windows() == 10);

  std::vector<std::vector<int>> all;
  for (std::size_t w = 0; w < 10; ++w) all.push_back(corpus.train_window(w, window));
  {
    auto uniq = all;
    std::sort(uniq.begin(), uniq.end());
    REQUIRE(std::unique(uniq.begin(), uniq.end()) == uniq.end());  // windows all distinct
  }

  auto epoch_order = [&](const Trainer& t, std::size_t epoch) {
    std::vector<std::vector<int>> seqs;
    for (std::size_t i = 0; i < 10; ++i) seqs.push_back(t.train_sequence(epoch * 10 + i));
    return seqs;
  };

  const auto e0 = epoch_order(tr, 0);
  const auto e1 = epoch_order(tr, 1);
  auto sorted_all = all, s0 = e0, s1 = e1;
  std::sort(sorted_all.begin(), sorted_all.end());
  std::sort(s0.begin(), s0.end());
  std::sort(s1.begin(), s1.end());
  REQUIRE(s0 == sorted_all);  // every window exactly once per epoch
  REQUIRE(s1 == sorted_all);
  CHECK(e0 != e1);  // reshuffled between epochs

  CHECK(tr.train_sequence(4) == e0[4]);  // pure in g, even after the epoch cache moved on

  ModelConfig other = cfg;
  other.seed = 777;
  Trainer tr2(build_model(other), corpus, tc);
  CHECK(epoch_order(tr2, 0) != e0);
}

TEST_CASE("dropout masks scale activations and preserve gradients") {
  Rng data_rng(9);
  Tensor x = Tensor::randu({40, 50}, data_rng, 0.5, 1.5, true);

  Rng dr(1234);
  Tensor y = dropout(x, 0.25, dr);

  std::size_t zeros = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (y.at(i) == 0.0)
      ++zeros;
    else
      REQUIRE(y.at(i) == x.at(i) * (1.0 / 0.75));
  }
  const double frac = static_cast<double>(zeros) / static_cast<double>(x.numel());
  CHECK(frac > 0.20);
  CHECK(frac < 0.30);

  SECTION("consumes exactly one draw per element") {
    Rng ref(1234);
    for (std::size_t i = 0; i < x.numel(); ++i) ref.next_double();
    CHECK(dr.state() == ref.state());
  }

  SECTION("deterministic given the stream state") {
    Rng dr2(1234);
    REQUIRE(bitwise_equal(dropout(x, 0.25, dr2), y));
  }

  SECTION("probability zero is the identity and draws nothing") {
    Rng dr3(555);
    Tensor z = dropout(x, 0.0, dr3);
    CHECK(z.data() == x.data());
    CHECK(dr3.state() == Rng(555).state());
  }

  SECTION("rates outside [0,1) are rejected") {
    Rng dr4(1);
    CHECK_THROWS_AS(dropout(x, 1.0, dr4), ConfigError);
    CHECK_THROWS_AS(dropout(x, -0.1, dr4), ConfigError);
  }

  SECTION("gradient passes only through kept elements") {
    x.zero_grad();
    Rng dr5(42);
    Tape tape;
    TapeScope scope(tape);
    Tensor out = dropout(x, 0.5, dr5);
    tape.backward(testutil::project(out, Tensor::full({40, 50}, 1.0)));
    for (std::size_t i = 0; i < x.numel(); ++i)
      REQUIRE(x.grad()[i] == (out.at(i) == 0.0 ? 0.0 : 2.0));
  }
}

TEST_CASE("targets at masked positions cannot influence gradients") {
  Corpus corpus = Corpus::from_text(repeated_pangram(20), 0.1);
  ModelConfig cfg = tiny_cfg(corpus, RouterKind::partial_prediction);

  const std::vector<int> seq = corpus.train_window(0, cfg.seq_len + 1);
  const std::vector<int> inputs(seq.begin(), seq.end() - 1);
  std::vector<int> targets_a(seq.begin() + 1, seq.end());

  Model probe = build_model(cfg);
  std::vector<bool> mask;
  {
    ForwardResult r = forward_lm(probe, inputs, false);
    mask = r.loss_mask;
  }
  std::size_t masked = 0;
  for (bool b : mask) masked += b ? 0 : 1;
  REQUIRE(masked >= 1);

  std::vector<int> targets_b = targets_a;
  for (std::size_t t = 0; t < mask.size(); ++t)
    if (!mask[t]) targets_b[t] = (targets_b[t] + 3) % static_cast<int>(cfg.vocab_size);
  REQUIRE(targets_a != targets_b);

  auto grads_for = [&](const std::vector<int>& targets, double& loss_out) {
    Model m = build_model(cfg);
    Tape tape;
    TapeScope scope(tape);
    ForwardResult r = forward_lm(m, inputs, true);
    Tensor ce = cross_entropy(r.logits, targets, r.loss_mask);
    loss_out = ce.item();
    tape.backward(ce);
    std::vector<std::vector<double>> grads;
    for (const auto& [name, t] : m.params())
      grads.push_back(t.has_grad() ? t.grad() : std::vector<double>(t.numel(), 0.0));
    return grads;
  };

  double loss_a = 0.0, loss_b = 0.0;
  const auto ga = grads_for(targets_a, loss_a);
  const auto gb = grads_for(targets_b, loss_b);
  REQUIRE(loss_a == loss_b);
  REQUIRE(ga.size() == gb.size());
  for (std::size_t i = 0; i < ga.size(); ++i) REQUIRE(bitwise_equal(ga[i], gb[i]));
}
