#include <cmath>
#include <cstring>
#include <vector>

#include "catch2/catch_amalgamated.hpp"
#include "smlp/ops.hpp"
#include "smlp/rng.hpp"
#include "smlp/tensor.hpp"
#include "testutil.hpp"

using namespace smlp;
using testutil::bitwise_equal;
using testutil::fd_max_rel;
using testutil::project;

namespace {
constexpr double kOpTol = 1e-4;
}

TEST_CASE("hash64 and rng streams are frozen") {
  CHECK(hash64(0, 0) == 0x48218226ff3cd4bfULL);
  CHECK(hash64(1, 0) == 0x9e0160293a33aaf7ULL);
  CHECK(hash64(0, 1) == 0xdce423fc82c0d5b8ULL);
  CHECK(hash64(42, 7) == 0xd56fd4491d82a4ddULL);
  CHECK(hash64(1, 0) != hash64(0, 1));

  Rng a(123);
  CHECK(a.next_u64() == 0xb4dc9bd462de412bULL);
  CHECK(a.next_u64() == 0xfa023ce9f06fb77cULL);
  Rng b(123);
  CHECK(b.next_double() == 0.70649122176370671);

  Rng c(9), d(9);
  for (int i = 0; i < 1000; ++i) REQUIRE(c.next_u64() == d.next_u64());
  const std::uint64_t snap = c.state();
  const double x1 = c.normal(0.0, 1.0);
  c.set_state(snap);
  CHECK(c.normal(0.0, 1.0) == x1);
  for (int i = 0; i < 1000; ++i) {
    const double u = c.next_double();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    REQUIRE(c.next_below(7) < 7);
  }
}

TEST_CASE("matmul matches hand-computed product") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 1}, {5, 6});
  Tensor c = matmul(a, b);
  REQUIRE(c.shape() == Shape{2, 1});
  CHECK(c.at(0, 0) == 17.0);
  CHECK(c.at(1, 0) == 39.0);
  CHECK_THROWS_AS(matmul(a, Tensor::zeros({3, 2})), ShapeError);
  CHECK_THROWS_AS(matmul(a, Tensor::zeros({4})), ShapeError);
}

TEST_CASE("softmax matches hand-computed values and survives large logits") {
  Tensor x = Tensor::from({2}, {std::log(2.0), 0.0});
  Tensor p = softmax(x, 0);
  CHECK(p.at(0) == Catch::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(p.at(1) == Catch::Approx(1.0 / 3.0).epsilon(1e-12));

  Tensor big = Tensor::from({2}, {1000.0, 0.0});
  Tensor pb = softmax(big, 0);
  REQUIRE(std::isfinite(pb.at(0)));
  REQUIRE(std::isfinite(pb.at(1)));
  CHECK(pb.at(0) == Catch::Approx(1.0).epsilon(1e-12));

  Tensor single = Tensor::from({1}, {-3.7});
  CHECK(softmax(single, 0).at(0) == 1.0);  // exact, by max-subtraction
}

TEST_CASE("cross entropy of uniform logits is log vocab size") {
  Tensor logits = Tensor::zeros({3, 4});
  std::vector<int> targets{0, 2, 3};
  std::vector<bool> mask{true, true, true};
  Tensor loss = cross_entropy(logits, targets, mask);
  CHECK(loss.item() == Catch::Approx(std::log(4.0)).epsilon(1e-12));

  CHECK_THROWS_AS(cross_entropy(logits, targets, std::vector<bool>{false, false, false}),
                  DataError);
  CHECK_THROWS_AS(cross_entropy(logits, std::vector<int>{0, 9, 1}, mask), ConfigError);
  CHECK_THROWS_AS(cross_entropy(logits, std::vector<int>{0, 1}, mask), ShapeError);
}

TEST_CASE("masked cross entropy rows get exactly zero gradient") {
  Rng rng(5);
  Tensor logits = Tensor::randn({4, 6}, rng, 0.0, 1.0, true);
  std::vector<int> targets{1, 2, 3, 4};
  std::vector<bool> mask{false, true, false, true};
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = cross_entropy(logits, targets, mask);
    tape.backward(loss);
  }
  const auto& g = logits.grad();
  for (std::size_t j = 0; j < 6; ++j) {
    CHECK(g[0 * 6 + j] == 0.0);
    CHECK(g[2 * 6 + j] == 0.0);
    CHECK(g[1 * 6 + j] != 0.0);
  }
}

TEST_CASE("finite differences validate every op backward") {
  Rng rng(42);
  Tensor a = Tensor::randu({3, 4}, rng, -2.0, 2.0, true);
  Tensor b = Tensor::randu({4, 5}, rng, -2.0, 2.0, true);
  Tensor c = Tensor::randu({3, 4}, rng, -2.0, 2.0, true);
  Tensor w = Tensor::randu({3, 3}, rng, -2.0, 2.0, true);
  Tensor colb = Tensor::randu({4}, rng, -2.0, 2.0, true);
  Tensor rowb = Tensor::randu({3}, rng, -2.0, 2.0, true);
  Tensor gain = Tensor::randu({4}, rng, 0.5, 1.5, true);
  Tensor bias = Tensor::randu({4}, rng, -0.5, 0.5, true);
  Tensor r34 = Tensor::randu({3, 4}, rng, -1.0, 1.0);
  Tensor r35 = Tensor::randu({3, 5}, rng, -1.0, 1.0);
  Tensor r43 = Tensor::randu({4, 3}, rng, -1.0, 1.0);
  Tensor r33 = Tensor::randu({3, 3}, rng, -1.0, 1.0);

  SECTION("matmul") {
    CHECK(fd_max_rel([&] { return project(matmul(a, b), r35); }, {a, b}) < kOpTol);
  }
  SECTION("lower_tri_matmul") {
    CHECK(fd_max_rel([&] { return project(lower_tri_matmul(w, a), r34); }, {w, a}) < kOpTol);
  }
  SECTION("transpose") {
    CHECK(fd_max_rel([&] { return project(transpose(a), r43); }, {a}) < kOpTol);
  }
  SECTION("add sub mul") {
    CHECK(fd_max_rel([&] { return project(add(a, c), r34); }, {a, c}) < kOpTol);
    CHECK(fd_max_rel([&] { return project(sub(a, c), r34); }, {a, c}) < kOpTol);
    CHECK(fd_max_rel([&] { return project(mul(a, c), r34); }, {a, c}) < kOpTol);
  }
  SECTION("scale add_scalar") {
    CHECK(fd_max_rel([&] { return project(scale(a, -1.7), r34); }, {a}) < kOpTol);
    CHECK(fd_max_rel([&] { return project(add_scalar(a, 0.3), r34); }, {a}) < kOpTol);
  }
  SECTION("gelu sigmoid") {
    CHECK(fd_max_rel([&] { return project(gelu(a), r34); }, {a}) < kOpTol);
    CHECK(fd_max_rel([&] { return project(sigmoid(a), r34); }, {a}) < kOpTol);
  }
  SECTION("bias adds and row scaling") {
    CHECK(fd_max_rel([&] { return project(add_col_bias(a, colb), r34); }, {a, colb}) < kOpTol);
    CHECK(fd_max_rel([&] { return project(add_row_bias(a, rowb), r34); }, {a, rowb}) < kOpTol);
    CHECK(fd_max_rel([&] { return project(scale_rows(a, rowb), r34); }, {a, rowb}) < kOpTol);
  }
  SECTION("layernorm") {
    CHECK(fd_max_rel([&] { return project(layernorm(a, gain, bias), r34); }, {a, gain, bias}) <
          kOpTol);
  }
  SECTION("softmax") {
    Tensor v = Tensor::randu({5}, rng, -2.0, 2.0, true);
    Tensor rv = Tensor::randu({5}, rng, -1.0, 1.0);
    CHECK(fd_max_rel([&] { return project(softmax(v, 0), rv); }, {v}) < kOpTol);
    CHECK(fd_max_rel([&] { return project(softmax(a, 1), r34); }, {a}) < kOpTol);
    CHECK(fd_max_rel([&] { return project(softmax(a, 0), r34); }, {a}) < kOpTol);
    CHECK(fd_max_rel([&] { return project(causal_row_softmax(w), r33); }, {w}) < kOpTol);
  }
  SECTION("reductions") {
    CHECK(fd_max_rel([&] { return sum(a); }, {a}) < kOpTol);
    Tensor rv4 = Tensor::randu({4}, rng, -1.0, 1.0);
    CHECK(fd_max_rel([&] { return project(mean_axis0(a), rv4); }, {a}) < kOpTol);
    Tensor v = Tensor::randu({4}, rng, -2.0, 2.0, true);
    CHECK(fd_max_rel([&] { return weighted_sum(v, {0.3, -1.2, 0.0, 2.0}); }, {v}) < kOpTol);
  }
  SECTION("embedding") {
    Tensor table = Tensor::randu({6, 4}, rng, -2.0, 2.0, true);
    std::vector<int> ids{3, 0, 3, 5};  // repeated id: gradients must accumulate
    Tensor r44 = Tensor::randu({4, 4}, rng, -1.0, 1.0);
    CHECK(fd_max_rel([&] { return project(embedding(table, ids), r44); }, {table}) < kOpTol);
  }
  SECTION("slicing and concatenation") {
    Tensor r24 = Tensor::randu({2, 4}, rng, -1.0, 1.0);
    Tensor r32 = Tensor::randu({3, 2}, rng, -1.0, 1.0);
    CHECK(fd_max_rel([&] { return project(slice_rows(a, 1, 3), r24); }, {a}) < kOpTol);
    CHECK(fd_max_rel([&] { return project(slice_cols(a, 1, 3), r32); }, {a}) < kOpTol);
    Tensor r64 = Tensor::randu({6, 4}, rng, -1.0, 1.0);
    CHECK(fd_max_rel([&] { return project(concat_rows({a, c}), r64); }, {a, c}) < kOpTol);
    Tensor r38 = Tensor::randu({3, 8}, rng, -1.0, 1.0);
    CHECK(fd_max_rel([&] { return project(concat_cols({a, c}), r38); }, {a, c}) < kOpTol);
  }
  SECTION("gather scatter select") {
    std::vector<std::size_t> idx{2, 0, 2};
    Tensor r34b = Tensor::randu({3, 4}, rng, -1.0, 1.0);
    CHECK(fd_max_rel([&] { return project(gather_rows(a, idx), r34b); }, {a}) < kOpTol);
    std::vector<std::size_t> pos{4, 1, 0};
    Tensor r54 = Tensor::randu({5, 4}, rng, -1.0, 1.0);
    CHECK(fd_max_rel([&] { return project(scatter_rows(a, pos, 5), r54); }, {a}) < kOpTol);
    std::vector<std::size_t> rr{0, 1, 2}, cc{3, 0, 2};
    Tensor rv3 = Tensor::randu({3}, rng, -1.0, 1.0);
    CHECK(fd_max_rel([&] { return project(select_at(a, rr, cc), rv3); }, {a}) < kOpTol);
  }
  SECTION("cross_entropy") {
    Tensor logits = Tensor::randu({4, 5}, rng, -2.0, 2.0, true);
    std::vector<int> targets{1, 4, 0, 2};
    std::vector<bool> mask{true, false, true, true};
    CHECK(fd_max_rel([&] { return cross_entropy(logits, targets, mask); }, {logits}) < kOpTol);
  }
  SECTION("composite graph with reuse") {
    // One tensor feeding several consumers checks gradient accumulation.
    auto f = [&] {
      Tensor h = gelu(matmul(a, b));               // [3,5]
      Tensor s = softmax(slice_cols(h, 0, 3), 1);  // [3,3]
      Tensor y = add(matmul(s, a), mul(a, c));     // [3,4]
      return sum(mul(y, y));
    };
    CHECK(fd_max_rel(f, {a, b, c}) < kOpTol);
  }
}

TEST_CASE("lower_tri_matmul equals dense matmul with zeroed upper triangle") {
  Rng rng(7);
  Tensor w = Tensor::randu({5, 5}, rng, -1.5, 1.5);
  Tensor x = Tensor::randu({5, 3}, rng, -1.5, 1.5);
  Tensor wz = Tensor::zeros({5, 5});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j <= i; ++j) wz.set(i, j, w.at(i, j));
  Tensor y1 = lower_tri_matmul(w, x);
  Tensor y2 = matmul(wz, x);
  for (std::size_t i = 0; i < y1.numel(); ++i) REQUIRE(y1.at(i) == y2.at(i));
}

TEST_CASE("chunk and concat are mutual inverses, bitwise") {
  Rng rng(11);
  Tensor x = Tensor::randu({6, 8}, rng, -3.0, 3.0);
  CHECK(bitwise_equal(concat_cols(chunk(x, 1, 4)), x));
  CHECK(bitwise_equal(concat_rows(chunk(x, 0, 3)), x));
  CHECK_THROWS_AS(chunk(x, 1, 5), ShapeError);
  CHECK(bitwise_equal(transpose(transpose(x)), x));
}

TEST_CASE("scatter_rows rejects duplicate or out-of-range positions") {
  Tensor src = Tensor::zeros({2, 3});
  CHECK_THROWS_AS(scatter_rows(src, {1, 1}, 4), ShapeError);
  CHECK_THROWS_AS(scatter_rows(src, {1, 4}, 4), ShapeError);
  CHECK_THROWS_AS(scatter_rows(src, {1}, 4), ShapeError);
  Tensor out = scatter_rows(src, {3, 0}, 4);
  REQUIRE(out.shape() == Shape{4, 3});
}

TEST_CASE("gather then scatter restores the original rows") {
  Rng rng(13);
  Tensor x = Tensor::randu({5, 4}, rng, -2.0, 2.0);
  std::vector<std::size_t> perm{4, 2, 0, 3, 1};
  Tensor shuffled = gather_rows(x, perm);
  Tensor restored = scatter_rows(shuffled, perm, 5);
  CHECK(bitwise_equal(restored, x));
}

TEST_CASE("tape guards against misuse") {
  Tensor a = Tensor::from({2}, {1.0, 2.0}, true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor vec = scale(a, 2.0);
    CHECK_THROWS_AS(tape.backward(vec), TrainError);  // non-scalar loss
    Tensor loss = sum(vec);
    tape.backward(loss);
    CHECK(a.grad()[0] == 2.0);
    CHECK_THROWS_AS(tape.backward(loss), TrainError);  // replay without clear
    Tensor stale = loss;
    tape.clear();
    CHECK_THROWS_AS(tape.backward(stale), TrainError);  // node from old generation
  }
  // No active tape: ops still work, nothing records, backward refuses.
  Tensor y = sum(scale(a, 3.0));
  CHECK(y.item() == 9.0);
  Tape other;
  CHECK_THROWS_AS(other.backward(y), TrainError);
}

TEST_CASE("gradients accumulate across tapes until cleared") {
  Tensor a = Tensor::from({2}, {1.0, 2.0}, true);
  for (int rep = 0; rep < 2; ++rep) {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(mul(a, a)));
  }
  CHECK(a.grad()[0] == 4.0);  // 2*2a with a=1, twice
  CHECK(a.grad()[1] == 8.0);
  a.zero_grad();
  CHECK(a.grad()[0] == 0.0);
}

TEST_CASE("forward and backward are bitwise repeatable") {
  auto run = [](std::vector<double>& grads_out) {
    Rng rng(2024);
    Tensor a = Tensor::randu({4, 6}, rng, -2.0, 2.0, true);
    Tensor b = Tensor::randu({6, 4}, rng, -2.0, 2.0, true);
    Tensor g = Tensor::randu({4}, rng, 0.5, 1.5, true);
    Tensor bb = Tensor::randu({4}, rng, -0.1, 0.1, true);
    Tape tape;
    TapeScope scope(tape);
    Tensor h = layernorm(gelu(matmul(a, b)), g, bb);
    Tensor p = softmax(h, 1);
    Tensor loss = cross_entropy(p, {0, 1, 2, 3}, {true, true, true, true});
    tape.backward(loss);
    grads_out = a.grad();
    for (double v : b.grad()) grads_out.push_back(v);
    grads_out.push_back(loss.item());
  };
  std::vector<double> g1, g2;
  run(g1);
  run(g2);
  REQUIRE(bitwise_equal(g1, g2));
}
