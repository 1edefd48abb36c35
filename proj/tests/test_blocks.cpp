#include <cmath>
#include <vector>

#include "catch2/catch_amalgamated.hpp"
#include "smlp/blocks.hpp"
#include "testutil.hpp"

using namespace smlp;
using testutil::bitwise_equal;
using testutil::fd_max_rel;
using testutil::project;

namespace {

constexpr double kOpTol = 1e-4;

Tensor identity_matrix(std::size_t n) {
  Tensor m = Tensor::zeros({n, n}, true);
  for (std::size_t i = 0; i < n; ++i) m.set(i, i, 1.0);
  return m;
}

std::vector<Tensor> tensors_of(const NamedParams& np) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : np) out.push_back(t);
  return out;
}

}  // namespace

TEST_CASE("sgu with identity weights passes input through") {
  Rng rng(1);
  SguParams p = SguParams::init(4, true, rng);
  p.w_s = identity_matrix(4);
  Tensor x = Tensor::randu({4, 3}, rng, -2.0, 2.0);
  CHECK(bitwise_equal(sgu_forward(p, x), x));
}

TEST_CASE("sgu with subdiagonal weights shifts rows down") {
  Rng rng(2);
  SguParams p = SguParams::init(2, true, rng);
  p.w_s = Tensor::from({2, 2}, {0, 0, 1, 0}, true);
  p.b_s = Tensor::zeros({2}, true);
  Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor y = sgu_forward(p, x);
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(y.at(0, j) == 0.0);
    CHECK(y.at(1, j) == x.at(0, j));
  }
}

TEST_CASE("sgu rejects sequence length mismatch") {
  Rng rng(3);
  SguParams p = SguParams::init(4, true, rng);
  CHECK_THROWS_AS(sgu_forward(p, Tensor::zeros({5, 3})), ShapeError);
}

TEST_CASE("causal sgu output is bitwise independent of future rows") {
  Rng rng(4);
  const std::size_t t_len = 8, h = 5;
  SguParams p = SguParams::init(t_len, true, rng);
  // Give the weights real magnitude so a leak could not hide in rounding.
  p.w_s = Tensor::randu({t_len, t_len}, rng, -1.0, 1.0, true);
  p.remask();
  Tensor x = Tensor::randu({t_len, h}, rng, -2.0, 2.0);
  Tensor base = sgu_forward(p, x);
  for (std::size_t u = 1; u < t_len; ++u) {
    Tensor xp = Tensor::from(x.shape(), x.values());
    for (std::size_t j = 0; j < h; ++j) xp.set(u, j, x.at(u, j) + 3.7);
    Tensor out = sgu_forward(p, xp);
    for (std::size_t t = 0; t < u; ++t)
      for (std::size_t j = 0; j < h; ++j) REQUIRE(out.at(t, j) == base.at(t, j));
  }
}

TEST_CASE("sgu init stays within the documented envelope") {
  Rng rng(5);
  const std::size_t t_len = 16;
  SguParams p = SguParams::init(t_len, true, rng);
  const double bound = 1e-3 / static_cast<double>(t_len);
  for (std::size_t i = 0; i < t_len; ++i)
    for (std::size_t j = 0; j < t_len; ++j) {
      if (j > i)
        CHECK(p.w_s.at(i, j) == 0.0);  // causal re-mask applied at init
      else
        CHECK(std::abs(p.w_s.at(i, j)) <= bound);
    }
  for (std::size_t i = 0; i < t_len; ++i) CHECK(p.b_s.at(i) == 0.0);
}

TEST_CASE("multi-head sgu with one head equals plain sgu bitwise") {
  Rng rng(6);
  SguParams p = SguParams::init(6, true, rng);
  p.w_s = Tensor::randu({6, 6}, rng, -1.0, 1.0, true);
  p.remask();
  Tensor x = Tensor::randu({6, 4}, rng, -2.0, 2.0);
  CHECK(bitwise_equal(multi_head_sgu({p}, x), sgu_forward(p, x)));
}

TEST_CASE("multi-head sgu transforms column blocks independently") {
  Rng rng(7);
  SguParams left = SguParams::init(4, true, rng);
  left.w_s = identity_matrix(4);
  SguParams right = SguParams::init(4, true, rng);
  right.w_s = Tensor::zeros({4, 4}, true);
  right.b_s = Tensor::zeros({4}, true);
  Tensor x = Tensor::randu({4, 6}, rng, -2.0, 2.0);
  Tensor y = multi_head_sgu({left, right}, x);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t j = 0; j < 6; ++j)
      CHECK(y.at(t, j) == (j < 3 ? x.at(t, j) : 0.0));
  CHECK_THROWS_AS(multi_head_sgu({left, right}, Tensor::zeros({4, 5})), ShapeError);
}

TEST_CASE("multi-head sgu parameter count is h*T*T + h*T") {
  Rng rng(8);
  const std::size_t h = 4, t_len = 8;
  NamedParams np;
  for (std::size_t i = 0; i < h; ++i)
    SguParams::init(t_len, true, rng).collect("head" + std::to_string(i), np);
  CHECK(param_count(np) == h * t_len * t_len + h * t_len);
}

TEST_CASE("sgu prefix form matches full form and dense submatrix") {
  Rng rng(9);
  SguParams p = SguParams::init(6, true, rng);
  p.w_s = Tensor::randu({6, 6}, rng, -1.0, 1.0, true);
  p.remask();
  Tensor x6 = Tensor::randu({6, 3}, rng, -2.0, 2.0);
  CHECK(bitwise_equal(sgu_forward_prefix(p, x6), sgu_forward(p, x6)));

  Tensor x4 = Tensor::randu({4, 3}, rng, -2.0, 2.0);
  Tensor y = sgu_forward_prefix(p, x4);
  // Dense reference over the top-left 4x4 corner.
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k <= t; ++k) acc += p.w_s.at(t, k) * x4.at(k, j);
      CHECK(y.at(t, j) == Catch::Approx(acc + p.b_s.at(t)).margin(1e-15));
    }
  CHECK_THROWS_AS(sgu_forward_prefix(p, Tensor::zeros({7, 3})), ShapeError);
}

TEST_CASE("attention with one token reduces to value-projection") {
  Rng rng(10);
  AttentionParams p = AttentionParams::init(6, 2, rng);
  Tensor x = Tensor::randu({1, 6}, rng, -2.0, 2.0);
  Tensor got = self_attention(p, x, true);
  std::vector<Tensor> vs;
  for (std::size_t i = 0; i < 2; ++i)
    vs.push_back(add_col_bias(matmul(x, p.w_v[i]), p.b_v[i]));
  Tensor want = add_col_bias(matmul(concat_cols(vs), p.w_o), p.b_o);
  // Softmax over a single score is exactly 1, so the paths agree bitwise.
  CHECK(bitwise_equal(got, want));
}

TEST_CASE("causal attention output is bitwise independent of future tokens") {
  Rng rng(11);
  const std::size_t t_len = 7, h_dim = 8;
  AttentionParams p = AttentionParams::init(h_dim, 2, rng);
  Tensor x = Tensor::randu({t_len, h_dim}, rng, -2.0, 2.0);
  Tensor base = self_attention(p, x, true);
  for (std::size_t u = 1; u < t_len; ++u) {
    Tensor xp = Tensor::from(x.shape(), x.values());
    for (std::size_t j = 0; j < h_dim; ++j) xp.set(u, j, x.at(u, j) - 1.9);
    Tensor out = self_attention(p, xp, true);
    for (std::size_t t = 0; t < u; ++t)
      for (std::size_t j = 0; j < h_dim; ++j) REQUIRE(out.at(t, j) == base.at(t, j));
  }
  // The non-causal path must see future tokens (sanity of the probe itself).
  Tensor xp = Tensor::from(x.shape(), x.values());
  xp.set(t_len - 1, 0, 5.0);
  Tensor nc_base = self_attention(p, x, false);
  Tensor nc_pert = self_attention(p, xp, false);
  bool any_diff = false;
  for (std::size_t j = 0; j < h_dim && !any_diff; ++j)
    any_diff = nc_pert.at(0, j) != nc_base.at(0, j);
  CHECK(any_diff);
}

TEST_CASE("attention parameter count is 4*H*(H+1) at any head count") {
  Rng rng(12);
  const std::size_t h_dim = 16;
  for (std::size_t heads : {std::size_t{1}, std::size_t{4}, std::size_t{16}}) {
    NamedParams np;
    AttentionParams::init(h_dim, heads, rng).collect("attn", np);
    CHECK(param_count(np) == 4 * h_dim * (h_dim + 1));
  }
  CHECK_THROWS_AS(AttentionParams::init(16, 3, rng), ConfigError);
}

TEST_CASE("ffn is position-wise") {
  Rng rng(13);
  FfnParams p = FfnParams::init(5, 9, rng);
  Tensor x = Tensor::randu({6, 5}, rng, -2.0, 2.0);
  Tensor y = ffn_forward(p, x);
  std::vector<std::size_t> perm{3, 1, 5, 0, 2, 4};
  Tensor y_perm = ffn_forward(p, gather_rows(x, perm));
  CHECK(bitwise_equal(y_perm, gather_rows(y, perm)));

  FfnParams zero = FfnParams::init(5, 9, rng);
  zero.w1 = Tensor::zeros({5, 9}, true);
  zero.w2 = Tensor::zeros({9, 5}, true);
  Tensor yz = ffn_forward(zero, x);
  for (std::size_t i = 0; i < yz.numel(); ++i) CHECK(yz.at(i) == 0.0);
  CHECK_THROWS_AS(ffn_forward(p, Tensor::zeros({6, 4})), ShapeError);
}

TEST_CASE("finite differences validate every block backward") {
  Rng rng(14);
  Tensor x = Tensor::randu({5, 6}, rng, -2.0, 2.0, true);
  Tensor cot = Tensor::randu({5, 6}, rng, -1.0, 1.0);

  SECTION("sgu causal and dense") {
    for (bool causal : {true, false}) {
      SguParams p = SguParams::init(5, causal, rng);
      p.w_s = Tensor::randu({5, 5}, rng, -1.0, 1.0, true);
      p.remask();
      NamedParams np;
      p.collect("sgu", np);
      std::vector<Tensor> params = tensors_of(np);
      params.push_back(x);
      CHECK(fd_max_rel([&] { return project(sgu_forward(p, x), cot); }, params) < kOpTol);
    }
  }
  SECTION("sgu prefix") {
    SguParams p = SguParams::init(8, true, rng);
    p.w_s = Tensor::randu({8, 8}, rng, -1.0, 1.0, true);
    p.remask();
    NamedParams np;
    p.collect("sgu", np);
    std::vector<Tensor> params = tensors_of(np);
    params.push_back(x);
    CHECK(fd_max_rel([&] { return project(sgu_forward_prefix(p, x), cot); }, params) < kOpTol);
  }
  SECTION("multi-head sgu") {
    std::vector<SguParams> heads;
    for (int i = 0; i < 2; ++i) {
      SguParams p = SguParams::init(5, true, rng);
      p.w_s = Tensor::randu({5, 5}, rng, -1.0, 1.0, true);
      p.remask();
      heads.push_back(p);
    }
    NamedParams np;
    for (std::size_t i = 0; i < heads.size(); ++i) heads[i].collect("h" + std::to_string(i), np);
    std::vector<Tensor> params = tensors_of(np);
    params.push_back(x);
    CHECK(fd_max_rel([&] { return project(multi_head_sgu(heads, x), cot); }, params) < kOpTol);
  }
  SECTION("attention") {
    for (bool causal : {true, false}) {
      AttentionParams p = AttentionParams::init(6, 2, rng);
      NamedParams np;
      p.collect("attn", np);
      std::vector<Tensor> params = tensors_of(np);
      params.push_back(x);
      CHECK(fd_max_rel([&] { return project(self_attention(p, x, causal), cot); }, params) <
            kOpTol);
    }
  }
  SECTION("ffn") {
    FfnParams p = FfnParams::init(6, 11, rng);
    NamedParams np;
    p.collect("ffn", np);
    std::vector<Tensor> params = tensors_of(np);
    params.push_back(x);
    CHECK(fd_max_rel([&] { return project(ffn_forward(p, x), cot); }, params) < kOpTol);
  }
  SECTION("layernorm params") {
    LayerNormParams p = LayerNormParams::init(6);
    NamedParams np;
    p.collect("ln", np);
    std::vector<Tensor> params = tensors_of(np);
    params.push_back(x);
    CHECK(fd_max_rel([&] { return project(p.forward(x), cot); }, params) < kOpTol);
  }
}
