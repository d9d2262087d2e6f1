#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "sacnn/blocks.hpp"
#include "sacnn/gradcheck.hpp"
#include "test_util.hpp"

using namespace sacnn;
using test::bits_equal;
using test::rand_tensor;

namespace {

SelfAttentionParams make_sa_params(int c, bool gamma, Rng& rng) {
  SelfAttentionParams p;
  p.wq = rand_tensor<float>({5, c}, rng, -0.3, 0.3);
  p.bq = rand_tensor<float>({5}, rng, -0.1, 0.1);
  p.wk = rand_tensor<float>({5, c}, rng, -0.3, 0.3);
  p.bk = rand_tensor<float>({5}, rng, -0.1, 0.1);
  if (gamma) {
    p.wv = rand_tensor<float>({5, c}, rng, -0.3, 0.3);
    p.bv = rand_tensor<float>({5}, rng, -0.1, 0.1);
    p.wo = rand_tensor<float>({c, 5}, rng, -0.3, 0.3);
    p.bo = rand_tensor<float>({c}, rng, -0.1, 0.1);
  }
  p.norm_gain = Tensor::full({c}, 1.0f);
  p.norm_bias = Tensor::zeros({c});
  return p;
}

}  // namespace

TEST_CASE("alpha block shape chain 50 -> 23 -> 9") {
  Rng rng(1);
  AlphaParams a1{rand_tensor<float>({30, 1, 5, 5}, rng, -0.2, 0.2),
                 rand_tensor<float>({30}, rng, -0.1, 0.1)};
  AlphaParams a2{rand_tensor<float>({30, 30, 5, 5}, rng, -0.05, 0.05),
                 rand_tensor<float>({30}, rng, -0.1, 0.1)};
  auto x = rand_tensor<float>({1, 50, 50}, rng, 0.0, 1.0, false);
  auto h1 = alpha_forward<float>(nullptr, a1, x);
  CHECK(h1.shape() == std::vector<int>{30, 23, 23});
  auto h2 = alpha_forward<float>(nullptr, a2, h1);
  CHECK(h2.shape() == std::vector<int>{30, 9, 9});
}

TEST_CASE("alpha block is conv-activation-pool by direct composition") {
  Rng rng(2);
  AlphaParams a{rand_tensor<float>({2, 2, 5, 5}, rng), rand_tensor<float>({2}, rng)};
  auto x = rand_tensor<float>({2, 12, 12}, rng, -1.0, 1.0, false);
  auto got = alpha_forward<float>(nullptr, a, x);
  auto want = maxpool2x2<float>(
      nullptr, relu<float>(nullptr, conv2d_valid<float>(nullptr, x, a.conv_w, a.conv_b)));
  CHECK(bits_equal(got, want));

  AlphaParams zero{Tensor::zeros({2, 2, 5, 5}), Tensor::zeros({2})};
  auto z = alpha_forward<float>(nullptr, zero, x);
  for (float v : z.data()) CHECK(v == 0.0f);
}

TEST_CASE("alpha block demands a 5x5 kernel") {
  Rng rng(3);
  AlphaParams bad{rand_tensor<float>({2, 1, 3, 3}, rng), rand_tensor<float>({2}, rng)};
  auto x = rand_tensor<float>({1, 10, 10}, rng, 0.0, 1.0, false);
  CHECK_THROWS_AS(alpha_forward<float>(nullptr, bad, x), ShapeError);
}

TEST_CASE("beta block: k=3 twice shrinks 9 -> 5, k=1 is per-hypercolumn") {
  Rng rng(4);
  BetaParams b3a{rand_tensor<float>({30, 30, 3, 3}, rng, -0.1, 0.1),
                 rand_tensor<float>({30}, rng, -0.1, 0.1)};
  BetaParams b3b{rand_tensor<float>({30, 30, 3, 3}, rng, -0.1, 0.1),
                 rand_tensor<float>({30}, rng, -0.1, 0.1)};
  auto x = rand_tensor<float>({30, 9, 9}, rng, -1.0, 1.0, false);
  auto y = beta_forward<float>(nullptr, b3b, beta_forward<float>(nullptr, b3a, x));
  CHECK(y.shape() == std::vector<int>{30, 5, 5});

  // k=1 locality: zeroing any non-target hypercolumn leaves the target
  // output bit-identical.
  BetaParams b1{rand_tensor<float>({6, 6, 1, 1}, rng), rand_tensor<float>({6}, rng)};
  auto x1 = rand_tensor<float>({6, 3, 3}, rng, -1.0, 1.0, false);
  auto y1 = beta_forward<float>(nullptr, b1, x1);
  auto x2 = x1.clone();
  for (int ch = 0; ch < 6; ++ch)
    for (int p = 0; p < 9; ++p)
      if (p != 4) x2.data()[static_cast<std::size_t>(ch) * 9 + p] = 0.0f;
  auto y2 = beta_forward<float>(nullptr, b1, x2);
  for (int ch = 0; ch < 6; ++ch)
    CHECK(y2.data()[static_cast<std::size_t>(ch) * 9 + 4] ==
          y1.data()[static_cast<std::size_t>(ch) * 9 + 4]);

  // k=1 with an identity channel map reduces to the activation.
  BetaParams ident{Tensor::zeros({6, 6, 1, 1}), Tensor::zeros({6})};
  for (int ch = 0; ch < 6; ++ch) ident.conv_w.data()[static_cast<std::size_t>(ch) * 6 + ch] = 1.0f;
  auto yi = beta_forward<float>(nullptr, ident, x1);
  auto want = relu<float>(nullptr, x1);
  CHECK(bits_equal(yi, want));
}

TEST_CASE("sa_forward: uniform attention under zero Q/K (gamma=false)") {
  Rng rng(5);
  const int c = 4, h = 3, w = 3;
  auto p = make_sa_params(c, false, rng);
  p.wq = Tensor::zeros({5, c});
  p.bq = Tensor::zeros({5});
  p.wk = Tensor::zeros({5, c});
  p.bk = Tensor::zeros({5});
  SelfAttentionConfig cfg{false, false, false};  // no norm: inspect the raw mix
  auto x = rand_tensor<float>({c, h, w}, rng, -1.0, 1.0, false);
  Tensor attn;
  auto y = sa_forward<float>(nullptr, p, cfg, x, &attn);
  // Attention must be uniform 1/9 and the output the per-channel spatial mean.
  for (float v : attn.data()) CHECK(v == doctest::Approx(1.0 / 9.0).epsilon(1e-6));
  for (int ch = 0; ch < c; ++ch) {
    double mean = 0;
    for (int t = 0; t < h * w; ++t) mean += x.data()[static_cast<std::size_t>(ch) * h * w + t];
    mean /= (h * w);
    for (int t = 0; t < h * w; ++t)
      CHECK(y.data()[static_cast<std::size_t>(ch) * h * w + t] ==
            doctest::Approx(mean).epsilon(1e-5));
  }
}

TEST_CASE("sa_forward: gamma=false shares one spatial operator across channels") {
  Rng rng(6);
  const int c = 7, h = 3, w = 3, tokens = h * w;
  auto p = make_sa_params(c, false, rng);
  SelfAttentionConfig cfg{false, false, false};
  auto x = rand_tensor<float>({c, h, w}, rng, -1.0, 1.0, false);
  Tensor attn;
  auto y = sa_forward<float>(nullptr, p, cfg, x, &attn);
  // Reconstruct each output channel as attn * (input channel).
  for (int ch = 0; ch < c; ++ch) {
    for (int t = 0; t < tokens; ++t) {
      double acc = 0;
      for (int u = 0; u < tokens; ++u)
        acc += attn.data()[static_cast<std::size_t>(t) * tokens + u] *
               x.data()[static_cast<std::size_t>(ch) * tokens + u];
      CHECK(std::abs(acc - y.data()[static_cast<std::size_t>(ch) * tokens + t]) < 1e-5);
    }
  }
  // Rows sum to one.
  for (int t = 0; t < tokens; ++t) {
    double s = 0;
    for (int u = 0; u < tokens; ++u) s += attn.data()[static_cast<std::size_t>(t) * tokens + u];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("sa_forward: single token grid returns the normalized input") {
  Rng rng(7);
  const int c = 5;
  auto p = make_sa_params(c, false, rng);
  auto x = rand_tensor<float>({c, 1, 1}, rng, -1.0, 1.0, false);
  Tensor attn;
  SelfAttentionConfig cfg{false, true, false};
  auto y = sa_forward<float>(nullptr, p, cfg, x, &attn);
  CHECK(attn.size() == 1);
  CHECK(attn.data()[0] == doctest::Approx(1.0));
  auto want = channel_norm<float>(nullptr, x, p.norm_gain, p.norm_bias);
  for (std::size_t i = 0; i < y.size(); ++i)
    CHECK(y.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-6));
}

TEST_CASE("sa_forward: gamma=true path and residual flag") {
  Rng rng(8);
  const int c = 6, h = 3, w = 3;
  auto p = make_sa_params(c, true, rng);
  auto x = rand_tensor<float>({c, h, w}, rng, -1.0, 1.0, false);
  SelfAttentionConfig plain{true, true, false};
  SelfAttentionConfig with_res{true, true, true};
  auto y0 = sa_forward<float>(nullptr, p, plain, x);
  auto y1 = sa_forward<float>(nullptr, p, with_res, x);
  CHECK(y0.shape() == x.shape());
  CHECK_FALSE(bits_equal(y0, y1));  // residual changes the function
}

TEST_CASE("readout_forward: CTL reads only the center hypercolumn") {
  Rng rng(9);
  const int c = 30;
  ReadoutParams r{rand_tensor<float>({1, c}, rng), rand_tensor<float>({1}, rng)};
  auto x = rand_tensor<float>({c, 9, 9}, rng, -1.0, 1.0, false);
  auto y = readout_forward<float>(nullptr, r, ReadoutKind::kCTL, x);
  double want = r.b.data()[0];
  for (int ch = 0; ch < c; ++ch)
    want += r.w.data()[static_cast<std::size_t>(ch)] *
            x.data()[static_cast<std::size_t>(ch) * 81 + (4 * 9 + 4)];
  CHECK(y.item() == doctest::Approx(want).epsilon(1e-6));

  // Modifying non-center hypercolumns does not change the output at all.
  auto x2 = x.clone();
  for (int ch = 0; ch < c; ++ch)
    for (int p = 0; p < 81; ++p)
      if (p != 40) x2.data()[static_cast<std::size_t>(ch) * 81 + p] += 17.0f;
  auto y2 = readout_forward<float>(nullptr, r, ReadoutKind::kCTL, x2);
  CHECK(y2.item() == y.item());

  // Gradient w.r.t. non-center hypercolumns is exactly zero.
  auto xg = x.clone();
  xg.set_requires_grad(true);
  Tape tape;
  auto yg = readout_forward(&tape, r, ReadoutKind::kCTL, xg);
  tape.backward(yg);
  auto g = xg.grad_view();
  for (int ch = 0; ch < c; ++ch)
    for (int p = 0; p < 81; ++p)
      if (p != 40) CHECK(g[static_cast<std::size_t>(ch) * 81 + p] == 0.0f);

  // Even spatial dims have no center.
  auto xe = rand_tensor<float>({c, 8, 8}, rng, -1.0, 1.0, false);
  CHECK_THROWS_AS(readout_forward<float>(nullptr, r, ReadoutKind::kCTL, xe), ShapeError);
}

TEST_CASE("readout_forward: FCL basics") {
  Rng rng(10);
  auto x = rand_tensor<float>({30, 5, 5}, rng, -1.0, 1.0, false);
  ReadoutParams zero{Tensor::zeros({1, 750}), Tensor::from({1}, {2.5f})};
  auto y = readout_forward<float>(nullptr, zero, ReadoutKind::kFCL, x);
  CHECK(y.item() == 2.5f);
  CHECK(zero.w.size() == 750);
}

TEST_CASE("grad_check: block forwards at double precision") {
  Rng rng(123);

  SUBCASE("alpha block") {
    auto w = rand_tensor<double>({3, 2, 5, 5}, rng, -0.3, 0.3);
    auto b = rand_tensor<double>({3}, rng, -0.1, 0.1);
    auto x = rand_tensor<double>({2, 9, 9}, rng);
    auto res = grad_check(
        [&](DTape& t, std::vector<DTensor>& in) {
          AlphaParamsT<double> a{in[1], in[2]};
          auto y = alpha_forward(&t, a, in[0]);
          return sum_all(&t, y);
        },
        {x, w, b});
    CHECK(res.max_rel_err < 1e-4);
    CHECK(res.coords_checked > 0);
  }

  SUBCASE("sa block gamma=true with norm") {
    const int c = 4;
    auto x = rand_tensor<double>({c, 3, 3}, rng);
    auto wq = rand_tensor<double>({5, c}, rng, -0.4, 0.4);
    auto bq = rand_tensor<double>({5}, rng, -0.1, 0.1);
    auto wk = rand_tensor<double>({5, c}, rng, -0.4, 0.4);
    auto bk = rand_tensor<double>({5}, rng, -0.1, 0.1);
    auto wv = rand_tensor<double>({5, c}, rng, -0.4, 0.4);
    auto bv = rand_tensor<double>({5}, rng, -0.1, 0.1);
    auto wo = rand_tensor<double>({c, 5}, rng, -0.4, 0.4);
    auto bo = rand_tensor<double>({c}, rng, -0.1, 0.1);
    auto gain = rand_tensor<double>({c}, rng, 0.5, 1.5);
    auto bias = rand_tensor<double>({c}, rng, -0.2, 0.2);
    auto res = grad_check(
        [&](DTape& t, std::vector<DTensor>& in) {
          SelfAttentionParamsT<double> p;
          p.wq = in[1];
          p.bq = in[2];
          p.wk = in[3];
          p.bk = in[4];
          p.wv = in[5];
          p.bv = in[6];
          p.wo = in[7];
          p.bo = in[8];
          p.norm_gain = in[9];
          p.norm_bias = in[10];
          SelfAttentionConfig cfg{true, true, false};
          auto y = sa_forward(&t, p, cfg, in[0]);
          Rng r2(42);
          const int n = static_cast<int>(y.size());
          auto target = rand_tensor<double>({n}, r2, -1.0, 1.0, false);
          return mse_loss(&t, reshape(&t, y, {n}), target);
        },
        {x, wq, bq, wk, bk, wv, bv, wo, bo, gain, bias});
    CHECK(res.max_rel_err < 1e-4);
  }

  SUBCASE("ctl readout") {
    auto x = rand_tensor<double>({6, 3, 3}, rng);
    auto w = rand_tensor<double>({1, 6}, rng);
    auto b = rand_tensor<double>({1}, rng);
    auto res = grad_check(
        [&](DTape& t, std::vector<DTensor>& in) {
          ReadoutParamsT<double> r{in[1], in[2]};
          return readout_forward(&t, r, ReadoutKind::kCTL, in[0]);
        },
        {x, w, b});
    CHECK(res.max_rel_err < 1e-6);
  }
}
