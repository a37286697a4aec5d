#include <catch2/catch_amalgamated.hpp>

#include "msa2net/ops.hpp"
#include "oracles.hpp"

using namespace msa2net;

namespace {

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) -
                             static_cast<double>(b.data()[i])));
  return m;
}

}  // namespace

TEST_CASE("channel_pool_concat: mean and max per pixel") {
  Tensor<float> g({1, 2, 1, 1});
  g.at(0, 0, 0, 0) = 1.0f;
  g.at(0, 1, 0, 0) = 3.0f;
  Tensor<float> out = channel_pool_concat(g);
  REQUIRE(out.shape() == Shape{1, 2, 1, 1});
  REQUIRE(out.at(0, 0, 0, 0) == 2.0f);
  REQUIRE(out.at(0, 1, 0, 0) == 3.0f);

  Tensor<float> c = Tensor<float>::full({2, 5, 3, 3}, 0.75f);
  Tensor<float> oc = channel_pool_concat(c);
  for (const float v : oc.vec()) REQUIRE(v == 0.75f);

  Rng rng(11);
  Tensor<float> r = Tensor<float>::uniform({2, 7, 4, 4}, rng);
  REQUIRE(max_abs_diff(channel_pool_concat(r),
                       oracle::channel_pool_concat_reference(r)) == 0.0);
}

TEST_CASE("softmax_channels: symmetry, closed form and large-logit stability") {
  Tensor<float> eq = Tensor<float>::full({1, 2, 3, 3}, 4.0f);
  Tensor<float> sm_eq = softmax_channels(eq);
  for (const float v : sm_eq.vec())
    REQUIRE(v == Catch::Approx(0.5).margin(1e-7));

  Tensor<float> lg({1, 2, 1, 1});
  lg.at(0, 0, 0, 0) = 0.0f;
  lg.at(0, 1, 0, 0) = std::log(3.0f);
  Tensor<float> sm = softmax_channels(lg);
  REQUIRE(sm.at(0, 0, 0, 0) == Catch::Approx(0.25).margin(1e-6));
  REQUIRE(sm.at(0, 1, 0, 0) == Catch::Approx(0.75).margin(1e-6));

  Tensor<float> big({1, 2, 1, 1});
  big.at(0, 0, 0, 0) = 1000.0f;
  big.at(0, 1, 0, 0) = 1001.0f;
  Tensor<float> sb = softmax_channels(big);
  REQUIRE(std::isfinite(sb.at(0, 0, 0, 0)));
  REQUIRE(sb.at(0, 0, 0, 0) == Catch::Approx(0.2689414).margin(1e-4));
  REQUIRE(sb.at(0, 1, 0, 0) == Catch::Approx(0.7310586).margin(1e-4));
}

TEST_CASE("softmax output is a per-pixel simplex point") {
  Rng rng(12);
  Tensor<float> x = Tensor<float>::uniform({2, 5, 6, 6}, rng, -30, 30);
  Tensor<float> y = softmax_channels(x);
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 6; ++j) {
        double sum = 0;
        for (int c = 0; c < 5; ++c) {
          REQUIRE(y.at(n, c, i, j) >= 0.0f);
          sum += y.at(n, c, i, j);
        }
        REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));
      }
}

TEST_CASE("sigmoid: midpoint, symmetry and extreme negative input") {
  Tensor<float> z = Tensor<float>::zeros({1, 1, 2, 2});
  Tensor<float> sz = sigmoid(z);
  for (const float v : sz.vec()) REQUIRE(v == 0.5f);

  Rng rng(13);
  Tensor<float> x = Tensor<float>::uniform({1, 3, 4, 4}, rng, -8, 8);
  Tensor<float> a = sigmoid(x);
  Tensor<float> b = sigmoid(scale(x, -1.0f));
  for (std::size_t i = 0; i < a.size(); ++i)
    REQUIRE(a.data()[i] + b.data()[i] == Catch::Approx(1.0).margin(1e-6));

  // stable branch: double mode keeps sigma(-745) positive and finite
  Tensor<double> ext = Tensor<double>::full({1, 1, 1, 1}, -745.0);
  Tensor<double> se = sigmoid(ext);
  REQUIRE(se.data()[0] > 0.0);
  REQUIRE(std::isfinite(se.data()[0]));
}

TEST_CASE("upsample_bilinear: identity, constants and the ramp oracle") {
  Rng rng(14);
  Tensor<float> x = Tensor<float>::uniform({1, 2, 3, 3}, rng);
  REQUIRE(max_abs_diff(upsample_bilinear(x, 1), x) == 0.0);

  Tensor<float> c = Tensor<float>::full({1, 1, 2, 2}, 0.3f);
  Tensor<float> uc = upsample_bilinear(c, 3);
  for (const float v : uc.vec())
    REQUIRE(v == Catch::Approx(0.3).margin(1e-6));

  Tensor<float> ramp({1, 1, 2, 2}, {0.0f, 1.0f, 2.0f, 3.0f});
  REQUIRE(max_abs_diff(upsample_bilinear(ramp, 2),
                       oracle::upsample_bilinear_reference(ramp, 2)) == 0.0);
  Tensor<float> r = Tensor<float>::uniform({2, 3, 4, 5}, rng);
  REQUIRE(max_abs_diff(upsample_bilinear(r, 3),
                       oracle::upsample_bilinear_reference(r, 3)) <= 1e-6);
  REQUIRE_THROWS_AS(upsample_bilinear(x, 0), ConfigError);
}

TEST_CASE("broadcast binary ops follow equal-or-1 semantics") {
  Tensor<float> x({1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor<float> w({1, 1, 2, 2}, {10, 20, 30, 40});
  Tensor<float> y = mul(x, w);
  REQUIRE(y.at(0, 0, 0, 0) == 10.0f);
  REQUIRE(y.at(0, 1, 1, 1) == 320.0f);

  Tensor<float> bias({1, 2, 1, 1}, {100, 200});
  Tensor<float> z = add(x, bias);
  REQUIRE(z.at(0, 0, 1, 1) == 104.0f);
  REQUIRE(z.at(0, 1, 0, 0) == 205.0f);

  Tensor<float> bad({1, 3, 2, 2});
  REQUIRE_THROWS_AS(add(x, bad), ShapeError);

  Tensor<float> q = div(x, w);
  REQUIRE(q.at(0, 1, 0, 1) == Catch::Approx(6.0 / 20.0));
}

TEST_CASE("reduce_sum keeps dims and sums the right axes") {
  Tensor<float> x({2, 2, 1, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor<float> s = reduce_sum(x, true, false, false, false);
  REQUIRE(s.shape() == Shape{1, 2, 1, 2});
  REQUIRE(s.at(0, 0, 0, 0) == 6.0f);
  REQUIRE(s.at(0, 1, 0, 1) == 12.0f);
  Tensor<float> all = sum_all(x);
  REQUIRE(all.shape() == Shape{1, 1, 1, 1});
  REQUIRE(all.data()[0] == 36.0f);
  REQUIRE(mean_all(x).data()[0] == Catch::Approx(4.5));
}

TEST_CASE("matmul agrees with a naive triple loop for all transpose flags") {
  Rng rng(15);
  const int p = 3, q = 4, r = 5;
  for (const bool ta : {false, true})
    for (const bool tb : {false, true}) {
      Tensor<float> a =
          Tensor<float>::uniform({2, 1, ta ? q : p, ta ? p : q}, rng);
      Tensor<float> b =
          Tensor<float>::uniform({1, 1, tb ? r : q, tb ? q : r}, rng);
      Tensor<float> got = matmul(a, b, ta, tb);
      REQUIRE(got.shape() == Shape{2, 1, p, r});
      for (int n = 0; n < 2; ++n)
        for (int i = 0; i < p; ++i)
          for (int j = 0; j < r; ++j) {
            double acc = 0;
            for (int kk = 0; kk < q; ++kk) {
              const double av = ta ? a.at(n, 0, kk, i) : a.at(n, 0, i, kk);
              const double bv = tb ? b.at(0, 0, j, kk) : b.at(0, 0, kk, j);
              acc += av * bv;
            }
            REQUIRE(got.at(n, 0, i, j) == Catch::Approx(acc).margin(1e-5));
          }
    }
}

TEST_CASE("token view round-trips and transposes correctly") {
  Rng rng(16);
  Tensor<float> x = Tensor<float>::uniform({2, 3, 2, 4}, rng);
  Tensor<float> t = to_tokens(x);
  REQUIRE(t.shape() == Shape{2, 1, 8, 3});
  REQUIRE(t.at(1, 0, 5, 2) == x.at(1, 2, 1, 1));
  Tensor<float> back = from_tokens(t, 2, 4);
  REQUIRE(max_abs_diff(back, x) == 0.0);
}

TEST_CASE("layer_norm_channels matches the scalar formula") {
  Rng rng(17);
  const int C = 5;
  Tensor<double> x = Tensor<double>::uniform({2, C, 3, 3}, rng);
  Tensor<double> gamma = Tensor<double>::uniform({1, C, 1, 1}, rng, 0.5, 1.5);
  Tensor<double> beta = Tensor<double>::uniform({1, C, 1, 1}, rng);
  const double eps = 1e-5;
  Tensor<double> y = layer_norm_channels(x, gamma, beta, eps);
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double mean = 0, var = 0;
        for (int c = 0; c < C; ++c) mean += x.at(n, c, i, j);
        mean /= C;
        for (int c = 0; c < C; ++c) {
          const double d = x.at(n, c, i, j) - mean;
          var += d * d;
        }
        var /= C;
        for (int c = 0; c < C; ++c) {
          const double want = gamma.at(0, c, 0, 0) *
                                  (x.at(n, c, i, j) - mean) /
                                  std::sqrt(var + eps) +
                              beta.at(0, c, 0, 0);
          REQUIRE(y.at(n, c, i, j) == Catch::Approx(want).margin(1e-5));
        }
      }

  // constant across C -> output equals shift
  Tensor<double> cx = Tensor<double>::full({1, C, 2, 2}, 3.25);
  Tensor<double> ones = Tensor<double>::full({1, C, 1, 1}, 1.0);
  Tensor<double> shift = Tensor<double>::uniform({1, C, 1, 1}, rng);
  Tensor<double> cy = layer_norm_channels(cx, ones, shift, eps);
  for (int c = 0; c < C; ++c)
    REQUIRE(cy.at(0, c, 1, 1) == Catch::Approx(shift.at(0, c, 0, 0)).margin(1e-6));
}

TEST_CASE("cross entropy closed form for uniform logits") {
  Tensor<float> logits = Tensor<float>::zeros({1, 2, 4, 4});
  LabelMap labels(1, 4, 4);
  Tensor<float> loss = cross_entropy_channels(logits, labels);
  REQUIRE(loss.data()[0] == Catch::Approx(std::log(2.0)).margin(1e-6));

  LabelMap bad(1, 4, 4);
  bad.at(0, 0, 0) = 2;
  REQUIRE_THROWS_AS(cross_entropy_channels(logits, bad), DataError);
}

TEST_CASE("onehot and argmax_channels invert each other") {
  LabelMap labels(1, 2, 2);
  labels.at(0, 0, 0) = 1;
  labels.at(0, 1, 1) = 2;
  Tensor<float> oh = onehot<float>(labels, 3);
  REQUIRE(oh.at(0, 1, 0, 0) == 1.0f);
  REQUIRE(oh.at(0, 0, 0, 1) == 1.0f);
  LabelMap back = argmax_channels(oh);
  REQUIRE(back.v == labels.v);
}

TEST_CASE("slice_channels extracts a contiguous channel range") {
  Rng rng(18);
  Tensor<float> x = Tensor<float>::uniform({2, 4, 3, 3}, rng);
  Tensor<float> s = slice_channels(x, 1, 3);
  REQUIRE(s.shape() == Shape{2, 2, 3, 3});
  REQUIRE(s.at(1, 0, 2, 2) == x.at(1, 1, 2, 2));
  REQUIRE(s.at(0, 1, 0, 0) == x.at(0, 2, 0, 0));
  REQUIRE_THROWS_AS(slice_channels(x, 3, 3), ShapeError);
}

TEST_CASE("finite inputs stay finite through every op") {
  Rng rng(19);
  Tensor<float> x = Tensor<float>::uniform({2, 4, 6, 6}, rng, -50, 50);
  REQUIRE(sigmoid(x).all_finite());
  REQUIRE(gelu(x).all_finite());
  REQUIRE(softmax_channels(x).all_finite());
  REQUIRE(channel_pool_concat(x).all_finite());
  REQUIRE(upsample_bilinear(x, 2).all_finite());
  REQUIRE(mul(x, x).all_finite());
}
