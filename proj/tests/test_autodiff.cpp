#include <catch2/catch_amalgamated.hpp>

#include "msa2net/conv.hpp"
#include "msa2net/ops.hpp"
#include "oracles.hpp"

using namespace msa2net;

TEST_CASE("backward of sum gives all-ones gradient") {
  Rng rng(21);
  Tensor<float> x = Tensor<float>::uniform({2, 3, 4, 4}, rng);
  Tape<float> tape;
  tape.watch(x);
  Tensor<float> loss = sum_all(x);
  tape.backward(loss);
  for (const float g : x.grad()) REQUIRE(g == 1.0f);
}

TEST_CASE("backward of sum(sigmoid) at zero is a quarter everywhere") {
  Tensor<float> x = Tensor<float>::zeros({1, 2, 3, 3});
  Tape<float> tape;
  tape.watch(x);
  Tensor<float> loss = sum_all(sigmoid(x));
  tape.backward(loss);
  for (const float g : x.grad()) REQUIRE(g == Catch::Approx(0.25).margin(1e-7));
}

TEST_CASE("gradients accumulate additively across fan-out") {
  Tensor<float> x = Tensor<float>::full({1, 1, 2, 2}, 3.0f);
  Tape<float> tape;
  tape.watch(x);
  Tensor<float> loss = sum_all(add(x, x));
  tape.backward(loss);
  for (const float g : x.grad()) REQUIRE(g == 2.0f);
}

TEST_CASE("tape misuse raises usage errors") {
  Tensor<float> off_tape = Tensor<float>::zeros({1, 1, 1, 1});
  Tape<float> tape;
  REQUIRE_THROWS_AS(tape.backward(off_tape), UsageError);

  Tensor<float> x = Tensor<float>::zeros({1, 1, 2, 2});
  tape.watch(x);
  Tensor<float> nonscalar = sigmoid(x);
  REQUIRE_THROWS_AS(tape.backward(nonscalar), UsageError);

  Tensor<float> loss = sum_all(nonscalar);
  tape.backward(loss);
  REQUIRE_THROWS_AS(tape.backward(loss), UsageError);

  Tape<float> other;
  Tensor<float> y = Tensor<float>::zeros({1, 1, 2, 2});
  other.watch(y);
  REQUIRE_THROWS_AS(add(x, y), UsageError);
}

TEST_CASE("composite conv-softmax-sigmoid gradient matches finite differences") {
  Rng rng(22);
  Tensor<double> x = oracle::random_tensor<double>({1, 3, 5, 5}, rng);
  auto w = make_conv_weights<double>(3, 4, 3, 1, 1);
  for (auto& v : w.kernel.vec()) v = rng.uniform(-0.5, 0.5);
  for (auto& v : w.bias.vec()) v = rng.uniform(-0.2, 0.2);

  auto rep = oracle::check_gradients(
      {&x, &w.kernel, &w.bias},
      [&]() { return sum_all(sigmoid(softmax_channels(conv2d(x, w)))); });
  REQUIRE(rep.max_err <= 1e-3);
}

TEST_CASE("every primitive passes a finite-difference check") {
  Rng rng(23);

  SECTION("binary and unary elementwise") {
    Tensor<double> x = oracle::random_tensor<double>({1, 2, 3, 3}, rng, 0.5, 2.0);
    Tensor<double> y = oracle::random_tensor<double>({1, 2, 1, 1}, rng, 0.5, 2.0);
    for (const auto& [name, fn] :
         std::vector<std::pair<std::string,
                               std::function<Tensor<double>()>>>{
             {"add", [&] { return sum_all(mul(add(x, y), add(x, y))); }},
             {"sub", [&] { return sum_all(mul(sub(x, y), sub(x, y))); }},
             {"mul", [&] { return sum_all(mul(mul(x, y), x)); }},
             {"div", [&] { return sum_all(div(x, y)); }},
             {"scale", [&] { return sum_all(scale(add_scalar(x, 0.3), 1.7)); }},
             {"sigmoid", [&] { return sum_all(sigmoid(x)); }},
             {"gelu", [&] { return sum_all(gelu(x)); }}}) {
      CAPTURE(name);
      auto rep = oracle::check_gradients({&x, &y}, fn);
      REQUIRE(rep.max_err <= 1e-3);
    }
  }

  SECTION("softmax over every axis") {
    Tensor<double> x = oracle::random_tensor<double>({2, 3, 4, 5}, rng);
    for (int axis = 1; axis <= 3; ++axis) {
      CAPTURE(axis);
      auto rep = oracle::check_gradients({&x}, [&]() {
        return sum_all(mul(softmax_axis(x, axis), x));
      });
      REQUIRE(rep.max_err <= 1e-3);
    }
  }

  SECTION("channel pooling concat") {
    Tensor<double> x = oracle::random_tensor<double>({2, 4, 3, 3}, rng);
    auto rep = oracle::check_gradients({&x}, [&]() {
      return sum_all(mul(channel_pool_concat(x), channel_pool_concat(x)));
    });
    REQUIRE(rep.max_err <= 1e-3);
  }

  SECTION("bilinear upsampling") {
    Tensor<double> x = oracle::random_tensor<double>({1, 2, 3, 3}, rng);
    auto rep = oracle::check_gradients({&x}, [&]() {
      Tensor<double> u = upsample_bilinear(x, 2);
      return sum_all(mul(u, u));
    });
    REQUIRE(rep.max_err <= 1e-3);
  }

  SECTION("reductions") {
    Tensor<double> x = oracle::random_tensor<double>({2, 3, 2, 2}, rng);
    auto rep = oracle::check_gradients({&x}, [&]() {
      Tensor<double> s = reduce_sum(x, false, true, true, false);
      return sum_all(mul(s, s));
    });
    REQUIRE(rep.max_err <= 1e-3);
  }

  SECTION("matmul with all transpose flags") {
    for (const bool ta : {false, true})
      for (const bool tb : {false, true}) {
        Tensor<double> a =
            oracle::random_tensor<double>({2, 1, ta ? 4 : 3, ta ? 3 : 4}, rng);
        Tensor<double> b =
            oracle::random_tensor<double>({1, 1, tb ? 5 : 4, tb ? 4 : 5}, rng);
        CAPTURE(ta, tb);
        auto rep = oracle::check_gradients({&a, &b}, [&]() {
          Tensor<double> m = matmul(a, b, ta, tb);
          return sum_all(mul(m, m));
        });
        REQUIRE(rep.max_err <= 1e-3);
      }
  }

  SECTION("token views and channel slice") {
    Tensor<double> x = oracle::random_tensor<double>({2, 3, 2, 3}, rng);
    auto rep = oracle::check_gradients({&x}, [&]() {
      Tensor<double> t = to_tokens(x);
      Tensor<double> back = from_tokens(t, 2, 3);
      return sum_all(mul(slice_channels(back, 1, 3), slice_channels(back, 0, 2)));
    });
    REQUIRE(rep.max_err <= 1e-3);
  }

  SECTION("layer norm over channels and tokens") {
    Tensor<double> x = oracle::random_tensor<double>({2, 4, 3, 3}, rng);
    Tensor<double> gm = oracle::random_tensor<double>({1, 4, 1, 1}, rng, 0.5, 1.5);
    Tensor<double> bt = oracle::random_tensor<double>({1, 4, 1, 1}, rng);
    auto rep = oracle::check_gradients({&x, &gm, &bt}, [&]() {
      Tensor<double> y = layer_norm_channels(x, gm, bt);
      return sum_all(mul(y, y));
    });
    REQUIRE(rep.max_err <= 1e-3);

    Tensor<double> tok = oracle::random_tensor<double>({2, 1, 5, 4}, rng);
    Tensor<double> gm2 = oracle::random_tensor<double>({1, 1, 1, 4}, rng, 0.5, 1.5);
    Tensor<double> bt2 = oracle::random_tensor<double>({1, 1, 1, 4}, rng);
    auto rep2 = oracle::check_gradients({&tok, &gm2, &bt2}, [&]() {
      Tensor<double> y = layer_norm_tokens(tok, gm2, bt2);
      return sum_all(mul(y, y));
    });
    REQUIRE(rep2.max_err <= 1e-3);
  }

  SECTION("cross entropy") {
    Tensor<double> logits = oracle::random_tensor<double>({2, 3, 4, 4}, rng);
    LabelMap labels(2, 4, 4);
    for (auto& v : labels.v)
      v = static_cast<std::int32_t>(rng.uniform_int(0, 2));
    auto rep = oracle::check_gradients({&logits}, [&]() {
      return cross_entropy_channels(logits, labels);
    });
    REQUIRE(rep.max_err <= 1e-3);
  }

  SECTION("conv2d with stride, dilation and groups") {
    Tensor<double> x = oracle::random_tensor<double>({2, 4, 7, 7}, rng);
    auto w = make_conv_weights<double>(4, 6, 3, 2, 2, 2, 2);
    for (auto& v : w.kernel.vec()) v = rng.uniform(-0.5, 0.5);
    for (auto& v : w.bias.vec()) v = rng.uniform(-0.2, 0.2);
    auto rep = oracle::check_gradients({&x, &w.kernel, &w.bias}, [&]() {
      Tensor<double> y = conv2d(x, w);
      return sum_all(mul(y, y));
    });
    REQUIRE(rep.max_err <= 1e-3);

    auto dw = make_conv_weights<double>(4, 4, 5, 1, same_padding(5, 3), 3, 4);
    for (auto& v : dw.kernel.vec()) v = rng.uniform(-0.5, 0.5);
    for (auto& v : dw.bias.vec()) v = rng.uniform(-0.2, 0.2);
    Tensor<double> xd = oracle::random_tensor<double>({1, 4, 13, 13}, rng);
    auto rep2 = oracle::check_gradients(
        {&xd, &dw.kernel, &dw.bias},
        [&]() { return sum_all(mul(conv2d(xd, dw), conv2d(xd, dw))); },
        1e-4, 60, &rng);
    REQUIRE(rep2.max_err <= 1e-3);
  }
}
