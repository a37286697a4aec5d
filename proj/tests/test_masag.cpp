#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "msa2net/masag.hpp"
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

template <typename T>
MasagParams<T> random_params(int channels, Rng& rng) {
  MasagConfig cfg;
  cfg.channels = channels;
  cfg.init = InitScheme::kKaiming;
  MasagParams<T> p = MasagParams<T>::init(cfg, rng);
  for (auto& [name, t] : p.named_tensors())
    for (auto& v : t->vec()) v = static_cast<T>(rng.uniform(-0.5, 0.5));
  return p;
}

}  // namespace

TEST_CASE("fuse of zero inputs with zero biases is zero") {
  Rng rng(41);
  MasagConfig cfg;
  cfg.channels = 4;
  MasagParams<float> p = MasagParams<float>::init(cfg, rng);
  Tensor<float> zero = Tensor<float>::zeros({1, 4, 8, 8});
  Tensor<float> u = masag::fuse(zero, zero, p);
  for (const float v : u.vec()) REQUIRE(v == 0.0f);
}

TEST_CASE("fuse global branch reduces to global_proj of (c, c) for constant G") {
  Rng rng(42);
  MasagParams<float> p = random_params<float>(4, rng);
  Tensor<float> x = Tensor<float>::zeros({1, 4, 8, 8});
  // kill the local branch so only the global one remains
  for (auto& v : p.local_proj.kernel.vec()) v = 0.0f;
  for (auto& v : p.local_proj.bias.vec()) v = 0.0f;
  const float cval = 0.8f;
  Tensor<float> g = Tensor<float>::full({1, 4, 8, 8}, cval);
  Tensor<float> u = masag::fuse(x, g, p);
  // per output channel: b_o + (w[o][avg] + w[o][max]) * c
  for (int o = 0; o < 4; ++o) {
    const float want = p.global_proj.bias.at(0, o, 0, 0) +
                       (p.global_proj.kernel.at(o, 0, 0, 0) +
                        p.global_proj.kernel.at(o, 1, 0, 0)) *
                           cval;
    REQUIRE(u.at(0, o, 3, 5) == Catch::Approx(want).margin(1e-6));
  }
}

TEST_CASE("fuse equals the hand-chained primitive calls bitwise") {
  Rng rng(43);
  MasagParams<float> p = random_params<float>(4, rng);
  Tensor<float> x = Tensor<float>::uniform({1, 4, 8, 8}, rng);
  Tensor<float> g = Tensor<float>::uniform({1, 4, 8, 8}, rng);
  Tensor<float> got = masag::fuse(x, g, p);
  Tensor<float> want =
      add(conv2d(conv2d(conv2d(x, p.local_dw), p.local_dwd), p.local_proj),
          conv2d(channel_pool_concat(g), p.global_proj));
  REQUIRE(got.vec() == want.vec());

  Tensor<float> bad = Tensor<float>::zeros({1, 4, 4, 4});
  REQUIRE_THROWS_AS(masag::fuse(x, bad, p), ShapeError);
}

TEST_CASE("zero-initialized selection forces SW=(0.5,0.5) and X'=1.5X exactly") {
  Rng rng(44);
  MasagConfig cfg;
  cfg.channels = 4;  // default init scheme zero-select
  MasagParams<float> p = MasagParams<float>::init(cfg, rng);
  Tensor<float> x = Tensor<float>::uniform({2, 4, 6, 6}, rng);
  Tensor<float> g = Tensor<float>::uniform({2, 4, 6, 6}, rng);
  Tensor<float> u = masag::fuse(x, g, p);
  SpatialSelection<float> sel = masag::spatial_select(u, x, g, p);
  for (const float v : sel.weights.sw.vec()) REQUIRE(v == 0.5f);
  Tensor<float> x15 = scale(x, 1.5f);
  Tensor<float> g15 = scale(g, 1.5f);
  REQUIRE(sel.x_sel.vec() == x15.vec());
  REQUIRE(sel.g_sel.vec() == g15.vec());
}

TEST_CASE("saturated selection logits drive X' to 2X and G' to G") {
  Rng rng(45);
  MasagParams<float> p = random_params<float>(3, rng);
  for (auto& v : p.select_proj.kernel.vec()) v = 0.0f;
  p.select_proj.bias.at(0, 0, 0, 0) = 40.0f;
  p.select_proj.bias.at(0, 1, 0, 0) = -40.0f;
  Tensor<float> x = Tensor<float>::uniform({1, 3, 5, 5}, rng);
  Tensor<float> g = Tensor<float>::uniform({1, 3, 5, 5}, rng);
  Tensor<float> u = Tensor<float>::zeros({1, 3, 5, 5});
  SpatialSelection<float> sel = masag::spatial_select(u, x, g, p);
  REQUIRE(max_abs_diff(sel.x_sel, scale(x, 2.0f)) <= 1e-6);
  REQUIRE(max_abs_diff(sel.g_sel, g) <= 1e-6);
}

TEST_CASE("spatial_select matches the per-element scalar formula") {
  Rng rng(46);
  MasagParams<double> p = random_params<double>(4, rng);
  Tensor<double> x = Tensor<double>::uniform({2, 4, 5, 5}, rng);
  Tensor<double> g = Tensor<double>::uniform({2, 4, 5, 5}, rng);
  Tensor<double> u = Tensor<double>::uniform({2, 4, 5, 5}, rng);
  SpatialSelection<double> sel = masag::spatial_select(u, x, g, p);
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 5; ++j) {
        double l0 = p.select_proj.bias.at(0, 0, 0, 0);
        double l1 = p.select_proj.bias.at(0, 1, 0, 0);
        for (int c = 0; c < 4; ++c) {
          l0 += p.select_proj.kernel.at(0, c, 0, 0) * u.at(n, c, i, j);
          l1 += p.select_proj.kernel.at(1, c, 0, 0) * u.at(n, c, i, j);
        }
        const double m = std::max(l0, l1);
        const double e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
        const double sw0 = e0 / (e0 + e1);
        REQUIRE(sel.weights.sw.at(n, 0, i, j) ==
                Catch::Approx(sw0).margin(1e-6));
        for (int c = 0; c < 4; ++c) {
          REQUIRE(sel.x_sel.at(n, c, i, j) ==
                  Catch::Approx(sw0 * x.at(n, c, i, j) + x.at(n, c, i, j))
                      .margin(1e-6));
          REQUIRE(sel.g_sel.at(n, c, i, j) ==
                  Catch::Approx((1 - sw0) * g.at(n, c, i, j) + g.at(n, c, i, j))
                      .margin(1e-6));
        }
      }
}

TEST_CASE("selection weights form a per-pixel simplex for arbitrary inputs") {
  Rng rng(47);
  MasagParams<float> p = random_params<float>(6, rng);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor<float> u = Tensor<float>::uniform({2, 6, 7, 7}, rng, -60, 60);
    Tensor<float> x = Tensor<float>::uniform({2, 6, 7, 7}, rng);
    Tensor<float> g = Tensor<float>::uniform({2, 6, 7, 7}, rng);
    SpatialSelection<float> sel = masag::spatial_select(u, x, g, p);
    const Tensor<float>& sw = sel.weights.sw;
    for (int n = 0; n < 2; ++n)
      for (int i = 0; i < 7; ++i)
        for (int j = 0; j < 7; ++j) {
          REQUIRE(sw.at(n, 0, i, j) >= 0.0f);
          REQUIRE(sw.at(n, 1, i, j) >= 0.0f);
          REQUIRE(sw.at(n, 0, i, j) + sw.at(n, 1, i, j) ==
                  Catch::Approx(1.0).margin(1e-6));
        }
  }
}

TEST_CASE("cross_modulate degeneracies and symmetry") {
  Rng rng(48);
  Tensor<float> x_sel = Tensor<float>::uniform({1, 3, 4, 4}, rng);
  Tensor<float> zero = Tensor<float>::zeros({1, 3, 4, 4});
  CrossModulation<float> m = masag::cross_modulate(x_sel, zero);
  Tensor<float> half = scale(x_sel, 0.5f);
  REQUIRE(m.x_mod.vec() == half.vec());
  for (const float v : m.g_mod.vec()) REQUIRE(v == 0.0f);
  for (const float v : m.fused.vec()) REQUIRE(v == 0.0f);

  CrossModulation<float> sym = masag::cross_modulate(x_sel, x_sel);
  REQUIRE(sym.x_mod.vec() == sym.g_mod.vec());
  for (std::size_t i = 0; i < sym.fused.size(); ++i) {
    const double xs = x_sel.data()[i];
    const double t = xs * sigmoid_scalar(xs);
    REQUIRE(sym.fused.data()[i] == Catch::Approx(t * t).margin(1e-6));
  }
}

TEST_CASE("cross_modulate matches the elementwise scalar formula") {
  Rng rng(49);
  Tensor<float> a = Tensor<float>::uniform({2, 4, 5, 5}, rng, -3, 3);
  Tensor<float> b = Tensor<float>::uniform({2, 4, 5, 5}, rng, -3, 3);
  CrossModulation<float> m = masag::cross_modulate(a, b);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double av = a.data()[i], bv = b.data()[i];
    const double sb = 1.0 / (1.0 + std::exp(-bv));
    const double sa = 1.0 / (1.0 + std::exp(-av));
    REQUIRE(m.x_mod.data()[i] == Catch::Approx(av * sb).margin(1e-6));
    REQUIRE(m.g_mod.data()[i] == Catch::Approx(bv * sa).margin(1e-6));
    REQUIRE(m.fused.data()[i] ==
            Catch::Approx(av * sb * bv * sa).margin(1e-6));
  }
}

TEST_CASE("recalibrate: zeroed gate gives a flat 0.5 attention map") {
  Rng rng(50);
  MasagParams<float> p = random_params<float>(4, rng);
  for (auto& v : p.recal_gate.kernel.vec()) v = 0.0f;
  for (auto& v : p.recal_gate.bias.vec()) v = 0.0f;
  Tensor<float> u_mod = Tensor<float>::uniform({1, 4, 6, 6}, rng);
  Tensor<float> x = Tensor<float>::uniform({1, 4, 6, 6}, rng);
  Recalibration<float> r = masag::recalibrate(u_mod, x, p);
  for (const float v : r.attention.vec()) REQUIRE(v == 0.5f);
  Tensor<float> want = conv2d(scale(x, 0.5f), p.recal_out);
  REQUIRE(r.out.vec() == want.vec());
}

TEST_CASE("recalibrate: zero X leaves only the output bias") {
  Rng rng(51);
  MasagParams<float> p = random_params<float>(4, rng);
  Tensor<float> u_mod = Tensor<float>::uniform({1, 4, 6, 6}, rng);
  Tensor<float> x = Tensor<float>::zeros({1, 4, 6, 6});
  Recalibration<float> r = masag::recalibrate(u_mod, x, p);
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 6; ++j)
        REQUIRE(r.out.at(0, c, i, j) == p.recal_out.bias.at(0, c, 0, 0));
}

TEST_CASE("recalibrate equals the primitive composition bitwise") {
  Rng rng(52);
  MasagParams<float> p = random_params<float>(4, rng);
  Tensor<float> u_mod = Tensor<float>::uniform({2, 4, 5, 5}, rng);
  Tensor<float> x = Tensor<float>::uniform({2, 4, 5, 5}, rng);
  Recalibration<float> r = masag::recalibrate(u_mod, x, p);
  Tensor<float> want =
      conv2d(mul(sigmoid(conv2d(u_mod, p.recal_gate)), x), p.recal_out);
  REQUIRE(r.out.vec() == want.vec());
  for (const float v : r.attention.vec()) {
    REQUIRE(v > 0.0f);
    REQUIRE(v < 1.0f);
  }
}

TEST_CASE("masag forward equals its staged composition bitwise") {
  Rng rng(53);
  MasagParams<float> p = random_params<float>(4, rng);
  Tensor<float> x = Tensor<float>::uniform({2, 4, 8, 8}, rng);
  Tensor<float> g = Tensor<float>::uniform({2, 4, 8, 8}, rng);
  Tensor<float> fused = masag::forward(x, g, p);
  Tensor<float> u = masag::fuse(x, g, p);
  SpatialSelection<float> sel = masag::spatial_select(u, x, g, p);
  CrossModulation<float> mod = masag::cross_modulate(sel.x_sel, sel.g_sel);
  Tensor<float> staged = masag::recalibrate(mod.fused, x, p).out;
  REQUIRE(fused.vec() == staged.vec());
}

TEST_CASE("masag forward preserves shape across sizes") {
  Rng rng(54);
  for (const int c : {4, 8})
    for (const int s : {8, 16}) {
      MasagParams<float> p = random_params<float>(c, rng);
      Tensor<float> x = Tensor<float>::uniform({1, c, s, s}, rng);
      Tensor<float> g = Tensor<float>::uniform({1, c, s, s}, rng);
      Tensor<float> out = masag::forward(x, g, p);
      REQUIRE(out.shape() == x.shape());
    }
}

TEST_CASE("masag forward matches the scalar gate oracle") {
  Rng rng(55);
  MasagParams<double> p = random_params<double>(4, rng);
  Tensor<double> x = Tensor<double>::uniform({2, 4, 6, 6}, rng);
  Tensor<double> g = Tensor<double>::uniform({2, 4, 6, 6}, rng);
  Tensor<double> got = masag::forward(x, g, p);
  Tensor<double> want = oracle::masag_reference(x, g, p);
  REQUIRE(max_abs_diff(got, want) <= 1e-6);
}

TEST_CASE("masag forward gradients match finite differences") {
  Rng rng(56);
  MasagParams<double> p = random_params<double>(3, rng);
  Tensor<double> x = Tensor<double>::uniform({1, 3, 5, 5}, rng);
  Tensor<double> g = Tensor<double>::uniform({1, 3, 5, 5}, rng);
  std::vector<Tensor<double>*> leaves = {&x, &g};
  for (auto& [name, t] : p.named_tensors()) leaves.push_back(t);
  auto rep = oracle::check_gradients(
      leaves, [&]() { return sum_all(masag::forward(x, g, p)); }, 1e-4, 40,
      &rng);
  REQUIRE(rep.max_err <= 1e-3);
  REQUIRE(rep.checked > 100);
}

TEST_CASE("zero-initialized select and gate make the output a fixed map of X") {
  Rng rng(57);
  MasagConfig cfg;
  cfg.channels = 4;
  MasagParams<float> p = MasagParams<float>::init(cfg, rng);
  for (auto& v : p.recal_gate.kernel.vec()) v = 0.0f;
  for (auto& v : p.recal_gate.bias.vec()) v = 0.0f;
  Tensor<float> x = Tensor<float>::uniform({1, 4, 8, 8}, rng);
  Tensor<float> g1 = Tensor<float>::uniform({1, 4, 8, 8}, rng);
  // high-frequency perturbation of G
  Tensor<float> g2 = g1.clone();
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j)
      g2.at(0, 2, i, j) += ((i + j) % 2 ? 1.0f : -1.0f) * 0.7f;
  Tensor<float> out1 = masag::forward(x, g1, p);
  Tensor<float> out2 = masag::forward(x, g2, p);
  REQUIRE(out1.vec() == out2.vec());
  Tensor<float> predicted = conv2d(scale(x, 0.5f), p.recal_out);
  REQUIRE(out1.vec() == predicted.vec());
}

TEST_CASE("masag forward is equivariant under batch permutation") {
  Rng rng(58);
  MasagParams<float> p = random_params<float>(4, rng);
  Tensor<float> x = Tensor<float>::uniform({3, 4, 6, 6}, rng);
  Tensor<float> g = Tensor<float>::uniform({3, 4, 6, 6}, rng);
  Tensor<float> out = masag::forward(x, g, p);

  const int perm[3] = {2, 0, 1};
  Tensor<float> xp({3, 4, 6, 6}), gp({3, 4, 6, 6});
  const std::size_t stride = 4 * 6 * 6;
  for (int n = 0; n < 3; ++n) {
    std::copy_n(x.data() + perm[n] * stride, stride, xp.data() + n * stride);
    std::copy_n(g.data() + perm[n] * stride, stride, gp.data() + n * stride);
  }
  Tensor<float> outp = masag::forward(xp, gp, p);
  for (int n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < stride; ++i)
      REQUIRE(outp.data()[n * stride + i] ==
              out.data()[perm[n] * stride + i]);
}

TEST_CASE("parameter count matches the closed-form sum of seven convolutions") {
  Rng rng(59);
  MasagConfig cfg;
  cfg.channels = 8;
  MasagParams<float> p = MasagParams<float>::init(cfg, rng);
  const std::size_t c = 8, k = 5, kd = 7;
  const std::size_t want = (c * k * k + c) + (c * kd * kd + c) +
                           (c * c + c) + (2 * c + c) + (2 * c + 2) +
                           (c * c + c) + (c * c + c);
  REQUIRE(p.parameter_count() == want);
  std::size_t by_enum = 0;
  for (auto& [name, t] : p.named_tensors()) by_enum += t->size();
  REQUIRE(by_enum == want);
}

TEST_CASE("masag params serialize to a named-tensor directory and back") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "msa2net_test_masag_io";
  fs::remove_all(dir);
  Rng rng(60);
  MasagConfig cfg;
  cfg.channels = 4;
  MasagParams<float> p = random_params<float>(4, rng);
  save_masag_params(dir, p, cfg);

  const nlohmann::json manifest = io::load_json(dir / "manifest.json");
  REQUIRE(manifest["config"]["channels"] == 4);
  // seven convolutions, kernel + bias each
  REQUIRE(manifest["tensors"].size() == 14);

  auto [loaded, cfg2] = load_masag_params(dir);
  REQUIRE(cfg2.channels == cfg.channels);
  Rng r2(61);
  Tensor<float> x = Tensor<float>::uniform({1, 4, 8, 8}, r2);
  Tensor<float> g = Tensor<float>::uniform({1, 4, 8, 8}, r2);
  Tensor<float> a = masag::forward(x, g, p);
  Tensor<float> b = masag::forward(x, g, loaded);
  REQUIRE(a.vec() == b.vec());
}

TEST_CASE("masag cost mirrors the instrumented forward exactly") {
  Rng rng(62);
  MasagConfig cfg;
  cfg.channels = 8;
  MasagParams<float> p = MasagParams<float>::init(cfg, rng);
  Tensor<float> x = Tensor<float>::uniform({2, 8, 16, 16}, rng);
  Tensor<float> g = Tensor<float>::uniform({2, 8, 16, 16}, rng);
  CountScope scope;
  masag::forward(x, g, p);
  const OpCost want = masag::cost(cfg, 2, 16, 16);
  REQUIRE(scope.counts().macs == want.macs);
  REQUIRE(scope.counts().elems == want.elems);
}
