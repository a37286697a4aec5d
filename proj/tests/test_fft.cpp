#include <catch2/catch_amalgamated.hpp>

#include "msa2net/fft.hpp"
#include "oracles.hpp"

using namespace msa2net;

TEST_CASE("constant input puts all energy in the DC bin") {
  Tensor<float> x = Tensor<float>::full({1, 2, 8, 8}, 0.7f);
  RadialSpectrum rs = fft2_radial_spectrum(x, 6);
  REQUIRE(rs.mean_log_amp.size() == 6);
  REQUIRE(rs.mean_log_amp[0] > 0.0);
  for (std::size_t b = 1; b < rs.energy.size(); ++b) {
    REQUIRE(rs.energy[b] == Catch::Approx(0.0).margin(1e-9));
  }
  REQUIRE(rs.high_freq_ratio() == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("centered unit impulse has a flat amplitude-1 spectrum") {
  Tensor<float> x = Tensor<float>::zeros({1, 1, 8, 8});
  x.at(0, 0, 4, 4) = 1.0f;
  RadialSpectrum rs = fft2_radial_spectrum(x, 8);
  const double flat = std::log1p(1.0);
  for (const double v : rs.mean_log_amp)
    REQUIRE(v == Catch::Approx(flat).margin(1e-9));
}

TEST_CASE("row-column DFT matches the naive quadruple-sum oracle") {
  Rng rng(31);
  for (const auto [h, w] : {std::pair{8, 8}, std::pair{5, 7}, std::pair{2, 9}}) {
    std::vector<double> f(static_cast<std::size_t>(h) * w);
    for (auto& v : f) v = rng.uniform(-1, 1);
    const auto got = detail::dft2(f, h, w);
    const auto want = oracle::dft2_naive(f, h, w);
    double maxdiff = 0;
    for (std::size_t i = 0; i < got.size(); ++i)
      maxdiff = std::max(maxdiff, std::abs(got[i] - want[i]));
    CAPTURE(h, w);
    REQUIRE(maxdiff <= 1e-6);
  }
}

TEST_CASE("Parseval: spectral energy equals spatial energy") {
  Rng rng(32);
  Tensor<float> x = Tensor<float>::uniform({2, 3, 9, 6}, rng);
  RadialSpectrum rs = fft2_radial_spectrum(x, 4);
  REQUIRE(rs.spectral_energy ==
          Catch::Approx(rs.spatial_energy).epsilon(1e-4));
}

TEST_CASE("spectrum input validation") {
  Tensor<float> x = Tensor<float>::zeros({1, 1, 4, 4});
  REQUIRE_THROWS_AS(fft2_radial_spectrum(x, 0), ConfigError);
  Tensor<float> tiny = Tensor<float>::zeros({1, 1, 1, 4});
  REQUIRE_THROWS_AS(fft2_radial_spectrum(tiny, 4), ShapeError);
}

TEST_CASE("bin count in the report matches the request") {
  Rng rng(33);
  Tensor<float> x = Tensor<float>::uniform({1, 1, 8, 8}, rng);
  for (const int bins : {1, 3, 8, 17}) {
    RadialSpectrum rs = fft2_radial_spectrum(x, bins);
    REQUIRE(rs.radii.size() == static_cast<std::size_t>(bins));
    REQUIRE(rs.mean_log_amp.size() == static_cast<std::size_t>(bins));
    REQUIRE(rs.radii.back() == Catch::Approx(1.0));
    const double ratio = rs.high_freq_ratio();
    REQUIRE(ratio >= 0.0);
    REQUIRE(ratio <= 1.0);
  }
}
