#pragma once

#include <cmath>
#include <complex>
#include <vector>

#include "msa2net/common.hpp"
#include "msa2net/tensor.hpp"

namespace msa2net {

namespace detail {

// Row-column 2-D DFT in double precision, O(H*W*(H+W)).
// F[ky*W + kx] = sum_{y,x} f[y*W+x] * exp(-2*pi*i*(ky*y/H + kx*x/W))
inline std::vector<std::complex<double>> dft2(const std::vector<double>& f,
                                              int h, int w) {
  constexpr double kTwoPi = 6.283185307179586476925287;
  std::vector<std::complex<double>> tw_w(static_cast<std::size_t>(w) * w);
  for (int k = 0; k < w; ++k)
    for (int x = 0; x < w; ++x) {
      const double ang = -kTwoPi * k * x / w;
      tw_w[static_cast<std::size_t>(k) * w + x] = {std::cos(ang), std::sin(ang)};
    }
  std::vector<std::complex<double>> rows(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int k = 0; k < w; ++k) {
      std::complex<double> acc = 0;
      for (int x = 0; x < w; ++x)
        acc += f[static_cast<std::size_t>(y) * w + x] *
               tw_w[static_cast<std::size_t>(k) * w + x];
      rows[static_cast<std::size_t>(y) * w + k] = acc;
    }
  std::vector<std::complex<double>> tw_h(static_cast<std::size_t>(h) * h);
  for (int k = 0; k < h; ++k)
    for (int y = 0; y < h; ++y) {
      const double ang = -kTwoPi * k * y / h;
      tw_h[static_cast<std::size_t>(k) * h + y] = {std::cos(ang), std::sin(ang)};
    }
  std::vector<std::complex<double>> out(static_cast<std::size_t>(h) * w);
  for (int kx = 0; kx < w; ++kx)
    for (int ky = 0; ky < h; ++ky) {
      std::complex<double> acc = 0;
      for (int y = 0; y < h; ++y)
        acc += rows[static_cast<std::size_t>(y) * w + kx] *
               tw_h[static_cast<std::size_t>(ky) * h + y];
      out[static_cast<std::size_t>(ky) * w + kx] = acc;
    }
  return out;
}

}  // namespace detail

// Radially binned spectrum of a feature map. Convention (also stated in the
// CSV header the analysis tool writes): frequencies are DC-centered, the
// radius is normalized so that the extreme corner (Nyquist on both axes)
// sits at r = 1, bins split [0,1] evenly, and each bin reports the mean of
// log(1 + A) where A is the |DFT| amplitude averaged over batch and channels.
struct RadialSpectrum {
  std::vector<double> radii;         // bin upper edges, k/bins..1
  std::vector<double> mean_log_amp;  // per bin
  std::vector<double> energy;       // per bin: sum over n,c,pixels of |F|^2
  double spectral_energy = 0;       // sum |F|^2 / (H*W), all n,c
  double spatial_energy = 0;        // sum x^2, all n,c

  double total_energy() const {
    double t = 0;
    for (double e : energy) t += e;
    return t;
  }
  // fraction of spectral energy above normalized radius 0.5
  double high_freq_ratio() const {
    const double tot = total_energy();
    if (tot <= 0) return 0.0;
    double hf = 0;
    for (std::size_t i = 0; i < energy.size(); ++i)
      if (radii[i] > 0.5 + 1e-12) hf += energy[i];
    return hf / tot;
  }
};

template <typename T>
RadialSpectrum fft2_radial_spectrum(const Tensor<T>& x, int bins) {
  if (bins < 1) throw ConfigError("spectrum bin count must be positive");
  const int N = x.n(), C = x.c(), H = x.h(), W = x.w();
  if (H < 2 || W < 2)
    throw ShapeError("fft2_radial_spectrum needs H,W >= 2, got " +
                     x.shape().str());
  const std::size_t hw = static_cast<std::size_t>(H) * W;

  std::vector<double> amp(hw, 0.0);     // |F| averaged over N*C
  std::vector<double> energy_px(hw, 0.0);  // sum over n,c of |F|^2
  double spatial = 0;
  std::vector<double> plane(hw);
  for (int in = 0; in < N; ++in)
    for (int c = 0; c < C; ++c) {
      const T* src = x.data() + (static_cast<std::size_t>(in) * C + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        plane[i] = static_cast<double>(src[i]);
        spatial += plane[i] * plane[i];
      }
      const auto f = detail::dft2(plane, H, W);
      for (std::size_t i = 0; i < hw; ++i) {
        const double a = std::abs(f[i]);
        amp[i] += a;
        energy_px[i] += a * a;
      }
    }
  const double inv_nc = 1.0 / (static_cast<double>(N) * C);
  for (auto& a : amp) a *= inv_nc;

  RadialSpectrum rs;
  rs.radii.resize(bins);
  for (int b = 0; b < bins; ++b)
    rs.radii[b] = static_cast<double>(b + 1) / bins;
  rs.mean_log_amp.assign(bins, 0.0);
  rs.energy.assign(bins, 0.0);
  std::vector<std::size_t> bin_count(bins, 0);
  for (int ky = 0; ky < H; ++ky) {
    const int cy = ky <= H / 2 ? ky : ky - H;
    const double ry = static_cast<double>(cy) / (H / 2.0);
    for (int kx = 0; kx < W; ++kx) {
      const int cx = kx <= W / 2 ? kx : kx - W;
      const double rx = static_cast<double>(cx) / (W / 2.0);
      const double r = std::sqrt((ry * ry + rx * rx) / 2.0);
      int b = static_cast<int>(r * bins);
      b = std::min(b, bins - 1);
      const std::size_t i = static_cast<std::size_t>(ky) * W + kx;
      rs.mean_log_amp[b] += std::log1p(amp[i]);
      rs.energy[b] += energy_px[i];
      ++bin_count[b];
    }
  }
  for (int b = 0; b < bins; ++b)
    if (bin_count[b] > 0) rs.mean_log_amp[b] /= static_cast<double>(bin_count[b]);
  double spec = 0;
  for (const double e : energy_px) spec += e;
  rs.spectral_energy = spec / static_cast<double>(hw);
  rs.spatial_energy = spatial;
  return rs;
}

}  // namespace msa2net
