#pragma once

// Independent brute-force oracles used only by tests. These deliberately
// avoid the library's kernel code paths (padded buffers, axpy loop orders,
// row-column DFT) and evaluate the defining formulas directly.

#include <complex>
#include <cstdint>
#include <functional>
#include <vector>

#include "msa2net/conv.hpp"
#include "msa2net/masag.hpp"
#include "msa2net/ops.hpp"
#include "msa2net/tensor.hpp"

namespace oracle {

using msa2net::ConvWeights;
using msa2net::LabelMap;
using msa2net::Rng;
using msa2net::Shape;
using msa2net::Tape;
using msa2net::Tensor;

// direct gather summation with per-tap bounds checks
template <typename T>
Tensor<T> conv2d_reference(const Tensor<T>& x, const ConvWeights<T>& w) {
  const int N = x.n(), Ci = x.c(), H = x.h(), W = x.w();
  const int Co = w.out_channels(), k = w.ksize();
  const int s = w.stride, p = w.padding, d = w.dilation, g = w.groups;
  const int ci_g = Ci / g, co_g = Co / g;
  const int ho = (H + 2 * p - (d * (k - 1) + 1)) / s + 1;
  const int wo = (W + 2 * p - (d * (k - 1) + 1)) / s + 1;
  Tensor<T> out({N, Co, ho, wo});
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < Co; ++o) {
      const int grp = o / co_g;
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j) {
          double acc = w.has_bias() ? static_cast<double>(w.bias.at(0, o, 0, 0))
                                    : 0.0;
          for (int c2 = 0; c2 < ci_g; ++c2)
            for (int u = 0; u < k; ++u)
              for (int v = 0; v < k; ++v) {
                const int y = i * s + u * d - p;
                const int xx = j * s + v * d - p;
                if (y >= 0 && y < H && xx >= 0 && xx < W)
                  acc += static_cast<double>(w.kernel.at(o, c2, u, v)) *
                         static_cast<double>(x.at(n, grp * ci_g + c2, y, xx));
              }
          out.at(n, o, i, j) = static_cast<T>(acc);
        }
    }
  return out;
}

template <typename T>
Tensor<T> channel_pool_concat_reference(const Tensor<T>& g) {
  const int N = g.n(), C = g.c(), H = g.h(), W = g.w();
  Tensor<T> out({N, 2, H, W});
  for (int n = 0; n < N; ++n)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        T sum = 0;
        T mx = g.at(n, 0, i, j);
        for (int c = 0; c < C; ++c) {
          const T v = g.at(n, c, i, j);
          sum += v;
          if (v > mx) mx = v;
        }
        out.at(n, 0, i, j) = sum / static_cast<T>(C);
        out.at(n, 1, i, j) = mx;
      }
  return out;
}

// O((H*W)^2) quadruple-sum DFT
inline std::vector<std::complex<double>> dft2_naive(
    const std::vector<double>& f, int h, int w) {
  constexpr double kTwoPi = 6.283185307179586476925287;
  std::vector<std::complex<double>> out(static_cast<std::size_t>(h) * w);
  for (int ky = 0; ky < h; ++ky)
    for (int kx = 0; kx < w; ++kx) {
      std::complex<double> acc = 0;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double ang =
              -kTwoPi * (static_cast<double>(ky) * y / h +
                         static_cast<double>(kx) * x / w);
          acc += f[static_cast<std::size_t>(y) * w + x] *
                 std::complex<double>(std::cos(ang), std::sin(ang));
        }
      out[static_cast<std::size_t>(ky) * w + kx] = acc;
    }
  return out;
}

// per-pixel bilinear interpolation formula, align-corners false
template <typename T>
Tensor<T> upsample_bilinear_reference(const Tensor<T>& x, int factor) {
  const int N = x.n(), C = x.c(), H = x.h(), W = x.w();
  Tensor<T> out({N, C, H * factor, W * factor});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H * factor; ++i)
        for (int j = 0; j < W * factor; ++j) {
          double sy = (i + 0.5) / factor - 0.5;
          double sx = (j + 0.5) / factor - 0.5;
          sy = std::max(0.0, std::min(sy, static_cast<double>(H - 1)));
          sx = std::max(0.0, std::min(sx, static_cast<double>(W - 1)));
          const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
          const int y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
          const double fy = sy - y0, fx = sx - x0;
          out.at(n, c, i, j) = static_cast<T>(
              (1 - fy) * ((1 - fx) * x.at(n, c, y0, x0) +
                          fx * x.at(n, c, y0, x1)) +
              fy * ((1 - fx) * x.at(n, c, y1, x0) + fx * x.at(n, c, y1, x1)));
        }
  return out;
}

// ---------------------------------------------------------------------------
// Scalar re-implementation of the whole attention gate, stage by stage:
// fusion, selection softmax, residual weighting, cross-modulation and
// recalibration are all written out as per-pixel formulas on top of the
// direct-summation convolution above.
// ---------------------------------------------------------------------------

template <typename T>
msa2net::Tensor<T> masag_reference(const msa2net::Tensor<T>& x,
                                   const msa2net::Tensor<T>& g,
                                   const msa2net::MasagParams<T>& p) {
  const int N = x.n(), C = x.c(), H = x.h(), W = x.w();
  auto sigma = [](double v) {
    return v >= 0 ? 1.0 / (1.0 + std::exp(-v))
                  : std::exp(v) / (1.0 + std::exp(v));
  };

  // fusion
  Tensor<T> local = conv2d_reference(
      conv2d_reference(conv2d_reference(x, p.local_dw), p.local_dwd),
      p.local_proj);
  Tensor<T> pooled = channel_pool_concat_reference(g);
  Tensor<T> global = conv2d_reference(pooled, p.global_proj);
  Tensor<T> u({N, C, H, W});
  for (std::size_t i = 0; i < u.size(); ++i)
    u.data()[i] = local.data()[i] + global.data()[i];

  // selection weights + residual weighting
  Tensor<T> logits = conv2d_reference(u, p.select_proj);
  Tensor<T> x_sel({N, C, H, W}), g_sel({N, C, H, W});
  for (int n = 0; n < N; ++n)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        const double l0 = logits.at(n, 0, i, j);
        const double l1 = logits.at(n, 1, i, j);
        const double m = std::max(l0, l1);
        const double e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
        const double sw0 = e0 / (e0 + e1), sw1 = e1 / (e0 + e1);
        for (int c = 0; c < C; ++c) {
          x_sel.at(n, c, i, j) =
              static_cast<T>(sw0 * x.at(n, c, i, j) + x.at(n, c, i, j));
          g_sel.at(n, c, i, j) =
              static_cast<T>(sw1 * g.at(n, c, i, j) + g.at(n, c, i, j));
        }
      }

  // cross-modulation
  Tensor<T> u_mod({N, C, H, W});
  for (std::size_t i = 0; i < u_mod.size(); ++i) {
    const double xs = x_sel.data()[i], gs = g_sel.data()[i];
    const double x_mod = xs * sigma(gs);
    const double g_mod = gs * sigma(xs);
    u_mod.data()[i] = static_cast<T>(x_mod * g_mod);
  }

  // recalibration
  Tensor<T> gate = conv2d_reference(u_mod, p.recal_gate);
  Tensor<T> weighted({N, C, H, W});
  for (std::size_t i = 0; i < weighted.size(); ++i)
    weighted.data()[i] =
        static_cast<T>(sigma(gate.data()[i]) * x.data()[i]);
  return conv2d_reference(weighted, p.recal_out);
}

// ---------------------------------------------------------------------------
// Central finite-difference gradient check (double precision).
// make_loss builds the scalar loss from the current leaf values; it is run
// once on a tape for analytic gradients and then repeatedly, untraced, for
// the finite differences. Error metric: |a - n| / max(1, |a|, |n|).
// ---------------------------------------------------------------------------

struct FdReport {
  double max_err = 0.0;
  std::size_t checked = 0;
};

inline FdReport check_gradients(
    std::vector<Tensor<double>*> leaves,
    const std::function<Tensor<double>()>& make_loss, double step = 1e-4,
    std::size_t max_per_leaf = static_cast<std::size_t>(-1),
    Rng* sampler = nullptr) {
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    for (auto* leaf : leaves) tape.watch(*leaf);
    Tensor<double> loss = make_loss();
    tape.backward(loss);
    for (auto* leaf : leaves) analytic.push_back(leaf->grad());
  }
  for (auto* leaf : leaves) leaf->detach();

  FdReport rep;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor<double>& leaf = *leaves[li];
    std::vector<std::size_t> idxs;
    if (leaf.size() <= max_per_leaf) {
      idxs.resize(leaf.size());
      for (std::size_t i = 0; i < idxs.size(); ++i) idxs[i] = i;
    } else {
      for (std::size_t i = 0; i < max_per_leaf; ++i)
        idxs.push_back(static_cast<std::size_t>(
            sampler->uniform_int(0, static_cast<std::int64_t>(leaf.size()) - 1)));
    }
    for (const std::size_t i : idxs) {
      const double orig = leaf.data()[i];
      leaf.data()[i] = orig + step;
      const double f1 = make_loss().data()[0];
      leaf.data()[i] = orig - step;
      const double f2 = make_loss().data()[0];
      leaf.data()[i] = orig;
      const double numeric = (f1 - f2) / (2 * step);
      const double a = analytic[li][i];
      const double err =
          std::abs(a - numeric) /
          std::max({1.0, std::abs(a), std::abs(numeric)});
      rep.max_err = std::max(rep.max_err, err);
      ++rep.checked;
    }
  }
  return rep;
}

template <typename T>
Tensor<T> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor<T>::uniform(s, rng, lo, hi);
}

}  // namespace oracle
