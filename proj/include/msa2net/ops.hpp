#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

#include "msa2net/common.hpp"
#include "msa2net/tensor.hpp"

namespace msa2net {

// Integer label map [N, H, W]; the segmentation-mask counterpart of Tensor.
struct LabelMap {
  int n = 0, h = 0, w = 0;
  std::vector<std::int32_t> v;

  LabelMap() = default;
  LabelMap(int n_, int h_, int w_)
      : n(n_), h(h_), w(w_), v(static_cast<std::size_t>(n_) * h_ * w_, 0) {}

  std::size_t index(int in, int ih, int iw) const {
    return (static_cast<std::size_t>(in) * h + ih) * w + iw;
  }
  std::int32_t& at(int in, int ih, int iw) { return v[index(in, ih, iw)]; }
  std::int32_t at(int in, int ih, int iw) const { return v[index(in, ih, iw)]; }
  std::size_t size() const { return v.size(); }
};

namespace detail {

inline std::array<std::size_t, 4> strides_of(const Shape& s) {
  return {static_cast<std::size_t>(s.c) * s.h * s.w,
          static_cast<std::size_t>(s.h) * s.w, static_cast<std::size_t>(s.w),
          1};
}

inline Shape broadcast_shape(const Shape& a, const Shape& b,
                             const char* opname) {
  auto pick = [&](int x, int y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw ShapeError(std::string(opname) + ": shapes " + a.str() + " and " +
                     b.str() + " are not broadcast-compatible");
  };
  return Shape{pick(a.n, b.n), pick(a.c, b.c), pick(a.h, b.h), pick(a.w, b.w)};
}

// strides with 0 on broadcast dims
inline std::array<std::size_t, 4> broadcast_strides(const Shape& in,
                                                    const Shape& out) {
  auto st = strides_of(in);
  const int id[4] = {in.n, in.c, in.h, in.w};
  const int od[4] = {out.n, out.c, out.h, out.w};
  for (int k = 0; k < 4; ++k)
    if (id[k] == 1 && od[k] != 1) st[k] = 0;
  return st;
}

// Accumulates a buffer shaped like `from` into grad of shape `to`,
// summing over broadcast dims.
template <typename T>
void reduce_into(const T* src, const Shape& from, T* dst, const Shape& to) {
  const auto dstr = broadcast_strides(to, from);
  std::size_t idx = 0;
  for (int in = 0; in < from.n; ++in)
    for (int ic = 0; ic < from.c; ++ic)
      for (int ih = 0; ih < from.h; ++ih) {
        const std::size_t base = in * dstr[0] + ic * dstr[1] + ih * dstr[2];
        for (int iw = 0; iw < from.w; ++iw, ++idx)
          dst[base + iw * dstr[3]] += src[idx];
      }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Broadcast binary ops (numpy-style: per-dim equal or 1).
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename Fwd, typename BwdX, typename BwdY>
Tensor<T> binary_op(const char* name, const Tensor<T>& x, const Tensor<T>& y,
                    Fwd fwd, BwdX bwd_x, BwdY bwd_y) {
  const Shape os = broadcast_shape(x.shape(), y.shape(), name);
  Tensor<T> out(os);
  const auto xs = broadcast_strides(x.shape(), os);
  const auto ys = broadcast_strides(y.shape(), os);
  const T* xd = x.data();
  const T* yd = y.data();
  T* od = out.data();
  if (x.shape() == os && y.shape() == os) {
    const std::size_t total = os.numel();
    parallel_for(total, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t i = lo; i < hi; ++i) od[i] = fwd(xd[i], yd[i]);
    }, 2);
  } else {
    std::size_t idx = 0;
    for (int in = 0; in < os.n; ++in)
      for (int ic = 0; ic < os.c; ++ic)
        for (int ih = 0; ih < os.h; ++ih) {
          const std::size_t xb = in * xs[0] + ic * xs[1] + ih * xs[2];
          const std::size_t yb = in * ys[0] + ic * ys[1] + ih * ys[2];
          for (int iw = 0; iw < os.w; ++iw, ++idx)
            od[idx] = fwd(xd[xb + iw * xs[3]], yd[yb + iw * ys[3]]);
        }
  }
  count_elems(out.size());

  auto st = ad::merge_tapes<T>({&x, &y});
  if (st) {
    ad::attach(st, out);
    Tensor<T> xc = x, yc = y, oc = out;
    ad::record<T>(st, [xc, yc, oc, bwd_x, bwd_y]() mutable {
      const Shape os2 = oc.shape();
      const T* g = oc.grad_data();
      const T* xd2 = xc.data();
      const T* yd2 = yc.data();
      if (xc.shape() == os2 && yc.shape() == os2) {
        const std::size_t total = os2.numel();
        if (T* gx = xc.grad_data())
          for (std::size_t i = 0; i < total; ++i)
            gx[i] += bwd_x(g[i], xd2[i], yd2[i]);
        if (T* gy = yc.grad_data())
          for (std::size_t i = 0; i < total; ++i)
            gy[i] += bwd_y(g[i], xd2[i], yd2[i]);
        return;
      }
      const auto xs2 = broadcast_strides(xc.shape(), os2);
      const auto ys2 = broadcast_strides(yc.shape(), os2);
      std::vector<T> buf(os2.numel());
      if (xc.grad_data()) {
        std::size_t idx = 0;
        for (int in = 0; in < os2.n; ++in)
          for (int ic = 0; ic < os2.c; ++ic)
            for (int ih = 0; ih < os2.h; ++ih) {
              const std::size_t xb = in * xs2[0] + ic * xs2[1] + ih * xs2[2];
              const std::size_t yb = in * ys2[0] + ic * ys2[1] + ih * ys2[2];
              for (int iw = 0; iw < os2.w; ++iw, ++idx)
                buf[idx] = bwd_x(g[idx], xd2[xb + iw * xs2[3]],
                                 yd2[yb + iw * ys2[3]]);
            }
        reduce_into(buf.data(), os2, xc.grad_data(), xc.shape());
      }
      if (yc.grad_data()) {
        std::size_t idx = 0;
        for (int in = 0; in < os2.n; ++in)
          for (int ic = 0; ic < os2.c; ++ic)
            for (int ih = 0; ih < os2.h; ++ih) {
              const std::size_t xb = in * xs2[0] + ic * xs2[1] + ih * xs2[2];
              const std::size_t yb = in * ys2[0] + ic * ys2[1] + ih * ys2[2];
              for (int iw = 0; iw < os2.w; ++iw, ++idx)
                buf[idx] = bwd_y(g[idx], xd2[xb + iw * xs2[3]],
                                 yd2[yb + iw * ys2[3]]);
            }
        reduce_into(buf.data(), os2, yc.grad_data(), yc.shape());
      }
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& x, const Tensor<T>& y) {
  return detail::binary_op<T>(
      "add", x, y, [](T a, T b) { return a + b; },
      [](T g, T, T) { return g; }, [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& x, const Tensor<T>& y) {
  return detail::binary_op<T>(
      "sub", x, y, [](T a, T b) { return a - b; },
      [](T g, T, T) { return g; }, [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& x, const Tensor<T>& y) {
  return detail::binary_op<T>(
      "mul", x, y, [](T a, T b) { return a * b; },
      [](T g, T, T b) { return g * b; }, [](T g, T a, T) { return g * a; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& x, const Tensor<T>& y) {
  return detail::binary_op<T>(
      "div", x, y, [](T a, T b) { return a / b; },
      [](T g, T, T b) { return g / b; },
      [](T g, T a, T b) { return -g * a / (b * b); });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_op(const Tensor<T>& x, Fwd fwd, Bwd bwd) {
  Tensor<T> out(x.shape());
  const T* xd = x.data();
  T* od = out.data();
  const std::size_t total = x.size();
  parallel_for(total, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) od[i] = fwd(xd[i]);
  }, 8);
  count_elems(total);
  auto st = ad::merge_tapes<T>({&x});
  if (st) {
    ad::attach(st, out);
    Tensor<T> xc = x, oc = out;
    ad::record<T>(st, [xc, oc, bwd]() mutable {
      T* gx = xc.grad_data();
      if (!gx) return;
      const T* g = oc.grad_data();
      const T* xd2 = xc.data();
      const T* od2 = oc.data();
      for (std::size_t i = 0; i < xc.size(); ++i)
        gx[i] += bwd(g[i], xd2[i], od2[i]);
    });
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T a) {
  return detail::unary_op<T>(
      x, [a](T v) { return a * v; }, [a](T g, T, T) { return a * g; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T b) {
  return detail::unary_op<T>(
      x, [b](T v) { return v + b; }, [](T g, T, T) { return g; });
}

// stable sign-split logistic
template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary_op<T>(
      x, [](T v) { return sigmoid_scalar(v); },
      [](T g, T, T y) { return g * y * (T(1) - y); });
}

// logistic form of GELU: x * sigma(1.702 x)
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kGate = T(1.702);
  return detail::unary_op<T>(
      x, [](T v) { return v * sigmoid_scalar(kGate * v); },
      [](T g, T v, T) {
        const T s = sigmoid_scalar(kGate * v);
        return g * (s + kGate * v * s * (T(1) - s));
      });
}

// ---------------------------------------------------------------------------
// Softmax along one axis (1 = channels), max-subtracted.
// ---------------------------------------------------------------------------

namespace detail {

// enumerates offsets of all 1-D lines along `axis`
inline void line_geometry(const Shape& s, int axis, std::size_t& line_count,
                          std::size_t& stride, std::vector<std::size_t>& bases) {
  const auto st = strides_of(s);
  const int dims[4] = {s.n, s.c, s.h, s.w};
  line_count = dims[axis];
  stride = st[axis];
  bases.clear();
  for (int a = 0; a < (axis == 0 ? 1 : dims[0]); ++a)
    for (int b = 0; b < (axis == 1 ? 1 : dims[1]); ++b)
      for (int c = 0; c < (axis == 2 ? 1 : dims[2]); ++c)
        for (int d = 0; d < (axis == 3 ? 1 : dims[3]); ++d)
          bases.push_back(a * st[0] + b * st[1] + c * st[2] + d * st[3]);
}

}  // namespace detail

template <typename T>
Tensor<T> softmax_axis(const Tensor<T>& x, int axis) {
  if (axis < 0 || axis > 3) throw ConfigError("softmax axis out of range");
  Tensor<T> out(x.shape());
  std::size_t count, stride;
  std::vector<std::size_t> bases;
  detail::line_geometry(x.shape(), axis, count, stride, bases);
  const T* xd = x.data();
  T* od = out.data();
  parallel_for(static_cast<std::int64_t>(bases.size()),
               [&](std::int64_t lo, std::int64_t hi) {
                 for (std::int64_t bi = lo; bi < hi; ++bi) {
                   const std::size_t base = bases[bi];
                   T mx = xd[base];
                   for (std::size_t k = 1; k < count; ++k)
                     mx = std::max(mx, xd[base + k * stride]);
                   T sum = 0;
                   for (std::size_t k = 0; k < count; ++k) {
                     const T e = std::exp(xd[base + k * stride] - mx);
                     od[base + k * stride] = e;
                     sum += e;
                   }
                   const T inv = T(1) / sum;
                   for (std::size_t k = 0; k < count; ++k)
                     od[base + k * stride] *= inv;
                 }
               },
               static_cast<std::int64_t>(count) * 6);
  count_elems(out.size());
  auto st = ad::merge_tapes<T>({&x});
  if (st) {
    ad::attach(st, out);
    Tensor<T> xc = x, oc = out;
    ad::record<T>(st, [xc, oc, axis]() mutable {
      T* gx = xc.grad_data();
      if (!gx) return;
      std::size_t count2, stride2;
      std::vector<std::size_t> bases2;
      detail::line_geometry(xc.shape(), axis, count2, stride2, bases2);
      const T* g = oc.grad_data();
      const T* y = oc.data();
      for (const std::size_t base : bases2) {
        T dot = 0;
        for (std::size_t k = 0; k < count2; ++k)
          dot += g[base + k * stride2] * y[base + k * stride2];
        for (std::size_t k = 0; k < count2; ++k) {
          const std::size_t i = base + k * stride2;
          gx[i] += y[i] * (g[i] - dot);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  return softmax_axis(x, 1);
}

// ---------------------------------------------------------------------------
// Channel pooling concat: [N,C,H,W] -> [N,2,H,W] with (mean, max) over C.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> channel_pool_concat(const Tensor<T>& g) {
  if (g.c() < 1) throw ShapeError("channel_pool_concat needs C >= 1");
  const int N = g.n(), C = g.c(), H = g.h(), W = g.w();
  Tensor<T> out({N, 2, H, W});
  auto argmax = std::make_shared<std::vector<std::int32_t>>(
      static_cast<std::size_t>(N) * H * W);
  const T* gd = g.data();
  T* od = out.data();
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  parallel_for(static_cast<std::int64_t>(N) * H * W, [&](std::int64_t lo,
                                                         std::int64_t hi) {
    for (std::int64_t t = lo; t < hi; ++t) {
      const int in = static_cast<int>(t / hw);
      const std::size_t pix = static_cast<std::size_t>(t % hw);
      const T* base = gd + static_cast<std::size_t>(in) * C * hw + pix;
      T sum = base[0];
      T mx = base[0];
      int arg = 0;
      for (int c = 1; c < C; ++c) {
        const T v = base[static_cast<std::size_t>(c) * hw];
        sum += v;
        if (v > mx) {
          mx = v;
          arg = c;
        }
      }
      od[static_cast<std::size_t>(in) * 2 * hw + pix] = sum / static_cast<T>(C);
      od[static_cast<std::size_t>(in) * 2 * hw + hw + pix] = mx;
      (*argmax)[t] = arg;
    }
  }, C);
  count_elems(out.size());
  auto st = ad::merge_tapes<T>({&g});
  if (st) {
    ad::attach(st, out);
    Tensor<T> gc = g, oc = out;
    ad::record<T>(st, [gc, oc, argmax]() mutable {
      T* gin = gc.grad_data();
      if (!gin) return;
      const int N2 = gc.n(), C2 = gc.c(), H2 = gc.h(), W2 = gc.w();
      const std::size_t hw2 = static_cast<std::size_t>(H2) * W2;
      const T* go = oc.grad_data();
      const T invc = T(1) / static_cast<T>(C2);
      for (int in = 0; in < N2; ++in)
        for (std::size_t pix = 0; pix < hw2; ++pix) {
          const T gmean = go[static_cast<std::size_t>(in) * 2 * hw2 + pix];
          const T gmax = go[static_cast<std::size_t>(in) * 2 * hw2 + hw2 + pix];
          T* base = gin + static_cast<std::size_t>(in) * C2 * hw2 + pix;
          for (int c = 0; c < C2; ++c)
            base[static_cast<std::size_t>(c) * hw2] += gmean * invc;
          const int arg = (*argmax)[static_cast<std::size_t>(in) * hw2 + pix];
          base[static_cast<std::size_t>(arg) * hw2] += gmax;
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bilinear upsampling by an integer factor, align-corners false.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int factor) {
  if (factor < 1) throw ConfigError("upsample factor must be >= 1");
  const int N = x.n(), C = x.c(), H = x.h(), W = x.w();
  const int Ho = H * factor, Wo = W * factor;
  Tensor<T> out({N, C, Ho, Wo});
  const T* xd = x.data();
  T* od = out.data();
  const double inv = 1.0 / factor;
  parallel_for(static_cast<std::int64_t>(N) * C, [&](std::int64_t lo,
                                                     std::int64_t hi) {
    for (std::int64_t nc = lo; nc < hi; ++nc) {
      const T* ip = xd + nc * static_cast<std::size_t>(H) * W;
      T* op = od + nc * static_cast<std::size_t>(Ho) * Wo;
      for (int i = 0; i < Ho; ++i) {
        const double sy = std::max(0.0, (i + 0.5) * inv - 0.5);
        const int y0 = std::min(static_cast<int>(sy), H - 1);
        const int y1 = std::min(y0 + 1, H - 1);
        const double fy = sy - y0;
        for (int j = 0; j < Wo; ++j) {
          const double sx = std::max(0.0, (j + 0.5) * inv - 0.5);
          const int x0 = std::min(static_cast<int>(sx), W - 1);
          const int x1 = std::min(x0 + 1, W - 1);
          const double fx = sx - x0;
          const double v =
              (1 - fy) * ((1 - fx) * ip[y0 * W + x0] + fx * ip[y0 * W + x1]) +
              fy * ((1 - fx) * ip[y1 * W + x0] + fx * ip[y1 * W + x1]);
          op[static_cast<std::size_t>(i) * Wo + j] = static_cast<T>(v);
        }
      }
    }
  }, static_cast<std::int64_t>(Ho) * Wo * 10);
  count_elems(out.size());
  auto st = ad::merge_tapes<T>({&x});
  if (st) {
    ad::attach(st, out);
    Tensor<T> xc = x, oc = out;
    ad::record<T>(st, [xc, oc, factor]() mutable {
      T* gx = xc.grad_data();
      if (!gx) return;
      const int N2 = xc.n(), C2 = xc.c(), H2 = xc.h(), W2 = xc.w();
      const int Ho2 = H2 * factor, Wo2 = W2 * factor;
      const double inv2 = 1.0 / factor;
      const T* g = oc.grad_data();
      for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N2) * C2; ++nc) {
        T* gp = gx + nc * static_cast<std::size_t>(H2) * W2;
        const T* go = g + nc * static_cast<std::size_t>(Ho2) * Wo2;
        for (int i = 0; i < Ho2; ++i) {
          const double sy = std::max(0.0, (i + 0.5) * inv2 - 0.5);
          const int y0 = std::min(static_cast<int>(sy), H2 - 1);
          const int y1 = std::min(y0 + 1, H2 - 1);
          const double fy = sy - y0;
          for (int j = 0; j < Wo2; ++j) {
            const double sx = std::max(0.0, (j + 0.5) * inv2 - 0.5);
            const int x0 = std::min(static_cast<int>(sx), W2 - 1);
            const int x1 = std::min(x0 + 1, W2 - 1);
            const double fx = sx - x0;
            const T gv = go[static_cast<std::size_t>(i) * Wo2 + j];
            gp[y0 * W2 + x0] += static_cast<T>((1 - fy) * (1 - fx)) * gv;
            gp[y0 * W2 + x1] += static_cast<T>((1 - fy) * fx) * gv;
            gp[y1 * W2 + x0] += static_cast<T>(fy * (1 - fx)) * gv;
            gp[y1 * W2 + x1] += static_cast<T>(fy * fx) * gv;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions (keepdims).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, bool over_n, bool over_c, bool over_h,
                     bool over_w) {
  const Shape is = x.shape();
  const Shape os{over_n ? 1 : is.n, over_c ? 1 : is.c, over_h ? 1 : is.h,
                 over_w ? 1 : is.w};
  Tensor<T> out(os);
  detail::reduce_into(x.data(), is, out.data(), os);
  count_elems(x.size());
  auto st = ad::merge_tapes<T>({&x});
  if (st) {
    ad::attach(st, out);
    Tensor<T> xc = x, oc = out;
    ad::record<T>(st, [xc, oc]() mutable {
      T* gx = xc.grad_data();
      if (!gx) return;
      const auto bstr = detail::broadcast_strides(oc.shape(), xc.shape());
      const Shape is2 = xc.shape();
      const T* g = oc.grad_data();
      std::size_t idx = 0;
      for (int in = 0; in < is2.n; ++in)
        for (int ic = 0; ic < is2.c; ++ic)
          for (int ih = 0; ih < is2.h; ++ih) {
            const std::size_t base =
                in * bstr[0] + ic * bstr[1] + ih * bstr[2];
            for (int iw = 0; iw < is2.w; ++iw, ++idx)
              gx[idx] += g[base + iw * bstr[3]];
          }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  return reduce_sum(x, true, true, true, true);
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), static_cast<T>(1.0 / x.size()));
}

// ---------------------------------------------------------------------------
// Batched matmul on the last two dims with optional transposes; the leading
// two dims broadcast (equal or 1).
// ---------------------------------------------------------------------------

namespace detail {

// C[p,r] (+)= op(A)[p,q] * op(B)[q,r]; row-parallelizable, each output row is
// owned by exactly one caller iteration.
template <typename T>
void gemm_rows(bool ta, bool tb, int p, int q, int r, const T* A, const T* B,
               T* C, bool acc, int row_lo, int row_hi) {
  for (int i = row_lo; i < row_hi; ++i) {
    T* __restrict crow = C + static_cast<std::size_t>(i) * r;
    if (!acc)
      for (int j = 0; j < r; ++j) crow[j] = T(0);
    if (!tb) {
      for (int kk = 0; kk < q; ++kk) {
        const T a = ta ? A[static_cast<std::size_t>(kk) * p + i]
                       : A[static_cast<std::size_t>(i) * q + kk];
        const T* __restrict brow = B + static_cast<std::size_t>(kk) * r;
        for (int j = 0; j < r; ++j) crow[j] += a * brow[j];
      }
    } else {
      for (int j = 0; j < r; ++j) {
        const T* __restrict brow = B + static_cast<std::size_t>(j) * q;
        T acc2 = 0;
        if (!ta) {
          const T* __restrict arow = A + static_cast<std::size_t>(i) * q;
          for (int kk = 0; kk < q; ++kk) acc2 += arow[kk] * brow[kk];
        } else {
          for (int kk = 0; kk < q; ++kk)
            acc2 += A[static_cast<std::size_t>(kk) * p + i] * brow[kk];
        }
        crow[j] += acc2;
      }
    }
  }
}

template <typename T>
struct MatmulDims {
  int bn, bc, p, q, r;
  std::size_t a_bstride_n, a_bstride_c, b_bstride_n, b_bstride_c;
};

template <typename T>
MatmulDims<T> matmul_dims(const Tensor<T>& a, const Tensor<T>& b, bool ta,
                          bool tb) {
  const int ap = ta ? a.w() : a.h();
  const int aq = ta ? a.h() : a.w();
  const int bq = tb ? b.w() : b.h();
  const int br = tb ? b.h() : b.w();
  if (aq != bq)
    throw ShapeError("matmul inner dims differ: " + a.shape().str() + " x " +
                     b.shape().str());
  MatmulDims<T> d;
  d.p = ap;
  d.q = aq;
  d.r = br;
  const Shape bs = detail::broadcast_shape(
      Shape{a.n(), a.c(), 1, 1}, Shape{b.n(), b.c(), 1, 1}, "matmul");
  d.bn = bs.n;
  d.bc = bs.c;
  const std::size_t amat = static_cast<std::size_t>(a.h()) * a.w();
  const std::size_t bmat = static_cast<std::size_t>(b.h()) * b.w();
  d.a_bstride_c = (a.c() == 1 && d.bc != 1) ? 0 : amat;
  d.a_bstride_n = (a.n() == 1 && d.bn != 1) ? 0 : amat * a.c();
  d.b_bstride_c = (b.c() == 1 && d.bc != 1) ? 0 : bmat;
  d.b_bstride_n = (b.n() == 1 && d.bn != 1) ? 0 : bmat * b.c();
  return d;
}

// out must be zeroed (acc=false) or accumulated into (acc=true)
template <typename T>
void matmul_kernel(const MatmulDims<T>& d, bool ta, bool tb, const T* A,
                   const T* B, T* C, bool acc) {
  const std::int64_t batches = static_cast<std::int64_t>(d.bn) * d.bc;
  const std::int64_t row_cost = static_cast<std::int64_t>(d.q) * d.r;
  parallel_for(batches * d.p, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t t = lo; t < hi;) {
      const std::int64_t bat = t / d.p;
      const int row0 = static_cast<int>(t % d.p);
      const int rows =
          static_cast<int>(std::min<std::int64_t>(hi - t, d.p - row0));
      const int in = static_cast<int>(bat / d.bc);
      const int ic = static_cast<int>(bat % d.bc);
      const T* Ab = A + in * d.a_bstride_n + ic * d.a_bstride_c;
      const T* Bb = B + in * d.b_bstride_n + ic * d.b_bstride_c;
      T* Cb = C + (static_cast<std::size_t>(bat)) * d.p * d.r;
      gemm_rows(ta, tb, d.p, d.q, d.r, Ab, Bb, Cb, acc, row0, row0 + rows);
      t += rows;
    }
  }, row_cost);
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool ta = false,
                 bool tb = false) {
  const auto d = detail::matmul_dims(a, b, ta, tb);
  Tensor<T> out({d.bn, d.bc, d.p, d.r});
  detail::matmul_kernel(d, ta, tb, a.data(), b.data(), out.data(), false);
  count_macs(static_cast<unsigned long long>(d.bn) * d.bc * d.p * d.q * d.r);
  auto st = ad::merge_tapes<T>({&a, &b});
  if (st) {
    ad::attach(st, out);
    Tensor<T> ac = a, bc = b, oc = out;
    ad::record<T>(st, [ac, bc, oc, ta, tb, d]() mutable {
      const T* g = oc.grad_data();
      // dA' = G * B'^T, dB' = A'^T * G; transposed operands swap roles.
      const std::size_t amat = static_cast<std::size_t>(ac.h()) * ac.w();
      const std::size_t bmat = static_cast<std::size_t>(bc.h()) * bc.w();
      const bool a_bcast = (ac.n() * ac.c() != d.bn * d.bc);
      const bool b_bcast = (bc.n() * bc.c() != d.bn * d.bc);
      for (std::int64_t bat = 0; bat < static_cast<std::int64_t>(d.bn) * d.bc;
           ++bat) {
        const int in = static_cast<int>(bat / d.bc);
        const int ic = static_cast<int>(bat % d.bc);
        const T* Ab = ac.data() + in * d.a_bstride_n + ic * d.a_bstride_c;
        const T* Bb = bc.data() + in * d.b_bstride_n + ic * d.b_bstride_c;
        const T* Gb = g + static_cast<std::size_t>(bat) * d.p * d.r;
        if (T* ga = ac.grad_data()) {
          T* Gab = ga + (a_bcast ? 0 : (static_cast<std::size_t>(in) * ac.c() +
                                        ic) *
                                           amat);
          if (!ta) {
            // dA[p,q] += G[p,r] * B'[q,r]^T -> gemm(G, B', tb'=!tb flips)
            detail::gemm_rows(false, !tb, d.p, d.r, d.q, Gb, Bb, Gab, true, 0,
                              d.p);
          } else {
            // A stored [q,p]: dA[q,p] += B'[q,r] * G^T
            detail::gemm_rows(tb, true, d.q, d.r, d.p, Bb, Gb, Gab, true, 0,
                              d.q);
          }
        }
        if (T* gb = bc.grad_data()) {
          T* Gbb = gb + (b_bcast ? 0 : (static_cast<std::size_t>(in) * bc.c() +
                                        ic) *
                                           bmat);
          if (!tb) {
            // dB[q,r] += A'[p,q]^T * G[p,r]
            detail::gemm_rows(!ta, false, d.q, d.p, d.r, Ab, Gb, Gbb, true, 0,
                              d.q);
          } else {
            // B stored [r,q]: dB[r,q] += G^T[r,p] * A'[p,q]
            detail::gemm_rows(true, ta, d.r, d.p, d.q, Gb, Ab, Gbb, true, 0,
                              d.r);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Token view: [N,C,H,W] <-> [N,1,H*W,C]. Pure data movement.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x) {
  const int N = x.n(), C = x.c(), H = x.h(), W = x.w();
  Tensor<T> out({N, 1, H * W, C});
  const T* xd = x.data();
  T* od = out.data();
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  for (int in = 0; in < N; ++in)
    for (int c = 0; c < C; ++c) {
      const T* src = xd + (static_cast<std::size_t>(in) * C + c) * hw;
      T* dst = od + static_cast<std::size_t>(in) * hw * C + c;
      for (std::size_t t = 0; t < hw; ++t) dst[t * C] = src[t];
    }
  auto st = ad::merge_tapes<T>({&x});
  if (st) {
    ad::attach(st, out);
    Tensor<T> xc = x, oc = out;
    ad::record<T>(st, [xc, oc]() mutable {
      T* gx = xc.grad_data();
      if (!gx) return;
      const int N2 = xc.n(), C2 = xc.c();
      const std::size_t hw2 = static_cast<std::size_t>(xc.h()) * xc.w();
      const T* g = oc.grad_data();
      for (int in = 0; in < N2; ++in)
        for (int c = 0; c < C2; ++c) {
          T* dst = gx + (static_cast<std::size_t>(in) * C2 + c) * hw2;
          const T* src = g + static_cast<std::size_t>(in) * hw2 * C2 + c;
          for (std::size_t t = 0; t < hw2; ++t) dst[t] += src[t * C2];
        }
    });
  }
  return out;
}

template <typename T>
Tensor<T> from_tokens(const Tensor<T>& x, int h, int w) {
  const int N = x.n(), C = x.w();
  if (x.c() != 1 || x.h() != h * w)
    throw ShapeError("from_tokens expects [N,1," + std::to_string(h * w) +
                     ",C], got " + x.shape().str());
  Tensor<T> out({N, C, h, w});
  const T* xd = x.data();
  T* od = out.data();
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int in = 0; in < N; ++in)
    for (int c = 0; c < C; ++c) {
      const T* src = xd + static_cast<std::size_t>(in) * hw * C + c;
      T* dst = od + (static_cast<std::size_t>(in) * C + c) * hw;
      for (std::size_t t = 0; t < hw; ++t) dst[t] = src[t * C];
    }
  auto st = ad::merge_tapes<T>({&x});
  if (st) {
    ad::attach(st, out);
    Tensor<T> xc = x, oc = out;
    ad::record<T>(st, [xc, oc]() mutable {
      T* gx = xc.grad_data();
      if (!gx) return;
      const int N2 = oc.n(), C2 = oc.c();
      const std::size_t hw2 = static_cast<std::size_t>(oc.h()) * oc.w();
      const T* g = oc.grad_data();
      for (int in = 0; in < N2; ++in)
        for (int c = 0; c < C2; ++c) {
          T* dst = gx + static_cast<std::size_t>(in) * hw2 * C2 + c;
          const T* src = g + (static_cast<std::size_t>(in) * C2 + c) * hw2;
          for (std::size_t t = 0; t < hw2; ++t) dst[t * C2] += src[t];
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Axis slice [a, b) and n-ary concat along one axis. Pure data movement.
// ---------------------------------------------------------------------------

namespace detail {

// walks every element of `shape`, reporting (dst_index, src_index) where the
// source coordinate on `axis` is shifted by `offset` inside `src_shape`
template <typename Fn>
void for_each_shifted(const Shape& shape, const Shape& src_shape, int axis,
                      int offset, Fn&& fn) {
  const auto sst = strides_of(src_shape);
  std::size_t dst = 0;
  int coord[4];
  for (coord[0] = 0; coord[0] < shape.n; ++coord[0])
    for (coord[1] = 0; coord[1] < shape.c; ++coord[1])
      for (coord[2] = 0; coord[2] < shape.h; ++coord[2])
        for (coord[3] = 0; coord[3] < shape.w; ++coord[3], ++dst) {
          std::size_t src = 0;
          for (int k = 0; k < 4; ++k)
            src += (static_cast<std::size_t>(coord[k]) +
                    (k == axis ? offset : 0)) *
                   sst[k];
          fn(dst, src);
        }
}

}  // namespace detail

template <typename T>
Tensor<T> slice_axis(const Tensor<T>& x, int axis, int a, int b) {
  if (axis < 0 || axis > 3) throw ConfigError("slice axis out of range");
  if (a < 0 || b > x.shape().dim(axis) || a >= b)
    throw ShapeError("slice range [" + std::to_string(a) + "," +
                     std::to_string(b) + ") invalid for " + x.shape().str());
  Shape os = x.shape();
  os.set_dim(axis, b - a);
  Tensor<T> out(os);
  const T* xd = x.data();
  T* od = out.data();
  detail::for_each_shifted(os, x.shape(), axis, a,
                           [&](std::size_t dst, std::size_t src) {
                             od[dst] = xd[src];
                           });
  auto st = ad::merge_tapes<T>({&x});
  if (st) {
    ad::attach(st, out);
    Tensor<T> xc = x, oc = out;
    ad::record<T>(st, [xc, oc, axis, a]() mutable {
      T* gx = xc.grad_data();
      if (!gx) return;
      const T* g = oc.grad_data();
      detail::for_each_shifted(oc.shape(), xc.shape(), axis, a,
                               [&](std::size_t dst, std::size_t src) {
                                 gx[src] += g[dst];
                               });
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1) {
  return slice_axis(x, 1, c0, c1);
}

template <typename T>
Tensor<T> concat_axis(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  if (axis < 0 || axis > 3) throw ConfigError("concat axis out of range");
  Shape os = parts[0].shape();
  int total = os.dim(axis);
  for (std::size_t i = 1; i < parts.size(); ++i) {
    Shape ps = parts[i].shape();
    const int extent = ps.dim(axis);
    ps.set_dim(axis, os.dim(axis));
    if (ps != os)
      throw ShapeError("concat parts disagree outside the concat axis");
    total += extent;
  }
  os.set_dim(axis, total);
  Tensor<T> out(os);
  T* od = out.data();
  int offset = 0;
  for (const auto& part : parts) {
    const T* pd = part.data();
    detail::for_each_shifted(part.shape(), os, axis, offset,
                             [&](std::size_t src, std::size_t dst) {
                               od[dst] = pd[src];
                             });
    offset += part.shape().dim(axis);
  }
  std::vector<const Tensor<T>*> ptrs;
  for (const auto& p : parts) ptrs.push_back(&p);
  std::shared_ptr<TapeState<T>> st;
  for (const auto* p : ptrs) {
    auto s = p->tape_state();
    if (!s) continue;
    if (!st)
      st = s;
    else if (st != s)
      throw UsageError("concat mixes tensors from two different tapes");
  }
  if (st) {
    ad::attach(st, out);
    std::vector<Tensor<T>> pc = parts;
    Tensor<T> oc = out;
    ad::record<T>(st, [pc, oc, axis]() mutable {
      const T* g = oc.grad_data();
      int off = 0;
      for (auto& part : pc) {
        T* gp = part.grad_data();
        if (gp) {
          detail::for_each_shifted(part.shape(), oc.shape(), axis, off,
                                   [&](std::size_t src, std::size_t dst) {
                                     gp[src] += g[dst];
                                   });
        }
        off += part.shape().dim(axis);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layer normalization over channels (per pixel) or over the token feature
// axis, with learnable scale/shift.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> layer_norm_lines(const Tensor<T>& x, const Tensor<T>& gamma,
                           const Tensor<T>& beta, double eps, int axis) {
  Tensor<T> out(x.shape());
  std::size_t count, stride;
  std::vector<std::size_t> bases;
  line_geometry(x.shape(), axis, count, stride, bases);
  if (gamma.size() != count || beta.size() != count)
    throw ShapeError("layer norm params must have " + std::to_string(count) +
                     " elements");
  auto stats = std::make_shared<std::vector<T>>(bases.size() * 2);
  const T* xd = x.data();
  const T* gm = gamma.data();
  const T* bt = beta.data();
  T* od = out.data();
  parallel_for(static_cast<std::int64_t>(bases.size()),
               [&](std::int64_t lo, std::int64_t hi) {
                 for (std::int64_t bi = lo; bi < hi; ++bi) {
                   const std::size_t base = bases[bi];
                   T mean = 0;
                   for (std::size_t k = 0; k < count; ++k)
                     mean += xd[base + k * stride];
                   mean /= static_cast<T>(count);
                   T var = 0;
                   for (std::size_t k = 0; k < count; ++k) {
                     const T dv = xd[base + k * stride] - mean;
                     var += dv * dv;
                   }
                   var /= static_cast<T>(count);
                   const T invstd = T(1) / std::sqrt(var + static_cast<T>(eps));
                   (*stats)[2 * bi] = mean;
                   (*stats)[2 * bi + 1] = invstd;
                   for (std::size_t k = 0; k < count; ++k) {
                     const T y = (xd[base + k * stride] - mean) * invstd;
                     od[base + k * stride] = gm[k] * y + bt[k];
                   }
                 }
               },
               static_cast<std::int64_t>(count) * 6);
  count_elems(out.size());
  auto st = ad::merge_tapes<T>({&x, &gamma, &beta});
  if (st) {
    ad::attach(st, out);
    Tensor<T> xc = x, gc = gamma, bc = beta, oc = out;
    ad::record<T>(st, [xc, gc, bc, oc, stats, axis]() mutable {
      std::size_t count2, stride2;
      std::vector<std::size_t> bases2;
      line_geometry(xc.shape(), axis, count2, stride2, bases2);
      const T* g = oc.grad_data();
      const T* xd2 = xc.data();
      const T* gm2 = gc.data();
      T* gx = xc.grad_data();
      T* gg = gc.grad_data();
      T* gb = bc.grad_data();
      for (std::size_t bi = 0; bi < bases2.size(); ++bi) {
        const std::size_t base = bases2[bi];
        const T mean = (*stats)[2 * bi];
        const T invstd = (*stats)[2 * bi + 1];
        T mean_a = 0, mean_ay = 0;
        for (std::size_t k = 0; k < count2; ++k) {
          const std::size_t i = base + k * stride2;
          const T y = (xd2[i] - mean) * invstd;
          const T a = gm2[k] * g[i];
          mean_a += a;
          mean_ay += a * y;
          if (gg) gg[k] += g[i] * y;
          if (gb) gb[k] += g[i];
        }
        mean_a /= static_cast<T>(count2);
        mean_ay /= static_cast<T>(count2);
        if (gx) {
          for (std::size_t k = 0; k < count2; ++k) {
            const std::size_t i = base + k * stride2;
            const T y = (xd2[i] - mean) * invstd;
            gx[i] += invstd * (gm2[k] * g[i] - mean_a - y * mean_ay);
          }
        }
      }
    });
  }
  return out;
}

}  // namespace detail

// gamma/beta shaped [1,C,1,1]
template <typename T>
Tensor<T> layer_norm_channels(const Tensor<T>& x, const Tensor<T>& gamma,
                              const Tensor<T>& beta, double eps = 1e-5) {
  return detail::layer_norm_lines(x, gamma, beta, eps, 1);
}

// token view [N,1,n,d]; gamma/beta shaped [1,1,1,d]
template <typename T>
Tensor<T> layer_norm_tokens(const Tensor<T>& x, const Tensor<T>& gamma,
                            const Tensor<T>& beta, double eps = 1e-5) {
  return detail::layer_norm_lines(x, gamma, beta, eps, 3);
}

// ---------------------------------------------------------------------------
// Pixelwise cross entropy against integer labels, mean over N*H*W.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> cross_entropy_channels(const Tensor<T>& logits,
                                 const LabelMap& labels) {
  const int N = logits.n(), K = logits.c(), H = logits.h(), W = logits.w();
  if (labels.n != N || labels.h != H || labels.w != W)
    throw ShapeError("label map shape does not match logits");
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  const T* ld = logits.data();
  double total = 0;
  for (int in = 0; in < N; ++in)
    for (std::size_t pix = 0; pix < hw; ++pix) {
      const std::int32_t lab = labels.v[static_cast<std::size_t>(in) * hw + pix];
      if (lab < 0 || lab >= K)
        throw DataError("label " + std::to_string(lab) +
                        " out of range for " + std::to_string(K) + " classes");
      const T* base = ld + static_cast<std::size_t>(in) * K * hw + pix;
      T mx = base[0];
      for (int k = 1; k < K; ++k)
        mx = std::max(mx, base[static_cast<std::size_t>(k) * hw]);
      double lse = 0;
      for (int k = 0; k < K; ++k)
        lse += std::exp(static_cast<double>(base[static_cast<std::size_t>(k) * hw] - mx));
      lse = std::log(lse) + static_cast<double>(mx);
      total += lse - static_cast<double>(base[static_cast<std::size_t>(lab) * hw]);
    }
  const double denom = static_cast<double>(N) * hw;
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / denom));
  count_elems(logits.size());
  auto st = ad::merge_tapes<T>({&logits});
  if (st) {
    ad::attach(st, out);
    Tensor<T> lc = logits, oc = out;
    auto labs = std::make_shared<LabelMap>(labels);
    ad::record<T>(st, [lc, oc, labs]() mutable {
      T* gl = lc.grad_data();
      if (!gl) return;
      const int N2 = lc.n(), K2 = lc.c(), H2 = lc.h(), W2 = lc.w();
      const std::size_t hw2 = static_cast<std::size_t>(H2) * W2;
      const T gscale =
          oc.grad_data()[0] / static_cast<T>(static_cast<double>(N2) * hw2);
      const T* ld2 = lc.data();
      for (int in = 0; in < N2; ++in)
        for (std::size_t pix = 0; pix < hw2; ++pix) {
          const T* base = ld2 + static_cast<std::size_t>(in) * K2 * hw2 + pix;
          T* gbase = gl + static_cast<std::size_t>(in) * K2 * hw2 + pix;
          T mx = base[0];
          for (int k = 1; k < K2; ++k)
            mx = std::max(mx, base[static_cast<std::size_t>(k) * hw2]);
          T sum = 0;
          for (int k = 0; k < K2; ++k)
            sum += std::exp(base[static_cast<std::size_t>(k) * hw2] - mx);
          const std::int32_t lab =
              labs->v[static_cast<std::size_t>(in) * hw2 + pix];
          for (int k = 0; k < K2; ++k) {
            const T p = std::exp(base[static_cast<std::size_t>(k) * hw2] - mx) / sum;
            gbase[static_cast<std::size_t>(k) * hw2] +=
                gscale * (p - (k == lab ? T(1) : T(0)));
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Non-differentiable utilities.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> onehot(const LabelMap& labels, int num_classes) {
  Tensor<T> out({labels.n, num_classes, labels.h, labels.w});
  const std::size_t hw = static_cast<std::size_t>(labels.h) * labels.w;
  for (int in = 0; in < labels.n; ++in)
    for (std::size_t pix = 0; pix < hw; ++pix) {
      const std::int32_t lab = labels.v[static_cast<std::size_t>(in) * hw + pix];
      if (lab < 0 || lab >= num_classes)
        throw DataError("label " + std::to_string(lab) + " out of range");
      out.data()[(static_cast<std::size_t>(in) * num_classes + lab) * hw +
                 pix] = T(1);
    }
  return out;
}

template <typename T>
LabelMap argmax_channels(const Tensor<T>& logits) {
  LabelMap out(logits.n(), logits.h(), logits.w());
  const std::size_t hw = static_cast<std::size_t>(logits.h()) * logits.w();
  const T* ld = logits.data();
  for (int in = 0; in < logits.n(); ++in)
    for (std::size_t pix = 0; pix < hw; ++pix) {
      const T* base = ld + static_cast<std::size_t>(in) * logits.c() * hw + pix;
      int arg = 0;
      T best = base[0];
      for (int k = 1; k < logits.c(); ++k) {
        const T v = base[static_cast<std::size_t>(k) * hw];
        if (v > best) {
          best = v;
          arg = k;
        }
      }
      out.v[static_cast<std::size_t>(in) * hw + pix] = arg;
    }
  return out;
}

}  // namespace msa2net
