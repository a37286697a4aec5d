#pragma once

#include <cstring>
#include <string>
#include <vector>

#include "msa2net/common.hpp"
#include "msa2net/tensor.hpp"

namespace msa2net {

// "same" spatial size for stride 1; the paper only ever implies odd kernels.
inline int same_padding(int k, int dilation = 1) {
  if (k < 1 || k % 2 == 0)
    throw ConfigError("kernel size must be odd and positive, got " +
                      std::to_string(k));
  return dilation * (k - 1) / 2;
}

template <typename T = float>
struct ConvWeights {
  Tensor<T> kernel;  // [C_out, C_in/groups, k, k]
  Tensor<T> bias;    // [1, C_out, 1, 1]; undefined when absent
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int groups = 1;

  int out_channels() const { return kernel.n(); }
  int in_channels() const { return kernel.c() * groups; }
  int ksize() const { return kernel.h(); }
  bool has_bias() const { return bias.defined(); }
  bool depthwise() const {
    return groups == in_channels() && groups == out_channels();
  }

  void validate() const {
    if (!kernel.defined()) throw ConfigError("conv kernel is undefined");
    const int k = kernel.h();
    if (k != kernel.w())
      throw ConfigError("conv kernel must be square, got " +
                        kernel.shape().str());
    if (k % 2 == 0)
      throw ConfigError("even conv kernels are rejected, got k=" +
                        std::to_string(k));
    if (stride < 1 || padding < 0 || dilation < 1 || groups < 1)
      throw ConfigError("invalid conv hyperparameters (stride=" +
                        std::to_string(stride) + ", padding=" +
                        std::to_string(padding) + ", dilation=" +
                        std::to_string(dilation) + ", groups=" +
                        std::to_string(groups) + ")");
    if (out_channels() % groups != 0)
      throw ConfigError("groups must divide C_out");
    if (bias.defined() &&
        bias.shape() != Shape{1, out_channels(), 1, 1})
      throw ConfigError("conv bias must have shape [1,C_out,1,1], got " +
                        bias.shape().str());
  }

  std::size_t parameter_count() const {
    return kernel.size() + (bias.defined() ? bias.size() : 0);
  }
};

template <typename T>
ConvWeights<T> make_conv_weights(int c_in, int c_out, int k, int stride = 1,
                                 int padding = 0, int dilation = 1,
                                 int groups = 1, bool with_bias = true) {
  if (c_in < 1 || c_out < 1 || c_in % groups != 0 || c_out % groups != 0)
    throw ConfigError("groups must divide both C_in and C_out");
  ConvWeights<T> w;
  w.kernel = Tensor<T>({c_out, c_in / groups, k, k});
  if (with_bias) w.bias = Tensor<T>({1, c_out, 1, 1});
  w.stride = stride;
  w.padding = padding;
  w.dilation = dilation;
  w.groups = groups;
  w.validate();
  return w;
}

template <typename T>
void kaiming_init(ConvWeights<T>& w, Rng& rng) {
  const double fan_in =
      static_cast<double>(w.kernel.c()) * w.ksize() * w.ksize();
  const double bound = std::sqrt(6.0 / fan_in);
  for (auto& v : w.kernel.vec()) v = static_cast<T>(rng.uniform(-bound, bound));
  if (w.bias.defined())
    std::fill(w.bias.vec().begin(), w.bias.vec().end(), T(0));
}

namespace detail {

template <typename T>
struct ConvDims {
  int n, ci, h, w, co, ci_g, co_g, k, s, p, d, ho, wo, hp, wp;
};

template <typename T>
ConvDims<T> conv_dims(const Tensor<T>& x, const ConvWeights<T>& w) {
  w.validate();
  if (x.c() != w.in_channels())
    throw ConfigError("conv input has " + std::to_string(x.c()) +
                      " channels, weights expect " +
                      std::to_string(w.in_channels()));
  ConvDims<T> dm;
  dm.n = x.n();
  dm.ci = x.c();
  dm.h = x.h();
  dm.w = x.w();
  dm.co = w.out_channels();
  dm.ci_g = w.kernel.c();
  dm.co_g = dm.co / w.groups;
  dm.k = w.ksize();
  dm.s = w.stride;
  dm.p = w.padding;
  dm.d = w.dilation;
  const int span = dm.d * (dm.k - 1) + 1;
  dm.ho = (dm.h + 2 * dm.p - span) / dm.s + 1;
  dm.wo = (dm.w + 2 * dm.p - span) / dm.s + 1;
  if (dm.h + 2 * dm.p < span || dm.w + 2 * dm.p < span || dm.ho < 1 ||
      dm.wo < 1)
    throw ConfigError("conv output would be empty for input " +
                      x.shape().str());
  dm.hp = dm.h + 2 * dm.p;
  dm.wp = dm.w + 2 * dm.p;
  return dm;
}

// zero-padded copy of all planes: [N, Ci, Hp, Wp]
template <typename T>
std::vector<T> pad_input(const T* x, int n, int ci, int h, int w, int p) {
  const int hp = h + 2 * p, wp = w + 2 * p;
  std::vector<T> out(static_cast<std::size_t>(n) * ci * hp * wp, T(0));
  for (int in = 0; in < n; ++in)
    for (int c = 0; c < ci; ++c) {
      const T* src = x + (static_cast<std::size_t>(in) * ci + c) * h * w;
      T* dst = out.data() +
               ((static_cast<std::size_t>(in) * ci + c) * hp + p) * wp + p;
      for (int i = 0; i < h; ++i)
        std::memcpy(dst + static_cast<std::size_t>(i) * wp, src + static_cast<std::size_t>(i) * w,
                    sizeof(T) * w);
    }
  return out;
}

// out[n,o,:,:] = bias[o] + sum over group-restricted c,u,v
template <typename T>
void conv_forward_kernel(const ConvDims<T>& dm, const std::vector<T>& pad,
                         const T* kernel, const T* bias, T* out,
                         bool accumulate = false) {
  const std::size_t plane_in = static_cast<std::size_t>(dm.hp) * dm.wp;
  const std::size_t plane_out = static_cast<std::size_t>(dm.ho) * dm.wo;
  const std::int64_t cost =
      static_cast<std::int64_t>(dm.ci_g) * dm.k * dm.k * plane_out;
  parallel_for(static_cast<std::int64_t>(dm.n) * dm.co, [&](std::int64_t lo,
                                                            std::int64_t hi) {
    for (std::int64_t no = lo; no < hi; ++no) {
      const int in = static_cast<int>(no / dm.co);
      const int o = static_cast<int>(no % dm.co);
      const int grp = o / dm.co_g;
      T* oplane = out + no * plane_out;
      if (!accumulate) {
        const T bv = bias ? bias[o] : T(0);
        for (std::size_t i = 0; i < plane_out; ++i) oplane[i] = bv;
      }
      const T* kbase =
          kernel + static_cast<std::size_t>(o) * dm.ci_g * dm.k * dm.k;
      for (int c2 = 0; c2 < dm.ci_g; ++c2) {
        const T* iplane =
            pad.data() +
            (static_cast<std::size_t>(in) * dm.ci + grp * dm.ci_g + c2) *
                plane_in;
        const T* kc = kbase + static_cast<std::size_t>(c2) * dm.k * dm.k;
        for (int i = 0; i < dm.ho; ++i) {
          T* orow = oplane + static_cast<std::size_t>(i) * dm.wo;
          for (int u = 0; u < dm.k; ++u) {
            const T* irow =
                iplane + static_cast<std::size_t>(i * dm.s + u * dm.d) * dm.wp;
            for (int v = 0; v < dm.k; ++v) {
              const T wt = kc[u * dm.k + v];
              const T* __restrict ip = irow + v * dm.d;
              T* __restrict op = orow;
              if (dm.s == 1) {
                for (int j = 0; j < dm.wo; ++j) op[j] += wt * ip[j];
              } else {
                for (int j = 0; j < dm.wo; ++j) op[j] += wt * ip[j * dm.s];
              }
            }
          }
        }
      }
    }
  });
}

// pointwise conv, stride 1, no padding: per group a [co_g, ci_g] x [ci_g, HW]
// product. Output channels are processed four at a time so each input row is
// read once per block.
template <typename T>
void conv1x1_forward_kernel(const ConvDims<T>& dm, const T* x, const T* kernel,
                            const T* bias, T* out) {
  const std::size_t hw = static_cast<std::size_t>(dm.h) * dm.w;
  const int blocks_per_group = (dm.co_g + 3) / 4;
  const std::int64_t items =
      static_cast<std::int64_t>(dm.n) * (dm.co / dm.co_g) * blocks_per_group;
  parallel_for(
      items,
      [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t item = lo; item < hi; ++item) {
          const int blk = static_cast<int>(item % blocks_per_group);
          const int rest = static_cast<int>(item / blocks_per_group);
          const int grp = rest % (dm.co / dm.co_g);
          const int in = rest / (dm.co / dm.co_g);
          const int o0 = grp * dm.co_g + blk * 4;
          const int nb = std::min(4, grp * dm.co_g + dm.co_g - o0);
          const T* xbase =
              x + (static_cast<std::size_t>(in) * dm.ci + grp * dm.ci_g) * hw;
          T* orow[4];
          for (int b = 0; b < nb; ++b) {
            orow[b] = out + (static_cast<std::size_t>(in) * dm.co + o0 + b) * hw;
            const T bv = bias ? bias[o0 + b] : T(0);
            for (std::size_t i = 0; i < hw; ++i) orow[b][i] = bv;
          }
          if (nb == 4) {
            T* __restrict o0p = orow[0];
            T* __restrict o1p = orow[1];
            T* __restrict o2p = orow[2];
            T* __restrict o3p = orow[3];
            for (int c2 = 0; c2 < dm.ci_g; ++c2) {
              const T* __restrict xrow = xbase + static_cast<std::size_t>(c2) * hw;
              const T w0 = kernel[static_cast<std::size_t>(o0) * dm.ci_g + c2];
              const T w1 = kernel[static_cast<std::size_t>(o0 + 1) * dm.ci_g + c2];
              const T w2 = kernel[static_cast<std::size_t>(o0 + 2) * dm.ci_g + c2];
              const T w3 = kernel[static_cast<std::size_t>(o0 + 3) * dm.ci_g + c2];
              for (std::size_t i = 0; i < hw; ++i) {
                const T xv = xrow[i];
                o0p[i] += w0 * xv;
                o1p[i] += w1 * xv;
                o2p[i] += w2 * xv;
                o3p[i] += w3 * xv;
              }
            }
          } else {
            for (int c2 = 0; c2 < dm.ci_g; ++c2) {
              const T* xrow = xbase + static_cast<std::size_t>(c2) * hw;
              for (int b = 0; b < nb; ++b) {
                const T wt =
                    kernel[static_cast<std::size_t>(o0 + b) * dm.ci_g + c2];
                for (std::size_t i = 0; i < hw; ++i) orow[b][i] += wt * xrow[i];
              }
            }
          }
        }
      },
      static_cast<std::int64_t>(dm.ci_g) * hw * 4);
}

template <typename T>
void conv_backward_kernel(const ConvDims<T>& dm, const Tensor<T>& x,
                          const Tensor<T>& kernel, T* gx, T* gk, T* gb,
                          const T* gout) {
  const std::size_t plane_out = static_cast<std::size_t>(dm.ho) * dm.wo;
  if (gb) {
    parallel_for(
        dm.co,
        [&](std::int64_t lo, std::int64_t hi) {
          for (std::int64_t o = lo; o < hi; ++o) {
            T acc = 0;
            for (int in = 0; in < dm.n; ++in) {
              const T* g =
                  gout + (static_cast<std::size_t>(in) * dm.co + o) * plane_out;
              for (std::size_t i = 0; i < plane_out; ++i) acc += g[i];
            }
            gb[o] += acc;
          }
        },
        static_cast<std::int64_t>(dm.n) * plane_out);
  }
  const bool pointwise = (dm.k == 1 && dm.s == 1 && dm.p == 0);
  const std::size_t hw = static_cast<std::size_t>(dm.h) * dm.w;
  if (pointwise) {
    if (gk) {
      // dW[o, c] = sum_p g[o,p] * x[c,p]; four input channels per pass
      parallel_for(
          dm.co,
          [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t o = lo; o < hi; ++o) {
              const int grp = static_cast<int>(o) / dm.co_g;
              T* krow = gk + static_cast<std::size_t>(o) * dm.ci_g;
              for (int in = 0; in < dm.n; ++in) {
                const T* g =
                    gout + (static_cast<std::size_t>(in) * dm.co + o) * hw;
                const T* xbase = x.data() + (static_cast<std::size_t>(in) * dm.ci +
                                             grp * dm.ci_g) *
                                                hw;
                int c2 = 0;
                for (; c2 + 4 <= dm.ci_g; c2 += 4) {
                  const T* __restrict x0 = xbase + static_cast<std::size_t>(c2) * hw;
                  const T* __restrict x1 = x0 + hw;
                  const T* __restrict x2 = x1 + hw;
                  const T* __restrict x3 = x2 + hw;
                  T a0 = 0, a1 = 0, a2 = 0, a3 = 0;
                  for (std::size_t i = 0; i < hw; ++i) {
                    const T gv = g[i];
                    a0 += gv * x0[i];
                    a1 += gv * x1[i];
                    a2 += gv * x2[i];
                    a3 += gv * x3[i];
                  }
                  krow[c2] += a0;
                  krow[c2 + 1] += a1;
                  krow[c2 + 2] += a2;
                  krow[c2 + 3] += a3;
                }
                for (; c2 < dm.ci_g; ++c2) {
                  const T* xrow = xbase + static_cast<std::size_t>(c2) * hw;
                  T acc = 0;
                  for (std::size_t i = 0; i < hw; ++i) acc += g[i] * xrow[i];
                  krow[c2] += acc;
                }
              }
            }
          },
          static_cast<std::int64_t>(dm.n) * dm.ci_g * hw * 2);
    }
    if (gx) {
      // dx[c, p] += sum_o w[o,c] * g[o,p]; four input channels per pass
      const int blocks_per_group = (dm.ci_g + 3) / 4;
      const std::int64_t items = static_cast<std::int64_t>(dm.n) *
                                 (dm.ci / dm.ci_g) * blocks_per_group;
      parallel_for(
          items,
          [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t item = lo; item < hi; ++item) {
              const int blk = static_cast<int>(item % blocks_per_group);
              const int rest = static_cast<int>(item / blocks_per_group);
              const int grp = rest % (dm.ci / dm.ci_g);
              const int in = rest / (dm.ci / dm.ci_g);
              const int c0 = grp * dm.ci_g + blk * 4;
              const int nb = std::min(4, grp * dm.ci_g + dm.ci_g - c0);
              T* gxrow[4];
              for (int b = 0; b < nb; ++b)
                gxrow[b] =
                    gx + (static_cast<std::size_t>(in) * dm.ci + c0 + b) * hw;
              for (int o2 = 0; o2 < dm.co_g; ++o2) {
                const int o = grp * dm.co_g + o2;
                const T* g =
                    gout + (static_cast<std::size_t>(in) * dm.co + o) * hw;
                const T* krow =
                    kernel.data() + static_cast<std::size_t>(o) * dm.ci_g;
                const int c2base = blk * 4;
                if (nb == 4) {
                  const T w0 = krow[c2base];
                  const T w1 = krow[c2base + 1];
                  const T w2 = krow[c2base + 2];
                  const T w3 = krow[c2base + 3];
                  T* __restrict g0 = gxrow[0];
                  T* __restrict g1 = gxrow[1];
                  T* __restrict g2 = gxrow[2];
                  T* __restrict g3 = gxrow[3];
                  const T* __restrict gr = g;
                  for (std::size_t i = 0; i < hw; ++i) {
                    const T gv = gr[i];
                    g0[i] += w0 * gv;
                    g1[i] += w1 * gv;
                    g2[i] += w2 * gv;
                    g3[i] += w3 * gv;
                  }
                } else {
                  for (int b = 0; b < nb; ++b) {
                    const T wt = krow[c2base + b];
                    for (std::size_t i = 0; i < hw; ++i)
                      gxrow[b][i] += wt * g[i];
                  }
                }
              }
            }
          },
          static_cast<std::int64_t>(dm.co_g) * hw * 4);
    }
    return;
  }

  const std::size_t plane_in = static_cast<std::size_t>(dm.hp) * dm.wp;
  if (gk) {
    const std::vector<T> pad =
        pad_input(x.data(), dm.n, dm.ci, dm.h, dm.w, dm.p);
    const std::int64_t cost = static_cast<std::int64_t>(dm.n) * dm.ci_g *
                              dm.k * dm.k * plane_out;
    parallel_for(dm.co, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t o = lo; o < hi; ++o) {
        const int grp = static_cast<int>(o) / dm.co_g;
        T* kbase = gk + static_cast<std::size_t>(o) * dm.ci_g * dm.k * dm.k;
        for (int in = 0; in < dm.n; ++in) {
          const T* g =
              gout + (static_cast<std::size_t>(in) * dm.co + o) * plane_out;
          for (int c2 = 0; c2 < dm.ci_g; ++c2) {
            const T* iplane =
                pad.data() +
                (static_cast<std::size_t>(in) * dm.ci + grp * dm.ci_g + c2) *
                    plane_in;
            T* kc = kbase + static_cast<std::size_t>(c2) * dm.k * dm.k;
            for (int u = 0; u < dm.k; ++u)
              for (int v = 0; v < dm.k; ++v) {
                T acc = 0;
                for (int i = 0; i < dm.ho; ++i) {
                  const T* __restrict irow =
                      iplane +
                      static_cast<std::size_t>(i * dm.s + u * dm.d) * dm.wp +
                      v * dm.d;
                  const T* __restrict grow = g + static_cast<std::size_t>(i) * dm.wo;
                  if (dm.s == 1) {
                    for (int j = 0; j < dm.wo; ++j) acc += grow[j] * irow[j];
                  } else {
                    for (int j = 0; j < dm.wo; ++j) acc += grow[j] * irow[j * dm.s];
                  }
                }
                kc[u * dm.k + v] += acc;
              }
          }
        }
      }
    }, cost);
  }
  if (gx && dm.s == 1 && dm.d * (dm.k - 1) - dm.p >= 0) {
    // input grad of a stride-1 correlation is itself a correlation of the
    // output grad with the flipped, channel-transposed kernel
    const int groups = dm.co / dm.co_g;
    std::vector<T> kt(static_cast<std::size_t>(dm.ci) * dm.co_g * dm.k * dm.k);
    for (int grp = 0; grp < groups; ++grp)
      for (int c2 = 0; c2 < dm.ci_g; ++c2)
        for (int o2 = 0; o2 < dm.co_g; ++o2)
          for (int u = 0; u < dm.k; ++u)
            for (int v = 0; v < dm.k; ++v)
              kt[(((static_cast<std::size_t>(grp) * dm.ci_g + c2) * dm.co_g +
                   o2) *
                      dm.k +
                  u) *
                     dm.k +
                 v] =
                  kernel.data()[(((static_cast<std::size_t>(grp) * dm.co_g +
                                   o2) *
                                      dm.ci_g +
                                  c2) *
                                     dm.k +
                                 (dm.k - 1 - u)) *
                                    dm.k +
                                (dm.k - 1 - v)];
    ConvDims<T> tr = dm;
    tr.ci = dm.co;
    tr.co = dm.ci;
    tr.ci_g = dm.co_g;
    tr.co_g = dm.ci_g;
    tr.p = dm.d * (dm.k - 1) - dm.p;
    tr.h = dm.ho;
    tr.w = dm.wo;
    tr.ho = dm.h;
    tr.wo = dm.w;
    tr.hp = dm.ho + 2 * tr.p;
    tr.wp = dm.wo + 2 * tr.p;
    const std::vector<T> gpad =
        pad_input(gout, dm.n, dm.co, dm.ho, dm.wo, tr.p);
    conv_forward_kernel(tr, gpad, kt.data(), static_cast<const T*>(nullptr),
                        gx, true);
    return;
  }
  if (gx) {
    // scatter into a padded grad buffer, then crop the interior
    std::vector<T> gpad(static_cast<std::size_t>(dm.n) * dm.ci * plane_in,
                        T(0));
    const std::int64_t cost_n = static_cast<std::int64_t>(dm.co) * dm.ci_g *
                                dm.k * dm.k * plane_out;
    parallel_for(dm.n, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t in = lo; in < hi; ++in) {
        for (int o = 0; o < dm.co; ++o) {
          const int grp = o / dm.co_g;
          const T* g =
              gout + (static_cast<std::size_t>(in) * dm.co + o) * plane_out;
          const T* kbase =
              kernel.data() + static_cast<std::size_t>(o) * dm.ci_g * dm.k * dm.k;
          for (int c2 = 0; c2 < dm.ci_g; ++c2) {
            T* gplane = gpad.data() +
                        (static_cast<std::size_t>(in) * dm.ci + grp * dm.ci_g +
                         c2) *
                            plane_in;
            const T* kc = kbase + static_cast<std::size_t>(c2) * dm.k * dm.k;
            for (int i = 0; i < dm.ho; ++i) {
              const T* grow = g + static_cast<std::size_t>(i) * dm.wo;
              for (int u = 0; u < dm.k; ++u) {
                T* grow_pad =
                    gplane +
                    static_cast<std::size_t>(i * dm.s + u * dm.d) * dm.wp;
                for (int v = 0; v < dm.k; ++v) {
                  const T wt = kc[u * dm.k + v];
                  T* __restrict gp = grow_pad + v * dm.d;
                  const T* __restrict gr = grow;
                  if (dm.s == 1) {
                    for (int j = 0; j < dm.wo; ++j) gp[j] += wt * gr[j];
                  } else {
                    for (int j = 0; j < dm.wo; ++j) gp[j * dm.s] += wt * gr[j];
                  }
                }
              }
            }
          }
        }
        // crop
        for (int c = 0; c < dm.ci; ++c) {
          const T* src = gpad.data() +
                         ((static_cast<std::size_t>(in) * dm.ci + c) * dm.hp +
                          dm.p) *
                             dm.wp +
                         dm.p;
          T* dst = gx + (static_cast<std::size_t>(in) * dm.ci + c) *
                            static_cast<std::size_t>(dm.h) * dm.w;
          for (int i = 0; i < dm.h; ++i)
            for (int j = 0; j < dm.w; ++j)
              dst[static_cast<std::size_t>(i) * dm.w + j] +=
                  src[static_cast<std::size_t>(i) * dm.wp + j];
        }
      }
    }, cost_n);
  }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvWeights<T>& w) {
  const auto dm = detail::conv_dims(x, w);
  Tensor<T> out({dm.n, dm.co, dm.ho, dm.wo});
  const T* bias = w.has_bias() ? w.bias.data() : nullptr;
  if (dm.k == 1 && dm.s == 1 && dm.p == 0) {
    detail::conv1x1_forward_kernel(dm, x.data(), w.kernel.data(), bias,
                                   out.data());
  } else {
    const std::vector<T> pad =
        detail::pad_input(x.data(), dm.n, dm.ci, dm.h, dm.w, dm.p);
    detail::conv_forward_kernel(dm, pad, w.kernel.data(), bias, out.data());
  }
  count_macs(static_cast<unsigned long long>(dm.n) * dm.co * dm.ci_g * dm.k *
             dm.k * dm.ho * dm.wo);

  auto st = ad::merge_tapes<T>({&x, &w.kernel, &w.bias});
  if (st) {
    ad::attach(st, out);
    Tensor<T> xc = x, kc = w.kernel, bc = w.bias, oc = out;
    ad::record<T>(st, [dm, xc, kc, bc, oc]() mutable {
      detail::conv_backward_kernel(dm, xc, kc, xc.grad_data(), kc.grad_data(),
                                   bc.defined() ? bc.grad_data() : nullptr,
                                   oc.grad_data());
    });
  }
  return out;
}

}  // namespace msa2net
