#pragma once

// Encoder/decoder building blocks: the large-kernel-attention block used in
// the shallow decoder layers, the dual-attention transformer block used in
// the deep ones, the inverted-bottleneck encoder block and the scale
// transitions that align skip and decoder features.

#include <string>
#include <utility>
#include <vector>

#include "msa2net/conv.hpp"
#include "msa2net/ops.hpp"
#include "msa2net/tensor.hpp"

namespace msa2net {

struct BlockConfig {
  int channels = 0;
  int ffn_expand = 4;
  int attn_heads = 1;
  double norm_eps = 1e-5;

  void validate() const {
    if (channels < 1 || ffn_expand < 1 || attn_heads < 1 || norm_eps <= 0)
      throw ConfigError("invalid block configuration");
    if (channels % attn_heads != 0)
      throw ConfigError("channels must be divisible by attn_heads");
  }
};

template <typename T = float>
struct NormParams {
  Tensor<T> scale;
  Tensor<T> shift;

  // scale=1, shift=0
  static NormParams channels(int c) {
    NormParams p;
    p.scale = Tensor<T>::full({1, c, 1, 1}, T(1));
    p.shift = Tensor<T>::zeros({1, c, 1, 1});
    return p;
  }
  static NormParams tokens(int d) {
    NormParams p;
    p.scale = Tensor<T>::full({1, 1, 1, d}, T(1));
    p.shift = Tensor<T>::zeros({1, 1, 1, d});
    return p;
  }
  std::size_t parameter_count() const { return scale.size() + shift.size(); }
};

namespace detail {

template <typename T>
void put_norm(std::vector<std::pair<std::string, Tensor<T>*>>& out,
              const std::string& name, NormParams<T>& p) {
  out.emplace_back(name + ".scale", &p.scale);
  out.emplace_back(name + ".shift", &p.shift);
}

template <typename T>
void put_conv(std::vector<std::pair<std::string, Tensor<T>*>>& out,
              const std::string& name, ConvWeights<T>& w) {
  out.emplace_back(name + ".kernel", &w.kernel);
  if (w.has_bias()) out.emplace_back(name + ".bias", &w.bias);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Large kernel attention: DW 5x5 -> DW-D 7x7 (dilation 3) -> 1x1, gating its
// own input by elementwise product.
// ---------------------------------------------------------------------------

template <typename T = float>
struct LkaAttnParams {
  ConvWeights<T> dw;   // depthwise 5x5
  ConvWeights<T> dwd;  // depthwise 7x7, dilation 3
  ConvWeights<T> pw;   // 1x1

  static LkaAttnParams init(int c, Rng& rng) {
    LkaAttnParams p;
    p.dw = make_conv_weights<T>(c, c, 5, 1, same_padding(5), 1, c);
    p.dwd = make_conv_weights<T>(c, c, 7, 1, same_padding(7, 3), 3, c);
    p.pw = make_conv_weights<T>(c, c, 1);
    kaiming_init(p.dw, rng);
    kaiming_init(p.dwd, rng);
    kaiming_init(p.pw, rng);
    return p;
  }
};

template <typename T>
Tensor<T> lka_attention(const Tensor<T>& x, const LkaAttnParams<T>& p) {
  Tensor<T> attn = conv2d(conv2d(conv2d(x, p.dw), p.dwd), p.pw);
  return mul(attn, x);
}

template <typename T = float>
struct LkaBlockParams {
  NormParams<T> norm1;
  ConvWeights<T> proj_in;
  LkaAttnParams<T> attn;
  ConvWeights<T> proj_out;
  NormParams<T> norm2;
  ConvWeights<T> ffn_in;
  ConvWeights<T> ffn_out;
  double norm_eps = 1e-5;

  static LkaBlockParams init(const BlockConfig& cfg, Rng& rng) {
    cfg.validate();
    const int c = cfg.channels;
    LkaBlockParams p;
    p.norm1 = NormParams<T>::channels(c);
    p.proj_in = make_conv_weights<T>(c, c, 1);
    p.attn = LkaAttnParams<T>::init(c, rng);
    p.proj_out = make_conv_weights<T>(c, c, 1);
    p.norm2 = NormParams<T>::channels(c);
    p.ffn_in = make_conv_weights<T>(c, c * cfg.ffn_expand, 1);
    p.ffn_out = make_conv_weights<T>(c * cfg.ffn_expand, c, 1);
    kaiming_init(p.proj_in, rng);
    kaiming_init(p.ffn_in, rng);
    // residual-branch outputs start at zero: the block begins as identity
    p.norm_eps = cfg.norm_eps;
    return p;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> named_tensors() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    detail::put_norm(out, "norm1", norm1);
    detail::put_conv(out, "proj_in", proj_in);
    detail::put_conv(out, "attn.dw", attn.dw);
    detail::put_conv(out, "attn.dwd", attn.dwd);
    detail::put_conv(out, "attn.pw", attn.pw);
    detail::put_conv(out, "proj_out", proj_out);
    detail::put_norm(out, "norm2", norm2);
    detail::put_conv(out, "ffn_in", ffn_in);
    detail::put_conv(out, "ffn_out", ffn_out);
    return out;
  }
};

template <typename T>
Tensor<T> lka_block(const Tensor<T>& x, const LkaBlockParams<T>& p) {
  Tensor<T> h = layer_norm_channels(x, p.norm1.scale, p.norm1.shift, p.norm_eps);
  h = gelu(conv2d(h, p.proj_in));
  h = conv2d(lka_attention(h, p.attn), p.proj_out);
  Tensor<T> y = add(x, h);
  Tensor<T> f = layer_norm_channels(y, p.norm2.scale, p.norm2.shift, p.norm_eps);
  f = conv2d(gelu(conv2d(f, p.ffn_in)), p.ffn_out);
  return add(y, f);
}

inline OpCost lka_block_cost(int channels, int ffn_expand, int n, int h,
                             int w) {
  const unsigned long long N = n, C = channels, E = ffn_expand;
  const unsigned long long hw = static_cast<unsigned long long>(h) * w;
  const unsigned long long chw = C * hw;
  OpCost cost;
  cost.elems += N * chw;          // norm1
  cost.macs += N * C * C * hw;    // proj_in
  cost.elems += N * chw;          // gelu
  cost.macs += N * C * 25 * hw;   // attn dw 5x5
  cost.macs += N * C * 49 * hw;   // attn dwd 7x7
  cost.macs += N * C * C * hw;    // attn pw
  cost.elems += N * chw;          // attn gating mul
  cost.macs += N * C * C * hw;    // proj_out
  cost.elems += N * chw;          // residual add
  cost.elems += N * chw;          // norm2
  cost.macs += N * E * C * C * hw;  // ffn_in
  cost.elems += N * E * chw;        // gelu
  cost.macs += N * C * E * C * hw;  // ffn_out
  cost.elems += N * chw;            // residual add
  return cost;
}

// ---------------------------------------------------------------------------
// Token-space attention. Inputs are [N,1,n,d] token views.
// ---------------------------------------------------------------------------

template <typename T = float>
struct AttnParams {
  Tensor<T> wq, wk, wv, wo;  // [1,1,d,d]
  Tensor<T> bq, bk, bv, bo;  // [1,1,1,d]
  int heads = 1;

  static AttnParams init(int d, int heads, Rng& rng) {
    AttnParams p;
    p.heads = heads;
    const double bound = std::sqrt(6.0 / d);
    for (Tensor<T>* w : {&p.wq, &p.wk, &p.wv}) {
      *w = Tensor<T>({1, 1, d, d});
      for (auto& v : w->vec()) v = static_cast<T>(rng.uniform(-bound, bound));
    }
    p.wo = Tensor<T>::zeros({1, 1, d, d});  // residual branch starts silent
    for (Tensor<T>* b : {&p.bq, &p.bk, &p.bv, &p.bo})
      *b = Tensor<T>::zeros({1, 1, 1, d});
    return p;
  }
};

namespace detail {

template <typename T>
Tensor<T> token_linear(const Tensor<T>& x, const Tensor<T>& w,
                       const Tensor<T>& b) {
  return add(matmul(x, w), b);
}

template <typename T>
std::vector<Tensor<T>> split_heads(const Tensor<T>& t, int heads) {
  if (heads == 1) return {t};
  const int d = t.w();
  const int dh = d / heads;
  std::vector<Tensor<T>> out;
  out.reserve(heads);
  for (int hh = 0; hh < heads; ++hh)
    out.push_back(slice_axis(t, 3, hh * dh, (hh + 1) * dh));
  return out;
}

template <typename T>
Tensor<T> join_heads(std::vector<Tensor<T>> heads) {
  if (heads.size() == 1) return heads[0];
  return concat_axis(heads, 3);
}

}  // namespace detail

// E = softmax_feat(Q) * (softmax_token(K)^T V); linear in the token count.
template <typename T>
Tensor<T> efficient_attention(const Tensor<T>& x, const AttnParams<T>& p) {
  if (x.c() != 1) throw ShapeError("attention expects a token view [N,1,n,d]");
  Tensor<T> q = detail::token_linear(x, p.wq, p.bq);
  Tensor<T> k = detail::token_linear(x, p.wk, p.bk);
  Tensor<T> v = detail::token_linear(x, p.wv, p.bv);
  auto qh = detail::split_heads(q, p.heads);
  auto kh = detail::split_heads(k, p.heads);
  auto vh = detail::split_heads(v, p.heads);
  std::vector<Tensor<T>> heads;
  heads.reserve(p.heads);
  for (int hh = 0; hh < p.heads; ++hh) {
    Tensor<T> sq = softmax_axis(qh[hh], 3);  // feature axis, per token
    Tensor<T> sk = softmax_axis(kh[hh], 2);  // token axis, per feature
    Tensor<T> ctx = matmul(sk, vh[hh], true, false);  // [d_h, d_h]
    heads.push_back(matmul(sq, ctx));                 // [n, d_h]
  }
  return detail::token_linear(detail::join_heads(std::move(heads)), p.wo,
                              p.bo);
}

// A = row_softmax(K^T Q / sqrt(n)); out = V A.
template <typename T>
Tensor<T> channel_attention(const Tensor<T>& x, const AttnParams<T>& p) {
  if (x.c() != 1) throw ShapeError("attention expects a token view [N,1,n,d]");
  const int n_tokens = x.h();
  Tensor<T> q = detail::token_linear(x, p.wq, p.bq);
  Tensor<T> k = detail::token_linear(x, p.wk, p.bk);
  Tensor<T> v = detail::token_linear(x, p.wv, p.bv);
  auto qh = detail::split_heads(q, p.heads);
  auto kh = detail::split_heads(k, p.heads);
  auto vh = detail::split_heads(v, p.heads);
  const T inv_sqrt_n = static_cast<T>(1.0 / std::sqrt(static_cast<double>(n_tokens)));
  std::vector<Tensor<T>> heads;
  heads.reserve(p.heads);
  for (int hh = 0; hh < p.heads; ++hh) {
    Tensor<T> a = scale(matmul(kh[hh], qh[hh], true, false), inv_sqrt_n);
    a = softmax_axis(a, 3);  // rows sum to 1
    heads.push_back(matmul(vh[hh], a));
  }
  return detail::token_linear(detail::join_heads(std::move(heads)), p.wo,
                              p.bo);
}

inline OpCost attention_cost(bool channel_variant, int d, int heads, int n,
                             int tokens) {
  const unsigned long long N = n, D = d, H = heads, NT = tokens;
  const unsigned long long dh = D / H;
  OpCost cost;
  cost.macs += 3 * N * NT * D * D;  // q, k, v projections
  cost.elems += 3 * N * NT * D;     // their bias adds
  if (!channel_variant) {
    cost.elems += 2 * N * NT * D;       // two softmaxes over head slices
    cost.macs += 2 * N * H * dh * NT * dh;  // k^T v and q * ctx per head
  } else {
    cost.macs += N * H * dh * NT * dh;  // k^T q per head
    cost.elems += N * H * dh * dh;      // 1/sqrt(n) scaling
    cost.elems += N * H * dh * dh;      // row softmax
    cost.macs += N * H * NT * dh * dh;  // v * a per head
  }
  cost.macs += N * NT * D * D;  // output projection
  cost.elems += N * NT * D;     // its bias add
  return cost;
}

// ---------------------------------------------------------------------------
// Token FFN sublayer.
// ---------------------------------------------------------------------------

template <typename T = float>
struct FfnParams {
  Tensor<T> w1, b1;  // [1,1,d,e*d], [1,1,1,e*d]
  Tensor<T> w2, b2;  // [1,1,e*d,d], [1,1,1,d]

  static FfnParams init(int d, int expand, Rng& rng) {
    FfnParams p;
    const int e = d * expand;
    p.w1 = Tensor<T>({1, 1, d, e});
    p.w2 = Tensor<T>({1, 1, e, d});
    const double b1 = std::sqrt(6.0 / d);
    for (auto& v : p.w1.vec()) v = static_cast<T>(rng.uniform(-b1, b1));
    // contraction starts at zero: the FFN sublayer begins as identity
    p.b1 = Tensor<T>::zeros({1, 1, 1, e});
    p.b2 = Tensor<T>::zeros({1, 1, 1, d});
    return p;
  }
};

template <typename T>
Tensor<T> ffn_tokens(const Tensor<T>& x, const FfnParams<T>& p) {
  return detail::token_linear(gelu(detail::token_linear(x, p.w1, p.b1)), p.w2,
                              p.b2);
}

inline OpCost ffn_cost(int d, int expand, int n, int tokens) {
  const unsigned long long N = n, D = d, E = static_cast<unsigned long long>(d) * expand;
  const unsigned long long NT = tokens;
  OpCost cost;
  cost.macs += N * NT * D * E;  // expand
  cost.elems += N * NT * E;     // bias
  cost.elems += N * NT * E;     // gelu
  cost.macs += N * NT * E * D;  // contract
  cost.elems += N * NT * D;     // bias
  return cost;
}

// ---------------------------------------------------------------------------
// Dual-attention transformer block: efficient attention then channel
// attention, each pre-norm with its own residual FFN; token width d = C.
// ---------------------------------------------------------------------------

template <typename T = float>
struct DaeBlockParams {
  NormParams<T> norm1;
  AttnParams<T> efficient;
  NormParams<T> norm2;
  FfnParams<T> ffn1;
  NormParams<T> norm3;
  AttnParams<T> channel;
  NormParams<T> norm4;
  FfnParams<T> ffn2;
  double norm_eps = 1e-5;

  static DaeBlockParams init(const BlockConfig& cfg, Rng& rng) {
    cfg.validate();
    const int d = cfg.channels;
    DaeBlockParams p;
    p.norm1 = NormParams<T>::tokens(d);
    p.efficient = AttnParams<T>::init(d, cfg.attn_heads, rng);
    p.norm2 = NormParams<T>::tokens(d);
    p.ffn1 = FfnParams<T>::init(d, cfg.ffn_expand, rng);
    p.norm3 = NormParams<T>::tokens(d);
    p.channel = AttnParams<T>::init(d, cfg.attn_heads, rng);
    p.norm4 = NormParams<T>::tokens(d);
    p.ffn2 = FfnParams<T>::init(d, cfg.ffn_expand, rng);
    p.norm_eps = cfg.norm_eps;
    return p;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> named_tensors() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    auto put_attn = [&](const std::string& name, AttnParams<T>& a) {
      out.emplace_back(name + ".wq", &a.wq);
      out.emplace_back(name + ".bq", &a.bq);
      out.emplace_back(name + ".wk", &a.wk);
      out.emplace_back(name + ".bk", &a.bk);
      out.emplace_back(name + ".wv", &a.wv);
      out.emplace_back(name + ".bv", &a.bv);
      out.emplace_back(name + ".wo", &a.wo);
      out.emplace_back(name + ".bo", &a.bo);
    };
    auto put_ffn = [&](const std::string& name, FfnParams<T>& f) {
      out.emplace_back(name + ".w1", &f.w1);
      out.emplace_back(name + ".b1", &f.b1);
      out.emplace_back(name + ".w2", &f.w2);
      out.emplace_back(name + ".b2", &f.b2);
    };
    detail::put_norm(out, "norm1", norm1);
    put_attn("efficient", efficient);
    detail::put_norm(out, "norm2", norm2);
    put_ffn("ffn1", ffn1);
    detail::put_norm(out, "norm3", norm3);
    put_attn("channel", channel);
    detail::put_norm(out, "norm4", norm4);
    put_ffn("ffn2", ffn2);
    return out;
  }
};

template <typename T>
Tensor<T> dae_block(const Tensor<T>& x, const DaeBlockParams<T>& p) {
  const int h = x.h(), w = x.w();
  Tensor<T> t = to_tokens(x);
  t = add(t, efficient_attention(
                 layer_norm_tokens(t, p.norm1.scale, p.norm1.shift, p.norm_eps),
                 p.efficient));
  t = add(t, ffn_tokens(layer_norm_tokens(t, p.norm2.scale, p.norm2.shift,
                                          p.norm_eps),
                        p.ffn1));
  t = add(t, channel_attention(
                 layer_norm_tokens(t, p.norm3.scale, p.norm3.shift, p.norm_eps),
                 p.channel));
  t = add(t, ffn_tokens(layer_norm_tokens(t, p.norm4.scale, p.norm4.shift,
                                          p.norm_eps),
                        p.ffn2));
  return from_tokens(t, h, w);
}

inline OpCost dae_block_cost(int channels, int ffn_expand, int heads, int n,
                             int h, int w) {
  const int tokens = h * w;
  const unsigned long long per_sublayer =
      static_cast<unsigned long long>(n) * tokens * channels;
  OpCost cost;
  cost.elems += 4 * per_sublayer;  // four pre-norms
  cost.elems += 4 * per_sublayer;  // four residual adds
  cost += attention_cost(false, channels, heads, n, tokens);
  cost += ffn_cost(channels, ffn_expand, n, tokens);
  cost += attention_cost(true, channels, heads, n, tokens);
  cost += ffn_cost(channels, ffn_expand, n, tokens);
  return cost;
}

// ---------------------------------------------------------------------------
// Inverted-bottleneck encoder block; the stride-2 variant halves H,W and may
// change the channel count (residual dropped when the shape changes).
// ---------------------------------------------------------------------------

template <typename T = float>
struct MbconvParams {
  NormParams<T> norm;
  ConvWeights<T> expand;    // 1x1, C_in -> 4*C_in
  ConvWeights<T> dw;        // 3x3 depthwise, stride 1 or 2
  ConvWeights<T> contract;  // 1x1, 4*C_in -> C_out
  int stride = 1;
  double norm_eps = 1e-5;

  static MbconvParams init(int c_in, int c_out, int stride, Rng& rng,
                           double norm_eps = 1e-5) {
    if (stride != 1 && stride != 2)
      throw ConfigError("mbconv stride must be 1 or 2");
    MbconvParams p;
    const int hidden = 4 * c_in;
    p.norm = NormParams<T>::channels(c_in);
    p.expand = make_conv_weights<T>(c_in, hidden, 1);
    p.dw = make_conv_weights<T>(hidden, hidden, 3, stride, same_padding(3), 1,
                                hidden);
    p.contract = make_conv_weights<T>(hidden, c_out, 1);
    kaiming_init(p.expand, rng);
    kaiming_init(p.dw, rng);
    if (stride == 1 && c_in == c_out) {
      // residual form: contraction starts at zero, block begins as identity
    } else {
      kaiming_init(p.contract, rng);
    }
    p.stride = stride;
    p.norm_eps = norm_eps;
    return p;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> named_tensors() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    detail::put_norm(out, "norm", norm);
    detail::put_conv(out, "expand", expand);
    detail::put_conv(out, "dw", dw);
    detail::put_conv(out, "contract", contract);
    return out;
  }
};

template <typename T>
Tensor<T> mbconv_block(const Tensor<T>& x, const MbconvParams<T>& p) {
  Tensor<T> h =
      layer_norm_channels(x, p.norm.scale, p.norm.shift, p.norm_eps);
  h = gelu(conv2d(h, p.expand));
  h = gelu(conv2d(h, p.dw));
  h = conv2d(h, p.contract);
  const bool keep_residual = (p.stride == 1 && h.shape() == x.shape());
  return keep_residual ? add(x, h) : h;
}

inline OpCost mbconv_cost(int c_in, int c_out, int stride, int n, int h,
                          int w) {
  const unsigned long long N = n, Ci = c_in, Co = c_out;
  const unsigned long long hidden = 4 * Ci;
  const unsigned long long hw = static_cast<unsigned long long>(h) * w;
  const unsigned long long ho = (stride == 2) ? h / 2 : h;
  const unsigned long long wo = (stride == 2) ? w / 2 : w;
  const unsigned long long hwo = ho * wo;
  OpCost cost;
  cost.elems += N * Ci * hw;               // norm
  cost.macs += N * hidden * Ci * hw;       // expand
  cost.elems += N * hidden * hw;           // gelu
  cost.macs += N * hidden * 9 * hwo;       // depthwise 3x3
  cost.elems += N * hidden * hwo;          // gelu
  cost.macs += N * Co * hidden * hwo;      // contract
  if (stride == 1 && c_in == c_out) cost.elems += N * Co * hwo;  // residual
  return cost;
}

// ---------------------------------------------------------------------------
// Scale transitions.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> channel_project(const Tensor<T>& x, const ConvWeights<T>& proj) {
  if (proj.ksize() != 1)
    throw ConfigError("channel_project expects a 1x1 projection");
  return conv2d(x, proj);
}

// upsample x2, then 1x1-project to half the channels
template <typename T>
Tensor<T> patch_expand(const Tensor<T>& x, const ConvWeights<T>& proj) {
  if (x.c() % 2 != 0 || proj.in_channels() != x.c() ||
      proj.out_channels() != x.c() / 2)
    throw ConfigError("patch_expand projection must map C to C/2");
  return channel_project(upsample_bilinear(x, 2), proj);
}

inline OpCost transition_cost(int c_in, int c_out, int n, int h_in, int w_in) {
  OpCost cost;
  const unsigned long long N = n;
  const unsigned long long hw_out =
      4ull * static_cast<unsigned long long>(h_in) * w_in;
  cost.elems += N * c_in * hw_out;                 // upsample
  cost.macs += N * static_cast<unsigned long long>(c_out) * c_in * hw_out;
  return cost;
}

}  // namespace msa2net
