#pragma once

// Multi-Scale Adaptive Spatial Attention Gate. Four composable stages over a
// pre-aligned encoder feature X and decoder feature G of identical shape:
//   fuse:            U  = local_proj(local_dwd(local_dw(X)))
//                       + global_proj([avg_pool_C(G); max_pool_C(G)])
//   spatial_select:  SW = channel_softmax(select_proj(U)),
//                    X' = SW_1*X + X,  G' = SW_2*G + G
//   cross_modulate:  X'' = X'*sigma(G'),  G'' = G'*sigma(X'),  U' = X''*G''
//   recalibrate:     out = recal_out(sigma(recal_gate(U')) * X)

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "msa2net/conv.hpp"
#include "msa2net/io.hpp"
#include "msa2net/ops.hpp"
#include "msa2net/tensor.hpp"

namespace msa2net {

enum class InitScheme { kZeroSelect, kKaiming };

struct MasagConfig {
  int channels = 0;
  int dw_kernel = 5;
  int dwd_kernel = 7;
  int dwd_dilation = 3;
  InitScheme init = InitScheme::kZeroSelect;

  void validate() const {
    if (channels < 1) throw ConfigError("MASAG channels must be positive");
    if (dw_kernel < 1 || dw_kernel % 2 == 0 || dwd_kernel < 1 ||
        dwd_kernel % 2 == 0)
      throw ConfigError("MASAG kernels must be odd");
    if (dwd_dilation < 1) throw ConfigError("MASAG dilation must be >= 1");
  }
};

template <typename T = float>
struct MasagParams {
  ConvWeights<T> local_dw;    // depthwise, dw_kernel
  ConvWeights<T> local_dwd;   // depthwise dilated, dwd_kernel
  ConvWeights<T> local_proj;  // 1x1, C -> C
  ConvWeights<T> global_proj; // 1x1, 2 -> C
  ConvWeights<T> select_proj; // 1x1, C -> 2
  ConvWeights<T> recal_gate;  // 1x1, C -> C
  ConvWeights<T> recal_out;   // 1x1, C -> C

  static MasagParams init(const MasagConfig& cfg, Rng& rng) {
    cfg.validate();
    const int c = cfg.channels;
    MasagParams p;
    p.local_dw = make_conv_weights<T>(c, c, cfg.dw_kernel, 1,
                                      same_padding(cfg.dw_kernel), 1, c);
    p.local_dwd = make_conv_weights<T>(
        c, c, cfg.dwd_kernel, 1, same_padding(cfg.dwd_kernel, cfg.dwd_dilation),
        cfg.dwd_dilation, c);
    p.local_proj = make_conv_weights<T>(c, c, 1);
    p.global_proj = make_conv_weights<T>(2, c, 1);
    p.select_proj = make_conv_weights<T>(c, 2, 1);
    p.recal_gate = make_conv_weights<T>(c, c, 1);
    p.recal_out = make_conv_weights<T>(c, c, 1);
    kaiming_init(p.local_dw, rng);
    kaiming_init(p.local_dwd, rng);
    kaiming_init(p.local_proj, rng);
    kaiming_init(p.global_proj, rng);
    if (cfg.init == InitScheme::kKaiming) {
      kaiming_init(p.select_proj, rng);
    }
    // zero-select leaves select_proj at zero: SW starts at (0.5, 0.5)
    kaiming_init(p.recal_gate, rng);
    kaiming_init(p.recal_out, rng);
    return p;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> named_tensors() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    auto put = [&](const std::string& name, ConvWeights<T>& w) {
      out.emplace_back(name + ".kernel", &w.kernel);
      if (w.has_bias()) out.emplace_back(name + ".bias", &w.bias);
    };
    put("local_dw", local_dw);
    put("local_dwd", local_dwd);
    put("local_proj", local_proj);
    put("global_proj", global_proj);
    put("select_proj", select_proj);
    put("recal_gate", recal_gate);
    put("recal_out", recal_out);
    return out;
  }

  std::size_t parameter_count() const {
    return local_dw.parameter_count() + local_dwd.parameter_count() +
           local_proj.parameter_count() + global_proj.parameter_count() +
           select_proj.parameter_count() + recal_gate.parameter_count() +
           recal_out.parameter_count();
  }
};

// Per-pixel 2-simplex over the two streams (Eq. 2 output).
template <typename T = float>
struct SelectionWeights {
  Tensor<T> sw;  // [N, 2, H, W]
};

template <typename T = float>
struct SpatialSelection {
  Tensor<T> x_sel;  // X'
  Tensor<T> g_sel;  // G'
  SelectionWeights<T> weights;
};

template <typename T = float>
struct CrossModulation {
  Tensor<T> fused;  // U'
  Tensor<T> x_mod;  // X''
  Tensor<T> g_mod;  // G''
};

template <typename T = float>
struct Recalibration {
  Tensor<T> out;
  Tensor<T> attention;  // sigma(recal_gate(U')), strictly in (0,1)
};

namespace masag {

template <typename T>
void check_pair(const Tensor<T>& x, const Tensor<T>& g, const char* stage) {
  if (x.shape() != g.shape())
    throw ShapeError(std::string("MASAG ") + stage +
                     ": X and G must be pre-aligned, got " + x.shape().str() +
                     " vs " + g.shape().str());
}

template <typename T>
Tensor<T> fuse(const Tensor<T>& x, const Tensor<T>& g,
               const MasagParams<T>& p) {
  check_pair(x, g, "fuse");
  Tensor<T> local = conv2d(conv2d(conv2d(x, p.local_dw), p.local_dwd),
                           p.local_proj);
  Tensor<T> global = conv2d(channel_pool_concat(g), p.global_proj);
  return add(local, global);
}

template <typename T>
SpatialSelection<T> spatial_select(const Tensor<T>& u, const Tensor<T>& x,
                                   const Tensor<T>& g,
                                   const MasagParams<T>& p) {
  check_pair(u, x, "spatial_select");
  check_pair(x, g, "spatial_select");
  SpatialSelection<T> out;
  out.weights.sw = softmax_channels(conv2d(u, p.select_proj));
  Tensor<T> sw1 = slice_channels(out.weights.sw, 0, 1);
  Tensor<T> sw2 = slice_channels(out.weights.sw, 1, 2);
  out.x_sel = add(mul(sw1, x), x);
  out.g_sel = add(mul(sw2, g), g);
  return out;
}

template <typename T>
CrossModulation<T> cross_modulate(const Tensor<T>& x_sel,
                                  const Tensor<T>& g_sel) {
  check_pair(x_sel, g_sel, "cross_modulate");
  CrossModulation<T> out;
  out.x_mod = mul(x_sel, sigmoid(g_sel));
  out.g_mod = mul(g_sel, sigmoid(x_sel));
  out.fused = mul(out.x_mod, out.g_mod);
  return out;
}

template <typename T>
Recalibration<T> recalibrate(const Tensor<T>& u_mod, const Tensor<T>& x,
                             const MasagParams<T>& p) {
  check_pair(u_mod, x, "recalibrate");
  Recalibration<T> out;
  out.attention = sigmoid(conv2d(u_mod, p.recal_gate));
  out.out = conv2d(mul(out.attention, x), p.recal_out);
  return out;
}

// The full gate; the recalibrated map replaces the skip feature handed on to
// the decoder.
template <typename T>
Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& g,
                  const MasagParams<T>& p) {
  Tensor<T> u = fuse(x, g, p);
  SpatialSelection<T> sel = spatial_select(u, x, g, p);
  CrossModulation<T> mod = cross_modulate(sel.x_sel, sel.g_sel);
  return recalibrate(mod.fused, x, p).out;
}

// Forward cost, mirroring the op sequence above one call at a time.
inline OpCost cost(const MasagConfig& cfg, int n, int h, int w) {
  const unsigned long long N = n, C = cfg.channels;
  const unsigned long long hw = static_cast<unsigned long long>(h) * w;
  const unsigned long long chw = C * hw;
  OpCost cost;
  // fuse
  cost.macs += N * C * cfg.dw_kernel * cfg.dw_kernel * hw;    // local_dw
  cost.macs += N * C * cfg.dwd_kernel * cfg.dwd_kernel * hw;  // local_dwd
  cost.macs += N * C * C * hw;                                // local_proj
  cost.elems += N * 2 * hw;                                   // pool concat
  cost.macs += N * C * 2 * hw;                                // global_proj
  cost.elems += N * chw;                                      // add
  // spatial_select
  cost.macs += N * 2 * C * hw;  // select_proj
  cost.elems += N * 2 * hw;     // softmax
  cost.elems += 4 * N * chw;    // two muls, two residual adds
  // cross_modulate
  cost.elems += 5 * N * chw;  // two sigmoids, three muls
  // recalibrate
  cost.macs += N * C * C * hw;  // recal_gate
  cost.elems += N * chw;        // sigmoid
  cost.elems += N * chw;        // attention * x
  cost.macs += N * C * C * hw;  // recal_out
  return cost;
}

}  // namespace masag

inline nlohmann::json masag_config_to_json(const MasagConfig& cfg) {
  return {{"channels", cfg.channels},
          {"dw_kernel", cfg.dw_kernel},
          {"dwd_kernel", cfg.dwd_kernel},
          {"dwd_dilation", cfg.dwd_dilation},
          {"init",
           cfg.init == InitScheme::kZeroSelect ? "zero-select" : "kaiming"}};
}

inline MasagConfig masag_config_from_json(const nlohmann::json& j) {
  MasagConfig cfg;
  cfg.channels = j.at("channels");
  cfg.dw_kernel = j.at("dw_kernel");
  cfg.dwd_kernel = j.at("dwd_kernel");
  cfg.dwd_dilation = j.at("dwd_dilation");
  const std::string init = j.at("init");
  if (init == "zero-select")
    cfg.init = InitScheme::kZeroSelect;
  else if (init == "kaiming")
    cfg.init = InitScheme::kKaiming;
  else
    throw FormatError("unknown MASAG init scheme '" + init + "'");
  cfg.validate();
  return cfg;
}

inline void save_masag_params(const std::filesystem::path& dir,
                              MasagParams<float>& params,
                              const MasagConfig& cfg) {
  std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
  for (auto& [name, t] : params.named_tensors()) tensors.emplace_back(name, t);
  io::save_named_tensors(dir, tensors, {{"config", masag_config_to_json(cfg)}});
}

inline std::pair<MasagParams<float>, MasagConfig> load_masag_params(
    const std::filesystem::path& dir) {
  const nlohmann::json manifest = io::load_json(dir / "manifest.json");
  if (!manifest.contains("config"))
    throw FormatError(dir.string() + ": manifest is missing the MASAG config");
  const MasagConfig cfg = masag_config_from_json(manifest["config"]);
  Rng rng(0);
  MasagParams<float> params = MasagParams<float>::init(cfg, rng);
  io::load_named_tensors(dir, params.named_tensors());
  return {std::move(params), cfg};
}

}  // namespace msa2net
