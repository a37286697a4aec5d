#pragma once

// MSA2Net assembly: a 4-stage inverted-bottleneck encoder emitting features
// at strides {4, 8, 16, 32}, three attention-gated skip connections, and a
// hybrid decoder (dual-attention blocks in the two deep layers, large-kernel
// attention in the two shallow ones) with a 1x1 head at stride 4 followed by
// x4 bilinear upsampling.

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "msa2net/blocks.hpp"
#include "msa2net/conv.hpp"
#include "msa2net/io.hpp"
#include "msa2net/masag.hpp"
#include "msa2net/ops.hpp"
#include "msa2net/tensor.hpp"

namespace msa2net {

struct NetworkConfig {
  int in_channels = 1;
  int num_classes = 3;
  std::array<int, 4> stage_channels = {16, 32, 64, 128};
  int image_size = 64;
  bool use_masag = true;
  bool use_lka = true;
  bool use_dae = true;
  std::uint64_t seed = 42;

  void validate() const {
    if (in_channels < 1) throw ConfigError("in_channels must be positive");
    if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
    if (image_size < 32 || image_size % 32 != 0)
      throw ConfigError("image_size must be >= 32 and divisible by 32, got " +
                        std::to_string(image_size));
    for (int i = 0; i < 4; ++i) {
      if (stage_channels[i] < 1)
        throw ConfigError("stage_channels must be positive");
      if (i > 0 && stage_channels[i] <= stage_channels[i - 1])
        throw ConfigError("stage_channels must be strictly increasing");
    }
  }
};

inline nlohmann::json network_config_to_json(const NetworkConfig& cfg) {
  return {{"in_channels", cfg.in_channels},
          {"num_classes", cfg.num_classes},
          {"stage_channels", cfg.stage_channels},
          {"image_size", cfg.image_size},
          {"use_masag", cfg.use_masag},
          {"use_lka", cfg.use_lka},
          {"use_dae", cfg.use_dae},
          {"seed", cfg.seed}};
}

inline NetworkConfig network_config_from_json(const nlohmann::json& j) {
  NetworkConfig cfg;
  cfg.in_channels = j.value("in_channels", cfg.in_channels);
  cfg.num_classes = j.value("num_classes", cfg.num_classes);
  if (j.contains("stage_channels")) {
    const auto& sc = j["stage_channels"];
    if (sc.size() != 4)
      throw ConfigError("stage_channels must list 4 entries");
    for (int i = 0; i < 4; ++i) cfg.stage_channels[i] = sc[i];
  }
  cfg.image_size = j.value("image_size", cfg.image_size);
  cfg.use_masag = j.value("use_masag", cfg.use_masag);
  cfg.use_lka = j.value("use_lka", cfg.use_lka);
  cfg.use_dae = j.value("use_dae", cfg.use_dae);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.validate();
  return cfg;
}

template <typename T = float>
struct EncoderStage {
  MbconvParams<T> down;    // stride 2, may change channels
  MbconvParams<T> refine;  // stride 1
};

template <typename T = float>
using DecoderBlock = std::variant<LkaBlockParams<T>, DaeBlockParams<T>>;

template <typename T = float>
struct Model {
  NetworkConfig cfg;
  ConvWeights<T> stem;  // 3x3 stride 2
  std::array<EncoderStage<T>, 4> stages;
  std::array<std::optional<MasagParams<T>>, 3> gates;  // deepest first
  std::array<MasagConfig, 3> gate_cfgs;
  std::array<ConvWeights<T>, 3> transitions;  // 1x1 after x2 upsample
  std::array<DecoderBlock<T>, 4> decoder;
  ConvWeights<T> head;  // 1x1 to num_classes at stride 4

  bool decoder_is_dae(int layer) const {
    return layer < 2 ? cfg.use_dae : !cfg.use_lka;
  }

  // stable hierarchical parameter names, enumeration order fixed
  std::vector<std::pair<std::string, Tensor<T>*>> parameters() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    auto add_prefixed = [&](const std::string& prefix,
                            std::vector<std::pair<std::string, Tensor<T>*>> ts) {
      for (auto& [name, t] : ts) out.emplace_back(prefix + "." + name, t);
    };
    detail::put_conv(out, "encoder.stem", stem);
    for (int i = 0; i < 4; ++i) {
      const std::string p = "encoder.stage" + std::to_string(i + 1);
      add_prefixed(p + ".down", stages[i].down.named_tensors());
      add_prefixed(p + ".refine", stages[i].refine.named_tensors());
    }
    for (int i = 0; i < 3; ++i)
      if (gates[i])
        add_prefixed("skip.gate" + std::to_string(i + 1),
                     gates[i]->named_tensors());
    for (int i = 0; i < 3; ++i)
      detail::put_conv(out, "decoder.trans" + std::to_string(i + 1),
                       transitions[i]);
    for (int i = 0; i < 4; ++i) {
      const std::string p = "decoder.layer" + std::to_string(i + 1);
      std::visit([&](auto& block) { add_prefixed(p, block.named_tensors()); },
                 decoder[i]);
    }
    detail::put_conv(out, "head", head);
    return out;
  }

  std::size_t parameter_total() {
    std::size_t total = 0;
    for (auto& [name, t] : parameters()) total += t->size();
    return total;
  }
};

template <typename T = float>
Model<T> build_model(const NetworkConfig& cfg) {
  cfg.validate();
  Model<T> m;
  m.cfg = cfg;
  Rng rng(cfg.seed);
  const auto& sc = cfg.stage_channels;

  m.stem = make_conv_weights<T>(cfg.in_channels, sc[0], 3, 2, same_padding(3));
  kaiming_init(m.stem, rng);
  const int stage_in[4] = {sc[0], sc[0], sc[1], sc[2]};
  for (int i = 0; i < 4; ++i) {
    m.stages[i].down = MbconvParams<T>::init(stage_in[i], sc[i], 2, rng);
    m.stages[i].refine = MbconvParams<T>::init(sc[i], sc[i], 1, rng);
  }
  // gate i sits on the skip consumed by decoder layer i+1 (deepest first)
  const int gate_channels[3] = {sc[2], sc[1], sc[0]};
  for (int i = 0; i < 3; ++i) {
    MasagConfig gc;
    gc.channels = gate_channels[i];
    m.gate_cfgs[i] = gc;
    if (cfg.use_masag) m.gates[i] = MasagParams<T>::init(gc, rng);
  }
  const int trans_in[3] = {sc[3], sc[2], sc[1]};
  for (int i = 0; i < 3; ++i) {
    m.transitions[i] = make_conv_weights<T>(trans_in[i], gate_channels[i], 1);
    kaiming_init(m.transitions[i], rng);
  }
  const int layer_channels[4] = {sc[2], sc[1], sc[0], sc[0]};
  for (int i = 0; i < 4; ++i) {
    BlockConfig bc;
    bc.channels = layer_channels[i];
    if (m.decoder_is_dae(i))
      m.decoder[i] = DaeBlockParams<T>::init(bc, rng);
    else
      m.decoder[i] = LkaBlockParams<T>::init(bc, rng);
  }
  m.head = make_conv_weights<T>(sc[0], cfg.num_classes, 1);
  kaiming_init(m.head, rng);
  return m;
}

// Named intermediate feature maps captured during a forward pass.
template <typename T = float>
struct Activations {
  std::vector<std::pair<std::string, Tensor<T>>> named;

  const Tensor<T>* find(const std::string& name) const {
    for (const auto& [n, t] : named)
      if (n == name) return &t;
    return nullptr;
  }
  Tensor<T>* find(const std::string& name) {
    for (auto& [n, t] : named)
      if (n == name) return &t;
    return nullptr;
  }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [n, t] : named) out.push_back(n);
    return out;
  }
};

template <typename T>
Tensor<T> model_forward(const Model<T>& m, const Tensor<T>& x,
                        Activations<T>* cap = nullptr) {
  const NetworkConfig& cfg = m.cfg;
  if (x.c() != cfg.in_channels || x.h() != cfg.image_size ||
      x.w() != cfg.image_size)
    throw ShapeError("model input must be [N," +
                     std::to_string(cfg.in_channels) + "," +
                     std::to_string(cfg.image_size) + "," +
                     std::to_string(cfg.image_size) + "], got " +
                     x.shape().str());
  auto capture = [&](const std::string& name, const Tensor<T>& t) {
    if (cap) cap->named.emplace_back(name, t);
  };

  Tensor<T> h = gelu(conv2d(x, m.stem));
  std::array<Tensor<T>, 4> enc;
  for (int i = 0; i < 4; ++i) {
    h = mbconv_block(h, m.stages[i].down);
    h = mbconv_block(h, m.stages[i].refine);
    enc[i] = h;
    capture("encoder.stage" + std::to_string(i + 1), h);
  }

  Tensor<T> g = enc[3];
  for (int i = 0; i < 3; ++i) {
    const Tensor<T>& skip = enc[2 - i];
    Tensor<T> g_up =
        channel_project(upsample_bilinear(g, 2), m.transitions[i]);
    Tensor<T> gated = skip;
    if (cfg.use_masag) {
      gated = masag::forward(skip, g_up, *m.gates[i]);
      capture("skip.gate" + std::to_string(i + 1), gated);
    }
    Tensor<T> fused = add(gated, g_up);
    capture("decoder.fuse" + std::to_string(i + 1), fused);
    g = std::visit(
        [&](const auto& block) -> Tensor<T> {
          using B = std::decay_t<decltype(block)>;
          if constexpr (std::is_same_v<B, DaeBlockParams<T>>)
            return dae_block(fused, block);
          else
            return lka_block(fused, block);
        },
        m.decoder[i]);
    capture("decoder.layer" + std::to_string(i + 1), g);
  }
  g = std::visit(
      [&](const auto& block) -> Tensor<T> {
        using B = std::decay_t<decltype(block)>;
        if constexpr (std::is_same_v<B, DaeBlockParams<T>>)
          return dae_block(g, block);
        else
          return lka_block(g, block);
      },
      m.decoder[3]);
  capture("decoder.layer4", g);

  Tensor<T> logits = upsample_bilinear(conv2d(g, m.head), 4);
  capture("head.logits", logits);
  return logits;
}

// ---------------------------------------------------------------------------
// Accounting: per-group parameter counts and closed-form forward costs.
// Groups mirror the parameter table layout: encoder, the gated skips, the
// two decoder block families, and the head. Scale transitions are charged to
// the group of the decoder layer they feed.
// ---------------------------------------------------------------------------

struct CountRow {
  std::string name;
  std::size_t params = 0;
  unsigned long long macs = 0;
  unsigned long long elems = 0;

  unsigned long long flops() const { return 2 * macs + elems; }
};

struct CountReport {
  std::vector<CountRow> rows;

  CountRow total() const {
    CountRow t;
    t.name = "total";
    for (const auto& r : rows) {
      t.params += r.params;
      t.macs += r.macs;
      t.elems += r.elems;
    }
    return t;
  }
  CountRow& row(const std::string& name) {
    for (auto& r : rows)
      if (r.name == name) return r;
    rows.push_back({name, 0, 0, 0});
    return rows.back();
  }
};

namespace detail {

inline const char* kGroupNames[5] = {"encoder", "skip_masag", "decoder_lka",
                                     "decoder_dae", "head"};

template <typename T>
std::string group_of(Model<T>& m, const std::string& param_name) {
  if (param_name.rfind("encoder.", 0) == 0) return "encoder";
  if (param_name.rfind("skip.", 0) == 0) return "skip_masag";
  if (param_name.rfind("head", 0) == 0) return "head";
  // decoder.transK goes with the block of layer K, decoder.layerK likewise
  for (int i = 0; i < 4; ++i) {
    const std::string layer = "decoder.layer" + std::to_string(i + 1);
    const std::string trans = "decoder.trans" + std::to_string(i + 1);
    if (param_name.rfind(layer, 0) == 0 || param_name.rfind(trans, 0) == 0)
      return m.decoder_is_dae(i) ? "decoder_dae" : "decoder_lka";
  }
  throw UsageError("unmapped parameter name " + param_name);
}

}  // namespace detail

template <typename T>
CountReport count_parameters(Model<T>& m) {
  CountReport rep;
  for (const char* g : detail::kGroupNames) rep.row(g);
  for (auto& [name, t] : m.parameters())
    rep.row(detail::group_of(m, name)).params += t->size();
  return rep;
}

// Forward cost for a single image (N = 1) at the given resolution,
// mirroring model_forward one op at a time.
template <typename T>
CountReport estimate_flops(Model<T>& m, int image_size) {
  if (image_size < 32 || image_size % 32 != 0)
    throw ConfigError("image_size must be >= 32 and divisible by 32");
  const NetworkConfig& cfg = m.cfg;
  const auto& sc = cfg.stage_channels;
  CountReport rep = count_parameters(m);
  const int s2 = image_size / 2, s4 = image_size / 4, s8 = image_size / 8,
            s16 = image_size / 16, s32 = image_size / 32;

  // encoder
  OpCost enc;
  enc.macs += static_cast<unsigned long long>(sc[0]) * cfg.in_channels * 9 *
              s2 * s2;                                        // stem conv
  enc.elems += static_cast<unsigned long long>(sc[0]) * s2 * s2;  // gelu
  const int stage_in[4] = {sc[0], sc[0], sc[1], sc[2]};
  const int stage_res_in[4] = {s2, s4, s8, s16};
  for (int i = 0; i < 4; ++i) {
    enc += mbconv_cost(stage_in[i], sc[i], 2, 1, stage_res_in[i],
                       stage_res_in[i]);
    const int r = stage_res_in[i] / 2;
    enc += mbconv_cost(sc[i], sc[i], 1, 1, r, r);
  }
  rep.row("encoder").macs = enc.macs;
  rep.row("encoder").elems = enc.elems;

  // skips
  OpCost skip;
  const int gate_res[3] = {s16, s8, s4};
  if (cfg.use_masag)
    for (int i = 0; i < 3; ++i)
      skip += masag::cost(m.gate_cfgs[i], 1, gate_res[i], gate_res[i]);
  rep.row("skip_masag").macs = skip.macs;
  rep.row("skip_masag").elems = skip.elems;

  // decoder
  OpCost dec_lka, dec_dae;
  const int trans_in[3] = {sc[3], sc[2], sc[1]};
  const int trans_res_in[3] = {s32, s16, s8};
  const int layer_channels[4] = {sc[2], sc[1], sc[0], sc[0]};
  const int layer_res[4] = {s16, s8, s4, s4};
  for (int i = 0; i < 4; ++i) {
    OpCost c;
    if (i < 3) {
      c += transition_cost(trans_in[i], layer_channels[i], 1, trans_res_in[i],
                           trans_res_in[i]);
      c.elems += static_cast<unsigned long long>(layer_channels[i]) *
                 layer_res[i] * layer_res[i];  // skip + decoder add
    }
    if (m.decoder_is_dae(i))
      c += dae_block_cost(layer_channels[i], 4, 1, 1, layer_res[i],
                          layer_res[i]);
    else
      c += lka_block_cost(layer_channels[i], 4, 1, layer_res[i], layer_res[i]);
    (m.decoder_is_dae(i) ? dec_dae : dec_lka) += c;
  }
  rep.row("decoder_lka").macs = dec_lka.macs;
  rep.row("decoder_lka").elems = dec_lka.elems;
  rep.row("decoder_dae").macs = dec_dae.macs;
  rep.row("decoder_dae").elems = dec_dae.elems;

  // head
  OpCost head;
  head.macs += static_cast<unsigned long long>(cfg.num_classes) * sc[0] * s4 *
               s4;
  head.elems += static_cast<unsigned long long>(cfg.num_classes) * image_size *
                image_size;  // upsample x4
  rep.row("head").macs = head.macs;
  rep.row("head").elems = head.elems;
  return rep;
}

// Table-3 ablation rows: (use_masag, use_lka, use_dae) per row 1..6.
inline NetworkConfig make_ablation_variant(const NetworkConfig& base,
                                           int row) {
  static constexpr bool kRows[6][3] = {
      {false, true, false}, {false, false, true}, {false, true, true},
      {true, true, false},  {true, false, true},  {true, true, true}};
  if (row < 1 || row > 6)
    throw ConfigError("ablation row must be in 1..6, got " +
                      std::to_string(row));
  NetworkConfig cfg = base;
  cfg.use_masag = kRows[row - 1][0];
  cfg.use_lka = kRows[row - 1][1];
  cfg.use_dae = kRows[row - 1][2];
  return cfg;
}

// ---------------------------------------------------------------------------
// Checkpoints: named-tensor directory plus the network config.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::filesystem::path& dir,
                            Model<float>& m) {
  std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
  for (auto& [name, t] : m.parameters()) tensors.emplace_back(name, t);
  io::save_named_tensors(dir, tensors,
                         {{"config", network_config_to_json(m.cfg)}});
}

inline Model<float> load_checkpoint(const std::filesystem::path& dir) {
  const nlohmann::json manifest = io::load_json(dir / "manifest.json");
  if (!manifest.contains("config"))
    throw FormatError(dir.string() + ": manifest is missing the model config");
  NetworkConfig cfg;
  try {
    cfg = network_config_from_json(manifest["config"]);
  } catch (const ConfigError& e) {
    throw FormatError(dir.string() + ": bad config in manifest: " + e.what());
  }
  Model<float> m = build_model<float>(cfg);
  io::load_named_tensors(dir, m.parameters());
  return m;
}

}  // namespace msa2net
