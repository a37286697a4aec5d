#pragma once

// Analysis experiments on a trained model: radial frequency response of
// named feature maps (with an on/off comparison mode), GradCAM maps, and the
// six-row ablation sweep, plus CSV/JSON serialization for every report.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "msa2net/fft.hpp"
#include "msa2net/io.hpp"
#include "msa2net/network.hpp"
#include "msa2net/training.hpp"

namespace msa2net {

// ---------------------------------------------------------------------------
// Frequency response.
// ---------------------------------------------------------------------------

struct FreqLayerReport {
  std::string layer;
  RadialSpectrum spectrum;
};

struct FreqReport {
  int bins = 0;
  std::vector<FreqLayerReport> layers;

  const FreqLayerReport* find(const std::string& layer) const {
    for (const auto& l : layers)
      if (l.layer == layer) return &l;
    return nullptr;
  }
};

// the layer a "deepest decoder layer" headline refers to: lowest resolution,
// right after the bottleneck
inline const char* kDeepestDecoderLayer = "decoder.layer1";

template <typename T = float>
FreqReport frequency_report(const Model<T>& m, const Tensor<T>& input,
                            const std::vector<std::string>& layers, int bins) {
  if (bins < 1) throw ConfigError("spectrum bin count must be positive");
  Activations<T> acts;
  model_forward(m, input, &acts);
  FreqReport rep;
  rep.bins = bins;
  for (const std::string& name : layers) {
    const Tensor<T>* act = acts.find(name);
    if (!act) {
      std::string valid;
      for (const auto& n : acts.names()) valid += "\n  " + n;
      throw UsageError("unknown layer '" + name + "'; valid layers are:" +
                       valid);
    }
    rep.layers.push_back({name, fft2_radial_spectrum(*act, bins)});
  }
  return rep;
}

inline const char* kSpectrumConvention =
    "# spectrum convention: DC-centered 2-D DFT per channel; radius "
    "normalized so the corner (both-axis Nyquist) lies at r=1; bins split "
    "[0,1] evenly (column 'radius' is each bin's upper edge); mean_log_amp "
    "is the bin mean of log(1+A) with A the |DFT| averaged over batch and "
    "channels; energy sums |DFT|^2 over batch, channels and bin pixels; "
    "high-frequency ratio = energy at r>0.5 / total.\n";

inline io::CsvTable freq_to_csv(const FreqReport& rep) {
  io::CsvTable rows;
  rows.push_back({"layer", "bin", "radius", "mean_log_amp", "energy"});
  char buf[64];
  for (const auto& layer : rep.layers)
    for (int b = 0; b < rep.bins; ++b) {
      std::vector<std::string> row;
      row.push_back(layer.layer);
      row.push_back(std::to_string(b));
      std::snprintf(buf, sizeof(buf), "%.6f", layer.spectrum.radii[b]);
      row.push_back(buf);
      std::snprintf(buf, sizeof(buf), "%.9g", layer.spectrum.mean_log_amp[b]);
      row.push_back(buf);
      std::snprintf(buf, sizeof(buf), "%.9g", layer.spectrum.energy[b]);
      row.push_back(buf);
      rows.push_back(std::move(row));
    }
  return rows;
}

inline nlohmann::json freq_to_json(const FreqReport& rep) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& layer : rep.layers) {
    layers.push_back({{"layer", layer.layer},
                      {"radii", layer.spectrum.radii},
                      {"mean_log_amp", layer.spectrum.mean_log_amp},
                      {"energy", layer.spectrum.energy},
                      {"high_freq_ratio", layer.spectrum.high_freq_ratio()},
                      {"spectral_energy", layer.spectrum.spectral_energy},
                      {"spatial_energy", layer.spectrum.spatial_energy}});
  }
  return {{"bins", rep.bins}, {"layers", layers}};
}

struct FreqCompare {
  std::string label_a, label_b;
  FreqReport a, b;
  std::string headline_layer;
  double headline_delta = 0.0;  // high-freq ratio, a minus b
};

inline FreqCompare compare_freq_reports(std::string label_a, FreqReport a,
                                        std::string label_b, FreqReport b) {
  FreqCompare cmp;
  cmp.label_a = std::move(label_a);
  cmp.label_b = std::move(label_b);
  cmp.a = std::move(a);
  cmp.b = std::move(b);
  cmp.headline_layer = kDeepestDecoderLayer;
  const FreqLayerReport* la = cmp.a.find(cmp.headline_layer);
  const FreqLayerReport* lb = cmp.b.find(cmp.headline_layer);
  if (la && lb)
    cmp.headline_delta =
        la->spectrum.high_freq_ratio() - lb->spectrum.high_freq_ratio();
  return cmp;
}

inline io::CsvTable freq_compare_to_csv(const FreqCompare& cmp) {
  io::CsvTable rows;
  rows.push_back({"model", "layer", "bin", "radius", "mean_log_amp", "energy"});
  for (const auto* pair : {&cmp.a, &cmp.b}) {
    const std::string& label = pair == &cmp.a ? cmp.label_a : cmp.label_b;
    io::CsvTable sub = freq_to_csv(*pair);
    for (std::size_t i = 1; i < sub.size(); ++i) {
      std::vector<std::string> row = {label};
      for (auto& f : sub[i]) row.push_back(std::move(f));
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

inline nlohmann::json freq_compare_to_json(const FreqCompare& cmp) {
  return {{"labels", {cmp.label_a, cmp.label_b}},
          {cmp.label_a, freq_to_json(cmp.a)},
          {cmp.label_b, freq_to_json(cmp.b)},
          {"headline",
           {{"layer", cmp.headline_layer},
            {"metric", "high_freq_ratio_delta"},
            {"value", cmp.headline_delta},
            {"note", "reported, not asserted: the low-pass claim is "
                     "established on the full-scale model only"}}}};
}

// ---------------------------------------------------------------------------
// GradCAM: score = mean over pixels of logits[class]; channel weights are
// spatial means of d(score)/dA at the probed layer; the map is the
// ReLU-rectified weighted sum, min-max normalized (constant map -> zeros).
// ---------------------------------------------------------------------------

struct CamMap {
  std::string layer;
  int class_index = 0;
  Tensor<float> map;        // [1,1,H',W'] in [0,1]
  Tensor<float> upsampled;  // [1,1,H,W] at input resolution
};

template <typename T = float>
CamMap gradcam(const Model<T>& m, const Tensor<T>& input, int class_index,
               const std::string& layer) {
  if (class_index < 0 || class_index >= m.cfg.num_classes)
    throw UsageError("class index " + std::to_string(class_index) +
                     " out of range for " +
                     std::to_string(m.cfg.num_classes) + " classes");
  Tensor<T> x = input.clone();
  Tape<T> tape;
  tape.watch(x);
  Activations<T> acts;
  Tensor<T> logits = model_forward(m, x, &acts);
  Tensor<T>* act = acts.find(layer);
  if (!act) {
    std::string valid;
    for (const auto& n : acts.names()) valid += "\n  " + n;
    throw UsageError("unknown layer '" + layer + "'; valid layers are:" +
                     valid);
  }
  Tensor<T> score =
      mean_all(slice_channels(logits, class_index, class_index + 1));
  tape.backward(score);

  const int C = act->c(), H = act->h(), W = act->w();
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  const T* grad = act->grad_data();
  if (!grad)
    throw UsageError("layer '" + layer + "' is not reached by the gradient");
  const T* a = act->data();
  // batch index 0 probed
  std::vector<double> weights(C, 0.0);
  for (int c = 0; c < C; ++c) {
    double acc = 0;
    for (std::size_t i = 0; i < hw; ++i)
      acc += static_cast<double>(grad[static_cast<std::size_t>(c) * hw + i]);
    weights[c] = acc / static_cast<double>(hw);
  }
  CamMap cam;
  cam.layer = layer;
  cam.class_index = class_index;
  cam.map = Tensor<float>({1, 1, H, W});
  for (std::size_t i = 0; i < hw; ++i) {
    double v = 0;
    for (int c = 0; c < C; ++c)
      v += weights[c] *
           static_cast<double>(a[static_cast<std::size_t>(c) * hw + i]);
    cam.map.data()[i] = static_cast<float>(std::max(0.0, v));
  }
  float mn = cam.map.data()[0], mx = cam.map.data()[0];
  for (const float v : cam.map.vec()) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  if (mx - mn > 1e-12f) {
    for (auto& v : cam.map.vec()) v = (v - mn) / (mx - mn);
  } else {
    std::fill(cam.map.vec().begin(), cam.map.vec().end(), 0.0f);
  }
  const int factor = m.cfg.image_size / H;
  cam.upsampled = upsample_bilinear(cam.map, std::max(1, factor));
  return cam;
}

// ---------------------------------------------------------------------------
// Ablation sweep: the six flag rows trained on identical data and seed.
// Full-scale reference scores from the source ablation are carried along,
// clearly labeled as not comparable to desk runs.
// ---------------------------------------------------------------------------

struct AblationRow {
  int row = 0;
  bool use_masag = false, use_lka = false, use_dae = false;
  double dice = 0.0, hd95 = 0.0;
  int hd95_excluded = 0;
  double paper_dice_ref = 0.0, paper_hd95_ref = 0.0;
  std::string error;  // non-empty when this row's training failed
};

inline constexpr double kPaperAblationDice[6] = {82.80, 83.16, 83.76,
                                                 84.32, 84.41, 84.75};
inline constexpr double kPaperAblationHd95[6] = {17.42, 16.18, 14.42,
                                                 15.14, 14.82, 13.29};

inline std::vector<AblationRow> run_ablation(
    const NetworkConfig& base,
    const std::vector<SegmentationSample<float>>& train_data,
    const std::vector<SegmentationSample<float>>& eval_data,
    const TrainConfig& tc,
    const std::function<void(int, Model<float>&)>& on_row = nullptr) {
  std::vector<AblationRow> rows;
  for (int r = 1; r <= 6; ++r) {
    const NetworkConfig cfg = make_ablation_variant(base, r);
    AblationRow row;
    row.row = r;
    row.use_masag = cfg.use_masag;
    row.use_lka = cfg.use_lka;
    row.use_dae = cfg.use_dae;
    row.paper_dice_ref = kPaperAblationDice[r - 1];
    row.paper_hd95_ref = kPaperAblationHd95[r - 1];
    try {
      Model<float> m = build_model<float>(cfg);
      train(m, train_data, tc);
      const MetricReport rep = evaluate(m, eval_data);
      row.dice = rep.mean_dsc;
      row.hd95 = rep.mean_hd95;
      row.hd95_excluded = rep.hd95_excluded;
      if (on_row) on_row(r, m);
    } catch (const std::exception& e) {
      row.error = e.what();  // remaining rows still run
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline const char* kAblationNote =
    "# paper_dice_ref / paper_hd95_ref are the source ablation's full-scale "
    "Synapse scores, printed for reference only; desk-scale runs are NOT "
    "comparable to them.\n";

inline io::CsvTable ablation_to_csv(const std::vector<AblationRow>& rows) {
  io::CsvTable out;
  out.push_back({"row", "masag", "lka", "dae", "dice", "hd95",
                 "hd95_excluded", "paper_dice_ref", "paper_hd95_ref",
                 "error"});
  char buf[64];
  for (const auto& r : rows) {
    std::vector<std::string> row;
    row.push_back(std::to_string(r.row));
    row.push_back(r.use_masag ? "1" : "0");
    row.push_back(r.use_lka ? "1" : "0");
    row.push_back(r.use_dae ? "1" : "0");
    std::snprintf(buf, sizeof(buf), "%.6f", r.dice);
    row.push_back(buf);
    std::snprintf(buf, sizeof(buf), "%.6f", r.hd95);
    row.push_back(buf);
    row.push_back(std::to_string(r.hd95_excluded));
    std::snprintf(buf, sizeof(buf), "%.2f", r.paper_dice_ref);
    row.push_back(buf);
    std::snprintf(buf, sizeof(buf), "%.2f", r.paper_hd95_ref);
    row.push_back(buf);
    row.push_back(r.error.empty() ? "ok" : r.error);
    out.push_back(std::move(row));
  }
  return out;
}

inline nlohmann::json ablation_to_json(const std::vector<AblationRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows)
    out.push_back({{"row", r.row},
                   {"masag", r.use_masag},
                   {"lka", r.use_lka},
                   {"dae", r.use_dae},
                   {"dice", r.dice},
                   {"hd95", r.hd95},
                   {"hd95_excluded", r.hd95_excluded},
                   {"paper_dice_ref", r.paper_dice_ref},
                   {"paper_hd95_ref", r.paper_hd95_ref},
                   {"error", r.error}});
  return {{"note", "paper_*_ref values are full-scale Synapse scores, "
                   "reference only, not comparable"},
          {"rows", out}};
}

// ---------------------------------------------------------------------------
// Count/metric/loss-curve serialization.
// ---------------------------------------------------------------------------

inline io::CsvTable count_report_to_csv(const CountReport& rep) {
  io::CsvTable out;
  out.push_back({"module", "params", "macs", "elementwise", "flops"});
  auto put = [&](const CountRow& r) {
    out.push_back({r.name, std::to_string(r.params), std::to_string(r.macs),
                   std::to_string(r.elems), std::to_string(r.flops())});
  };
  for (const auto& r : rep.rows) put(r);
  put(rep.total());
  return out;
}

inline nlohmann::json count_report_to_json(const CountReport& rep) {
  nlohmann::json rows = nlohmann::json::array();
  auto entry = [](const CountRow& r) {
    return nlohmann::json{{"module", r.name},
                          {"params", r.params},
                          {"macs", r.macs},
                          {"elementwise", r.elems},
                          {"flops", r.flops()}};
  };
  for (const auto& r : rep.rows) rows.push_back(entry(r));
  return {{"rows", rows}, {"total", entry(rep.total())}};
}

inline io::CsvTable metrics_to_csv(const MetricReport& rep) {
  io::CsvTable out;
  out.push_back({"class", "dsc", "hd95", "hd95_defined_count"});
  char buf[64];
  for (std::size_t i = 0; i < rep.dsc_per_class.size(); ++i) {
    std::vector<std::string> row;
    row.push_back(std::to_string(i + 1));
    std::snprintf(buf, sizeof(buf), "%.6f", rep.dsc_per_class[i]);
    row.push_back(buf);
    std::snprintf(buf, sizeof(buf), "%.6f", rep.hd95_per_class[i]);
    row.push_back(buf);
    row.push_back(std::to_string(rep.hd95_defined_count[i]));
    out.push_back(std::move(row));
  }
  std::vector<std::string> mean_row;
  mean_row.push_back("mean");
  std::snprintf(buf, sizeof(buf), "%.6f", rep.mean_dsc);
  mean_row.push_back(buf);
  std::snprintf(buf, sizeof(buf), "%.6f", rep.mean_hd95);
  mean_row.push_back(buf);
  mean_row.push_back(std::to_string(rep.hd95_excluded));
  out.push_back(std::move(mean_row));
  return out;
}

inline nlohmann::json metrics_to_json(const MetricReport& rep) {
  return {{"num_classes", rep.num_classes},
          {"dsc_per_class", rep.dsc_per_class},
          {"hd95_per_class", rep.hd95_per_class},
          {"hd95_defined_count", rep.hd95_defined_count},
          {"mean_dsc", rep.mean_dsc},
          {"mean_hd95", rep.mean_hd95},
          {"hd95_excluded", rep.hd95_excluded}};
}

inline io::CsvTable loss_curve_to_csv(const std::vector<double>& curve) {
  io::CsvTable out;
  out.push_back({"epoch", "loss"});
  char buf[64];
  for (std::size_t i = 0; i < curve.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.9g", curve[i]);
    out.push_back({std::to_string(i), buf});
  }
  return out;
}

}  // namespace msa2net
