// msa2net command-line tool: data generation, training, evaluation,
// inference, parameter/FLOP accounting, frequency analysis, GradCAM and the
// six-row ablation sweep.
//
// Exit codes: 0 success, 1 usage/configuration error, 2 data/format error,
// 3 numerical failure. MSA2NET_THREADS caps internal parallelism
// (1 = fully deterministic run-to-run and across machines).

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "msa2net/msa2net.hpp"

namespace fs = std::filesystem;
using namespace msa2net;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir = ".";
  std::uint64_t seed = 42;
  bool seed_given = false;
};

NetworkConfig resolve_config(const CommonOpts& opts, int data_size = 0,
                             int data_classes = 0) {
  NetworkConfig cfg;
  if (!opts.config_path.empty())
    cfg = network_config_from_json(io::load_json(opts.config_path));
  if (data_size > 0 && opts.config_path.empty()) cfg.image_size = data_size;
  if (data_classes > 0 && opts.config_path.empty())
    cfg.num_classes = data_classes;
  if (opts.seed_given) cfg.seed = opts.seed;
  cfg.validate();
  return cfg;
}

// single-channel PGM or MSAT tensor; channel-replicated to what the model
// expects
Tensor<float> load_input(const std::string& path, const NetworkConfig& cfg) {
  Tensor<float> raw;
  if (fs::path(path).extension() == ".pgm")
    raw = io::pgm_to_tensor<float>(io::load_pgm(path));
  else
    raw = io::load_msat(path);
  if (raw.h() != cfg.image_size || raw.w() != cfg.image_size)
    throw DataError("input is " + raw.shape().str() + ", model expects " +
                    std::to_string(cfg.image_size) + "x" +
                    std::to_string(cfg.image_size));
  if (raw.c() == cfg.in_channels) return raw;
  if (raw.c() != 1)
    throw DataError("input has " + std::to_string(raw.c()) +
                    " channels, model expects " +
                    std::to_string(cfg.in_channels));
  Tensor<float> out({raw.n(), cfg.in_channels, raw.h(), raw.w()});
  const std::size_t plane = static_cast<std::size_t>(raw.h()) * raw.w();
  for (int n = 0; n < raw.n(); ++n)
    for (int c = 0; c < cfg.in_channels; ++c)
      std::copy_n(raw.data() + n * plane, plane,
                  out.data() + (static_cast<std::size_t>(n) * cfg.in_channels +
                                c) *
                                   plane);
  return out;
}

void print_count_report(const CountReport& rep, bool with_flops) {
  std::printf("%-14s %12s", "module", "params");
  if (with_flops) std::printf(" %16s %16s %16s", "macs", "elementwise", "flops");
  std::printf("\n");
  auto line = [&](const CountRow& r) {
    std::printf("%-14s %12zu", r.name.c_str(), r.params);
    if (with_flops)
      std::printf(" %16llu %16llu %16llu", r.macs, r.elems, r.flops());
    std::printf("\n");
  };
  for (const auto& r : rep.rows) line(r);
  line(rep.total());
}

int cmd_gen_data(const CommonOpts& opts, int n, int size, int classes) {
  auto data = generate_synthetic_dataset<float>(opts.seed, n, size, classes);
  save_dataset(opts.out_dir, data, classes, opts.seed);
  std::printf("wrote %d samples (%dx%d, %d classes) to %s\n", n, size, size,
              classes, opts.out_dir.c_str());
  return 0;
}

int cmd_train(const CommonOpts& opts, const std::string& data_dir,
              const std::string& eval_dir, int epochs, int batch,
              const std::string& optimizer, double lr, double momentum,
              double weight_decay) {
  LoadedDataset data = load_dataset(data_dir);
  NetworkConfig cfg = resolve_config(opts, data.size, data.num_classes);
  if (cfg.image_size != data.size)
    throw DataError("config image_size " + std::to_string(cfg.image_size) +
                    " does not match dataset size " +
                    std::to_string(data.size));
  Model<float> model = build_model<float>(cfg);

  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = batch;
  tc.seed = opts.seed;
  if (optimizer == "adam") {
    tc.optimizer.kind = OptimizerKind::kAdam;
    tc.optimizer.lr = lr > 0 ? lr : 1e-3;
  } else if (optimizer == "sgd") {
    tc.optimizer.kind = OptimizerKind::kSgd;
    tc.optimizer.lr = lr > 0 ? lr : 0.05;
    tc.optimizer.momentum = momentum;
    tc.optimizer.weight_decay = weight_decay;
  } else {
    throw ConfigError("unknown optimizer '" + optimizer + "'");
  }
  tc.verbose = true;

  TrainResult result = train(model, data.samples, tc);
  fs::create_directories(opts.out_dir);
  save_checkpoint(fs::path(opts.out_dir) / "checkpoint", model);
  io::save_csv(fs::path(opts.out_dir) / "loss_curve.csv",
               loss_curve_to_csv(result.loss_curve));
  io::save_json(fs::path(opts.out_dir) / "loss_curve.json",
                {{"loss", result.loss_curve}});
  std::printf("trained %d epochs, final loss %.6f\n", epochs,
              result.loss_curve.back());
  if (!eval_dir.empty()) {
    LoadedDataset held_out = load_dataset(eval_dir);
    MetricReport rep = evaluate(model, held_out.samples);
    io::save_csv(fs::path(opts.out_dir) / "metrics.csv", metrics_to_csv(rep));
    io::save_json(fs::path(opts.out_dir) / "metrics.json",
                  metrics_to_json(rep));
    std::printf("held-out mean DSC %.4f, mean HD95 %.3f px (%d undefined)\n",
                rep.mean_dsc, rep.mean_hd95, rep.hd95_excluded);
  }
  return 0;
}

int cmd_eval(const CommonOpts& opts, const std::string& ckpt,
             const std::string& data_dir) {
  Model<float> model = load_checkpoint(ckpt);
  LoadedDataset data = load_dataset(data_dir);
  MetricReport rep = evaluate(model, data.samples);
  fs::create_directories(opts.out_dir);
  io::save_csv(fs::path(opts.out_dir) / "metrics.csv", metrics_to_csv(rep));
  io::save_json(fs::path(opts.out_dir) / "metrics.json", metrics_to_json(rep));
  for (std::size_t c = 0; c < rep.dsc_per_class.size(); ++c)
    std::printf("class %zu: DSC %.4f, HD95 %.3f px (%d samples defined)\n",
                c + 1, rep.dsc_per_class[c], rep.hd95_per_class[c],
                rep.hd95_defined_count[c]);
  std::printf("mean DSC %.4f, mean HD95 %.3f px (%d undefined excluded)\n",
              rep.mean_dsc, rep.mean_hd95, rep.hd95_excluded);
  return 0;
}

int cmd_forward(const CommonOpts& opts, const std::string& ckpt,
                const std::string& input) {
  Model<float> model = load_checkpoint(ckpt);
  Tensor<float> x = load_input(input, model.cfg);
  Tensor<float> logits = model_forward(model, x);
  fs::create_directories(opts.out_dir);
  io::save_msat(fs::path(opts.out_dir) / "logits.msat", logits);
  LabelMap mask = argmax_channels(logits);
  io::save_pgm(fs::path(opts.out_dir) / "mask.pgm", io::labels_to_pgm(mask));
  std::printf("wrote logits.msat and mask.pgm to %s\n", opts.out_dir.c_str());
  return 0;
}

Model<float> model_from_ckpt_or_config(const CommonOpts& opts,
                                       const std::string& ckpt) {
  if (!ckpt.empty()) return load_checkpoint(ckpt);
  if (opts.config_path.empty())
    throw ConfigError("provide either --ckpt or --config");
  return build_model<float>(resolve_config(opts));
}

int cmd_params(const CommonOpts& opts, const std::string& ckpt) {
  Model<float> model = model_from_ckpt_or_config(opts, ckpt);
  CountReport rep = count_parameters(model);
  fs::create_directories(opts.out_dir);
  io::save_csv(fs::path(opts.out_dir) / "params.csv",
               count_report_to_csv(rep));
  io::save_json(fs::path(opts.out_dir) / "params.json",
                count_report_to_json(rep));
  print_count_report(rep, false);
  return 0;
}

int cmd_flops(const CommonOpts& opts, const std::string& ckpt,
              int image_size) {
  Model<float> model = model_from_ckpt_or_config(opts, ckpt);
  if (image_size == 0) image_size = model.cfg.image_size;
  CountReport rep = estimate_flops(model, image_size);
  fs::create_directories(opts.out_dir);
  io::save_csv(fs::path(opts.out_dir) / "flops.csv", count_report_to_csv(rep));
  io::save_json(fs::path(opts.out_dir) / "flops.json",
                count_report_to_json(rep));
  print_count_report(rep, true);
  return 0;
}

std::vector<std::string> split_layers(const std::string& arg) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= arg.size()) {
    const std::size_t comma = arg.find(',', start);
    if (comma == std::string::npos) {
      if (start < arg.size()) out.push_back(arg.substr(start));
      break;
    }
    if (comma > start) out.push_back(arg.substr(start, comma - start));
    start = comma + 1;
  }
  return out;
}

int cmd_freq(const CommonOpts& opts, const std::string& ckpt,
             const std::string& input, const std::string& layers_arg,
             int bins, const std::string& compare_ckpt) {
  Model<float> model = load_checkpoint(ckpt);
  Tensor<float> x = load_input(input, model.cfg);
  std::vector<std::string> layers = split_layers(layers_arg);
  if (layers.empty())
    layers = {"decoder.layer1", "decoder.layer2", "decoder.layer3",
              "decoder.layer4"};
  fs::create_directories(opts.out_dir);
  FreqReport rep = frequency_report(model, x, layers, bins);
  if (compare_ckpt.empty()) {
    io::save_csv(fs::path(opts.out_dir) / "freq.csv", freq_to_csv(rep),
                 kSpectrumConvention);
    io::save_json(fs::path(opts.out_dir) / "freq.json", freq_to_json(rep));
    for (const auto& l : rep.layers)
      std::printf("%-18s high-frequency ratio %.4f\n", l.layer.c_str(),
                  l.spectrum.high_freq_ratio());
    return 0;
  }
  Model<float> other = load_checkpoint(compare_ckpt);
  Tensor<float> x2 = load_input(input, other.cfg);
  FreqCompare cmp =
      compare_freq_reports("primary", std::move(rep), "compare",
                           frequency_report(other, x2, layers, bins));
  io::save_csv(fs::path(opts.out_dir) / "freq_compare.csv",
               freq_compare_to_csv(cmp), kSpectrumConvention);
  io::save_json(fs::path(opts.out_dir) / "freq_compare.json",
                freq_compare_to_json(cmp));
  std::printf("high-frequency ratio delta at %s (primary - compare): %+.4f\n",
              cmp.headline_layer.c_str(), cmp.headline_delta);
  std::printf("(reported, not asserted: full-scale-only claim)\n");
  return 0;
}

int cmd_gradcam(const CommonOpts& opts, const std::string& ckpt,
                const std::string& input, int class_index,
                const std::string& layer) {
  Model<float> model = load_checkpoint(ckpt);
  Tensor<float> x = load_input(input, model.cfg);
  CamMap cam = gradcam(model, x, class_index, layer);
  fs::create_directories(opts.out_dir);
  io::save_pgm(fs::path(opts.out_dir) / "cam.pgm", io::tensor_to_pgm(cam.map));
  io::save_msat(fs::path(opts.out_dir) / "cam.msat", cam.map);
  io::save_pgm(fs::path(opts.out_dir) / "cam_upsampled.pgm",
               io::tensor_to_pgm(cam.upsampled));
  io::save_msat(fs::path(opts.out_dir) / "cam_upsampled.msat", cam.upsampled);
  std::printf("wrote cam maps for class %d at %s to %s\n", class_index,
              layer.c_str(), opts.out_dir.c_str());
  return 0;
}

int cmd_ablate(const CommonOpts& opts, const std::string& data_dir,
               const std::string& eval_dir, int epochs, int batch,
               double lr) {
  LoadedDataset data = load_dataset(data_dir);
  LoadedDataset held_out =
      eval_dir.empty() ? LoadedDataset{} : load_dataset(eval_dir);
  const auto& eval_samples =
      eval_dir.empty() ? data.samples : held_out.samples;
  NetworkConfig base = resolve_config(opts, data.size, data.num_classes);
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = batch;
  tc.optimizer.lr = lr;
  tc.seed = opts.seed;  // identical sample order for every row
  fs::create_directories(opts.out_dir);
  auto rows = run_ablation(base, data.samples, eval_samples, tc,
                           [&](int row, Model<float>& m) {
                             save_checkpoint(fs::path(opts.out_dir) /
                                                 ("row" + std::to_string(row)),
                                             m);
                           });
  io::save_csv(fs::path(opts.out_dir) / "ablation.csv", ablation_to_csv(rows),
               kAblationNote);
  io::save_json(fs::path(opts.out_dir) / "ablation.json",
                ablation_to_json(rows));
  std::printf(
      "row masag lka dae   dice    hd95   (paper ref, full-scale, not "
      "comparable)\n");
  for (const auto& r : rows) {
    if (r.error.empty())
      std::printf("%3d %5d %3d %3d  %.4f  %6.3f   (%.2f / %.2f)\n", r.row,
                  r.use_masag, r.use_lka, r.use_dae, r.dice, r.hd95,
                  r.paper_dice_ref, r.paper_hd95_ref);
    else
      std::printf("%3d %5d %3d %3d  failed: %s\n", r.row, r.use_masag,
                  r.use_lka, r.use_dae, r.error.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MSA2Net: attention-gated segmentation at desk scale"};
  app.require_subcommand(1);
  CommonOpts opts;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opts.config_path,
                    "network config JSON file");
    sub->add_option("--out", opts.out_dir, "output directory");
    sub->add_option("--seed", opts.seed, "RNG seed")
        ->each([&](const std::string&) { opts.seed_given = true; });
  };

  // gen-data
  int gd_n = 200, gd_size = 64, gd_classes = 3;
  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_common(gen);
  gen->add_option("--n", gd_n, "number of samples");
  gen->add_option("--size", gd_size, "image size (divisible by 32)");
  gen->add_option("--classes", gd_classes, "number of classes (>= 2)");

  // train
  std::string tr_data, tr_eval, tr_optimizer = "adam";
  int tr_epochs = 200, tr_batch = 4;
  double tr_lr = 0.0, tr_momentum = 0.9, tr_wd = 1e-4;
  CLI::App* tr = app.add_subcommand("train", "train a model");
  add_common(tr);
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--eval-data", tr_eval, "held-out dataset directory");
  tr->add_option("--epochs", tr_epochs, "training epochs");
  tr->add_option("--batch", tr_batch, "batch size");
  tr->add_option("--optimizer", tr_optimizer, "adam or sgd");
  tr->add_option("--lr", tr_lr, "learning rate (default 1e-3 adam, 0.05 sgd)");
  tr->add_option("--momentum", tr_momentum, "sgd momentum");
  tr->add_option("--weight-decay", tr_wd, "sgd weight decay");

  // eval
  std::string ev_ckpt, ev_data;
  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(ev);
  ev->add_option("--ckpt", ev_ckpt, "checkpoint directory")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();

  // forward
  std::string fw_ckpt, fw_input;
  CLI::App* fw = app.add_subcommand("forward", "run inference on one input");
  add_common(fw);
  fw->add_option("--ckpt", fw_ckpt, "checkpoint directory")->required();
  fw->add_option("--input", fw_input, "input .pgm or .msat")->required();

  // params
  std::string pa_ckpt;
  CLI::App* pa = app.add_subcommand("params", "parameter accounting");
  add_common(pa);
  pa->add_option("--ckpt", pa_ckpt, "checkpoint directory");

  // flops
  std::string fl_ckpt;
  int fl_size = 0;
  CLI::App* fl = app.add_subcommand("flops", "forward-cost estimate");
  add_common(fl);
  fl->add_option("--ckpt", fl_ckpt, "checkpoint directory");
  fl->add_option("--image-size", fl_size, "resolution (default: config)");

  // freq
  std::string fq_ckpt, fq_input, fq_layers, fq_compare;
  int fq_bins = 16;
  CLI::App* fq = app.add_subcommand("freq", "radial frequency analysis");
  add_common(fq);
  fq->add_option("--ckpt", fq_ckpt, "checkpoint directory")->required();
  fq->add_option("--input", fq_input, "input .pgm or .msat")->required();
  fq->add_option("--layers", fq_layers,
                 "comma-separated layer names (default: decoder layers)");
  fq->add_option("--bins", fq_bins, "number of radial bins");
  fq->add_option("--compare", fq_compare,
                 "second checkpoint for an on/off comparison report");

  // gradcam
  std::string gc_ckpt, gc_input, gc_layer = "decoder.layer4";
  int gc_class = 0;
  CLI::App* gc = app.add_subcommand("gradcam", "class activation map");
  add_common(gc);
  gc->add_option("--ckpt", gc_ckpt, "checkpoint directory")->required();
  gc->add_option("--input", gc_input, "input .pgm or .msat")->required();
  gc->add_option("--class-index", gc_class, "class to explain");
  gc->add_option("--layer", gc_layer,
                 "probed layer (default: last decoder layer)");

  // ablate
  std::string ab_data, ab_eval;
  int ab_epochs = 40, ab_batch = 4;
  double ab_lr = 1e-3;
  CLI::App* ab = app.add_subcommand("ablate", "six-row component ablation");
  add_common(ab);
  ab->add_option("--data", ab_data, "dataset directory")->required();
  ab->add_option("--eval-data", ab_eval,
                 "held-out dataset (default: training data)");
  ab->add_option("--epochs", ab_epochs, "epochs per row");
  ab->add_option("--batch", ab_batch, "batch size");
  ab->add_option("--lr", ab_lr, "learning rate");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(opts, gd_n, gd_size, gd_classes);
    if (tr->parsed())
      return cmd_train(opts, tr_data, tr_eval, tr_epochs, tr_batch,
                       tr_optimizer, tr_lr, tr_momentum, tr_wd);
    if (ev->parsed()) return cmd_eval(opts, ev_ckpt, ev_data);
    if (fw->parsed()) return cmd_forward(opts, fw_ckpt, fw_input);
    if (pa->parsed()) return cmd_params(opts, pa_ckpt);
    if (fl->parsed()) return cmd_flops(opts, fl_ckpt, fl_size);
    if (fq->parsed())
      return cmd_freq(opts, fq_ckpt, fq_input, fq_layers, fq_bins, fq_compare);
    if (gc->parsed())
      return cmd_gradcam(opts, gc_ckpt, gc_input, gc_class, gc_layer);
    if (ab->parsed())
      return cmd_ablate(opts, ab_data, ab_eval, ab_epochs, ab_batch, ab_lr);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return 1;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "shape contract error: %s\n", e.what());
    return 1;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
