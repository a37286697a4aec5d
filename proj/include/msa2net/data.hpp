#pragma once

// Synthetic shape-segmentation data: per sample, 1-3 random ellipses or
// rotated rectangles per foreground class, class-specific intensity bands
// plus Gaussian noise, and an exact analytic rasterization as the mask.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "msa2net/common.hpp"
#include "msa2net/io.hpp"
#include "msa2net/ops.hpp"
#include "msa2net/tensor.hpp"

namespace msa2net {

template <typename T = float>
struct SegmentationSample {
  Tensor<T> image;  // [1, 1, S, S], values in [0, 1]
  LabelMap mask;    // [1, S, S], labels in 0..num_classes-1
};

namespace detail {

struct ShapeSpec {
  bool ellipse;
  double cx, cy;    // center, pixels
  double a, b;      // half extents, pixels
  double cos_t, sin_t;

  bool contains(double px, double py) const {
    const double dx = px - cx, dy = py - cy;
    const double u = dx * cos_t + dy * sin_t;
    const double v = -dx * sin_t + dy * cos_t;
    if (ellipse) return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
    return std::abs(u) <= a && std::abs(v) <= b;
  }
};

}  // namespace detail

template <typename T = float>
SegmentationSample<T> generate_synthetic_sample(std::uint64_t seed, int size,
                                                int num_classes) {
  const double min_frac = 0.02, max_frac = 0.5;
  const std::size_t total = static_cast<std::size_t>(size) * size;
  for (int attempt = 0; attempt < 200; ++attempt) {
    Rng rng(Rng::mix(seed, attempt));
    LabelMap mask(1, size, size);
    bool ok = true;
    for (int cls = 1; cls < num_classes && ok; ++cls) {
      const int shapes = static_cast<int>(rng.uniform_int(1, 3));
      std::vector<detail::ShapeSpec> specs;
      for (int k = 0; k < shapes; ++k) {
        detail::ShapeSpec s;
        s.ellipse = rng.uniform() < 0.5;
        s.cx = rng.uniform(0.2, 0.8) * size;
        s.cy = rng.uniform(0.2, 0.8) * size;
        s.a = rng.uniform(0.10, 0.22) * size;
        s.b = rng.uniform(0.10, 0.22) * size;
        const double theta = rng.uniform(0.0, 3.14159265358979323846);
        s.cos_t = std::cos(theta);
        s.sin_t = std::sin(theta);
        specs.push_back(s);
      }
      // classes must not overwrite each other: slivers left by painting
      // one class over another are not meaningful structures
      for (int i = 0; i < size && ok; ++i)
        for (int j = 0; j < size && ok; ++j)
          for (const auto& s : specs)
            if (s.contains(j + 0.5, i + 0.5)) {
              if (mask.at(0, i, j) != 0)
                ok = false;
              else
                mask.at(0, i, j) = cls;
              break;
            }
    }
    for (int cls = 1; cls < num_classes && ok; ++cls) {
      std::size_t count = 0;
      for (const auto v : mask.v) count += (v == cls);
      const double frac = static_cast<double>(count) / static_cast<double>(total);
      ok = frac >= min_frac && frac <= max_frac;
    }
    if (!ok) continue;

    SegmentationSample<T> sample;
    sample.mask = std::move(mask);
    sample.image = Tensor<T>({1, 1, size, size});
    for (std::size_t i = 0; i < total; ++i) {
      const double band =
          (sample.mask.v[i] + 0.5) / static_cast<double>(num_classes);
      const double v = band + rng.normal(0.0, 0.05);
      sample.image.data()[i] = static_cast<T>(std::clamp(v, 0.0, 1.0));
    }
    return sample;
  }
  throw ConfigError("synthetic sample generation failed to satisfy the "
                    "foreground fraction bounds");
}

template <typename T = float>
std::vector<SegmentationSample<T>> generate_synthetic_dataset(
    std::uint64_t seed, int n, int size, int num_classes) {
  if (size < 32 || size % 32 != 0)
    throw ConfigError("dataset image size must be divisible by 32");
  if (num_classes < 2) throw ConfigError("dataset needs num_classes >= 2");
  if (n < 1) throw ConfigError("dataset needs at least one sample");
  std::vector<SegmentationSample<T>> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i)
    out.push_back(
        generate_synthetic_sample<T>(Rng::mix(seed, 0x5eed0000u + i), size,
                                     num_classes));
  return out;
}

// ---------------------------------------------------------------------------
// Persistence: paired P5 PGM files plus a JSON index.
// ---------------------------------------------------------------------------

inline void save_dataset(const std::filesystem::path& dir,
                         const std::vector<SegmentationSample<float>>& data,
                         int num_classes, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  nlohmann::json samples = nlohmann::json::array();
  char name[64];
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::snprintf(name, sizeof(name), "sample_%04zu_img.pgm", i);
    const std::string img_name = name;
    std::snprintf(name, sizeof(name), "sample_%04zu_mask.pgm", i);
    const std::string mask_name = name;
    io::save_pgm(dir / img_name, io::tensor_to_pgm(data[i].image));
    io::save_pgm(dir / mask_name, io::labels_to_pgm(data[i].mask));
    samples.push_back({{"image", img_name}, {"mask", mask_name}});
  }
  const int size = data.empty() ? 0 : data[0].image.h();
  io::save_json(dir / "index.json", {{"format", "msa2net-dataset"},
                                     {"format_version", 1},
                                     {"size", size},
                                     {"num_classes", num_classes},
                                     {"seed", seed},
                                     {"count", data.size()},
                                     {"samples", samples}});
}

struct LoadedDataset {
  std::vector<SegmentationSample<float>> samples;
  int num_classes = 0;
  int size = 0;
};

inline LoadedDataset load_dataset(const std::filesystem::path& dir) {
  const nlohmann::json index = io::load_json(dir / "index.json");
  if (index.value("format", "") != "msa2net-dataset")
    throw FormatError(dir.string() + "/index.json: not a dataset index");
  LoadedDataset out;
  out.num_classes = index.at("num_classes");
  out.size = index.at("size");
  for (const auto& entry : index.at("samples")) {
    SegmentationSample<float> s;
    s.image = io::pgm_to_tensor<float>(
        io::load_pgm(dir / entry.at("image").get<std::string>()));
    s.mask = io::pgm_to_labels(
        io::load_pgm(dir / entry.at("mask").get<std::string>()));
    for (const auto v : s.mask.v)
      if (v >= out.num_classes)
        throw DataError(dir.string() + ": mask label " + std::to_string(v) +
                        " exceeds num_classes");
    out.samples.push_back(std::move(s));
  }
  return out;
}

}  // namespace msa2net
