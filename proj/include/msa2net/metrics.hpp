#pragma once

// Segmentation metrics: Dice similarity and the 95th percentile of symmetric
// boundary-to-boundary distances (unit pixel spacing, 4-connectivity
// boundaries, linear-interpolation percentile).

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "msa2net/common.hpp"
#include "msa2net/ops.hpp"

namespace msa2net {

// 2|P∩T| / (|P|+|T|); both empty -> 1 by convention
inline double dsc(const LabelMap& pred, const LabelMap& truth, int cls) {
  if (pred.n != truth.n || pred.h != truth.h || pred.w != truth.w)
    throw ShapeError("dsc: mask shapes differ");
  std::size_t inter = 0, p = 0, t = 0;
  for (std::size_t i = 0; i < pred.v.size(); ++i) {
    const bool in_p = pred.v[i] == cls;
    const bool in_t = truth.v[i] == cls;
    inter += (in_p && in_t);
    p += in_p;
    t += in_t;
  }
  if (p + t == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(p + t);
}

struct Hd95Result {
  bool defined = false;
  double value = 0.0;
};

namespace detail {

// 4-connectivity boundary: a mask pixel with any 4-neighbor outside the mask
// (out-of-image counts as outside)
inline std::vector<std::uint8_t> boundary_of(const LabelMap& m, int cls,
                                             int index_in_batch) {
  const int h = m.h, w = m.w;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(h) * w, 0);
  auto inside = [&](int i, int j) {
    return i >= 0 && i < h && j >= 0 && j < w &&
           m.at(index_in_batch, i, j) == cls;
  };
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      if (m.at(index_in_batch, i, j) != cls) continue;
      if (!inside(i - 1, j) || !inside(i + 1, j) || !inside(i, j - 1) ||
          !inside(i, j + 1))
        out[static_cast<std::size_t>(i) * w + j] = 1;
    }
  return out;
}

// Felzenszwalb-Huttenlocher exact squared Euclidean distance transform.
inline void edt_1d(const std::vector<double>& f, std::vector<double>& d,
                   int n) {
  std::vector<int> v(n);
  std::vector<double> z(n + 1);
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    double s;
    while (true) {
      const int p = v[k];
      s = ((f[q] + q * q) - (f[p] + p * p)) / (2.0 * q - 2.0 * p);
      if (s <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const int p = v[k];
    d[q] = (q - p) * static_cast<double>(q - p) + f[p];
  }
}

inline std::vector<double> edt_squared(const std::vector<std::uint8_t>& on,
                                       int h, int w) {
  // large finite "unreached" marker: keeps the parabola intersections
  // finite, so the k index can never underrun its sentinel
  const double inf = 1e20;
  std::vector<double> dist(static_cast<std::size_t>(h) * w);
  for (std::size_t i = 0; i < dist.size(); ++i) dist[i] = on[i] ? 0.0 : inf;
  std::vector<double> f(std::max(h, w)), d(std::max(h, w));
  // columns
  for (int j = 0; j < w; ++j) {
    for (int i = 0; i < h; ++i) f[i] = dist[static_cast<std::size_t>(i) * w + j];
    edt_1d(f, d, h);
    for (int i = 0; i < h; ++i) dist[static_cast<std::size_t>(i) * w + j] = d[i];
  }
  // rows
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) f[j] = dist[static_cast<std::size_t>(i) * w + j];
    edt_1d(f, d, w);
    for (int j = 0; j < w; ++j) dist[static_cast<std::size_t>(i) * w + j] = d[j];
  }
  return dist;
}

// linear-interpolation percentile of an ascending-sorted vector
inline double percentile_sorted(const std::vector<double>& v, double q) {
  const double h = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(h);
  if (lo + 1 >= v.size()) return v.back();
  const double frac = h - static_cast<double>(lo);
  return v[lo] + frac * (v[lo + 1] - v[lo]);
}

}  // namespace detail

// Directed min-distances from each boundary pixel of P to T's boundary and
// vice versa form one multiset; HD95 is its 95th percentile. Either boundary
// empty -> undefined (a value, not an error).
inline Hd95Result hd95(const LabelMap& pred, const LabelMap& truth, int cls) {
  if (pred.n != 1 || truth.n != 1)
    throw UsageError("hd95 operates on single masks, got batched maps");
  if (pred.h != truth.h || pred.w != truth.w)
    throw ShapeError("hd95: mask shapes differ");
  const int h = pred.h, w = pred.w;
  const auto bp = detail::boundary_of(pred, cls, 0);
  const auto bt = detail::boundary_of(truth, cls, 0);
  const bool p_empty = std::find(bp.begin(), bp.end(), 1) == bp.end();
  const bool t_empty = std::find(bt.begin(), bt.end(), 1) == bt.end();
  if (p_empty || t_empty) return {false, 0.0};

  const auto dist_to_t = detail::edt_squared(bt, h, w);
  const auto dist_to_p = detail::edt_squared(bp, h, w);
  std::vector<double> dists;
  for (std::size_t i = 0; i < bp.size(); ++i)
    if (bp[i]) dists.push_back(std::sqrt(dist_to_t[i]));
  for (std::size_t i = 0; i < bt.size(); ++i)
    if (bt[i]) dists.push_back(std::sqrt(dist_to_p[i]));
  std::sort(dists.begin(), dists.end());
  return {true, detail::percentile_sorted(dists, 0.95)};
}

// Per-class scores over foreground classes 1..num_classes-1. Means skip
// undefined HD95 entries and report how many were excluded.
struct MetricReport {
  int num_classes = 0;
  std::vector<double> dsc_per_class;    // index 0 <-> class 1
  std::vector<double> hd95_per_class;   // mean over defined samples
  std::vector<int> hd95_defined_count;  // samples contributing per class
  double mean_dsc = 0.0;
  double mean_hd95 = 0.0;
  int hd95_excluded = 0;  // sample-class pairs with undefined HD95
};

inline MetricReport evaluate_masks(
    const std::vector<std::pair<const LabelMap*, const LabelMap*>>& pairs,
    int num_classes) {
  if (pairs.empty()) throw DataError("no prediction/truth pairs to evaluate");
  MetricReport rep;
  rep.num_classes = num_classes;
  rep.dsc_per_class.assign(num_classes - 1, 0.0);
  rep.hd95_per_class.assign(num_classes - 1, 0.0);
  rep.hd95_defined_count.assign(num_classes - 1, 0);
  for (const auto& [pred, truth] : pairs) {
    for (int cls = 1; cls < num_classes; ++cls) {
      rep.dsc_per_class[cls - 1] += dsc(*pred, *truth, cls);
      const Hd95Result hd = hd95(*pred, *truth, cls);
      if (hd.defined) {
        rep.hd95_per_class[cls - 1] += hd.value;
        ++rep.hd95_defined_count[cls - 1];
      } else {
        ++rep.hd95_excluded;
      }
    }
  }
  const double n = static_cast<double>(pairs.size());
  double dsc_sum = 0.0, hd_sum = 0.0;
  int hd_classes = 0;
  for (int cls = 1; cls < num_classes; ++cls) {
    rep.dsc_per_class[cls - 1] /= n;
    dsc_sum += rep.dsc_per_class[cls - 1];
    if (rep.hd95_defined_count[cls - 1] > 0) {
      rep.hd95_per_class[cls - 1] /= rep.hd95_defined_count[cls - 1];
      hd_sum += rep.hd95_per_class[cls - 1];
      ++hd_classes;
    }
  }
  rep.mean_dsc = dsc_sum / std::max(1, num_classes - 1);
  rep.mean_hd95 = hd_classes > 0 ? hd_sum / hd_classes : 0.0;
  return rep;
}

}  // namespace msa2net
