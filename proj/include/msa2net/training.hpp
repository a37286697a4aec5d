#pragma once

// Desk-scale supervised training: Dice + cross-entropy loss, SGD with
// momentum and Adam, and the training/evaluation loops.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "msa2net/data.hpp"
#include "msa2net/metrics.hpp"
#include "msa2net/network.hpp"
#include "msa2net/ops.hpp"

namespace msa2net {

// 0.5 * (soft multi-class Dice loss, smoothing 1.0) + 0.5 * cross-entropy
template <typename T>
Tensor<T> dice_ce_loss(const Tensor<T>& logits, const LabelMap& labels,
                       double smooth = 1.0) {
  const int k = logits.c();
  Tensor<T> probs = softmax_channels(logits);
  Tensor<T> target = onehot<T>(labels, k);  // constant, off-tape
  Tensor<T> inter = reduce_sum(mul(probs, target), true, false, true, true);
  Tensor<T> psum = reduce_sum(probs, true, false, true, true);
  Tensor<T> tsum = reduce_sum(target, true, false, true, true);
  Tensor<T> dice = div(add_scalar(scale(inter, T(2)), static_cast<T>(smooth)),
                       add_scalar(add(psum, tsum), static_cast<T>(smooth)));
  Tensor<T> mean_dice =
      scale(reduce_sum(dice, false, true, false, false), static_cast<T>(1.0 / k));
  Tensor<T> dice_loss = add_scalar(scale(mean_dice, T(-1)), T(1));
  Tensor<T> ce = cross_entropy_channels(logits, labels);
  return add(scale(dice_loss, T(0.5)), scale(ce, T(0.5)));
}

// ---------------------------------------------------------------------------
// Optimizers. SGD: v <- mu*v + g + lambda*theta; theta <- theta - lr*v.
// Adam: bias-corrected first/second moments.
// ---------------------------------------------------------------------------

template <typename T>
void sgd_update(T* theta, const T* grad, T* velocity, std::size_t n, double lr,
                double momentum, double weight_decay) {
  for (std::size_t i = 0; i < n; ++i) {
    const double v = momentum * static_cast<double>(velocity[i]) +
                     static_cast<double>(grad[i]) +
                     weight_decay * static_cast<double>(theta[i]);
    velocity[i] = static_cast<T>(v);
    theta[i] = static_cast<T>(static_cast<double>(theta[i]) - lr * v);
  }
}

template <typename T>
void adam_update(T* theta, const T* grad, T* m, T* v, std::size_t n, long step,
                 double lr, double beta1, double beta2, double eps,
                 double weight_decay) {
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < n; ++i) {
    const double g =
        static_cast<double>(grad[i]) + weight_decay * static_cast<double>(theta[i]);
    const double mi = beta1 * static_cast<double>(m[i]) + (1.0 - beta1) * g;
    const double vi = beta2 * static_cast<double>(v[i]) + (1.0 - beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double mhat = mi / bc1;
    const double vhat = vi / bc2;
    theta[i] = static_cast<T>(static_cast<double>(theta[i]) -
                              lr * mhat / (std::sqrt(vhat) + eps));
  }
}

enum class OptimizerKind { kAdam, kSgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double lr = 1e-3;  // desk default; the full-scale protocol uses SGD 0.05
  double momentum = 0.9;
  double weight_decay = 0.0;  // 1e-4 for the SGD protocol
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T = float>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

  const OptimizerConfig& config() const { return cfg_; }

  void step(std::vector<std::pair<std::string, Tensor<T>*>>& params) {
    if (slot0_.empty()) {
      for (auto& [name, t] : params) {
        slot0_.emplace_back(t->size(), T(0));
        slot1_.emplace_back(t->size(), T(0));
      }
    }
    if (slot0_.size() != params.size())
      throw UsageError("optimizer state does not match the parameter set");
    ++step_;
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T>* t = params[i].second;
      if (!t->requires_grad())
        throw UsageError("optimizer step without gradients for " +
                         params[i].first);
      if (slot0_[i].size() != t->size())
        throw UsageError("optimizer buffer shape mismatch for " +
                         params[i].first);
      if (cfg_.kind == OptimizerKind::kSgd) {
        sgd_update(t->data(), t->grad().data(), slot0_[i].data(), t->size(),
                   cfg_.lr, cfg_.momentum, cfg_.weight_decay);
      } else {
        adam_update(t->data(), t->grad().data(), slot0_[i].data(),
                    slot1_[i].data(), t->size(), step_, cfg_.lr, cfg_.beta1,
                    cfg_.beta2, cfg_.eps, cfg_.weight_decay);
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  long step_ = 0;
  std::vector<std::vector<T>> slot0_;  // SGD velocity / Adam first moment
  std::vector<std::vector<T>> slot1_;  // Adam second moment
};

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct TrainConfig {
  int epochs = 200;
  int batch_size = 4;
  OptimizerConfig optimizer;
  std::uint64_t seed = 42;
  bool verbose = false;
  // called after each epoch with (epoch, mean loss); return false to stop
  std::function<bool(int, double)> on_epoch;
};

struct TrainResult {
  std::vector<double> loss_curve;  // mean batch loss per epoch
};

template <typename T>
std::pair<Tensor<T>, LabelMap> assemble_batch(
    const std::vector<SegmentationSample<T>>& data,
    const std::vector<std::size_t>& idx, int in_channels) {
  const int s = data[idx[0]].image.h();
  const int b = static_cast<int>(idx.size());
  Tensor<T> images({b, in_channels, s, s});
  LabelMap labels(b, s, s);
  const std::size_t plane = static_cast<std::size_t>(s) * s;
  for (int i = 0; i < b; ++i) {
    const auto& sample = data[idx[i]];
    if (sample.image.h() != s || sample.image.w() != s)
      throw DataError("dataset samples disagree on image size");
    for (int c = 0; c < in_channels; ++c)
      std::copy_n(sample.image.data(), plane,
                  images.data() + (static_cast<std::size_t>(i) * in_channels +
                                   c) *
                                      plane);
    std::copy_n(sample.mask.v.data(), plane, labels.v.data() + i * plane);
  }
  return {std::move(images), std::move(labels)};
}

template <typename T>
void throw_on_non_finite(Model<T>& m, double loss_value) {
  for (auto& [name, t] : m.parameters())
    if (!t->all_finite())
      throw NumericError("non-finite values first appeared in tensor '" +
                         name + "'");
  throw NumericError("loss became non-finite (" + std::to_string(loss_value) +
                     ") with all parameters finite");
}

template <typename T = float>
TrainResult train(Model<T>& m, const std::vector<SegmentationSample<T>>& data,
                  const TrainConfig& tc) {
  if (data.empty()) throw DataError("training dataset is empty");
  Rng shuffle_rng(Rng::mix(tc.seed, 0x7ea1u));
  Optimizer<T> opt(tc.optimizer);
  TrainResult result;
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    // Fisher-Yates with the deterministic rng
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j =
          static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(order[i - 1], order[j]);
    }
    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += tc.batch_size) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(tc.batch_size));
      std::vector<std::size_t> idx(order.begin() + start, order.begin() + end);
      auto [images, labels] = assemble_batch(data, idx, m.cfg.in_channels);

      auto params = m.parameters();
      Tape<T> tape;
      for (auto& [name, t] : params) tape.watch(*t);
      Tensor<T> logits = model_forward(m, images);
      Tensor<T> loss = dice_ce_loss(logits, labels);
      const double loss_value = static_cast<double>(loss.data()[0]);
      if (!std::isfinite(loss_value)) throw_on_non_finite(m, loss_value);
      tape.backward(loss);
      opt.step(params);
      for (auto& [name, t] : params) t->detach();
      epoch_loss += loss_value;
      ++batches;
    }
    result.loss_curve.push_back(epoch_loss / std::max(1, batches));
    if (tc.verbose && (epoch % 10 == 0 || epoch == tc.epochs - 1))
      std::fprintf(stderr, "epoch %4d loss %.6f\n", epoch,
                   result.loss_curve.back());
    if (tc.on_epoch && !tc.on_epoch(epoch, result.loss_curve.back())) break;
  }
  // training may abort between steps; make sure nothing crept in
  for (auto& [name, t] : m.parameters())
    if (!t->all_finite())
      throw NumericError("non-finite values first appeared in tensor '" +
                         name + "'");
  return result;
}

// argmax prediction per sample, then mask-level metrics; undefined HD95
// entries are excluded from means and counted.
template <typename T = float>
MetricReport evaluate(Model<T>& m,
                      const std::vector<SegmentationSample<T>>& data) {
  if (data.empty()) throw DataError("evaluation dataset is empty");
  std::vector<LabelMap> preds;
  preds.reserve(data.size());
  for (const auto& sample : data) {
    auto [image, labels] = assemble_batch<T>(
        {sample}, std::vector<std::size_t>{0}, m.cfg.in_channels);
    preds.push_back(argmax_channels(model_forward(m, image)));
  }
  std::vector<std::pair<const LabelMap*, const LabelMap*>> pairs;
  pairs.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i)
    pairs.emplace_back(&preds[i], &data[i].mask);
  return evaluate_masks(pairs, m.cfg.num_classes);
}

}  // namespace msa2net
