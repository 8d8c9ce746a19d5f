#pragma once

// Linear evaluation on frozen encoders, the end-to-end supervised baseline,
// and patch-level prediction.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "histoperm/augment.hpp"
#include "histoperm/errors.hpp"
#include "histoperm/losses.hpp"
#include "histoperm/metrics.hpp"
#include "histoperm/nn.hpp"
#include "histoperm/optim.hpp"
#include "histoperm/random.hpp"
#include "histoperm/synth.hpp"
#include "histoperm/tensor.hpp"

namespace histoperm {

template <class T>
struct LinearProbe {
  BasicTensor<T> weight;  // [D_f x C]
  BasicTensor<T> bias;    // [C]

  LinearProbe() = default;
  LinearProbe(BasicTensor<T> w, BasicTensor<T> b) : weight(std::move(w)), bias(std::move(b)) {}
  LinearProbe(std::size_t feature_dim, std::size_t n_classes)
      : weight(BasicTensor<T>::zeros({feature_dim, n_classes}, true)),
        bias(BasicTensor<T>::zeros({n_classes}, true)) {}

  std::size_t feature_dim() const { return weight.rows(); }
  std::size_t n_classes() const { return weight.cols(); }
  BasicTensor<T> logits(const BasicTensor<T>& features) const { return linear_forward(features, weight, bias); }
  std::vector<BasicTensor<T>> parameters() const { return {weight, bias}; }
};

struct EpochLog {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Crop (p = 1) and flips only.
inline TransformConfig affine_transform(std::size_t out_size) {
  TransformConfig t;
  t.crop.out_size = out_size;
  t.jitter.p = 0.0;
  t.grayscale.p = 0.0;
  t.blur.p = 0.0;
  t.solarize.p = 0.0;
  return t;
}

struct ProbeConfig {
  std::size_t epochs = 80;
  std::size_t batch_size = 256;
  double lr = 0.2;
  double warmup_epochs = 5.0;
  double momentum = 0.9;
  double weight_decay = 0.0;
  bool augment = true;
  TransformConfig transform = affine_transform(32);

  void validate() const {
    if (epochs < 1) throw ConfigError("probe epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("probe batch size must be at least 1");
    LrSchedule{ScheduleKind::cosine_warmup, lr, std::min(warmup_epochs, static_cast<double>(epochs)),
               static_cast<double>(epochs)}
        .validate();
    transform.validate();
  }

  LrSchedule schedule() const {
    return {ScheduleKind::cosine_warmup, lr, std::min(warmup_epochs, static_cast<double>(epochs)),
            static_cast<double>(epochs)};
  }
};

struct SupervisedConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 16;
  double lr = 1e-4;
  double decay_factor = 0.85;
  double weight_decay = 1e-4;
  JitterConfig jitter{1.0, 0.5, 0.5, 0.2, 0.5};
  std::size_t out_size = 32;

  void validate() const {
    if (epochs < 1) throw ConfigError("supervised epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("supervised batch size must be at least 1");
    schedule().validate();
  }

  LrSchedule schedule() const {
    return {ScheduleKind::exp_decay, lr, 0.0, static_cast<double>(epochs), decay_factor};
  }
};

namespace detail {

inline void check_labels(std::span<const int> labels, std::size_t n_classes) {
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= n_classes) {
      throw ContractError("label " + std::to_string(y) + " outside [0, " + std::to_string(n_classes) + ")");
    }
  }
}

template <class T>
std::size_t count_correct(const BasicTensor<T>& logits, std::span<const int> labels) {
  std::size_t correct = 0;
  const std::size_t c = logits.cols();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (logits[i * c + k] > logits[i * c + best]) best = k;
    }
    correct += best == static_cast<std::size_t>(labels[i]);
  }
  return correct;
}

}  // namespace detail

/// Runs `epochs` passes over shuffled mini-batches. `batch_loss(indices,
/// epoch)` builds the loss and logits for one batch; `step(lr)` applies one
/// optimizer update from the accumulated gradients.
template <class T, class BatchFn, class StepFn>
std::vector<EpochLog> run_epochs(std::size_t n, std::size_t epochs, std::size_t batch_size, const LrSchedule& schedule,
                                 std::span<const int> labels, Rng& shuffle_rng, BatchFn&& batch_loss, StepFn&& step) {
  batch_size = std::min(batch_size, n);
  const std::size_t steps = (n + batch_size - 1) / batch_size;
  std::vector<std::size_t> order(n);
  std::vector<EpochLog> logs;
  for (std::size_t e = 0; e < epochs; ++e) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t s = 0; s < steps; ++s) {
      const std::size_t lo = s * batch_size, hi = std::min(n, lo + batch_size);
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                   order.begin() + static_cast<std::ptrdiff_t>(hi));
      std::vector<int> y;
      for (auto i : idx) y.push_back(labels[i]);
      auto [loss, logits] = batch_loss(idx, e);
      if (!std::isfinite(static_cast<double>(loss.item()))) {
        throw NumericError("training loss is not finite in epoch " + std::to_string(e));
      }
      backward(loss);
      step(lr_at(schedule, static_cast<double>(e) + static_cast<double>(s) / static_cast<double>(steps)));
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
      correct += detail::count_correct(logits, y);
    }
    logs.push_back({e, "train", loss_sum / static_cast<double>(n),
                    static_cast<double>(correct) / static_cast<double>(n)});
  }
  return logs;
}

template <class T>
struct ProbeResult {
  LinearProbe<T> probe;
  std::vector<EpochLog> log;
};

/// Probe on fixed features [N x D_f] (no augmentation).
template <class T>
ProbeResult<T> train_linear_probe_on_features(const BasicTensor<T>& features, std::span<const int> labels,
                                              std::size_t n_classes, const ProbeConfig& cfg, Rng& rng) {
  cfg.validate();
  detail::require_matrix(features, "train_linear_probe");
  if (features.rows() != labels.size() || labels.empty()) {
    throw ContractError("train_linear_probe: need one label per feature row");
  }
  detail::check_labels(labels, n_classes);
  ProbeResult<T> r{LinearProbe<T>(features.cols(), n_classes), {}};
  SgdState<T> opt;
  const SgdConfig sgd{cfg.momentum, cfg.weight_decay};
  const std::size_t d = features.cols();
  r.log = run_epochs<T>(
      labels.size(), cfg.epochs, cfg.batch_size, cfg.schedule(), labels, rng,
      [&](const std::vector<std::size_t>& idx, std::size_t) {
        Buffer<T> rows;
        std::vector<int> y;
        rows.reserve(idx.size() * d);
        for (auto i : idx) {
          rows.insert(rows.end(), features.values().begin() + static_cast<std::ptrdiff_t>(i * d),
                      features.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
          y.push_back(labels[i]);
        }
        auto logits = r.probe.logits(BasicTensor<T>({idx.size(), d}, std::move(rows)));
        return std::pair{softmax_cross_entropy(logits, y), logits};
      },
      [&](double lr) {
        auto params = r.probe.parameters();
        sgd_nesterov_step<T>(params, opt, sgd, lr);
        for (auto& p : params) p.zero_grad();
      });
  return r;
}

template <class T>
BasicTensor<T> encode_images(const Mlp<T>& encoder, const std::vector<Image>& images) {
  std::vector<float> flat = encoder_input(images);
  const std::size_t d = encoder.spec().input_dim;
  if (!images.empty() && images.front().size() != d) {
    throw DimensionError("encoder expects " + std::to_string(d) + " inputs, images have " +
                         std::to_string(images.front().size()));
  }
  return encoder.forward(BasicTensor<T>({images.size(), d}, Buffer<T>(flat.begin(), flat.end())));
}

/// Frozen-encoder features for every patch, computed in chunks.
template <class T>
BasicTensor<T> extract_features(const Mlp<T>& encoder, std::span<const Image* const> patches,
                                std::size_t chunk = 512) {
  const Mlp<T> frozen = encoder.copy(false);
  const std::size_t d = encoder.spec().output_dim;
  Buffer<T> out;
  out.reserve(patches.size() * d);
  for (std::size_t lo = 0; lo < patches.size(); lo += chunk) {
    std::vector<Image> imgs;
    for (std::size_t i = lo; i < std::min(patches.size(), lo + chunk); ++i) imgs.push_back(*patches[i]);
    const auto f = encode_images(frozen, imgs);
    out.insert(out.end(), f.values().begin(), f.values().end());
  }
  return BasicTensor<T>({patches.size(), d}, std::move(out));
}

/// Softmax cross-entropy probe on a frozen copy of `encoder`. With
/// augmentation on, each epoch re-crops and re-flips every training patch
/// from seeds derived from (augment_seed, epoch, patch index).
template <class T>
ProbeResult<T> train_linear_probe(const Mlp<T>& encoder, const PatchIndex& train, std::size_t n_classes,
                                  const ProbeConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (train.images.empty()) throw ContractError("train_linear_probe: no training patches");
  detail::check_labels(train.labels, n_classes);
  Rng shuffle(derive_seed(seed, "shuffle"));
  if (!cfg.augment) {
    return train_linear_probe_on_features(extract_features(encoder, train.images), train.labels, n_classes, cfg,
                                          shuffle);
  }
  const Mlp<T> frozen = encoder.copy(false);
  const std::uint64_t aug_seed = derive_seed(seed, "augment");
  ProbeResult<T> r{LinearProbe<T>(encoder.spec().output_dim, n_classes), {}};
  SgdState<T> opt;
  const SgdConfig sgd{cfg.momentum, cfg.weight_decay};
  r.log = run_epochs<T>(
      train.images.size(), cfg.epochs, cfg.batch_size, cfg.schedule(), train.labels, shuffle,
      [&](const std::vector<std::size_t>& idx, std::size_t epoch) {
        std::vector<Image> imgs;
        std::vector<int> y;
        for (auto i : idx) {
          Rng rng(derive_seed(aug_seed, epoch, i));
          imgs.push_back(apply_view_transform(*train.images[i], cfg.transform, rng));
          y.push_back(train.labels[i]);
        }
        auto logits = r.probe.logits(encode_images(frozen, imgs));
        return std::pair{softmax_cross_entropy(logits, y), logits};
      },
      [&](double lr) {
        auto params = r.probe.parameters();
        sgd_nesterov_step<T>(params, opt, sgd, lr);
        for (auto& p : params) p.zero_grad();
      });
  return r;
}

namespace detail {

inline ProbMatrix softmax_rows(std::span<const double> logits, std::size_t n, std::size_t c) {
  ProbMatrix out(n, std::vector<double>(c));
  for (std::size_t i = 0; i < n; ++i) {
    double mx = logits[i * c];
    for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, logits[i * c + k]);
    double denom = 0.0;
    for (std::size_t k = 0; k < c; ++k) denom += (out[i][k] = std::exp(logits[i * c + k] - mx));
    for (std::size_t k = 0; k < c; ++k) out[i][k] /= denom;
  }
  return out;
}

}  // namespace detail

/// N x C class probabilities; the softmax is evaluated in double.
template <class T>
ProbMatrix patch_predict(const Mlp<T>& encoder, const LinearProbe<T>& probe, std::span<const Image* const> patches) {
  if (encoder.spec().output_dim != probe.feature_dim()) {
    throw DimensionError("patch_predict: encoder emits " + std::to_string(encoder.spec().output_dim) +
                         " features, probe expects " + std::to_string(probe.feature_dim()));
  }
  const auto features = extract_features(encoder, patches);
  const LinearProbe<T> frozen{probe.weight.clone(false), probe.bias.clone(false)};
  const auto logits = frozen.logits(features);
  std::vector<double> lg(logits.values().begin(), logits.values().end());
  return detail::softmax_rows(lg, patches.size(), probe.n_classes());
}

template <class T>
struct SupervisedModel {
  Mlp<T> encoder;
  LinearProbe<T> head;
};

template <class T>
struct SupervisedResult {
  SupervisedModel<T> model;
  std::vector<EpochLog> log;
};

/// Color jitter (always), a flip on each axis with probability 1/2, and a
/// rotation by a uniformly chosen multiple of 90 degrees.
inline Image supervised_augment(const Image& img, const SupervisedConfig& cfg, Rng& rng) {
  Image out = img.height == cfg.out_size && img.width == cfg.out_size ? img
                                                                       : resize_bilinear(img, cfg.out_size, cfg.out_size);
  if (rng.bernoulli(cfg.jitter.p)) out = color_jitter(out, cfg.jitter, rng);
  out = random_flip(out, 0.5, 0.5, rng);
  return rotate90(out, static_cast<int>(rng.below(4)));
}

/// Encoder plus linear head trained end to end with cross-entropy and Adam.
template <class T>
SupervisedResult<T> train_supervised_baseline(const MlpSpec& encoder_spec, const PatchIndex& train,
                                              std::size_t n_classes, const SupervisedConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (train.images.empty()) throw ContractError("train_supervised_baseline: no training patches");
  detail::check_labels(train.labels, n_classes);
  Rng init(derive_seed(seed, "init"));
  SupervisedResult<T> r{{Mlp<T>(encoder_spec, init), LinearProbe<T>(encoder_spec.output_dim, n_classes)}, {}};
  {
    // Small random head so the encoder receives gradient from the first step.
    const double bound = 1.0 / std::sqrt(static_cast<double>(encoder_spec.output_dim));
    for (auto& v : r.model.head.weight.mutable_values()) v = static_cast<T>(init.uniform(-bound, bound));
  }
  Rng shuffle(derive_seed(seed, "shuffle"));
  const std::uint64_t aug_seed = derive_seed(seed, "augment");
  AdamState<T> opt;
  const AdamConfig adam{0.9, 0.999, 1e-8, cfg.weight_decay};
  auto params = r.model.encoder.parameters();
  for (auto& p : r.model.head.parameters()) params.push_back(p);
  r.log = run_epochs<T>(
      train.images.size(), cfg.epochs, cfg.batch_size, cfg.schedule(), train.labels, shuffle,
      [&](const std::vector<std::size_t>& idx, std::size_t epoch) {
        std::vector<Image> imgs;
        std::vector<int> y;
        for (auto i : idx) {
          Rng rng(derive_seed(aug_seed, epoch, i));
          imgs.push_back(supervised_augment(*train.images[i], cfg, rng));
          y.push_back(train.labels[i]);
        }
        auto logits = r.model.head.logits(encode_images(r.model.encoder, imgs));
        return std::pair{softmax_cross_entropy(logits, y), logits};
      },
      [&](double lr) {
        adam_step<T>(params, opt, adam, lr);
        for (auto& p : params) p.zero_grad();
      });
  return r;
}

}  // namespace histoperm
