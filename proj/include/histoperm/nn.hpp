#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "histoperm/random.hpp"
#include "histoperm/tensor.hpp"

namespace histoperm {

struct MlpSpec {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden_dims;
  std::size_t output_dim = 1;

  std::size_t layer_count() const { return hidden_dims.size() + 1; }

  /// Widths from input to output, length layer_count() + 1.
  std::vector<std::size_t> widths() const {
    std::vector<std::size_t> w{input_dim};
    w.insert(w.end(), hidden_dims.begin(), hidden_dims.end());
    w.push_back(output_dim);
    return w;
  }

  void validate() const {
    for (auto d : widths()) {
      if (d < 1) throw ConfigError("MLP dimensions must be at least 1");
    }
  }

  bool operator==(const MlpSpec&) const = default;
};

template <class T>
struct MlpParams {
  std::vector<BasicTensor<T>> weights;  // [in x out]
  std::vector<BasicTensor<T>> biases;   // [out]
};

/// Linear layers with ReLU between them and no nonlinearity after the last.
template <class T>
BasicTensor<T> mlp_forward(const BasicTensor<T>& x, const MlpSpec& spec, const MlpParams<T>& params) {
  if (x.ndim() != 2 || x.cols() != spec.input_dim) {
    throw DimensionError("mlp_forward: input " + shape_string(x.shape()) + " but spec expects " +
                         std::to_string(spec.input_dim) + " columns");
  }
  if (params.weights.size() != spec.layer_count() || params.biases.size() != spec.layer_count()) {
    throw DimensionError("mlp_forward: parameter count does not match spec");
  }
  BasicTensor<T> h = x;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    h = linear_forward(h, params.weights[l], params.biases[l]);
    if (l + 1 < spec.layer_count()) h = relu(h);
  }
  return h;
}

template <class T>
class Mlp {
 public:
  Mlp() = default;

  /// He-uniform weights, Uniform(-sqrt(6/fan_in), sqrt(6/fan_in)), so the
  /// activation scale survives a stack of ReLU layers; biases start at zero.
  Mlp(MlpSpec spec, Rng& rng) : spec_(std::move(spec)) {
    spec_.validate();
    const auto w = spec_.widths();
    for (std::size_t l = 0; l + 1 < w.size(); ++l) {
      const double bound = std::sqrt(6.0 / static_cast<double>(w[l]));
      std::vector<T> wv(w[l] * w[l + 1]), bv(w[l + 1], T(0));
      for (auto& v : wv) v = static_cast<T>(rng.uniform(-bound, bound));
      params_.weights.emplace_back(Shape{w[l], w[l + 1]}, std::move(wv), true);
      params_.biases.emplace_back(Shape{w[l + 1]}, std::move(bv), true);
    }
  }

  Mlp(MlpSpec spec, MlpParams<T> params) : spec_(std::move(spec)), params_(std::move(params)) {
    spec_.validate();
    const auto w = spec_.widths();
    if (params_.weights.size() != spec_.layer_count() || params_.biases.size() != spec_.layer_count()) {
      throw DimensionError("Mlp: parameter count does not match spec");
    }
    for (std::size_t l = 0; l < spec_.layer_count(); ++l) {
      if (params_.weights[l].shape() != Shape{w[l], w[l + 1]} || params_.biases[l].shape() != Shape{w[l + 1]}) {
        throw DimensionError("Mlp: layer " + std::to_string(l) + " has shape " +
                             shape_string(params_.weights[l].shape()));
      }
    }
  }

  BasicTensor<T> forward(const BasicTensor<T>& x) const { return mlp_forward(x, spec_, params_); }

  const MlpSpec& spec() const { return spec_; }
  const MlpParams<T>& params() const { return params_; }

  /// Weights and biases interleaved per layer: W0, b0, W1, b1, ...
  std::vector<BasicTensor<T>> parameters() const {
    std::vector<BasicTensor<T>> out;
    for (std::size_t l = 0; l < params_.weights.size(); ++l) {
      out.push_back(params_.weights[l]);
      out.push_back(params_.biases[l]);
    }
    return out;
  }

  /// Independent copy; `trainable` sets requires_grad on every parameter.
  Mlp copy(bool trainable) const {
    MlpParams<T> p;
    for (const auto& w : params_.weights) p.weights.push_back(w.clone(trainable));
    for (const auto& b : params_.biases) p.biases.push_back(b.clone(trainable));
    return Mlp(spec_, std::move(p));
  }

 private:
  MlpSpec spec_;
  MlpParams<T> params_;
};

}  // namespace histoperm
