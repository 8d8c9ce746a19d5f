#pragma once

// BYOL, SimCLR and VICReg on top of a shared MLP encoder. Every method reads a
// ComposedBatch: rows [0, n_u) are unlabeled pairs, the remaining rows are
// labeled pairs whose second view was permuted within its class.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "histoperm/errors.hpp"
#include "histoperm/image.hpp"
#include "histoperm/losses.hpp"
#include "histoperm/nn.hpp"
#include "histoperm/optim.hpp"
#include "histoperm/random.hpp"
#include "histoperm/tensor.hpp"
#include "histoperm/views.hpp"

namespace histoperm {

enum class Method { byol, simclr, vicreg };

inline Method parse_method(std::string_view name) {
  if (name == "byol") return Method::byol;
  if (name == "simclr") return Method::simclr;
  if (name == "vicreg") return Method::vicreg;
  throw ConfigError("unknown method '" + std::string(name) + "'; valid methods: byol, simclr, vicreg");
}

inline std::string method_name(Method m) {
  switch (m) {
    case Method::byol: return "byol";
    case Method::simclr: return "simclr";
    case Method::vicreg: return "vicreg";
  }
  return "?";
}

struct MethodConfig {
  Method method = Method::byol;
  std::size_t input_dim = 32 * 32 * 3;
  std::vector<std::size_t> encoder_hidden{256};
  std::size_t feature_dim = 64;
  std::size_t head_hidden = 0;  // 0 selects 4 * feature_dim
  std::size_t head_output = 0;  // 0 selects feature_dim
  double byol_tau = 0.97;
  double simclr_temperature = 1.0;
  VicregWeights vicreg;
  LarsConfig lars;

  MlpSpec encoder_spec() const { return {input_dim, encoder_hidden, feature_dim}; }
  std::size_t resolved_head_hidden() const { return head_hidden ? head_hidden : 4 * feature_dim; }
  std::size_t resolved_head_output() const { return head_output ? head_output : feature_dim; }
  /// Projector (BYOL, SimCLR) or expander (VICReg).
  MlpSpec head_spec() const { return {feature_dim, {resolved_head_hidden()}, resolved_head_output()}; }
  MlpSpec predictor_spec() const {
    return {resolved_head_output(), {resolved_head_hidden()}, resolved_head_output()};
  }

  void validate() const {
    encoder_spec().validate();
    head_spec().validate();
    if (!(byol_tau >= 0.0 && byol_tau <= 1.0)) throw ConfigError("BYOL tau must be in [0, 1]");
    if (!(simclr_temperature > 0.0)) throw ConfigError("SimCLR temperature must be positive");
    vicreg.validate();
  }
};

template <class T>
struct MethodState {
  Method method = Method::byol;
  Mlp<T> encoder;
  Mlp<T> head;
  // BYOL only.
  Mlp<T> predictor;
  Mlp<T> target_encoder;
  Mlp<T> target_head;
  LarsState<T> optimizer;
  std::size_t step = 0;

  bool has_target() const { return method == Method::byol; }

  std::vector<BasicTensor<T>> online_parameters() const {
    auto out = encoder.parameters();
    for (auto& p : head.parameters()) out.push_back(p);
    if (has_target()) {
      for (auto& p : predictor.parameters()) out.push_back(p);
    }
    return out;
  }

  /// Target parameters in the same order as the online encoder + head
  /// parameters they track.
  std::vector<BasicTensor<T>> target_parameters() const {
    if (!has_target()) return {};
    auto out = target_encoder.parameters();
    for (auto& p : target_head.parameters()) out.push_back(p);
    return out;
  }

  std::vector<BasicTensor<T>> tracked_online_parameters() const {
    auto out = encoder.parameters();
    for (auto& p : head.parameters()) out.push_back(p);
    return out;
  }
};

/// Fresh state. The BYOL target starts as a copy of the online encoder and
/// projector. Target parameters keep gradient buffers so tests can confirm
/// that nothing ever reaches them.
template <class T>
MethodState<T> init_method_state(const MethodConfig& cfg, Rng& rng) {
  cfg.validate();
  MethodState<T> s;
  s.method = cfg.method;
  s.encoder = Mlp<T>(cfg.encoder_spec(), rng);
  s.head = Mlp<T>(cfg.head_spec(), rng);
  if (cfg.method == Method::byol) {
    s.predictor = Mlp<T>(cfg.predictor_spec(), rng);
    s.target_encoder = s.encoder.copy(true);
    s.target_head = s.head.copy(true);
  }
  return s;
}

/// xi <- tau * xi + (1 - tau) * theta, elementwise.
template <class T>
void ema_update(std::span<BasicTensor<T>> target, std::span<const BasicTensor<T>> online, T tau) {
  if (!(tau >= T(0) && tau <= T(1))) throw ContractError("ema_update: tau must be in [0, 1]");
  if (target.size() != online.size()) throw DimensionError("ema_update: parameter lists differ in length");
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i].shape() != online[i].shape()) {
      throw DimensionError("ema_update: shape mismatch " + shape_string(target[i].shape()) + " vs " +
                           shape_string(online[i].shape()));
    }
    auto xi = target[i].mutable_values();
    auto theta = online[i].values();
    for (std::size_t k = 0; k < xi.size(); ++k) xi[k] = tau * xi[k] + (T(1) - tau) * theta[k];
  }
}

template <class T>
BasicTensor<T> images_to_tensor(std::span<const Image> images, std::size_t input_dim) {
  std::vector<float> flat = encoder_input(images);
  if (!images.empty() && images.front().size() != input_dim) {
    throw DimensionError("encoder expects " + std::to_string(input_dim) + " inputs per patch, images have " +
                         std::to_string(images.front().size()));
  }
  return BasicTensor<T>({images.size(), input_dim}, Buffer<T>(flat.begin(), flat.end()));
}

template <class T>
struct LossTerm {
  std::string name;
  BasicTensor<T> value;
};

template <class T>
struct StepResult {
  T loss = 0;
  std::vector<std::pair<std::string, T>> terms;
};

namespace detail {

template <class T>
void check_terms(const std::vector<LossTerm<T>>& terms, Method m, std::size_t step) {
  for (const auto& t : terms) {
    if (!std::isfinite(static_cast<double>(t.value.item()))) {
      throw NumericError(method_name(m) + " loss term '" + t.name + "' is not finite at step " + std::to_string(step));
    }
  }
}

}  // namespace detail

/// Builds the method loss for one composed batch without touching any
/// parameter. `terms` receives the named components.
template <class T>
BasicTensor<T> method_loss(const MethodState<T>& s, const MethodConfig& cfg, const ComposedBatch& batch,
                           std::vector<LossTerm<T>>* terms = nullptr) {
  const std::size_t nu = batch.unlabeled_size(), n = batch.size();
  const auto v1 = batch.view1();
  const auto v2 = batch.view2();
  const auto x1 = images_to_tensor<T>(v1, cfg.input_dim);
  const auto x2 = images_to_tensor<T>(v2, cfg.input_dim);
  std::vector<LossTerm<T>> local;
  auto& out = terms ? *terms : local;
  out.clear();

  switch (s.method) {
    case Method::byol: {
      auto online = [&](const BasicTensor<T>& x) {
        return l2_normalize(s.predictor.forward(s.head.forward(s.encoder.forward(x))));
      };
      auto target = [&](const BasicTensor<T>& x) {
        return stop_gradient(l2_normalize(s.target_head.forward(s.target_encoder.forward(x))));
      };
      const auto p1 = online(x1), p2 = online(x2);
      const auto t1 = target(x1), t2 = target(x2);
      // view 1 online vs permuted view 2 target, then the swapped direction
      out.push_back({"Loss_u", byol_block_loss(slice_rows(p1, 0, nu), slice_rows(t2, 0, nu))});
      out.push_back({"Loss_l", byol_block_loss(slice_rows(p1, nu, n), slice_rows(t2, nu, n))});
      out.push_back({"Loss_u (swapped)", byol_block_loss(slice_rows(p2, 0, nu), slice_rows(t1, 0, nu))});
      out.push_back({"Loss_l (swapped)", byol_block_loss(slice_rows(p2, nu, n), slice_rows(t1, nu, n))});
      return add(add(out[0].value, out[1].value), add(out[2].value, out[3].value));
    }
    case Method::simclr: {
      auto embed = [&](const BasicTensor<T>& x) { return l2_normalize(s.head.forward(s.encoder.forward(x))); };
      out.push_back({"nt_xent", nt_xent_loss(embed(x1), embed(x2), static_cast<T>(cfg.simclr_temperature))});
      return out[0].value;
    }
    case Method::vicreg: {
      const auto z1 = s.head.forward(s.encoder.forward(x1));
      const auto z2 = s.head.forward(s.encoder.forward(x2));
      auto t = vicreg_terms(z1, z2, nu, cfg.vicreg);
      out.push_back({"invariance", t.invariance});
      out.push_back({"variance", t.variance});
      out.push_back({"covariance", t.covariance});
      return t.total;
    }
  }
  throw ConfigError("unsupported method");
}

/// Forward both views, backward, one LARS step at `lr`, then (BYOL) the EMA
/// target update. Throws NumericError naming the first non-finite term.
template <class T>
StepResult<T> pretrain_step(MethodState<T>& s, const MethodConfig& cfg, const ComposedBatch& batch, double lr) {
  std::vector<LossTerm<T>> terms;
  const auto loss = method_loss(s, cfg, batch, &terms);
  detail::check_terms(terms, s.method, s.step);
  if (!std::isfinite(static_cast<double>(loss.item()))) {
    throw NumericError(method_name(s.method) + " loss is not finite at step " + std::to_string(s.step));
  }

  auto params = s.online_parameters();
  for (auto& p : params) p.zero_grad();
  for (auto& p : s.target_parameters()) p.zero_grad();
  backward(loss);
  lars_step<T>(params, s.optimizer, cfg.lars, lr);
  if (s.has_target()) {
    auto target = s.target_parameters();
    const auto online = s.tracked_online_parameters();
    ema_update<T>(target, online, static_cast<T>(cfg.byol_tau));
  }
  ++s.step;

  StepResult<T> r;
  r.loss = loss.item();
  for (const auto& t : terms) r.terms.emplace_back(t.name, t.value.item());
  return r;
}

}  // namespace histoperm
