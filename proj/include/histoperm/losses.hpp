#pragma once

// Joint-embedding objectives (BYOL regression, NT-Xent, VICReg terms) and a
// softmax cross-entropy for the supervised heads. Each loss is a single
// graph node with a hand-written backward pass.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "histoperm/errors.hpp"
#include "histoperm/tensor.hpp"

namespace histoperm {

namespace detail {

template <class T>
void require_pair(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  require_matrix(a, op);
  require_matrix(b, op);
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": paired blocks differ, " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

template <class T>
BasicTensor<T> zero_scalar() {
  return BasicTensor<T>::scalar(T(0));
}

}  // namespace detail

/// Mean over rows of ||p_i - sg(z_i)||^2. `z` never receives a gradient.
/// An empty block contributes 0.
template <class T>
BasicTensor<T> byol_block_loss(const BasicTensor<T>& p, const BasicTensor<T>& z) {
  detail::require_pair(p, z, "byol_loss");
  const std::size_t n = p.rows();
  if (n == 0) return detail::zero_scalar<T>();
  std::vector<T> diff(p.size());
  T total = 0;
  for (std::size_t i = 0; i < diff.size(); ++i) {
    diff[i] = p[i] - z[i];
    total += diff[i] * diff[i];
  }
  const T inv_n = T(1) / static_cast<T>(n);
  return make_op<T>({1}, {total * inv_n}, {p}, [diff = std::move(diff), inv_n](TensorNode<T>& self) {
    auto& g = detail::grad_of(self, 0);
    const T s = T(2) * inv_n * self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * diff[i];
  });
}

/// Unlabeled-block regression plus labeled-block regression against the
/// permuted targets. Inputs are expected to be L2-normalized rows.
template <class T>
BasicTensor<T> byol_loss(const BasicTensor<T>& p_u1, const BasicTensor<T>& z_u2, const BasicTensor<T>& p_l1,
                         const BasicTensor<T>& z_l2_tilde) {
  if (p_u1.cols() != p_l1.cols()) throw DimensionError("byol_loss: unlabeled and labeled widths differ");
  return add(byol_block_loss(p_u1, z_u2), byol_block_loss(p_l1, z_l2_tilde));
}

/// Symmetric NT-Xent over the 2N pooled rows of [z1; z2]. Row i of z2 is the
/// positive of row i of z1; every other pooled row except the anchor itself
/// is a negative. Averaged over the 2N anchors.
template <class T>
BasicTensor<T> nt_xent_loss(const BasicTensor<T>& z1, const BasicTensor<T>& z2, T temperature) {
  detail::require_pair(z1, z2, "nt_xent_loss");
  if (!(temperature > T(0))) throw ContractError("nt_xent_loss: temperature must be positive");
  const std::size_t n = z1.rows(), d = z1.cols(), m = 2 * n;
  if (n == 0) return detail::zero_scalar<T>();

  RowMatrix<T> z(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(d));
  z.topRows(static_cast<Eigen::Index>(n)) = as_matrix(z1);
  z.bottomRows(static_cast<Eigen::Index>(n)) = as_matrix(z2);
  RowMatrix<T> sim = (z * z.transpose()) / temperature;

  // Softmax over k != a, kept for the backward pass.
  RowMatrix<T> prob(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
  T total = 0;
  for (std::size_t a = 0; a < m; ++a) {
    const auto ai = static_cast<Eigen::Index>(a);
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t k = 0; k < m; ++k) {
      if (k != a) mx = std::max(mx, sim(ai, static_cast<Eigen::Index>(k)));
    }
    T denom = 0;
    for (std::size_t k = 0; k < m; ++k) {
      const auto ki = static_cast<Eigen::Index>(k);
      prob(ai, ki) = k == a ? T(0) : std::exp(sim(ai, ki) - mx);
      denom += prob(ai, ki);
    }
    prob.row(ai) /= denom;
    const std::size_t pos = a < n ? a + n : a - n;
    total += (mx + std::log(denom)) - sim(ai, static_cast<Eigen::Index>(pos));
  }
  const T inv_m = T(1) / static_cast<T>(m);

  return make_op<T>({1}, {total * inv_m}, {z1, z2},
                    [n, d, m, inv_m, temperature, z = std::move(z), prob = std::move(prob)](TensorNode<T>& self) {
                      RowMatrix<T> g = prob;
                      for (std::size_t a = 0; a < m; ++a) {
                        const std::size_t pos = a < n ? a + n : a - n;
                        g(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(pos)) -= T(1);
                      }
                      g *= inv_m * self.grad[0];
                      RowMatrix<T> dz = ((g + g.transpose()) * z) / temperature;
                      const auto nn = static_cast<Eigen::Index>(n * d);
                      if (detail::wants(self, 0)) {
                        auto& g1 = detail::grad_of(self, 0);
                        for (Eigen::Index i = 0; i < nn; ++i) g1[static_cast<std::size_t>(i)] += dz.data()[i];
                      }
                      if (detail::wants(self, 1)) {
                        auto& g2 = detail::grad_of(self, 1);
                        for (Eigen::Index i = 0; i < nn; ++i) g2[static_cast<std::size_t>(i)] += dz.data()[nn + i];
                      }
                    });
}

/// (1/D) sum_j max(0, gamma - sqrt(Var(z^j) + eps)) with the unbiased
/// per-column variance.
template <class T>
BasicTensor<T> vicreg_variance(const BasicTensor<T>& z, T gamma, T epsilon) {
  detail::require_matrix(z, "vicreg_variance");
  const std::size_t n = z.rows(), d = z.cols();
  if (n < 2) throw ContractError("vicreg_variance: needs at least 2 rows, got " + std::to_string(n));
  std::vector<T> col_mean(d, T(0)), col_std(d, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) col_mean[j] += z[i * d + j];
  for (auto& mu : col_mean) mu /= static_cast<T>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const T c = z[i * d + j] - col_mean[j];
      col_std[j] += c * c;
    }
  T total = 0;
  for (auto& s : col_std) {
    s = std::sqrt(s / static_cast<T>(n - 1) + epsilon);
    total += std::max(T(0), gamma - s);
  }
  return make_op<T>({1}, {total / static_cast<T>(d)}, {z}, [n, d, gamma, col_mean, col_std](TensorNode<T>& self) {
    const auto& zv = self.inputs[0]->value;
    auto& g = detail::grad_of(self, 0);
    for (std::size_t j = 0; j < d; ++j) {
      if (!(gamma - col_std[j] > T(0))) continue;
      const T coef = -self.grad[0] / (static_cast<T>(d) * col_std[j] * static_cast<T>(n - 1));
      for (std::size_t i = 0; i < n; ++i) g[i * d + j] += coef * (zv[i * d + j] - col_mean[j]);
    }
  });
}

/// Mean squared row distance of one paired block; 0 when empty.
template <class T>
BasicTensor<T> vicreg_block_invariance(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_pair(a, b, "vicreg_invariance");
  const std::size_t n = a.rows();
  if (n == 0) return detail::zero_scalar<T>();
  std::vector<T> diff(a.size());
  T total = 0;
  for (std::size_t i = 0; i < diff.size(); ++i) {
    diff[i] = a[i] - b[i];
    total += diff[i] * diff[i];
  }
  const T inv_n = T(1) / static_cast<T>(n);
  return make_op<T>({1}, {total * inv_n}, {a, b}, [diff = std::move(diff), inv_n](TensorNode<T>& self) {
    const T s = T(2) * inv_n * self.grad[0];
    if (detail::wants(self, 0)) {
      auto& g = detail::grad_of(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * diff[i];
    }
    if (detail::wants(self, 1)) {
      auto& g = detail::grad_of(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= s * diff[i];
    }
  });
}

template <class T>
BasicTensor<T> vicreg_invariance(const BasicTensor<T>& z1_u, const BasicTensor<T>& z2_u, const BasicTensor<T>& z1_l,
                                 const BasicTensor<T>& z2_l_tilde) {
  return add(vicreg_block_invariance(z1_u, z2_u), vicreg_block_invariance(z1_l, z2_l_tilde));
}

/// (1/D) * sum of squared off-diagonal entries of the sample covariance,
/// centered on the joint mean of all rows.
template <class T>
BasicTensor<T> vicreg_covariance(const BasicTensor<T>& z) {
  detail::require_matrix(z, "vicreg_covariance");
  const std::size_t n = z.rows(), d = z.cols();
  if (n < 2) throw ContractError("vicreg_covariance: needs at least 2 rows, got " + std::to_string(n));
  RowMatrix<T> centered = as_matrix(z);
  centered.rowwise() -= centered.colwise().mean();
  RowMatrix<T> cov = (centered.transpose() * centered) / static_cast<T>(n - 1);
  T total = 0;
  for (Eigen::Index i = 0; i < cov.rows(); ++i)
    for (Eigen::Index j = 0; j < cov.cols(); ++j) {
      if (i != j) total += cov(i, j) * cov(i, j);
    }
  return make_op<T>({1}, {total / static_cast<T>(d)}, {z},
                    [n, d, centered = std::move(centered), cov = std::move(cov)](TensorNode<T>& self) {
                      RowMatrix<T> h = cov;
                      h.diagonal().setZero();
                      h *= T(2) / static_cast<T>(d);
                      RowMatrix<T> dz = (centered * h) * (T(2) * self.grad[0] / static_cast<T>(n - 1));
                      dz.rowwise() -= dz.colwise().mean();
                      auto& g = detail::grad_of(self, 0);
                      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dz.data()[i];
                    });
}

struct VicregWeights {
  double lambda_s = 25.0;  // invariance
  double mu_v = 25.0;      // variance
  double nu_c = 1.0;       // covariance
  double gamma = 1.0;
  double epsilon = 1e-4;

  void validate() const {
    if (lambda_s < 0 || mu_v < 0 || nu_c < 0 || !(gamma > 0) || !(epsilon > 0)) {
      throw ConfigError("VICReg weights must be nonnegative and gamma, epsilon positive");
    }
  }
};

template <class T>
struct VicregTerms {
  BasicTensor<T> invariance;
  BasicTensor<T> variance;    // v(Z) + v(Z')
  BasicTensor<T> covariance;  // c(Z) + c(Z')
  BasicTensor<T> total;
};

/// Rows [0, n_unlabeled) of z and z_prime are unlabeled pairs; the remaining
/// rows are labeled pairs whose second view is already permuted.
template <class T>
VicregTerms<T> vicreg_terms(const BasicTensor<T>& z, const BasicTensor<T>& z_prime, std::size_t n_unlabeled,
                            const VicregWeights& w) {
  detail::require_pair(z, z_prime, "vicreg_loss");
  if (n_unlabeled > z.rows()) throw DimensionError("vicreg_loss: unlabeled count exceeds rows");
  const std::size_t n = z.rows();
  VicregTerms<T> t;
  t.invariance = vicreg_invariance(slice_rows(z, 0, n_unlabeled), slice_rows(z_prime, 0, n_unlabeled),
                                   slice_rows(z, n_unlabeled, n), slice_rows(z_prime, n_unlabeled, n));
  const T gamma = static_cast<T>(w.gamma), eps = static_cast<T>(w.epsilon);
  t.variance = add(vicreg_variance(z, gamma, eps), vicreg_variance(z_prime, gamma, eps));
  t.covariance = add(vicreg_covariance(z), vicreg_covariance(z_prime));
  t.total = add(add(scale(t.invariance, static_cast<T>(w.lambda_s)), scale(t.variance, static_cast<T>(w.mu_v))),
                scale(t.covariance, static_cast<T>(w.nu_c)));
  return t;
}

template <class T>
BasicTensor<T> vicreg_loss(const BasicTensor<T>& z, const BasicTensor<T>& z_prime, std::size_t n_unlabeled,
                           const VicregWeights& w) {
  return vicreg_terms(z, z_prime, n_unlabeled, w).total;
}

/// Mean softmax cross-entropy of [N x C] logits against class ids.
template <class T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels) {
  detail::require_matrix(logits, "softmax_cross_entropy");
  const std::size_t n = logits.rows(), c = logits.cols();
  if (labels.size() != n) throw DimensionError("softmax_cross_entropy: label count does not match rows");
  if (n == 0) return detail::zero_scalar<T>();
  std::vector<T> prob(logits.size());
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw ContractError("softmax_cross_entropy: label " + std::to_string(labels[i]) + " outside [0, " +
                          std::to_string(c) + ")");
    }
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, logits[i * c + k]);
    T denom = 0;
    for (std::size_t k = 0; k < c; ++k) denom += (prob[i * c + k] = std::exp(logits[i * c + k] - mx));
    for (std::size_t k = 0; k < c; ++k) prob[i * c + k] /= denom;
    total += mx + std::log(denom) - logits[i * c + static_cast<std::size_t>(labels[i])];
  }
  std::vector<int> lab(labels.begin(), labels.end());
  const T inv_n = T(1) / static_cast<T>(n);
  return make_op<T>({1}, {total * inv_n}, {logits},
                    [c, inv_n, prob = std::move(prob), lab = std::move(lab)](TensorNode<T>& self) {
                      auto& g = detail::grad_of(self, 0);
                      const T s = inv_n * self.grad[0];
                      for (std::size_t i = 0; i < lab.size(); ++i)
                        for (std::size_t k = 0; k < c; ++k) {
                          const T onehot = static_cast<std::size_t>(lab[i]) == k ? T(1) : T(0);
                          g[i * c + k] += s * (prob[i * c + k] - onehot);
                        }
                    });
}

}  // namespace histoperm
