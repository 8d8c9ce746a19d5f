#pragma once

// Classification metrics over probability matrices: accuracy, macro F1,
// one-vs-rest macro AUC, and mean-pooled slide aggregation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "histoperm/errors.hpp"

namespace histoperm {

/// Row-major N x C probabilities.
using ProbMatrix = std::vector<std::vector<double>>;

/// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax_row(std::span<const double> row) {
  if (row.empty()) throw ContractError("argmax_row: empty row");
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

/// Mann-Whitney AUC with midranks: the probability that a random positive
/// scores above a random negative, ties counting one half. Empty when either
/// side is empty.
inline std::optional<double> rank_auc(std::span<const double> scores, std::span<const std::uint8_t> positive) {
  if (scores.size() != positive.size()) throw ContractError("rank_auc: scores and flags differ in length");
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the rank sum keeps midranks integral, so the count stays exact.
  std::uint64_t twice_rank_sum = 0, n_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const std::uint64_t twice_midrank = (i + 1) + j;  // ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (positive[order[k]]) {
        twice_rank_sum += twice_midrank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::uint64_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  // U = R - n_pos (n_pos + 1) / 2, doubled.
  const std::uint64_t twice_u = twice_rank_sum - n_pos * (n_pos + 1);
  return static_cast<double>(twice_u) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

struct ClassMetrics {
  std::size_t support = 0;    // true count
  std::size_t predicted = 0;  // predicted count
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::optional<double> auc;
};

struct MetricsReport {
  double accuracy = 0.0;
  double f1_macro = 0.0;
  std::optional<double> auc_ovr_macro;
  std::vector<ClassMetrics> per_class;
  std::size_t n = 0;
  std::vector<std::string> warnings;
};

inline MetricsReport compute_metrics(const ProbMatrix& probs, std::span<const int> labels) {
  if (probs.empty()) throw ContractError("compute_metrics: no samples");
  if (probs.size() != labels.size()) throw ContractError("compute_metrics: probabilities and labels differ in length");
  const std::size_t n = probs.size(), c = probs.front().size();
  if (c == 0) throw ContractError("compute_metrics: zero classes");
  for (const auto& row : probs) {
    if (row.size() != c) throw DimensionError("compute_metrics: ragged probability matrix");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ContractError("compute_metrics: label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    }
  }

  MetricsReport r;
  r.n = n;
  r.per_class.resize(c);
  std::vector<std::size_t> tp(c, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto pred = argmax_row(probs[i]);
    const auto y = static_cast<std::size_t>(labels[i]);
    ++r.per_class[y].support;
    ++r.per_class[pred].predicted;
    if (pred == y) {
      ++correct;
      ++tp[y];
    }
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(n);

  std::vector<double> scores(n);
  std::vector<std::uint8_t> is_pos(n);
  double f1_sum = 0.0, auc_sum = 0.0;
  std::size_t present = 0, auc_count = 0;
  for (std::size_t k = 0; k < c; ++k) {
    auto& m = r.per_class[k];
    m.precision = m.predicted ? static_cast<double>(tp[k]) / static_cast<double>(m.predicted) : 0.0;
    m.recall = m.support ? static_cast<double>(tp[k]) / static_cast<double>(m.support) : 0.0;
    m.f1 = (m.precision + m.recall) > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = probs[i][k];
      is_pos[i] = static_cast<std::size_t>(labels[i]) == k;
    }
    m.auc = rank_auc(scores, is_pos);
    if (m.support == 0) {
      r.warnings.push_back("class " + std::to_string(k) + " absent from labels; excluded from macro averages");
      continue;
    }
    ++present;
    f1_sum += m.f1;
    if (m.auc) {
      auc_sum += *m.auc;
      ++auc_count;
    }
  }
  r.f1_macro = f1_sum / static_cast<double>(present);
  if (auc_count > 0) {
    r.auc_ovr_macro = auc_sum / static_cast<double>(auc_count);
  } else {
    r.warnings.push_back("AUC undefined: every sample has the same label");
  }
  return r;
}

inline nlohmann::json metrics_to_json(const MetricsReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& m : r.per_class) {
    per_class.push_back({{"support", m.support},
                         {"predicted", m.predicted},
                         {"precision", m.precision},
                         {"recall", m.recall},
                         {"f1", m.f1},
                         {"auc", opt(m.auc)}});
  }
  return {{"accuracy", r.accuracy}, {"f1_macro", r.f1_macro}, {"auc_ovr_macro", opt(r.auc_ovr_macro)},
          {"per_class", per_class}, {"n", r.n},               {"warnings", r.warnings}};
}

/// Mean probability row per slide; slide s collects every row i with
/// slide_of[i] == s. Each column is summed in sorted order with extended
/// precision, so the result does not depend on row order within a slide.
inline ProbMatrix slide_aggregate(const ProbMatrix& probs, std::span<const std::uint32_t> slide_of,
                                  std::size_t n_slides) {
  if (probs.size() != slide_of.size()) throw ContractError("slide_aggregate: probabilities and slide ids differ");
  const std::size_t c = probs.empty() ? 0 : probs.front().size();
  std::vector<std::vector<std::size_t>> rows(n_slides);
  for (std::size_t i = 0; i < slide_of.size(); ++i) {
    if (slide_of[i] >= n_slides) throw ContractError("slide_aggregate: slide id out of range");
    if (probs[i].size() != c) throw DimensionError("slide_aggregate: ragged probability matrix");
    rows[slide_of[i]].push_back(i);
  }
  ProbMatrix out(n_slides, std::vector<double>(c, 0.0));
  std::vector<double> column;
  for (std::size_t s = 0; s < n_slides; ++s) {
    if (rows[s].empty()) throw ContractError("slide_aggregate: slide " + std::to_string(s) + " has no patches");
    for (std::size_t k = 0; k < c; ++k) {
      column.clear();
      for (auto i : rows[s]) column.push_back(probs[i][k]);
      std::sort(column.begin(), column.end());
      long double acc = 0.0L;
      for (double v : column) acc += v;
      out[s][k] = static_cast<double>(acc) / static_cast<double>(column.size());
    }
  }
  return out;
}

}  // namespace histoperm
