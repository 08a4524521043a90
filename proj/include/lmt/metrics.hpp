#pragma once

// Agreement and ranking metrics for graded severity assessment: quadratic
// weighted kappa over 5 grades and ROC AUC for binary progression tasks.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lmt/progression.hpp"
#include "lmt/tensor.hpp"

namespace lmt {

// Row = true grade, column = predicted grade.
struct ConfusionMatrix {
  int num_grades = kNumGrades;
  std::vector<std::size_t> counts;  // num_grades x num_grades, row-major
  std::size_t total = 0;

  std::size_t at(int t, int p) const {
    return counts[static_cast<std::size_t>(t) *
                      static_cast<std::size_t>(num_grades) +
                  static_cast<std::size_t>(p)];
  }
};

inline ConfusionMatrix confusion_matrix(std::span<const int> y_true,
                                        std::span<const int> y_pred,
                                        int num_grades = kNumGrades) {
  if (y_true.size() != y_pred.size())
    throw std::invalid_argument("confusion_matrix: length mismatch");
  ConfusionMatrix m;
  m.num_grades = num_grades;
  m.counts.assign(
      static_cast<std::size_t>(num_grades) * static_cast<std::size_t>(num_grades),
      0);
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    if (y_true[i] < 0 || y_true[i] >= num_grades || y_pred[i] < 0 ||
        y_pred[i] >= num_grades)
      throw std::invalid_argument("confusion_matrix: grade out of range");
    m.counts[static_cast<std::size_t>(y_true[i]) *
                 static_cast<std::size_t>(num_grades) +
             static_cast<std::size_t>(y_pred[i])]++;
    m.total++;
  }
  return m;
}

// kappa = 1 - sum(w*O) / sum(w*E), w_ij = (i-j)^2/(G-1)^2, O the observed
// proportion matrix and E the outer product of its marginals. When both
// vectors are constant the expected disagreement vanishes; that degenerate
// case returns 1 with a warning.
inline double quadratic_weighted_kappa(std::span<const int> y_true,
                                       std::span<const int> y_pred,
                                       int num_grades = kNumGrades) {
  if (y_true.size() < 2)
    throw std::invalid_argument("quadratic_weighted_kappa: need >= 2 samples");
  const ConfusionMatrix cm = confusion_matrix(y_true, y_pred, num_grades);
  const std::size_t g = static_cast<std::size_t>(num_grades);
  const double n = static_cast<double>(cm.total);
  std::vector<double> row(g, 0.0), col(g, 0.0);
  for (std::size_t i = 0; i < g; ++i)
    for (std::size_t j = 0; j < g; ++j) {
      const double o = static_cast<double>(cm.counts[i * g + j]) / n;
      row[i] += o;
      col[j] += o;
    }
  const double denom_w =
      static_cast<double>((num_grades - 1)) * static_cast<double>(num_grades - 1);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < g; ++i)
    for (std::size_t j = 0; j < g; ++j) {
      const double w =
          static_cast<double>((static_cast<int>(i) - static_cast<int>(j)) *
                              (static_cast<int>(i) - static_cast<int>(j))) /
          denom_w;
      num += w * static_cast<double>(cm.counts[i * g + j]) / n;
      den += w * row[i] * col[j];
    }
  if (den == 0.0) {
    std::fprintf(stderr,
                 "quadratic_weighted_kappa: both vectors constant, "
                 "expected disagreement is zero; returning 1\n");
    return 1.0;
  }
  return 1.0 - num / den;
}

// Mann-Whitney AUC: P(score+ > score-) + 0.5 P(tie), computed from the
// rank sum with average ranks over ties. Rank sums stay exact half-integers
// so the complement identity auc(s) + auc(-s) = 1 holds bitwise.
inline double roc_auc(std::span<const double> scores,
                      std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw std::invalid_argument("roc_auc: length mismatch");
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != 0 && labels[i] != 1)
      throw std::invalid_argument("roc_auc: labels must be 0 or 1");
    if (!std::isfinite(scores[i]))
      throw std::invalid_argument("roc_auc: non-finite score");
    n_pos += static_cast<std::size_t>(labels[i]);
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw std::invalid_argument("roc_auc: both classes must be present");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // rank sum of positives, ties sharing the average rank of their block
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    // average of 1-based ranks i+1 .. j; twice the sum is integral
    const double avg_rank = static_cast<double>(i + 1 + j) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) rank_sum_pos += avg_rank;
    i = j;
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

// Operating points swept over score thresholds, from (0,0) at +inf down to
// (1,1); both rates are nondecreasing along the curve.
struct RocCurve {
  std::vector<double> thresholds;
  std::vector<double> tpr;
  std::vector<double> fpr;
};

inline RocCurve roc_curve(std::span<const double> scores,
                          std::span<const int> labels) {
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n; ++i) n_pos += static_cast<std::size_t>(labels[i]);
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw std::invalid_argument("roc_curve: both classes must be present");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  RocCurve c;
  c.thresholds.push_back(std::numeric_limits<double>::infinity());
  c.tpr.push_back(0.0);
  c.fpr.push_back(0.0);
  std::size_t tp = 0, fp = 0, i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    for (std::size_t k = i; k < j; ++k)
      (labels[order[k]] == 1 ? tp : fp)++;
    c.thresholds.push_back(scores[order[i]]);
    c.tpr.push_back(static_cast<double>(tp) / static_cast<double>(n_pos));
    c.fpr.push_back(static_cast<double>(fp) / static_cast<double>(n_neg));
    i = j;
  }
  return c;
}

// Argmax decode with ties broken toward the lower grade.
inline int grade_from_logits(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("grade_from_logits: empty");
  int best = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!std::isfinite(logits[i]))
      throw std::invalid_argument("grade_from_logits: non-finite logit");
    if (logits[i] > logits[static_cast<std::size_t>(best)])
      best = static_cast<int>(i);
  }
  return best;
}

inline int grade_from_logits(const Tensor& logits) {
  return grade_from_logits(std::span<const double>(logits.data));
}

// Decodes each row of a logit batch.
inline std::vector<int> grades_from_logit_rows(const Tensor& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r)
    out[r] = grade_from_logits(std::span<const double>(
        logits.data.data() + r * logits.cols(), logits.cols()));
  return out;
}

}  // namespace lmt
