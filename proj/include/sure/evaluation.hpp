#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "sure/losses.hpp"

namespace sure {

inline std::size_t argmax_row(const Tensor& t, std::size_t row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < t.cols(); ++j) {
    if (t(row, j) > t(row, best)) best = j;
  }
  return best;
}

struct TaskMetrics {
  double mae = 0.0;       // regression
  double corr = 0.0;      // regression
  double accuracy = 0.0;  // classification
  double macro_f1 = 0.0;  // classification
};

inline TaskMetrics task_metrics(Task task, const Tensor& predictions,
                                const Tensor& labels) {
  if (predictions.rows() != labels.rows() ||
      predictions.cols() != labels.cols()) {
    throw std::invalid_argument("task_metrics: predictions " +
                                predictions.shape_str() + " vs labels " +
                                labels.shape_str());
  }
  const std::size_t n = predictions.rows();
  TaskMetrics out;
  if (task == Task::regression) {
    std::vector<double> p(n);
    std::vector<double> y(n);
    double mae = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = predictions(i, 0);
      y[i] = labels(i, 0);
      mae += std::abs(p[i] - y[i]);
    }
    out.mae = mae / static_cast<double>(n);
    out.corr = pearson(p, y).r;
    return out;
  }
  const std::size_t k = predictions.cols();
  std::vector<std::size_t> tp(k, 0);
  std::vector<std::size_t> fp(k, 0);
  std::vector<std::size_t> fn(k, 0);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t pred = argmax_row(predictions, i);
    const std::size_t truth = argmax_row(labels, i);
    if (pred == truth) {
      ++hits;
      ++tp[pred];
    } else {
      ++fp[pred];
      ++fn[truth];
    }
  }
  out.accuracy = static_cast<double>(hits) / static_cast<double>(n);
  double f1_total = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    const double denom_p = static_cast<double>(tp[c] + fp[c]);
    const double denom_r = static_cast<double>(tp[c] + fn[c]);
    const double precision = denom_p > 0.0 ? tp[c] / denom_p : 0.0;
    const double recall = denom_r > 0.0 ? tp[c] / denom_r : 0.0;
    if (precision + recall > 0.0) {
      f1_total += 2.0 * precision * recall / (precision + recall);
    }
  }
  out.macro_f1 = f1_total / static_cast<double>(k);
  return out;
}

// Alignment between estimated uncertainty and realized error.
inline PearsonResult uncertainty_corr(std::span<const double> sigma2,
                                      std::span<const double> eps2) {
  return pearson(sigma2, eps2);
}

struct CalibrationStats {
  double mean_err = 0.0;
  double sd_err = 1.0;
  double mean_sigma = 0.0;
  double sd_sigma = 1.0;
};

inline CalibrationStats calibration_stats(std::span<const double> errors,
                                          std::span<const double> sigma2) {
  if (errors.size() < 2 || sigma2.size() < 2) {
    throw std::invalid_argument("calibration_stats: need at least 2 samples");
  }
  auto mean_sd = [](std::span<const double> v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    return std::pair<double, double>(
        mean, std::sqrt(var / static_cast<double>(v.size() - 1)));
  };
  CalibrationStats stats;
  auto [me, se] = mean_sd(errors);
  auto [ms, ss] = mean_sd(sigma2);
  stats.mean_err = me;
  stats.sd_err = se;
  stats.mean_sigma = ms;
  stats.sd_sigma = ss;
  return stats;
}

// Affine rescaling of uncertainties onto the training-error scale, clipped
// at zero. Positive slope, so orderings and correlations are untouched.
inline std::vector<double> calibrate(std::span<const double> sigma2,
                                     const CalibrationStats& stats) {
  if (stats.sd_sigma <= 0.0) {
    throw std::invalid_argument("calibrate: zero training uncertainty spread");
  }
  std::vector<double> out(sigma2.size());
  for (std::size_t i = 0; i < sigma2.size(); ++i) {
    const double scaled = stats.mean_err + stats.sd_err *
                          (sigma2[i] - stats.mean_sigma) / stats.sd_sigma;
    out[i] = std::max(0.0, scaled);
  }
  return out;
}

// Binned calibration gap: equal-width bins over the uncertainty range,
// weighted absolute difference between mean error and mean uncertainty.
inline double uce(std::span<const double> sigma2,
                  std::span<const double> errors, std::size_t bins = 10) {
  if (sigma2.size() != errors.size()) {
    throw std::invalid_argument("uce: length mismatch");
  }
  if (sigma2.size() < bins) {
    throw std::invalid_argument("uce: need at least one sample per bin");
  }
  const double lo = *std::min_element(sigma2.begin(), sigma2.end());
  const double hi = *std::max_element(sigma2.begin(), sigma2.end());
  const double width = hi - lo;
  std::vector<double> sum_sigma(bins, 0.0);
  std::vector<double> sum_err(bins, 0.0);
  std::vector<std::size_t> count(bins, 0);
  for (std::size_t i = 0; i < sigma2.size(); ++i) {
    std::size_t b = 0;
    if (width > 0.0) {
      b = std::min(bins - 1, static_cast<std::size_t>(
                                 (sigma2[i] - lo) / width *
                                 static_cast<double>(bins)));
    }
    sum_sigma[b] += sigma2[i];
    sum_err[b] += errors[i];
    ++count[b];
  }
  double total = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    if (count[b] == 0) continue;
    const double w =
        static_cast<double>(count[b]) / static_cast<double>(sigma2.size());
    total += w * std::abs(sum_err[b] / count[b] - sum_sigma[b] / count[b]);
  }
  return total;
}

// Linear-interpolation quantile on a copy of the data.
inline double quantile(std::span<const double> values, double q) {
  if (values.empty()) {
    throw std::invalid_argument("quantile: empty input");
  }
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

struct DeferralRow {
  double quantile = 0.0;
  double threshold = 0.0;
  double deferred_fraction = 0.0;
  std::optional<double> retained_accuracy;  // null when everything deferred
  std::optional<double> tdr_recall;         // null when nothing is incorrect
  std::optional<double> fdr_recall;         // null when nothing is correct
  std::optional<double> tdr_precision;      // null when nothing deferred
  std::optional<double> fdr_precision;
};

// Threshold sweep for the defer-or-predict decision. Both recall-style rates
// (share of incorrect/correct samples deferred) and precision-style rates
// (composition of the deferred set) are reported, labeled separately.
inline std::vector<DeferralRow> deferral_analysis(
    std::span<const double> sigma2, const std::vector<bool>& correct,
    std::span<const double> quantiles) {
  if (sigma2.size() != correct.size()) {
    throw std::invalid_argument("deferral_analysis: length mismatch");
  }
  if (sigma2.empty()) {
    throw std::invalid_argument("deferral_analysis: empty input");
  }
  std::vector<DeferralRow> rows;
  for (double q : quantiles) {
    if (q <= 0.0 || q >= 1.0) {
      throw std::invalid_argument("deferral_analysis: quantile out of (0,1)");
    }
    DeferralRow row;
    row.quantile = q;
    row.threshold = quantile(sigma2, q);
    std::size_t deferred = 0;
    std::size_t deferred_incorrect = 0;
    std::size_t retained_correct = 0;
    std::size_t total_incorrect = 0;
    for (std::size_t i = 0; i < sigma2.size(); ++i) {
      const bool defer = sigma2[i] > row.threshold;
      if (!correct[i]) ++total_incorrect;
      if (defer) {
        ++deferred;
        if (!correct[i]) ++deferred_incorrect;
      } else if (correct[i]) {
        ++retained_correct;
      }
    }
    const std::size_t total_correct = sigma2.size() - total_incorrect;
    const std::size_t retained = sigma2.size() - deferred;
    row.deferred_fraction =
        static_cast<double>(deferred) / static_cast<double>(sigma2.size());
    if (retained > 0) {
      row.retained_accuracy =
          static_cast<double>(retained_correct) / static_cast<double>(retained);
    }
    if (total_incorrect > 0) {
      row.tdr_recall = static_cast<double>(deferred_incorrect) /
                       static_cast<double>(total_incorrect);
    }
    if (total_correct > 0) {
      row.fdr_recall = static_cast<double>(deferred - deferred_incorrect) /
                       static_cast<double>(total_correct);
    }
    if (deferred > 0) {
      row.tdr_precision = static_cast<double>(deferred_incorrect) /
                          static_cast<double>(deferred);
      row.fdr_precision = 1.0 - *row.tdr_precision;
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace sure
