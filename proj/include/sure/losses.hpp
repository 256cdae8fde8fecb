#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "sure/tensor.hpp"

namespace sure {

enum class Task { regression, classification };

struct PearsonResult {
  double r = 0.0;
  bool degenerate = false;
};

// Sample Pearson correlation. Zero spread in either vector is flagged and
// reported as r = 0 rather than dividing by zero.
inline PearsonResult pearson(std::span<const double> a,
                             std::span<const double> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("pearson: length mismatch");
  }
  if (a.size() < 2) {
    throw std::invalid_argument("pearson: need at least two samples");
  }
  const double n = static_cast<double>(a.size());
  double mean_a = 0.0;
  double mean_b = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::isfinite(a[i]) || !std::isfinite(b[i])) {
      throw std::invalid_argument("pearson: non-finite input");
    }
    mean_a += a[i];
    mean_b += b[i];
  }
  mean_a /= n;
  mean_b /= n;
  double cov = 0.0;
  double var_a = 0.0;
  double var_b = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - mean_a;
    const double db = b[i] - mean_b;
    cov += da * db;
    var_a += da * da;
    var_b += db * db;
  }
  if (var_a == 0.0 || var_b == 0.0) {
    return {0.0, true};
  }
  return {cov / (std::sqrt(var_a) * std::sqrt(var_b)), false};
}

struct PccLoss {
  NodeId node;
  bool degenerate;
};

// 1 - r(sigma2, eps2), differentiable in sigma2 only: the error vector enters
// as constants so the uncertainty branch cannot push the errors around.
// Degenerate spread yields a constant loss of 1 (zero gradient).
inline PccLoss pcc_loss(Graph& g, NodeId sigma2, const Tensor& eps2) {
  const Tensor& s = g.value(sigma2);
  if (s.cols() != 1 || !s.same_shape(eps2)) {
    throw std::invalid_argument("pcc_loss: shapes " + s.shape_str() + " vs " +
                                eps2.shape_str());
  }
  const std::size_t n = s.rows();
  if (n < 2) {
    throw std::invalid_argument("pcc_loss: need at least two samples");
  }
  double mean_s = 0.0;
  double mean_e = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mean_s += s(i, 0);
    mean_e += eps2(i, 0);
  }
  mean_s /= static_cast<double>(n);
  mean_e /= static_cast<double>(n);
  double var_s = 0.0;
  double var_e = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    var_s += (s(i, 0) - mean_s) * (s(i, 0) - mean_s);
    var_e += (eps2(i, 0) - mean_e) * (eps2(i, 0) - mean_e);
  }
  if (var_s == 0.0 || var_e == 0.0) {
    return {g.constant(Tensor::scalar(1.0)), true};
  }

  Tensor err_hat(n, 1);
  const double norm_e = std::sqrt(var_e);
  for (std::size_t i = 0; i < n; ++i) {
    err_hat(i, 0) = (eps2(i, 0) - mean_e) / norm_e;
  }
  NodeId dev = g.sub(sigma2, broadcast_scalar(g, g.mean(sigma2), n));
  NodeId norm_s = g.sqrt(g.sum(g.square(dev)));
  NodeId r = g.mul(g.sum(g.mul(dev, g.constant(err_hat))),
                   reciprocal_pos(g, norm_s));
  return {g.sub(g.constant(Tensor::scalar(1.0)), r), false};
}

// Numeric counterpart used by metrics; degenerate batches score 1.
inline double pcc_loss_value(std::span<const double> sigma2,
                             std::span<const double> eps2) {
  PearsonResult p = pearson(sigma2, eps2);
  return p.degenerate ? 1.0 : 1.0 - p.r;
}

struct Theorem1Result {
  double lhs;    // MSE between standardized vectors, scaled by 1/(2N)
  double rhs;    // (2N-2)/(2N) * (1 - r)
  double gap;    // |lhs - rhs|
};

// Checks the exact identity behind the PCC loss: standardizing both vectors
// with the (N-1)-denominator sample deviation makes the scaled MSE equal
// (2N-2)/(2N) * (1 - r), with no approximation.
inline Theorem1Result verify_theorem1(std::span<const double> sigma2,
                                      std::span<const double> eps2) {
  PearsonResult p = pearson(sigma2, eps2);
  if (p.degenerate) {
    throw std::domain_error("verify_theorem1: zero spread");
  }
  const std::size_t n = sigma2.size();
  const double dn = static_cast<double>(n);
  double mean_s = 0.0;
  double mean_e = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mean_s += sigma2[i];
    mean_e += eps2[i];
  }
  mean_s /= dn;
  mean_e /= dn;
  double var_s = 0.0;
  double var_e = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    var_s += (sigma2[i] - mean_s) * (sigma2[i] - mean_s);
    var_e += (eps2[i] - mean_e) * (eps2[i] - mean_e);
  }
  const double sd_s = std::sqrt(var_s / (dn - 1.0));
  const double sd_e = std::sqrt(var_e / (dn - 1.0));
  double lhs = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d =
        (sigma2[i] - mean_s) / sd_s - (eps2[i] - mean_e) / sd_e;
    lhs += d * d;
  }
  lhs /= 2.0 * dn;
  const double rhs = (2.0 * dn - 2.0) / (2.0 * dn) * (1.0 - p.r);
  return {lhs, rhs, std::abs(lhs - rhs)};
}

// Gaussian NLL over per-sample squared errors, mean-reduced:
//   (1/N) * sum_i [ eps2_i / (2 sigma2_i) + log(sigma2_i) / 2 ].
// Gradients flow into both branches.
inline NodeId nll_from_errors(Graph& g, NodeId eps2, NodeId sigma2) {
  const Tensor& s = g.value(sigma2);
  if (!s.same_shape(g.value(eps2)) || s.cols() != 1) {
    throw std::invalid_argument("nll_from_errors: shapes " +
                                g.value(eps2).shape_str() + " vs " +
                                s.shape_str());
  }
  for (double v : s.values()) {
    if (v <= 0.0) {
      throw std::domain_error("nll_from_errors: non-positive sigma2");
    }
  }
  NodeId inv = reciprocal_pos(g, g.scale(sigma2, 2.0));
  NodeId per_sample = g.add(g.mul(eps2, inv), g.scale(g.log(sigma2), 0.5));
  return g.mean(per_sample);
}

inline NodeId nll_loss(Graph& g, NodeId pred, const Tensor& target,
                       NodeId sigma2) {
  if (!g.value(pred).same_shape(target)) {
    throw std::invalid_argument("nll_loss: prediction " +
                                g.value(pred).shape_str() + " vs target " +
                                target.shape_str());
  }
  NodeId eps2 = row_sum(g, g.square(g.sub(pred, g.constant(target))));
  return nll_from_errors(g, eps2, sigma2);
}

// Closed-form per-sample NLL gradient w.r.t. sigma2, before the 1/N mean
// reduction: (sigma2 - eps2) / (2 sigma2^2). Serves as the analytic oracle
// for the autodiff path.
inline Tensor nll_grad_sigma(const Tensor& sigma2, const Tensor& eps2) {
  if (!sigma2.same_shape(eps2)) {
    throw std::invalid_argument("nll_grad_sigma: shape mismatch");
  }
  Tensor out(sigma2.rows(), sigma2.cols());
  for (std::size_t i = 0; i < sigma2.size(); ++i) {
    const double s = sigma2.values()[i];
    if (s <= 0.0) {
      throw std::domain_error("nll_grad_sigma: non-positive sigma2");
    }
    out.values()[i] = (s - eps2.values()[i]) / (2.0 * s * s);
  }
  return out;
}

namespace detail {

// Row maxima as plain values; subtracting them keeps exp() in range and the
// gradient of log-sum-exp is unchanged by the shift.
inline Tensor row_max_values(const Tensor& x) {
  Tensor out(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double m = x(i, 0);
    for (std::size_t j = 1; j < x.cols(); ++j) m = std::max(m, x(i, j));
    out(i, 0) = m;
  }
  return out;
}

}  // namespace detail

struct Downstream {
  NodeId loss;        // scalar, mean over the batch
  NodeId per_sample;  // (N, 1) realized errors
};

// Regression: per-sample squared error. Classification: per-sample cross
// entropy of the softmaxed logits against one-hot labels.
inline Downstream downstream_loss(Graph& g, Task task, NodeId pred,
                                  const Tensor& labels) {
  const Tensor& p = g.value(pred);
  if (!p.same_shape(labels)) {
    throw std::invalid_argument("downstream_loss: prediction " +
                                p.shape_str() + " vs labels " +
                                labels.shape_str());
  }
  if (task == Task::regression) {
    NodeId per = row_sum(g, g.square(g.sub(pred, g.constant(labels))));
    return {g.mean(per), per};
  }
  const std::size_t n = p.rows();
  const std::size_t k = p.cols();
  Tensor max_bcast(n, k);
  Tensor row_max = detail::row_max_values(p);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) max_bcast(i, j) = row_max(i, 0);
  }
  NodeId shifted = g.sub(pred, g.constant(max_bcast));
  NodeId lse = g.log(row_sum(g, g.exp(shifted)));
  NodeId picked = row_sum(g, g.mul(shifted, g.constant(labels)));
  NodeId per = g.sub(lse, picked);
  return {g.mean(per), per};
}

// Numeric twin of downstream_loss's per-sample errors.
inline Tensor per_sample_error(Task task, const Tensor& pred,
                               const Tensor& labels) {
  if (!pred.same_shape(labels)) {
    throw std::invalid_argument("per_sample_error: prediction " +
                                pred.shape_str() + " vs labels " +
                                labels.shape_str());
  }
  Tensor out(pred.rows(), 1);
  if (task == Task::regression) {
    for (std::size_t i = 0; i < pred.rows(); ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < pred.cols(); ++j) {
        const double d = pred(i, j) - labels(i, j);
        total += d * d;
      }
      out(i, 0) = total;
    }
    return out;
  }
  for (std::size_t i = 0; i < pred.rows(); ++i) {
    double m = pred(i, 0);
    for (std::size_t j = 1; j < pred.cols(); ++j) m = std::max(m, pred(i, j));
    double lse = 0.0;
    double picked = 0.0;
    for (std::size_t j = 0; j < pred.cols(); ++j) {
      lse += std::exp(pred(i, j) - m);
      picked += (pred(i, j) - m) * labels(i, j);
    }
    out(i, 0) = std::log(lse) - picked;
  }
  return out;
}

inline double downstream_loss_value(Task task, const Tensor& pred,
                                    const Tensor& labels) {
  Tensor per = per_sample_error(task, pred, labels);
  double total = 0.0;
  for (double v : per.values()) total += v;
  return total / static_cast<double>(per.rows());
}

}  // namespace sure
