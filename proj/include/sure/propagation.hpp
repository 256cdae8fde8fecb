#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "sure/backbone.hpp"

namespace sure {

namespace detail {

// Deterministic prediction path (fusion -> trunk -> prediction layer). The
// uncertainty head is deliberately not part of the graph: sensitivities are
// taken through the prediction only.
inline NodeId prediction_path(Graph& g, Backbone& backbone,
                              ClassifierHead& head,
                              const std::vector<NodeId>& latents) {
  NodeId joined = latents[0];
  for (std::size_t m = 1; m < latents.size(); ++m) {
    joined = g.concat(joined, latents[m]);
  }
  NodeId fused = backbone.fusion.forward(g, joined, false, nullptr);
  NodeId h = head.trunk.forward(g, fused, false, nullptr);
  return linear_forward(g, head.pred, h, nullptr);
}

inline void check_propagation_args(const Backbone& backbone,
                                   const std::vector<Tensor>& latents,
                                   const std::vector<std::size_t>& reconstructed,
                                   const std::vector<Tensor>& rec_sigma2) {
  if (latents.size() != backbone.modality_count()) {
    throw std::invalid_argument("propagate: need one latent per modality");
  }
  const std::size_t batch = latents[0].rows();
  for (const Tensor& z : latents) {
    if (z.rows() != batch || z.cols() != backbone.latent_dim) {
      throw std::invalid_argument("propagate: latent shape " + z.shape_str());
    }
  }
  if (rec_sigma2.size() != backbone.modality_count()) {
    throw std::invalid_argument(
        "propagate: need one sigma slot per modality");
  }
  for (std::size_t idx : reconstructed) {
    if (idx >= backbone.modality_count()) {
      throw std::invalid_argument("propagate: reconstructed index " +
                                  std::to_string(idx) + " out of range");
    }
    const Tensor& s = rec_sigma2[idx];
    if (s.rows() != batch || s.cols() != 1) {
      throw std::invalid_argument(
          "propagate: modality " + std::to_string(idx) +
          " is marked reconstructed but has no per-sample variance");
    }
  }
}

}  // namespace detail

// First-order input-induced output variance per sample:
//   sigma2_input = sum_{i in J} S_i * sigma2_rec_i,
// where S_i sums the squared sensitivities of every prediction component to
// every coordinate of the reconstructed latent i. One backward pass per
// output component per sample.
inline Tensor propagate(Backbone& backbone, ClassifierHead& head,
                        const std::vector<Tensor>& latents,
                        const std::vector<std::size_t>& reconstructed,
                        const std::vector<Tensor>& rec_sigma2) {
  detail::check_propagation_args(backbone, latents, reconstructed,
                                 rec_sigma2);
  const std::size_t batch = latents[0].rows();
  Tensor out(batch, 1);
  if (reconstructed.empty()) {
    return out;
  }
  const std::size_t d = backbone.latent_dim;
  for (std::size_t s = 0; s < batch; ++s) {
    Graph g;
    std::vector<NodeId> ids;
    ids.reserve(latents.size());
    for (const Tensor& z : latents) {
      Tensor row(1, d);
      for (std::size_t j = 0; j < d; ++j) row(0, j) = z(s, j);
      ids.push_back(g.input(std::move(row)));
    }
    NodeId pred = detail::prediction_path(g, backbone, head, ids);
    const std::size_t out_dim = g.value(pred).cols();
    std::vector<double> sensitivity(latents.size(), 0.0);
    for (std::size_t o = 0; o < out_dim; ++o) {
      g.backward(g.slice(pred, 0, 1, o, o + 1));
      for (std::size_t i : reconstructed) {
        const Tensor& grad = g.grad(ids[i]);
        double total = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          total += grad(0, c) * grad(0, c);
        }
        sensitivity[i] += total;
      }
    }
    double var = 0.0;
    for (std::size_t i : reconstructed) {
      var += sensitivity[i] * rec_sigma2[i](s, 0);
    }
    out(s, 0) = var;
  }
  return out;
}

// Total output variance: input-induced plus model-intrinsic, elementwise.
inline Tensor combine(const Tensor& sigma2_input, const Tensor& sigma2_omega) {
  if (!sigma2_input.same_shape(sigma2_omega)) {
    throw std::invalid_argument("combine: " + sigma2_input.shape_str() +
                                " vs " + sigma2_omega.shape_str());
  }
  Tensor out = sigma2_input;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (sigma2_input.values()[i] < 0.0 || sigma2_omega.values()[i] < 0.0) {
      throw std::invalid_argument("combine: negative variance");
    }
    out.values()[i] += sigma2_omega.values()[i];
  }
  return out;
}

// Empirical validation of the first-order propagation: perturbs each
// reconstructed latent with isotropic Gaussian noise of the given variance
// and returns the per-sample variance of the prediction across draws,
// summed over output components.
inline Tensor mc_oracle(const Backbone& backbone, const ClassifierHead& head,
                        const std::vector<Tensor>& latents,
                        const std::vector<std::size_t>& reconstructed,
                        const std::vector<Tensor>& rec_sigma2,
                        std::size_t n_samples, std::uint64_t seed) {
  detail::check_propagation_args(backbone, latents, reconstructed,
                                 rec_sigma2);
  if (n_samples < 2) {
    throw std::invalid_argument("mc_oracle: need at least two draws");
  }
  const std::size_t batch = latents[0].rows();
  const std::size_t d = backbone.latent_dim;
  const std::size_t m_count = latents.size();
  Tensor out(batch, 1);
  Rng rng(seed);
  for (std::size_t s = 0; s < batch; ++s) {
    Tensor joined(1, m_count * d);
    for (std::size_t m = 0; m < m_count; ++m) {
      for (std::size_t j = 0; j < d; ++j) {
        joined(0, m * d + j) = latents[m](s, j);
      }
    }
    std::vector<double> scales(m_count, 0.0);
    for (std::size_t i : reconstructed) {
      scales[i] = std::sqrt(rec_sigma2[i](s, 0));
    }
    const std::size_t out_dim = head.pred.out_dim();
    // Deviations are accumulated against the first draw; identical draws
    // (zero perturbation) then give a variance of exactly zero.
    std::vector<double> first(out_dim, 0.0);
    std::vector<double> s1(out_dim, 0.0);
    std::vector<double> s2(out_dim, 0.0);
    Tensor perturbed = joined;
    for (std::size_t t = 0; t < n_samples; ++t) {
      for (std::size_t i : reconstructed) {
        for (std::size_t j = 0; j < d; ++j) {
          perturbed(0, i * d + j) =
              joined(0, i * d + j) + scales[i] * rng.normal();
        }
      }
      Tensor h = head.trunk.forward_value(
          backbone.fusion.forward_value(perturbed));
      for (std::size_t o = 0; o < out_dim; ++o) {
        double v = head.pred.bias(0, o);
        for (std::size_t k = 0; k < h.cols(); ++k) {
          v += h(0, k) * head.pred.weight(k, o);
        }
        if (t == 0) first[o] = v;
        const double dev = v - first[o];
        s1[o] += dev;
        s2[o] += dev * dev;
      }
    }
    double total_var = 0.0;
    const double dn = static_cast<double>(n_samples);
    for (std::size_t o = 0; o < out_dim; ++o) {
      total_var += (s2[o] - s1[o] * s1[o] / dn) / (dn - 1.0);
    }
    out(s, 0) = total_var;
  }
  return out;
}

}  // namespace sure
