#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "sure/losses.hpp"
#include "sure/nn.hpp"

namespace sure {

// Reconstruction module for one target modality. Any source latent is first
// linearly pre-projected into a shared input space, then passed through a
// shared trunk, a mean head, and a sigma head that reads the concatenation of
// trunk and mean outputs through softplus.
struct Reconstructor {
  std::size_t target = 0;
  std::vector<LinearLayer> pre;  // one per source modality; pre[target] unused
  LinearLayer share1;            // d -> dh
  LinearLayer share2;            // dh -> dh
  LinearLayer mu1;               // dh -> dh
  LinearLayer mu2;               // dh -> d
  LinearLayer sig1;              // (dh + d) -> dh
  LinearLayer sig2;              // dh -> 1

  static Reconstructor init(std::size_t modalities, std::size_t target,
                            std::size_t latent_dim, std::size_t hidden,
                            Rng& rng) {
    if (target >= modalities) {
      throw std::invalid_argument("Reconstructor::init: bad target index");
    }
    Reconstructor r;
    r.target = target;
    for (std::size_t m = 0; m < modalities; ++m) {
      if (m == target) {
        r.pre.emplace_back();
      } else {
        r.pre.push_back(LinearLayer::init(latent_dim, latent_dim, rng));
      }
    }
    r.share1 = LinearLayer::init(latent_dim, hidden, rng);
    r.share2 = LinearLayer::init(hidden, hidden, rng);
    r.mu1 = LinearLayer::init(hidden, hidden, rng);
    r.mu2 = LinearLayer::init(hidden, latent_dim, rng);
    r.sig1 = LinearLayer::init(hidden + latent_dim, hidden, rng);
    r.sig2 = LinearLayer::init(hidden, 1, rng);
    return r;
  }

  std::size_t latent_dim() const { return share1.in_dim(); }

  struct Nodes {
    NodeId mean;    // (B, d)
    NodeId sigma2;  // (B, 1), strictly positive
  };

  Nodes forward(Graph& g, NodeId source_latent, std::size_t source,
                std::vector<BoundParam>* bound = nullptr) {
    if (source == target) {
      throw std::invalid_argument(
          "Reconstructor: source equals target modality " +
          std::to_string(target));
    }
    if (source >= pre.size()) {
      throw std::invalid_argument("Reconstructor: source index out of range");
    }
    NodeId z = linear_forward(g, pre[source], source_latent, bound);
    NodeId trunk =
        linear_forward(g, share2, g.relu(linear_forward(g, share1, z, bound)),
                       bound);
    NodeId mean = linear_forward(
        g, mu2, g.relu(linear_forward(g, mu1, g.relu(trunk), bound)), bound);
    NodeId joint = g.relu(g.concat(trunk, mean));
    NodeId sigma2 = g.softplus(linear_forward(
        g, sig2, g.relu(linear_forward(g, sig1, joint, bound)), bound));
    return {mean, sigma2};
  }

  struct Values {
    Tensor mean;
    Tensor sigma2;
  };

  Values forward_value(const Tensor& source_latent, std::size_t source) const {
    if (source == target) {
      throw std::invalid_argument(
          "Reconstructor: source equals target modality " +
          std::to_string(target));
    }
    Tensor z = linear_value(pre.at(source), source_latent);
    Tensor trunk = linear_value(share2, linear_value(share1, z, Act::relu));
    Tensor mean =
        linear_value(mu2, linear_value(mu1, relu_value(trunk), Act::relu));
    Tensor joint(trunk.rows(), trunk.cols() + mean.cols());
    for (std::size_t i = 0; i < joint.rows(); ++i) {
      for (std::size_t j = 0; j < trunk.cols(); ++j) {
        joint(i, j) = std::max(trunk(i, j), 0.0);
      }
      for (std::size_t j = 0; j < mean.cols(); ++j) {
        joint(i, trunk.cols() + j) = std::max(mean(i, j), 0.0);
      }
    }
    Tensor sigma2 = linear_value(
        sig2, linear_value(sig1, joint, Act::relu), Act::softplus);
    return {std::move(mean), std::move(sigma2)};
  }

  void freeze() {
    for (LinearLayer& p : pre) p.frozen = true;
    share1.frozen = share2.frozen = true;
    mu1.frozen = mu2.frozen = true;
    sig1.frozen = sig2.frozen = true;
  }

  bool frozen() const { return share1.frozen; }

  void collect_params(const std::string& prefix,
                      std::vector<NamedParam>& out) {
    auto add = [&](const std::string& name, LinearLayer& lin) {
      out.push_back({prefix + "." + name + ".weight", &lin.weight,
                     lin.frozen});
      out.push_back({prefix + "." + name + ".bias", &lin.bias, lin.frozen});
    };
    for (std::size_t m = 0; m < pre.size(); ++m) {
      if (m == target) continue;
      add("pre" + std::to_string(m), pre[m]);
    }
    add("share1", share1);
    add("share2", share2);
    add("mu1", mu1);
    add("mu2", mu2);
    add("sig1", sig1);
    add("sig2", sig2);
  }
};

inline Reconstructor::Values reconstruct(const Reconstructor& rec,
                                         const Tensor& source_latent,
                                         std::size_t source) {
  return rec.forward_value(source_latent, source);
}

struct ReconAverage {
  Tensor mean;    // (B, d)
  Tensor sigma2;  // (B, 1)
};

// Mean of per-source reconstructions and of their variances for one missing
// target modality, using every available source.
inline ReconAverage reconstruct_average(
    const std::vector<Reconstructor>& recs,
    const std::vector<Tensor>& latents,
    const std::vector<std::size_t>& available, std::size_t target) {
  if (available.empty()) {
    throw std::invalid_argument("reconstruct_average: no available sources");
  }
  for (std::size_t j : available) {
    if (j == target) {
      throw std::invalid_argument(
          "reconstruct_average: target listed as available");
    }
  }
  const Reconstructor& rec = recs.at(target);
  ReconAverage out;
  bool first = true;
  for (std::size_t j : available) {
    Reconstructor::Values v = rec.forward_value(latents.at(j), j);
    if (first) {
      out.mean = std::move(v.mean);
      out.sigma2 = std::move(v.sigma2);
      first = false;
    } else {
      for (std::size_t i = 0; i < out.mean.size(); ++i) {
        out.mean.values()[i] += v.mean.values()[i];
      }
      for (std::size_t i = 0; i < out.sigma2.size(); ++i) {
        out.sigma2.values()[i] += v.sigma2.values()[i];
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(available.size());
  for (double& v : out.mean.values()) v *= inv;
  for (double& v : out.sigma2.values()) v *= inv;
  return out;
}

struct RecLoss {
  NodeId total;
  NodeId mse;
  bool pcc_degenerate = false;
};

// Reconstruction objective: batch-mean squared norm plus lambda times the
// correlation loss between the sigma head and the realized per-sample errors
// (mean over latent coordinates, taken as constants).
inline RecLoss rec_loss(Graph& g, NodeId mean, const Tensor& truth,
                        NodeId sigma2, double lambda) {
  const Tensor& m = g.value(mean);
  if (!m.same_shape(truth)) {
    throw std::invalid_argument("rec_loss: mean " + m.shape_str() +
                                " vs truth " + truth.shape_str());
  }
  if (m.rows() < 2) {
    throw std::invalid_argument("rec_loss: need a batch of at least two");
  }
  NodeId diff = g.sub(mean, g.constant(truth));
  NodeId mse = g.scale(g.sum(g.square(diff)),
                       1.0 / static_cast<double>(m.rows()));
  if (lambda == 0.0) {
    return {mse, mse, false};
  }
  Tensor eps2(m.rows(), 1);
  const Tensor& d = g.value(diff);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) total += d(i, j) * d(i, j);
    eps2(i, 0) = total / static_cast<double>(m.cols());
  }
  PccLoss pcc = pcc_loss(g, sigma2, eps2);
  return {g.add(mse, g.scale(pcc.node, lambda)), mse, pcc.degenerate};
}

// Nominal forward cost (scalar ops) of reconstructing once with each of the
// M per-modality modules at latent width d.
inline double reconstruction_forward_cost(std::size_t modalities,
                                          std::size_t latent_dim,
                                          std::size_t batch = 8) {
  if (modalities == 0) return 0.0;
  Rng rng(0);
  Graph g;
  Tensor z(batch, latent_dim, 0.5);
  for (std::size_t target = 0; target < modalities; ++target) {
    Reconstructor rec = Reconstructor::init(
        std::max<std::size_t>(modalities, 2), target, latent_dim,
        2 * latent_dim, rng);
    const std::size_t source = target == 0 ? 1 : 0;
    rec.forward(g, g.input(z), source);
  }
  return static_cast<double>(g.flops());
}

struct ComplexityProbe {
  std::vector<std::size_t> modality_counts;
  std::vector<double> costs;
  double linear_r2 = 0.0;
};

// Measures how the reconstruction forward cost scales with the number of
// modalities and fits cost ~ a + b * M.
inline ComplexityProbe complexity_probe(
    const std::vector<std::size_t>& modality_counts, std::size_t latent_dim,
    std::size_t batch = 8) {
  ComplexityProbe probe;
  probe.modality_counts = modality_counts;
  for (std::size_t m : modality_counts) {
    probe.costs.push_back(reconstruction_forward_cost(m, latent_dim, batch));
  }
  const std::size_t n = probe.costs.size();
  if (n >= 2) {
    double mx = 0.0;
    double my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mx += static_cast<double>(modality_counts[i]);
      my += probe.costs[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0.0;
    double sxx = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double dx = static_cast<double>(modality_counts[i]) - mx;
      sxy += dx * (probe.costs[i] - my);
      sxx += dx * dx;
    }
    const double slope = sxy / sxx;
    double ssr = 0.0;
    double sst = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double fit =
          my + slope * (static_cast<double>(modality_counts[i]) - mx);
      ssr += (probe.costs[i] - fit) * (probe.costs[i] - fit);
      sst += (probe.costs[i] - my) * (probe.costs[i] - my);
    }
    probe.linear_r2 = sst == 0.0 ? 1.0 : 1.0 - ssr / sst;
  }
  return probe;
}

}  // namespace sure
