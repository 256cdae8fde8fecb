#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "sure/data.hpp"
#include "sure/losses.hpp"
#include "sure/nn.hpp"

namespace sure {

struct BackboneConfig {
  std::vector<std::size_t> modality_dims;
  std::size_t latent_dim = 16;    // d, shared across projectors
  std::size_t fused_dim = 32;     // d_f
  std::size_t proj_hidden = 32;
  std::size_t fusion_hidden = 32;
};

// The stand-in for a pretrained multimodal framework: per-modality projectors
// into a shared latent space and a concatenation fusion network.
struct Backbone {
  std::vector<Mlp> projectors;  // n_i -> d
  Mlp fusion;                   // (M * d) -> d_f
  std::size_t latent_dim = 0;
  std::size_t fused_dim = 0;

  static Backbone init(const BackboneConfig& cfg, Rng& rng) {
    if (cfg.modality_dims.empty()) {
      throw std::invalid_argument("Backbone::init: no modalities");
    }
    Backbone b;
    b.latent_dim = cfg.latent_dim;
    b.fused_dim = cfg.fused_dim;
    for (std::size_t n : cfg.modality_dims) {
      b.projectors.push_back(Mlp::make({n, cfg.proj_hidden, cfg.latent_dim},
                                       {Act::relu, Act::identity}, rng));
    }
    b.fusion = Mlp::make(
        {cfg.modality_dims.size() * cfg.latent_dim, cfg.fusion_hidden,
         cfg.fused_dim},
        {Act::relu, Act::identity}, rng);
    return b;
  }

  std::size_t modality_count() const { return projectors.size(); }

  void freeze() {
    for (Mlp& p : projectors) p.set_frozen(true);
    fusion.set_frozen(true);
  }

  bool frozen() const {
    for (const Mlp& p : projectors) {
      for (const auto& layer : p.layers) {
        if (!layer.lin.frozen) return false;
      }
    }
    for (const auto& layer : fusion.layers) {
      if (!layer.lin.frozen) return false;
    }
    return true;
  }

  void collect_params(std::vector<NamedParam>& out) {
    for (std::size_t m = 0; m < projectors.size(); ++m) {
      projectors[m].collect_params("backbone.projector" + std::to_string(m),
                                   out);
    }
    fusion.collect_params("backbone.fusion", out);
  }
};

struct HeadConfig {
  std::size_t fused_dim = 32;
  std::size_t hidden = 32;   // h
  std::size_t out_dim = 1;   // k for classification, 1 for regression
  double trunk_dropout = 0.0;
};

// Classifier head with a shared trunk and two output layers: the task
// prediction and a softplus uncertainty estimate.
struct ClassifierHead {
  Mlp trunk;           // d_f -> h
  LinearLayer pred;    // h -> out
  LinearLayer uncert;  // h -> 1, softplus applied at use

  static ClassifierHead init(const HeadConfig& cfg, Rng& rng) {
    ClassifierHead head;
    head.trunk = Mlp::make({cfg.fused_dim, cfg.hidden}, {Act::relu}, rng);
    head.trunk.layers[0].dropout = cfg.trunk_dropout;
    head.pred = LinearLayer::init(cfg.hidden, cfg.out_dim, rng);
    head.uncert = LinearLayer::init(cfg.hidden, 1, rng);
    return head;
  }

  std::size_t out_dim() const { return pred.out_dim(); }

  void freeze() {
    trunk.set_frozen(true);
    pred.frozen = true;
    uncert.frozen = true;
  }

  void collect_params(const std::string& prefix, std::vector<NamedParam>& out) {
    trunk.collect_params(prefix + ".trunk", out);
    out.push_back({prefix + ".pred.weight", &pred.weight, pred.frozen});
    out.push_back({prefix + ".pred.bias", &pred.bias, pred.frozen});
    out.push_back({prefix + ".uncert.weight", &uncert.weight, uncert.frozen});
    out.push_back({prefix + ".uncert.bias", &uncert.bias, uncert.frozen});
  }
};

// Latents of the present rows per modality; absent rows stay zero and are
// flagged by the batch's presence mask, so downstream code never reads them.
inline std::vector<Tensor> project(const Backbone& backbone,
                                   const ModalBatch& batch) {
  if (batch.modality_count() != backbone.modality_count()) {
    throw std::invalid_argument("project: batch has " +
                                std::to_string(batch.modality_count()) +
                                " modalities, backbone " +
                                std::to_string(backbone.modality_count()));
  }
  std::vector<Tensor> latents;
  latents.reserve(backbone.modality_count());
  for (std::size_t m = 0; m < backbone.modality_count(); ++m) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < batch.batch_size(); ++i) {
      if (batch.is_present(i, m)) rows.push_back(i);
    }
    Tensor z(batch.batch_size(), backbone.latent_dim);
    if (!rows.empty()) {
      Tensor sub(rows.size(), batch.x[m].cols());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < sub.cols(); ++j) {
          sub(i, j) = batch.x[m](rows[i], j);
        }
      }
      Tensor projected = backbone.projectors[m].forward_value(sub);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < z.cols(); ++j) {
          z(rows[i], j) = projected(i, j);
        }
      }
    }
    latents.push_back(std::move(z));
  }
  return latents;
}

struct PredictNodes {
  NodeId prediction;    // (B, out) raw scores
  NodeId sigma2_omega;  // (B, 1) strictly positive
};

// Fusion and head on one latent per modality (true or reconstructed).
inline PredictNodes fuse_predict(Graph& g, Backbone& backbone,
                                 ClassifierHead& head,
                                 const std::vector<NodeId>& latents,
                                 bool stochastic, Rng* rng,
                                 std::vector<BoundParam>* bound = nullptr) {
  if (latents.size() != backbone.modality_count()) {
    throw std::invalid_argument(
        "fuse_predict: need one latent per modality, got " +
        std::to_string(latents.size()) + " of " +
        std::to_string(backbone.modality_count()));
  }
  NodeId joined = latents[0];
  for (std::size_t m = 1; m < latents.size(); ++m) {
    joined = g.concat(joined, latents[m]);
  }
  NodeId fused = backbone.fusion.forward(g, joined, stochastic, rng, bound);
  NodeId h = head.trunk.forward(g, fused, stochastic, rng, bound);
  NodeId pred = linear_forward(g, head.pred, h, bound);
  NodeId sigma2 = g.softplus(linear_forward(g, head.uncert, h, bound));
  return {pred, sigma2};
}

struct PredictValues {
  Tensor prediction;
  Tensor sigma2_omega;
};

// Deterministic numeric twin of fuse_predict.
inline PredictValues fuse_predict_value(const Backbone& backbone,
                                        const ClassifierHead& head,
                                        const std::vector<Tensor>& latents) {
  if (latents.size() != backbone.modality_count()) {
    throw std::invalid_argument(
        "fuse_predict_value: need one latent per modality");
  }
  const std::size_t batch = latents[0].rows();
  Tensor joined(batch, latents.size() * backbone.latent_dim);
  for (std::size_t m = 0; m < latents.size(); ++m) {
    for (std::size_t i = 0; i < batch; ++i) {
      for (std::size_t j = 0; j < backbone.latent_dim; ++j) {
        joined(i, m * backbone.latent_dim + j) = latents[m](i, j);
      }
    }
  }
  Tensor h = head.trunk.forward_value(backbone.fusion.forward_value(joined));
  PredictValues out;
  out.prediction = Tensor(batch, head.pred.out_dim());
  out.sigma2_omega = Tensor(batch, 1);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = 0; j < head.pred.out_dim(); ++j) {
      double v = head.pred.bias(0, j);
      for (std::size_t k = 0; k < h.cols(); ++k) {
        v += h(i, k) * head.pred.weight(k, j);
      }
      out.prediction(i, j) = v;
    }
    double u = head.uncert.bias(0, 0);
    for (std::size_t k = 0; k < h.cols(); ++k) {
      u += h(i, k) * head.uncert.weight(k, 0);
    }
    out.sigma2_omega(i, 0) = detail::stable_softplus(u);
  }
  return out;
}

struct PretrainConfig {
  std::size_t epochs = 30;
  double lr = 1e-3;
  std::size_t batch_size = 64;
};

// Trains projectors, fusion, and a throwaway head on full-modality data with
// the downstream loss, then freezes the backbone. The caller replaces the
// head before fine-tuning.
inline void pretrain(Backbone& backbone, ClassifierHead& head,
                     const ModalBatch& train, Task task,
                     const PretrainConfig& cfg, Rng& rng) {
  const std::size_t n = train.batch_size();
  for (std::size_t i = 0; i < n; ++i) {
    if (!train.row_complete(i)) {
      throw std::invalid_argument(
          "pretrain: training split has missing modalities");
    }
  }
  Adam opt(cfg.lr);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      std::vector<std::size_t> rows(order.begin() + start,
                                    order.begin() + stop);
      ModalBatch mini = train.select_rows(rows);
      Graph g;
      std::vector<BoundParam> bound;
      std::vector<NodeId> latents;
      for (std::size_t m = 0; m < backbone.modality_count(); ++m) {
        latents.push_back(backbone.projectors[m].forward(
            g, g.input(mini.x[m]), false, nullptr, &bound));
      }
      PredictNodes out =
          fuse_predict(g, backbone, head, latents, false, nullptr, &bound);
      Downstream d = downstream_loss(g, task, out.prediction, mini.labels);
      g.backward(d.loss);
      opt.step(g, bound);
    }
  }
  backbone.freeze();
}

}  // namespace sure
