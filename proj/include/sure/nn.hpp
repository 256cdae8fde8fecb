#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sure/random.hpp"
#include "sure/tensor.hpp"

namespace sure {

enum class Act { identity, relu, softplus };

struct LinearLayer {
  Tensor weight;  // (in, out)
  Tensor bias;    // (1, out)
  bool frozen = false;

  // Glorot-uniform weights, zero bias, deterministic per rng state.
  static LinearLayer init(std::size_t in, std::size_t out, Rng& rng) {
    if (in == 0 || out == 0) {
      throw std::invalid_argument("LinearLayer::init: zero dimension");
    }
    LinearLayer layer;
    layer.weight = Tensor(in, out);
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    for (double& v : layer.weight.values()) v = rng.uniform(-bound, bound);
    layer.bias = Tensor(1, out);
    return layer;
  }

  static LinearLayer init(std::size_t in, std::size_t out,
                          std::uint64_t seed) {
    Rng rng(seed);
    return init(in, out, rng);
  }

  std::size_t in_dim() const { return weight.rows(); }
  std::size_t out_dim() const { return weight.cols(); }
};

// A parameter leaf recorded during a graph forward pass, so gradients can be
// read back and applied after backward().
struct BoundParam {
  Tensor* tensor;
  NodeId node;
  bool frozen;
};

struct NamedParam {
  std::string name;
  Tensor* tensor;
  bool frozen;
};

inline NodeId linear_forward(Graph& g, LinearLayer& layer, NodeId x,
                             std::vector<BoundParam>* bound) {
  NodeId w = g.input(layer.weight);
  NodeId b = g.input(layer.bias);
  if (bound) {
    bound->push_back({&layer.weight, w, layer.frozen});
    bound->push_back({&layer.bias, b, layer.frozen});
  }
  return g.add(g.matmul(x, w), g.broadcast_row(b, g.value(x).rows()));
}

inline NodeId apply_act(Graph& g, Act act, NodeId x) {
  switch (act) {
    case Act::relu:
      return g.relu(x);
    case Act::softplus:
      return g.softplus(x);
    default:
      return x;
  }
}

// Numeric twin of linear_forward + activation.
inline Tensor linear_value(const LinearLayer& layer, const Tensor& x,
                           Act act = Act::identity) {
  if (x.cols() != layer.in_dim()) {
    throw std::invalid_argument("linear_value: input " + x.shape_str() +
                                " vs in_dim " +
                                std::to_string(layer.in_dim()));
  }
  Tensor out(x.rows(), layer.out_dim());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t k = 0; k < x.cols(); ++k) {
      const double xv = x(i, k);
      if (xv == 0.0) continue;
      for (std::size_t j = 0; j < out.cols(); ++j) {
        out(i, j) += xv * layer.weight(k, j);
      }
    }
    for (std::size_t j = 0; j < out.cols(); ++j) {
      out(i, j) += layer.bias(0, j);
      if (act == Act::relu && out(i, j) < 0.0) {
        out(i, j) = 0.0;
      } else if (act == Act::softplus) {
        out(i, j) = detail::stable_softplus(out(i, j));
      }
    }
  }
  return out;
}

inline Tensor relu_value(Tensor t) {
  for (double& v : t.values()) v = v > 0.0 ? v : 0.0;
  return t;
}

// Inverted dropout: zeroes with probability `rate`, scales survivors by
// 1 / (1 - rate), so the deterministic path needs no rescaling.
inline NodeId apply_dropout(Graph& g, NodeId x, double rate, Rng& rng) {
  const Tensor& v = g.value(x);
  Tensor mask(v.rows(), v.cols());
  const double keep = 1.0 - rate;
  for (double& m : mask.values()) {
    m = rng.uniform() < rate ? 0.0 : 1.0 / keep;
  }
  return g.mul(x, g.constant(std::move(mask)));
}

struct Mlp {
  struct Layer {
    LinearLayer lin;
    Act act = Act::identity;
    double dropout = 0.0;
  };

  std::vector<Layer> layers;

  // dims = {in, h1, ..., out}; acts has one entry per layer.
  static Mlp make(const std::vector<std::size_t>& dims,
                  const std::vector<Act>& acts, Rng& rng) {
    if (dims.size() < 2 || acts.size() != dims.size() - 1) {
      throw std::invalid_argument("Mlp::make: dims/acts mismatch");
    }
    Mlp mlp;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      mlp.layers.push_back({LinearLayer::init(dims[i], dims[i + 1], rng),
                            acts[i], 0.0});
    }
    return mlp;
  }

  std::size_t in_dim() const { return layers.front().lin.in_dim(); }
  std::size_t out_dim() const { return layers.back().lin.out_dim(); }

  NodeId forward(Graph& g, NodeId x, bool stochastic, Rng* rng,
                 std::vector<BoundParam>* bound = nullptr) {
    if (g.value(x).cols() != in_dim()) {
      throw std::invalid_argument("Mlp::forward: input " +
                                  g.value(x).shape_str() + " vs in_dim " +
                                  std::to_string(in_dim()));
    }
    NodeId h = x;
    for (Layer& layer : layers) {
      h = apply_act(g, layer.act, linear_forward(g, layer.lin, h, bound));
      if (stochastic && layer.dropout > 0.0) {
        if (rng == nullptr) {
          throw std::logic_error("Mlp::forward: stochastic pass needs an rng");
        }
        h = apply_dropout(g, h, layer.dropout, *rng);
      }
    }
    return h;
  }

  // Deterministic numeric forward; dropout layers act as identity.
  Tensor forward_value(const Tensor& x) const {
    if (x.cols() != in_dim()) {
      throw std::invalid_argument("Mlp::forward_value: input " +
                                  x.shape_str() + " vs in_dim " +
                                  std::to_string(in_dim()));
    }
    Tensor h = x;
    for (const Layer& layer : layers) {
      h = linear_value(layer.lin, h, layer.act);
    }
    return h;
  }

  void set_frozen(bool frozen) {
    for (Layer& layer : layers) layer.lin.frozen = frozen;
  }

  void collect_params(const std::string& prefix,
                      std::vector<NamedParam>& out) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string base = prefix + ".l" + std::to_string(i);
      out.push_back({base + ".weight", &layers[i].lin.weight,
                     layers[i].lin.frozen});
      out.push_back({base + ".bias", &layers[i].lin.bias,
                     layers[i].lin.frozen});
    }
  }
};

// Adaptive-moment optimizer with bias correction. Moments are keyed by
// parameter identity, so a model must stay in place while it is optimized.
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // Applies one update using gradients from the last backward() on `g`.
  // A parameter bound at several nodes gets the sum of their gradients.
  void step(const Graph& g, const std::vector<BoundParam>& params) {
    std::vector<Tensor*> order;
    std::map<Tensor*, Tensor> total;
    for (const BoundParam& bp : params) {
      if (bp.frozen) continue;
      const Tensor& grad = g.grad(bp.node);
      auto [it, fresh] = total.try_emplace(
          bp.tensor, Tensor(grad.rows(), grad.cols()));
      if (fresh) order.push_back(bp.tensor);
      for (std::size_t i = 0; i < grad.size(); ++i) {
        it->second.values()[i] += grad.values()[i];
      }
    }
    for (Tensor* p : order) {
      if (!total[p].all_finite()) {
        throw std::runtime_error(
            "Adam::step: non-finite gradient for parameter of shape " +
            p->shape_str());
      }
    }
    ++step_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (Tensor* p : order) {
      auto [it, fresh] = slots_.try_emplace(
          p, Moments{Tensor(p->rows(), p->cols()), Tensor(p->rows(), p->cols())});
      Moments& mom = it->second;
      const Tensor& grad = total[p];
      for (std::size_t i = 0; i < p->size(); ++i) {
        const double gv = grad.values()[i];
        double& m = mom.m.values()[i];
        double& v = mom.v.values()[i];
        m = beta1_ * m + (1.0 - beta1_) * gv;
        v = beta2_ * v + (1.0 - beta2_) * gv * gv;
        p->values()[i] -= lr_ * (m / c1) / (std::sqrt(v / c2) + eps_);
      }
    }
  }

  long steps() const { return step_; }

 private:
  struct Moments {
    Tensor m;
    Tensor v;
  };

  double lr_;
  double beta1_;
  double beta2_;
  double eps_;
  long step_ = 0;
  std::map<Tensor*, Moments> slots_;
};

inline constexpr const char* kCheckpointHeader = "SURE-CKPT-1";

inline nlohmann::ordered_json checkpoint_save(
    const std::vector<NamedParam>& params) {
  nlohmann::ordered_json out;
  out["format"] = kCheckpointHeader;
  nlohmann::ordered_json body;
  for (const NamedParam& p : params) {
    nlohmann::ordered_json entry;
    entry["shape"] = {p.tensor->rows(), p.tensor->cols()};
    entry["frozen"] = p.frozen;
    entry["data"] = p.tensor->values();
    body[p.name] = std::move(entry);
  }
  out["params"] = std::move(body);
  return out;
}

inline void checkpoint_load(const nlohmann::json& ckpt,
                            const std::vector<NamedParam>& params) {
  if (!ckpt.contains("format") || ckpt["format"] != kCheckpointHeader) {
    throw std::runtime_error("checkpoint_load: missing or unsupported header");
  }
  const auto& body = ckpt.at("params");
  for (const NamedParam& p : params) {
    if (!body.contains(p.name)) {
      throw std::runtime_error("checkpoint_load: missing parameter " + p.name);
    }
    const auto& entry = body.at(p.name);
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2 || shape[0] != p.tensor->rows() ||
        shape[1] != p.tensor->cols()) {
      throw std::runtime_error("checkpoint_load: shape mismatch for " +
                               p.name);
    }
    entry.at("data").get_to(p.tensor->values());
  }
}

}  // namespace sure
