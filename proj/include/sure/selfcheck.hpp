#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sure/losses.hpp"
#include "sure/nn.hpp"
#include "sure/propagation.hpp"
#include "sure/random.hpp"

namespace sure {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

}  // namespace detail

// Analytic self-checks runnable without any training: the standardized-MSE
// identity, the closed-form NLL gradient, finite differences for the PCC
// loss, scale invariance, and exact linear error propagation.
inline std::vector<CheckResult> run_self_checks() {
  std::vector<CheckResult> results;

  {
    CheckResult check{"standardized-mse identity", true, ""};
    double worst = 0.0;
    Rng rng(101);
    for (std::size_t n : {2ul, 16ul, 64ul, 256ul}) {
      for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> s(n);
        std::vector<double> e(n);
        for (std::size_t i = 0; i < n; ++i) {
          s[i] = rng.uniform(0.1, 5.0);
          e[i] = rng.uniform(0.0, 3.0);
        }
        worst = std::max(worst, verify_theorem1(s, e).gap);
      }
    }
    check.pass = worst < 1e-9;
    check.detail = "max gap " + detail::fmt(worst);
    results.push_back(check);
  }

  {
    CheckResult check{"nll gradient closed form", true, ""};
    double worst = 0.0;
    Rng rng(102);
    for (int trial = 0; trial < 10; ++trial) {
      const std::size_t n = 16;
      std::vector<double> e(n);
      std::vector<double> s(n);
      for (std::size_t i = 0; i < n; ++i) {
        e[i] = rng.uniform(0.0, 3.0);
        s[i] = rng.uniform(0.2, 3.0);
      }
      Graph g;
      NodeId en = g.constant(Tensor::column(e));
      NodeId sn = g.input(Tensor::column(s));
      g.backward(nll_from_errors(g, en, sn));
      Tensor closed = nll_grad_sigma(Tensor::column(s), Tensor::column(e));
      for (std::size_t i = 0; i < n; ++i) {
        worst = std::max(worst,
                         std::abs(g.grad(sn)(i, 0) * static_cast<double>(n) -
                                  closed(i, 0)));
      }
    }
    check.pass = worst < 1e-9;
    check.detail = "max |autodiff - closed| " + detail::fmt(worst);
    results.push_back(check);
  }

  {
    CheckResult check{"pcc gradient finite differences", true, ""};
    double worst_rel = 0.0;
    Rng rng(103);
    const double h = 1e-5;
    for (int trial = 0; trial < 10; ++trial) {
      const std::size_t n = 16;
      std::vector<double> s(n);
      std::vector<double> e(n);
      for (std::size_t i = 0; i < n; ++i) {
        s[i] = rng.uniform(0.1, 3.0);
        e[i] = rng.uniform(0.0, 2.0);
      }
      auto value_at = [&](const std::vector<double>& sv) {
        Graph g;
        NodeId sn = g.input(Tensor::column(sv));
        return g.value(pcc_loss(g, sn, Tensor::column(e)).node).item();
      };
      Graph g;
      NodeId sn = g.input(Tensor::column(s));
      PccLoss loss = pcc_loss(g, sn, Tensor::column(e));
      g.backward(loss.node);
      double diff = 0.0;
      double norm = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> plus = s;
        std::vector<double> minus = s;
        plus[i] += h;
        minus[i] -= h;
        const double fd = (value_at(plus) - value_at(minus)) / (2.0 * h);
        diff += (g.grad(sn)(i, 0) - fd) * (g.grad(sn)(i, 0) - fd);
        norm += fd * fd;
      }
      worst_rel = std::max(worst_rel,
                           std::sqrt(diff) / std::max(1.0, std::sqrt(norm)));
    }
    check.pass = worst_rel < 1e-6;
    check.detail = "max relative error " + detail::fmt(worst_rel);
    results.push_back(check);
  }

  {
    CheckResult check{"pcc scale invariance", true, ""};
    Rng rng(104);
    std::vector<double> s(32);
    std::vector<double> e(32);
    for (std::size_t i = 0; i < 32; ++i) {
      s[i] = rng.uniform(0.1, 4.0);
      e[i] = rng.uniform(0.0, 2.0);
    }
    const double base = pcc_loss_value(s, e);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const double a = rng.uniform(0.01, 10.0);
      const double b = rng.uniform(-5.0, 5.0);
      std::vector<double> scaled(32);
      for (std::size_t i = 0; i < 32; ++i) scaled[i] = a * s[i] + b;
      worst = std::max(worst, std::abs(pcc_loss_value(scaled, e) - base));
    }
    check.pass = worst < 1e-12;
    check.detail = "max deviation " + detail::fmt(worst);
    results.push_back(check);
  }

  {
    CheckResult check{"linear propagation exactness", true, ""};
    Rng rng(105);
    const std::size_t d = 4;
    Backbone b;
    b.latent_dim = d;
    b.fused_dim = 6;
    auto layer = [&](std::size_t in, std::size_t out) {
      LinearLayer lin;
      lin.weight = Tensor(in, out);
      for (double& v : lin.weight.values()) v = rng.uniform(-1.0, 1.0);
      lin.bias = Tensor(1, out);
      return lin;
    };
    for (int m = 0; m < 2; ++m) {
      Mlp proj;
      LinearLayer id;
      id.weight = Tensor(d, d);
      for (std::size_t i = 0; i < d; ++i) id.weight(i, i) = 1.0;
      id.bias = Tensor(1, d);
      proj.layers.push_back({id, Act::identity, 0.0});
      b.projectors.push_back(std::move(proj));
    }
    Mlp fusion;
    fusion.layers.push_back({layer(2 * d, 6), Act::identity, 0.0});
    b.fusion = std::move(fusion);
    ClassifierHead head;
    Mlp trunk;
    trunk.layers.push_back({layer(6, 5), Act::identity, 0.0});
    head.trunk = std::move(trunk);
    head.pred = layer(5, 2);
    head.uncert = layer(5, 1);

    Tensor total(2 * d, 2);
    for (std::size_t i = 0; i < 2 * d; ++i) {
      for (std::size_t o = 0; o < 2; ++o) {
        double v = 0.0;
        for (std::size_t k1 = 0; k1 < 6; ++k1) {
          for (std::size_t k2 = 0; k2 < 5; ++k2) {
            v += b.fusion.layers[0].lin.weight(i, k1) *
                 head.trunk.layers[0].lin.weight(k1, k2) *
                 head.pred.weight(k2, o);
          }
        }
        total(i, o) = v;
      }
    }
    std::vector<Tensor> latents(2, Tensor(3, d));
    std::vector<Tensor> sigmas(2, Tensor(3, 1));
    for (auto& z : latents) {
      for (double& v : z.values()) v = rng.uniform(-1.0, 1.0);
    }
    for (auto& s : sigmas) {
      for (double& v : s.values()) v = rng.uniform(0.1, 2.0);
    }
    Tensor got = propagate(b, head, latents, {0, 1}, sigmas);
    double worst = 0.0;
    for (std::size_t s = 0; s < 3; ++s) {
      double expected = 0.0;
      for (std::size_t m = 0; m < 2; ++m) {
        double frob = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          for (std::size_t o = 0; o < 2; ++o) {
            frob += total(m * d + c, o) * total(m * d + c, o);
          }
        }
        expected += frob * sigmas[m](s, 0);
      }
      worst = std::max(worst,
                       std::abs(got(s, 0) - expected) / std::abs(expected));
    }
    check.pass = worst < 1e-9;
    check.detail = "max relative error " + detail::fmt(worst);
    results.push_back(check);
  }

  {
    CheckResult check{"op gradients vs finite differences", true, ""};
    Rng rng(106);
    double worst = 0.0;
    const double h = 1e-5;
    for (int trial = 0; trial < 10; ++trial) {
      const std::size_t rows = 3 + trial % 4;
      const std::size_t cols = 2 + trial % 5;
      Tensor x(rows, cols);
      for (double& v : x.values()) {
        do {
          v = rng.uniform(-2.0, 2.0);
        } while (std::abs(v) < 5e-3);
      }
      Tensor w(rows, cols);
      for (double& v : w.values()) v = rng.uniform(-1.0, 1.0);
      auto value_at = [&](const Tensor& in) {
        Graph g;
        NodeId xn = g.input(in);
        NodeId root = g.sum(g.mul(
            g.softplus(g.relu(g.scale(xn, 1.3))), g.constant(w)));
        return g.value(root).item();
      };
      Graph g;
      NodeId xn = g.input(x);
      NodeId root = g.sum(g.mul(
          g.softplus(g.relu(g.scale(xn, 1.3))), g.constant(w)));
      g.backward(root);
      for (std::size_t flat = 0; flat < x.size(); ++flat) {
        Tensor plus = x;
        Tensor minus = x;
        plus.values()[flat] += h;
        minus.values()[flat] -= h;
        const double fd = (value_at(plus) - value_at(minus)) / (2.0 * h);
        const double rel = std::abs(g.grad(xn).values()[flat] - fd) /
                           std::max(1.0, std::abs(fd));
        worst = std::max(worst, rel);
      }
    }
    check.pass = worst < 1e-6;
    check.detail = "max relative error " + detail::fmt(worst);
    results.push_back(check);
  }

  return results;
}

}  // namespace sure
