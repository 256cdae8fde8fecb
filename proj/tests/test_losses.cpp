#include <cmath>
#include <vector>

#include "catch_amalgamated.hpp"
#include "sure/losses.hpp"
#include "sure/nn.hpp"
#include "sure/random.hpp"

using sure::Graph;
using sure::NodeId;
using sure::Rng;
using sure::Task;
using sure::Tensor;

namespace {

// Closed-form gradient of 1 - r(sigma2, eps2) w.r.t. sigma2, with the error
// branch held constant; used as the analytic oracle for autodiff.
std::vector<double> pcc_grad_closed(const std::vector<double>& s,
                                    const std::vector<double>& e) {
  const std::size_t n = s.size();
  double mu_s = 0.0;
  double mu_e = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mu_s += s[i];
    mu_e += e[i];
  }
  mu_s /= static_cast<double>(n);
  mu_e /= static_cast<double>(n);
  double ns2 = 0.0;
  double ne2 = 0.0;
  double cov = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ns2 += (s[i] - mu_s) * (s[i] - mu_s);
    ne2 += (e[i] - mu_e) * (e[i] - mu_e);
    cov += (s[i] - mu_s) * (e[i] - mu_e);
  }
  const double ns = std::sqrt(ns2);
  const double ne = std::sqrt(ne2);
  const double r = cov / (ns * ne);
  std::vector<double> grad(n);
  for (std::size_t i = 0; i < n; ++i) {
    grad[i] = (r * (s[i] - mu_s) / ns - (e[i] - mu_e) / ne) / ns;
  }
  return grad;
}

double pcc_value_at(const std::vector<double>& s,
                    const std::vector<double>& e) {
  Graph g;
  NodeId sn = g.input(Tensor::column(s));
  auto loss = sure::pcc_loss(g, sn, Tensor::column(e));
  return g.value(loss.node).item();
}

std::vector<double> random_vec(Rng& rng, std::size_t n, double lo, double hi) {
  std::vector<double> out(n);
  for (double& v : out) v = rng.uniform(lo, hi);
  return out;
}

}  // namespace

TEST_CASE("pearson correlation") {
  std::vector<double> a{1, 2, 3};
  std::vector<double> doubled{2, 4, 6};
  std::vector<double> reversed{3, 2, 1};
  CHECK_THAT(sure::pearson(a, doubled).r,
             Catch::Matchers::WithinAbs(1.0, 1e-12));
  CHECK_THAT(sure::pearson(a, reversed).r,
             Catch::Matchers::WithinAbs(-1.0, 1e-12));
  std::vector<double> c{1, 2, 3, 4};
  std::vector<double> d{1, 3, 2, 4};
  CHECK_THAT(sure::pearson(c, d).r, Catch::Matchers::WithinAbs(0.8, 1e-12));

  SECTION("length checks") {
    std::vector<double> single{1.0};
    CHECK_THROWS_AS(sure::pearson(single, single), std::invalid_argument);
    std::vector<double> two{1.0, 2.0};
    CHECK_THROWS_AS(sure::pearson(two, a), std::invalid_argument);
  }
  SECTION("zero spread flagged") {
    std::vector<double> flat{2, 2, 2};
    auto res = sure::pearson(flat, a);
    CHECK(res.degenerate);
    CHECK(res.r == 0.0);
  }
  SECTION("non-finite rejected") {
    std::vector<double> bad{1.0, std::nan(""), 2.0};
    CHECK_THROWS_AS(sure::pearson(bad, a), std::invalid_argument);
  }
}

TEST_CASE("pcc loss values") {
  CHECK_THAT(pcc_value_at({1, 2, 3}, {2, 4, 6}),
             Catch::Matchers::WithinAbs(0.0, 1e-12));
  CHECK_THAT(pcc_value_at({3, 2, 1}, {1, 2, 3}),
             Catch::Matchers::WithinAbs(2.0, 1e-12));
  CHECK_THAT(pcc_value_at({1, 2, 3, 4}, {1, 3, 2, 4}),
             Catch::Matchers::WithinAbs(0.2, 1e-12));

  SECTION("batch of one rejected") {
    Graph g;
    NodeId s = g.input(Tensor::scalar(1.0));
    CHECK_THROWS_AS(sure::pcc_loss(g, s, Tensor::scalar(1.0)),
                    std::invalid_argument);
  }
  SECTION("degenerate spread yields loss 1 with zero gradient") {
    Graph g;
    NodeId s = g.input(Tensor::column({2, 2, 2}));
    auto loss = sure::pcc_loss(g, s, Tensor::column({1, 2, 3}));
    CHECK(loss.degenerate);
    CHECK(g.value(loss.node).item() == 1.0);
    g.backward(loss.node);
    for (double v : g.grad(s).values()) CHECK(v == 0.0);
  }
}

TEST_CASE("pcc loss is scale invariant in the uncertainty branch") {
  Rng rng(3);
  std::vector<double> s = random_vec(rng, 16, 0.1, 4.0);
  std::vector<double> e = random_vec(rng, 16, 0.0, 2.0);
  const double base = pcc_value_at(s, e);
  for (int trial = 0; trial < 100; ++trial) {
    const double a = rng.uniform(0.01, 10.0);
    const double b = rng.uniform(-5.0, 5.0);
    std::vector<double> scaled(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) scaled[i] = a * s[i] + b;
    CHECK(std::abs(pcc_value_at(scaled, e) - base) <= 1e-12);
  }
}

TEST_CASE("pcc gradient matches the closed form and finite differences") {
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> s = random_vec(rng, 16, 0.1, 3.0);
    std::vector<double> e = random_vec(rng, 16, 0.0, 2.0);

    Graph g;
    NodeId sn = g.input(Tensor::column(s));
    auto loss = sure::pcc_loss(g, sn, Tensor::column(e));
    REQUIRE_FALSE(loss.degenerate);
    g.backward(loss.node);
    const Tensor& ad = g.grad(sn);

    std::vector<double> closed = pcc_grad_closed(s, e);
    const double h = 1e-5;
    double ad_norm = 0.0;
    double diff_fd = 0.0;
    double fd_norm = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      CHECK(std::abs(ad(i, 0) - closed[i]) <= 1e-9);
      std::vector<double> plus = s;
      std::vector<double> minus = s;
      plus[i] += h;
      minus[i] -= h;
      const double fd = (pcc_value_at(plus, e) - pcc_value_at(minus, e)) /
                        (2.0 * h);
      diff_fd += (ad(i, 0) - fd) * (ad(i, 0) - fd);
      fd_norm += fd * fd;
      ad_norm += ad(i, 0) * ad(i, 0);
    }
    CHECK(std::sqrt(diff_fd) <= 1e-6 * std::max(1.0, std::sqrt(fd_norm)));
    CHECK(ad_norm > 0.0);
  }
}

TEST_CASE("standardized-mse identity") {
  SECTION("random pairs at several batch sizes") {
    Rng rng(29);
    for (std::size_t n : {2ul, 16ul, 64ul, 256ul}) {
      for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> s = random_vec(rng, n, 0.1, 5.0);
        std::vector<double> e = random_vec(rng, n, 0.0, 3.0);
        auto res = sure::verify_theorem1(s, e);
        INFO("n=" << n << " trial=" << trial);
        CHECK(res.gap < 1e-9);
      }
    }
  }
  SECTION("identical standardized vectors give zero mse and r = 1") {
    std::vector<double> s{1, 2, 3, 4, 7};
    std::vector<double> e{3, 5, 7, 9, 15};  // affine in s: standardizes equal
    auto res = sure::verify_theorem1(s, e);
    CHECK_THAT(res.lhs, Catch::Matchers::WithinAbs(0.0, 1e-12));
    CHECK_THAT(sure::pearson(s, e).r, Catch::Matchers::WithinAbs(1.0, 1e-12));
  }
  SECTION("smallest admissible batch") {
    std::vector<double> s{1.0, 2.0};
    std::vector<double> e{5.0, 3.0};
    auto res = sure::verify_theorem1(s, e);
    // Two points are always perfectly (anti)correlated; prefactor is 1/2.
    CHECK_THAT(res.rhs, Catch::Matchers::WithinAbs(1.0, 1e-12));
    CHECK(res.gap < 1e-12);
  }
  SECTION("degenerate spread rejected") {
    std::vector<double> flat{1, 1, 1};
    std::vector<double> e{1, 2, 3};
    CHECK_THROWS_AS(sure::verify_theorem1(flat, e), std::domain_error);
  }
}

namespace {

double nll_value(const std::vector<double>& eps2,
                 const std::vector<double>& sigma2) {
  Graph g;
  NodeId e = g.constant(Tensor::column(eps2));
  NodeId s = g.input(Tensor::column(sigma2));
  return g.value(sure::nll_from_errors(g, e, s)).item();
}

}  // namespace

TEST_CASE("nll loss values") {
  CHECK_THAT(nll_value({0.0}, {1.0}), Catch::Matchers::WithinAbs(0.0, 1e-12));
  CHECK_THAT(nll_value({1.0}, {1.0}), Catch::Matchers::WithinAbs(0.5, 1e-12));
  CHECK_THAT(nll_value({4.0}, {2.0}),
             Catch::Matchers::WithinAbs(1.0 + std::log(2.0) / 2.0, 1e-12));

  SECTION("non-positive sigma rejected") {
    Graph g;
    NodeId e = g.constant(Tensor::column({1.0}));
    NodeId s = g.input(Tensor::column({0.0}));
    CHECK_THROWS_AS(sure::nll_from_errors(g, e, s), std::domain_error);
  }
  SECTION("prediction form reduces to squared-error form") {
    Graph g;
    NodeId pred = g.input(Tensor::column({1.0, 3.0}));
    Tensor target = Tensor::column({0.0, 1.0});
    NodeId s = g.input(Tensor::column({1.0, 2.0}));
    NodeId loss = sure::nll_loss(g, pred, target, s);
    // eps2 = {1, 4}: mean of [1/2, 4/4 + log(2)/2]
    const double expected = 0.5 * (0.5 + 1.0 + std::log(2.0) / 2.0);
    CHECK_THAT(g.value(loss).item(),
               Catch::Matchers::WithinAbs(expected, 1e-12));
  }
}

TEST_CASE("nll gradient oracle") {
  SECTION("closed-form spot values") {
    Tensor g = sure::nll_grad_sigma(Tensor::column({2.0}),
                                    Tensor::column({4.0}));
    CHECK_THAT(g(0, 0), Catch::Matchers::WithinAbs(-0.25, 1e-15));
    Tensor zero = sure::nll_grad_sigma(Tensor::column({1.5}),
                                       Tensor::column({1.5}));
    CHECK(zero(0, 0) == 0.0);
  }
  SECTION("matches autodiff up to the mean reduction") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t n = 8;
      std::vector<double> e = random_vec(rng, n, 0.0, 3.0);
      std::vector<double> s = random_vec(rng, n, 0.2, 3.0);
      Graph g;
      NodeId en = g.constant(Tensor::column(e));
      NodeId sn = g.input(Tensor::column(s));
      g.backward(sure::nll_from_errors(g, en, sn));
      Tensor closed =
          sure::nll_grad_sigma(Tensor::column(s), Tensor::column(e));
      for (std::size_t i = 0; i < n; ++i) {
        CHECK(std::abs(g.grad(sn)(i, 0) * static_cast<double>(n) -
                       closed(i, 0)) <= 1e-9);
      }
    }
  }
}

TEST_CASE("nll gradient blows up near zero uncertainty, pcc stays bounded") {
  // Fixed O(1) spread; the smallest entry sweeps toward zero.
  Rng rng(21);
  std::vector<double> spread = random_vec(rng, 15, 0.5, 1.5);
  std::vector<double> e = random_vec(rng, 16, 0.5, 2.0);
  double prev_nll = 0.0;
  double max_pcc = 0.0;
  for (int decade = 1; decade <= 6; ++decade) {
    const double s_min = std::pow(10.0, -decade);
    std::vector<double> s(16);
    s[0] = s_min;
    for (std::size_t i = 1; i < 16; ++i) s[i] = s_min + spread[i - 1];

    Graph g;
    NodeId en = g.constant(Tensor::column(e));
    NodeId sn = g.input(Tensor::column(s));
    g.backward(sure::nll_from_errors(g, en, sn));
    const double nll_mag = std::abs(g.grad(sn)(0, 0));

    Graph g2;
    NodeId sn2 = g2.input(Tensor::column(s));
    auto loss = sure::pcc_loss(g2, sn2, Tensor::column(e));
    g2.backward(loss.node);
    for (double v : g2.grad(sn2).values()) {
      max_pcc = std::max(max_pcc, std::abs(v));
    }

    if (decade > 1) CHECK(nll_mag > 50.0 * prev_nll);
    prev_nll = nll_mag;
  }
  // 1 / (2 sigma2^2) at sigma2 = 1e-6 puts the magnitude around 1e10.
  CHECK(prev_nll > 1e9);
  CHECK(max_pcc < 10.0);
}

TEST_CASE("minimizing nll drives sigma2 to the errors") {
  Rng rng(4);
  const std::size_t n = 16;
  std::vector<double> e = random_vec(rng, n, 0.5, 2.0);
  Tensor w(n, 1, std::log(std::exp(1.0) - 1.0));  // softplus(w) = 1
  sure::Adam opt(0.01);
  for (int step = 0; step < 5000; ++step) {
    Graph g;
    NodeId wn = g.input(w);
    NodeId sigma2 = g.softplus(wn);
    NodeId en = g.constant(Tensor::column(e));
    g.backward(sure::nll_from_errors(g, en, sigma2));
    opt.step(g, {{&w, wn, false}});
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double sigma2 = sure::detail::stable_softplus(w(i, 0));
    CHECK(std::abs(sigma2 - e[i]) / e[i] < 0.01);
  }
}

TEST_CASE("downstream losses") {
  SECTION("perfect regression") {
    Graph g;
    Tensor y = Tensor::column({1.0, -2.0, 0.5});
    NodeId pred = g.input(y);
    auto d = sure::downstream_loss(g, Task::regression, pred, y);
    CHECK(g.value(d.loss).item() == 0.0);
    for (double v : g.value(d.per_sample).values()) CHECK(v == 0.0);
  }
  SECTION("confident correct classification") {
    Graph g;
    NodeId pred = g.input(Tensor{{10.0, -10.0}});
    Tensor label{{1.0, 0.0}};
    auto d = sure::downstream_loss(g, Task::classification, pred, label);
    CHECK(g.value(d.per_sample)(0, 0) < 1e-8);
    CHECK(g.value(d.per_sample)(0, 0) > 0.0);
  }
  SECTION("uniform logits give log k") {
    const std::size_t k = 5;
    Graph g;
    NodeId pred = g.input(Tensor(3, k, 0.7));
    Tensor labels(3, k);
    labels(0, 0) = labels(1, 3) = labels(2, 4) = 1.0;
    auto d = sure::downstream_loss(g, Task::classification, pred, labels);
    for (double v : g.value(d.per_sample).values()) {
      CHECK_THAT(v, Catch::Matchers::WithinAbs(std::log(double(k)), 1e-12));
    }
  }
  SECTION("label dim mismatch rejected") {
    Graph g;
    NodeId pred = g.input(Tensor(3, 4));
    CHECK_THROWS_AS(
        sure::downstream_loss(g, Task::classification, pred, Tensor(3, 3)),
        std::invalid_argument);
    CHECK_THROWS_AS(sure::per_sample_error(Task::regression, Tensor(3, 1),
                                           Tensor(2, 1)),
                    std::invalid_argument);
  }
  SECTION("graph and numeric paths agree") {
    Rng rng(13);
    Tensor logits(6, 4);
    for (double& v : logits.values()) v = rng.uniform(-3.0, 3.0);
    Tensor labels(6, 4);
    for (std::size_t i = 0; i < 6; ++i) {
      labels(i, rng.below(4)) = 1.0;
    }
    Graph g;
    auto d = sure::downstream_loss(g, Task::classification, g.input(logits),
                                   labels);
    Tensor numeric =
        sure::per_sample_error(Task::classification, logits, labels);
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK_THAT(g.value(d.per_sample)(i, 0),
                 Catch::Matchers::WithinAbs(numeric(i, 0), 1e-12));
    }
    CHECK_THAT(
        g.value(d.loss).item(),
        Catch::Matchers::WithinAbs(
            sure::downstream_loss_value(Task::classification, logits, labels),
            1e-12));
  }
  SECTION("classification gradient matches finite differences") {
    Rng rng(31);
    Tensor logits(4, 3);
    for (double& v : logits.values()) v = rng.uniform(-2.0, 2.0);
    Tensor labels(4, 3);
    for (std::size_t i = 0; i < 4; ++i) labels(i, rng.below(3)) = 1.0;

    auto eval = [&](const Tensor& x) {
      Graph g;
      auto d = sure::downstream_loss(g, Task::classification, g.input(x),
                                     labels);
      return g.value(d.loss).item();
    };
    Graph g;
    NodeId pn = g.input(logits);
    auto d = sure::downstream_loss(g, Task::classification, pn, labels);
    g.backward(d.loss);
    const double h = 1e-6;
    for (std::size_t flat = 0; flat < logits.size(); ++flat) {
      Tensor plus = logits;
      Tensor minus = logits;
      plus.values()[flat] += h;
      minus.values()[flat] -= h;
      const double fd = (eval(plus) - eval(minus)) / (2.0 * h);
      CHECK(std::abs(g.grad(pn).values()[flat] - fd) <=
            1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}
