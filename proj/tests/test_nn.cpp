#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "catch_amalgamated.hpp"
#include "sure/nn.hpp"

using sure::Act;
using sure::Adam;
using sure::BoundParam;
using sure::Graph;
using sure::LinearLayer;
using sure::Mlp;
using sure::NamedParam;
using sure::NodeId;
using sure::Rng;
using sure::Tensor;

namespace {

bool same_bytes(const Tensor& a, const Tensor& b) {
  return a.same_shape(b) &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

Mlp identity_mlp(std::size_t n) {
  Mlp mlp;
  LinearLayer lin;
  lin.weight = Tensor(n, n);
  for (std::size_t i = 0; i < n; ++i) lin.weight(i, i) = 1.0;
  lin.bias = Tensor(1, n);
  mlp.layers.push_back({lin, Act::identity, 0.0});
  return mlp;
}

}  // namespace

TEST_CASE("layer initialization") {
  SECTION("deterministic per seed") {
    LinearLayer a = LinearLayer::init(4, 2, std::uint64_t{7});
    LinearLayer b = LinearLayer::init(4, 2, std::uint64_t{7});
    CHECK(same_bytes(a.weight, b.weight));
    CHECK(same_bytes(a.bias, b.bias));
  }
  SECTION("bias starts at zero") {
    LinearLayer a = LinearLayer::init(5, 3, std::uint64_t{1});
    for (double v : a.bias.values()) CHECK(v == 0.0);
  }
  SECTION("weights bounded by the init range") {
    LinearLayer a = LinearLayer::init(4, 2, std::uint64_t{3});
    for (double v : a.weight.values()) CHECK(std::abs(v) <= 1.0);
  }
  SECTION("zero dims rejected") {
    Rng rng(0);
    CHECK_THROWS_AS(LinearLayer::init(0, 2, rng), std::invalid_argument);
    CHECK_THROWS_AS(LinearLayer::init(2, 0, rng), std::invalid_argument);
  }
}

TEST_CASE("mlp forward") {
  SECTION("identity layer passes input through") {
    Mlp mlp = identity_mlp(2);
    Graph g;
    NodeId x = g.input(Tensor{{1, 2}});
    NodeId y = mlp.forward(g, x, false, nullptr);
    CHECK(g.value(y)(0, 0) == 1.0);
    CHECK(g.value(y)(0, 1) == 2.0);
  }
  SECTION("shape mismatch rejected") {
    Mlp mlp = identity_mlp(2);
    Graph g;
    NodeId x = g.input(Tensor(1, 3));
    CHECK_THROWS_AS(mlp.forward(g, x, false, nullptr), std::invalid_argument);
  }
  SECTION("dropout rate zero has no stochastic effect") {
    Rng rng(2);
    Mlp mlp = Mlp::make({3, 4, 2}, {Act::relu, Act::identity}, rng);
    Tensor x(1, 3);
    x(0, 0) = 0.3;
    x(0, 1) = -1.2;
    x(0, 2) = 0.8;
    Graph g;
    NodeId det = mlp.forward(g, g.input(x), false, nullptr);
    Rng drop_rng(7);
    NodeId sto = mlp.forward(g, g.input(x), true, &drop_rng);
    CHECK(same_bytes(g.value(det), g.value(sto)));
  }
  SECTION("stochastic pass without rng rejected") {
    Rng rng(2);
    Mlp mlp = Mlp::make({2, 2}, {Act::identity}, rng);
    mlp.layers[0].dropout = 0.5;
    Graph g;
    NodeId x = g.input(Tensor(1, 2, 1.0));
    CHECK_THROWS_AS(mlp.forward(g, x, true, nullptr), std::logic_error);
  }
  SECTION("inverted dropout keeps the expectation") {
    Mlp mlp = identity_mlp(4);
    mlp.layers[0].dropout = 0.5;
    Tensor x(1, 4, 1.0);
    Rng rng(123);
    double total = 0.0;
    const int passes = 10000;
    for (int p = 0; p < passes; ++p) {
      Graph g;
      NodeId y = mlp.forward(g, g.input(x), true, &rng);
      for (double v : g.value(y).values()) total += v;
    }
    const double mean = total / (passes * 4.0);
    CHECK(std::abs(mean - 1.0) < 0.05);
  }
  SECTION("numeric forward matches graph forward") {
    Rng rng(5);
    Mlp mlp = Mlp::make({3, 5, 2}, {Act::relu, Act::softplus}, rng);
    Tensor x(4, 3);
    for (double& v : x.values()) v = rng.uniform(-1.5, 1.5);
    Graph g;
    NodeId y = mlp.forward(g, g.input(x), false, nullptr);
    CHECK(same_bytes(g.value(y), mlp.forward_value(x)));
  }
}

TEST_CASE("optimizer step") {
  SECTION("descends on a quadratic") {
    Tensor w = Tensor::scalar(1.0);
    Adam opt(0.1);
    Graph g;
    NodeId wn = g.input(w);
    g.backward(g.square(wn));
    opt.step(g, {{&w, wn, false}});
    CHECK(w.item() < 1.0);
  }
  SECTION("frozen parameter never moves") {
    Tensor w = Tensor::scalar(1.0);
    Tensor before = w;
    Adam opt(0.5);
    for (int i = 0; i < 10; ++i) {
      Graph g;
      NodeId wn = g.input(w);
      g.backward(g.square(wn));
      opt.step(g, {{&w, wn, true}});
    }
    CHECK(same_bytes(w, before));
  }
  SECTION("converges to the minimum of (w - 3)^2") {
    Tensor w = Tensor::scalar(0.0);
    Adam opt(0.1);
    for (int i = 0; i < 200; ++i) {
      Graph g;
      NodeId wn = g.input(w);
      NodeId root = g.square(g.sub(wn, g.constant(Tensor::scalar(3.0))));
      g.backward(root);
      opt.step(g, {{&w, wn, false}});
    }
    CHECK(std::abs(w.item() - 3.0) < 0.05);
  }
  SECTION("non-finite gradient aborts") {
    Tensor w = Tensor::scalar(1.0);
    Adam opt;
    Graph g;
    NodeId wn = g.input(w);
    NodeId bad =
        g.constant(Tensor::scalar(std::numeric_limits<double>::quiet_NaN()));
    g.backward(g.mul(wn, bad));
    CHECK_THROWS_AS(opt.step(g, {{&w, wn, false}}), std::runtime_error);
  }
  SECTION("duplicate bindings accumulate once") {
    // w bound twice in one graph: f(w) = w^2 + 2w, f'(1) = 4.
    Tensor w = Tensor::scalar(1.0);
    Adam opt(0.1);
    Graph g;
    NodeId w1 = g.input(w);
    NodeId w2 = g.input(w);
    g.backward(g.add(g.square(w1), g.scale(w2, 2.0)));
    CHECK(g.grad(w1).item() + g.grad(w2).item() == 4.0);
    opt.step(g, {{&w, w1, false}, {&w, w2, false}});
    CHECK(w.item() < 1.0);
  }
}

TEST_CASE("mlp fits a 1-d least-squares toy") {
  Rng rng(42);
  const std::size_t n = 100;
  Tensor x(n, 1);
  Tensor y(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    x(i, 0) = rng.uniform(-1.0, 1.0);
    y(i, 0) = 2.0 * x(i, 0) + 1.0;
  }
  Mlp mlp = Mlp::make({1, 8, 1}, {Act::relu, Act::identity}, rng);
  Adam opt(0.01);
  double mse = 1e9;
  for (int step = 0; step < 2000 && mse >= 1e-3; ++step) {
    Graph g;
    std::vector<BoundParam> bound;
    NodeId pred = mlp.forward(g, g.input(x), false, nullptr, &bound);
    NodeId loss = g.mean(g.square(g.sub(pred, g.constant(y))));
    g.backward(loss);
    opt.step(g, bound);
    mse = g.value(loss).item();
  }
  CHECK(mse < 1e-3);
}

TEST_CASE("freezing is absolute through training") {
  Rng rng(9);
  Mlp mlp = Mlp::make({2, 4, 1}, {Act::relu, Act::identity}, rng);
  mlp.set_frozen(true);
  std::vector<Tensor> before;
  for (const auto& layer : mlp.layers) {
    before.push_back(layer.lin.weight);
    before.push_back(layer.lin.bias);
  }
  Tensor x(8, 2);
  Tensor y(8, 1);
  for (double& v : x.values()) v = rng.uniform(-1, 1);
  for (double& v : y.values()) v = rng.uniform(-1, 1);
  Adam opt(0.1);
  for (int step = 0; step < 50; ++step) {
    Graph g;
    std::vector<BoundParam> bound;
    NodeId pred = mlp.forward(g, g.input(x), false, nullptr, &bound);
    g.backward(g.mean(g.square(g.sub(pred, g.constant(y)))));
    opt.step(g, bound);
  }
  std::size_t idx = 0;
  for (const auto& layer : mlp.layers) {
    CHECK(same_bytes(layer.lin.weight, before[idx++]));
    CHECK(same_bytes(layer.lin.bias, before[idx++]));
  }
}

TEST_CASE("checkpoint round-trip") {
  Rng rng(17);
  Mlp mlp = Mlp::make({3, 4, 2}, {Act::relu, Act::identity}, rng);
  std::vector<NamedParam> params;
  mlp.collect_params("mlp", params);
  nlohmann::json saved = sure::checkpoint_save(params);
  REQUIRE(saved["format"] == "SURE-CKPT-1");

  std::vector<Tensor> originals;
  for (const auto& p : params) originals.push_back(*p.tensor);
  for (const auto& p : params) {
    for (double& v : p.tensor->values()) v = -99.0;
  }
  sure::checkpoint_load(saved, params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(same_bytes(*params[i].tensor, originals[i]));
  }

  SECTION("bad header rejected") {
    nlohmann::json bad = saved;
    bad["format"] = "SURE-CKPT-0";
    CHECK_THROWS_AS(sure::checkpoint_load(bad, params), std::runtime_error);
  }
  SECTION("missing parameter rejected") {
    nlohmann::json bad = saved;
    bad["params"].erase("mlp.l0.weight");
    CHECK_THROWS_AS(sure::checkpoint_load(bad, params), std::runtime_error);
  }
  SECTION("shape mismatch rejected") {
    nlohmann::json bad = saved;
    bad["params"]["mlp.l0.weight"]["shape"] = {1, 1};
    CHECK_THROWS_AS(sure::checkpoint_load(bad, params), std::runtime_error);
  }
}
