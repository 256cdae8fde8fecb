#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace sure {

// Dense 2-d tensor of doubles, row-major. Column vectors are (n, 1) and
// scalars are (1, 1), so every quantity in the project is a matrix.
class Tensor {
 public:
  Tensor() = default;

  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Tensor(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) {
        throw std::invalid_argument("Tensor: ragged initializer rows");
      }
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Tensor scalar(double v) {
    Tensor t(1, 1);
    t.data_[0] = v;
    return t;
  }

  static Tensor ones(std::size_t rows, std::size_t cols) {
    return Tensor(rows, cols, 1.0);
  }

  static Tensor column(const std::vector<double>& values) {
    Tensor t(values.size(), 1);
    t.data_ = values;
    return t;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t i, std::size_t j) {
    return data_[i * cols_ + j];
  }
  double operator()(std::size_t i, std::size_t j) const {
    return data_[i * cols_ + j];
  }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  // Value of a (1, 1) tensor.
  double item() const {
    if (size() != 1) {
      throw std::invalid_argument("Tensor::item: tensor is " + shape_str() +
                                  ", expected [1 x 1]");
    }
    return data_[0];
  }

  bool same_shape(const Tensor& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  std::string shape_str() const {
    return "[" + std::to_string(rows_) + " x " + std::to_string(cols_) + "]";
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

using NodeId = std::size_t;

enum class Op {
  input,
  matmul,
  add,
  sub,
  mul,
  scale,
  relu,
  softplus,
  exp,
  log,
  square,
  sqrt,
  sum,
  mean,
  concat,
  slice,
  broadcast_row,
};

namespace detail {

inline double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// Reverse-mode autodiff tape. Nodes are appended in evaluation order, so the
// list is always topologically sorted and replay is deterministic. One graph
// belongs to one thread; independent graphs may run concurrently.
class Graph {
 public:
  NodeId input(Tensor value) {
    return push(Op::input, npos, npos, std::move(value));
  }

  // Alias for inputs that only carry data; gradients still accumulate at the
  // node but callers simply never read them.
  NodeId constant(Tensor value) { return input(std::move(value)); }

  NodeId matmul(NodeId a, NodeId b) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    if (x.cols() != y.rows()) {
      throw std::invalid_argument("matmul: " + x.shape_str() + " vs " +
                                  y.shape_str());
    }
    Tensor out(x.rows(), y.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      for (std::size_t k = 0; k < x.cols(); ++k) {
        const double xv = x(i, k);
        if (xv == 0.0) continue;
        for (std::size_t j = 0; j < y.cols(); ++j) {
          out(i, j) += xv * y(k, j);
        }
      }
    }
    flops_ += 2 * x.rows() * x.cols() * y.cols();
    return push(Op::matmul, a, b, std::move(out));
  }

  NodeId add(NodeId a, NodeId b) { return binary(Op::add, a, b); }
  NodeId sub(NodeId a, NodeId b) { return binary(Op::sub, a, b); }
  NodeId mul(NodeId a, NodeId b) { return binary(Op::mul, a, b); }

  NodeId scale(NodeId a, double factor) {
    Tensor out = value(a);
    for (double& v : out.values()) v *= factor;
    flops_ += out.size();
    NodeId id = push(Op::scale, a, npos, std::move(out));
    nodes_[id].factor = factor;
    return id;
  }

  NodeId relu(NodeId a) {
    Tensor out = value(a);
    for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
    flops_ += out.size();
    return push(Op::relu, a, npos, std::move(out));
  }

  NodeId softplus(NodeId a) {
    Tensor out = value(a);
    for (double& v : out.values()) v = detail::stable_softplus(v);
    flops_ += out.size();
    return push(Op::softplus, a, npos, std::move(out));
  }

  NodeId exp(NodeId a) {
    Tensor out = value(a);
    for (double& v : out.values()) v = std::exp(v);
    flops_ += out.size();
    return push(Op::exp, a, npos, std::move(out));
  }

  NodeId log(NodeId a) {
    Tensor out = value(a);
    for (double& v : out.values()) {
      if (v <= 0.0) {
        throw std::domain_error("log: non-positive input " +
                                std::to_string(v));
      }
      v = std::log(v);
    }
    flops_ += out.size();
    return push(Op::log, a, npos, std::move(out));
  }

  NodeId square(NodeId a) {
    Tensor out = value(a);
    for (double& v : out.values()) v = v * v;
    flops_ += out.size();
    return push(Op::square, a, npos, std::move(out));
  }

  NodeId sqrt(NodeId a) {
    Tensor out = value(a);
    for (double& v : out.values()) {
      if (v <= 0.0) {
        throw std::domain_error("sqrt: non-positive input " +
                                std::to_string(v));
      }
      v = std::sqrt(v);
    }
    flops_ += out.size();
    return push(Op::sqrt, a, npos, std::move(out));
  }

  NodeId sum(NodeId a) {
    double total = 0.0;
    for (double v : value(a).values()) total += v;
    flops_ += value(a).size();
    return push(Op::sum, a, npos, Tensor::scalar(total));
  }

  NodeId mean(NodeId a) {
    if (value(a).size() == 0) {
      throw std::invalid_argument("mean: empty tensor");
    }
    double total = 0.0;
    for (double v : value(a).values()) total += v;
    flops_ += value(a).size();
    return push(Op::mean, a, npos,
                Tensor::scalar(total / static_cast<double>(value(a).size())));
  }

  // Concatenation along the last (column) axis.
  NodeId concat(NodeId a, NodeId b) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    if (x.rows() != y.rows()) {
      throw std::invalid_argument("concat: " + x.shape_str() + " vs " +
                                  y.shape_str());
    }
    Tensor out(x.rows(), x.cols() + y.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = x(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) out(i, x.cols() + j) = y(i, j);
    }
    flops_ += out.size();
    return push(Op::concat, a, b, std::move(out));
  }

  // Half-open row/column ranges.
  NodeId slice(NodeId a, std::size_t r0, std::size_t r1, std::size_t c0,
               std::size_t c1) {
    const Tensor& x = value(a);
    if (r1 > x.rows() || c1 > x.cols() || r0 >= r1 || c0 >= c1) {
      throw std::invalid_argument("slice: bounds [" + std::to_string(r0) +
                                  ", " + std::to_string(r1) + ") x [" +
                                  std::to_string(c0) + ", " +
                                  std::to_string(c1) + ") on " + x.shape_str());
    }
    Tensor out(r1 - r0, c1 - c0);
    for (std::size_t i = r0; i < r1; ++i) {
      for (std::size_t j = c0; j < c1; ++j) out(i - r0, j - c0) = x(i, j);
    }
    flops_ += out.size();
    NodeId id = push(Op::slice, a, npos, std::move(out));
    nodes_[id].r0 = r0;
    nodes_[id].c0 = c0;
    return id;
  }

  // Repeats a (1, c) row across `rows` rows; used for bias terms.
  NodeId broadcast_row(NodeId a, std::size_t rows) {
    const Tensor& x = value(a);
    if (x.rows() != 1) {
      throw std::invalid_argument("broadcast_row: expected [1 x c], got " +
                                  x.shape_str());
    }
    Tensor out(rows, x.cols());
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = x(0, j);
    }
    flops_ += out.size();
    return push(Op::broadcast_row, a, npos, std::move(out));
  }

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }

  std::size_t node_count() const { return nodes_.size(); }

  // Accumulated forward cost in scalar operations; matmul counts
  // multiply-adds, everything else one op per element.
  std::uint64_t flops() const { return flops_; }

  // Populates per-node gradients of `root` w.r.t. every node. Gradients sum
  // across fan-out. Any previous gradients are discarded.
  void backward(NodeId root) {
    const Tensor& r = value(root);
    if (r.size() != 1) {
      throw std::invalid_argument("backward: root must be scalar, got " +
                                  r.shape_str());
    }
    grads_.assign(nodes_.size(), Tensor());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      grads_[i] = Tensor(nodes_[i].value.rows(), nodes_[i].value.cols());
    }
    grads_[root] = Tensor::ones(1, 1);
    for (std::size_t idx = root + 1; idx-- > 0;) {
      propagate(idx);
    }
  }

  // Gradient accumulated at `id` by the last backward(); zero tensor when the
  // node is unreachable from the root.
  const Tensor& grad(NodeId id) const {
    if (grads_.size() != nodes_.size()) {
      throw std::logic_error("grad: call backward() first");
    }
    return grads_.at(id);
  }

 private:
  static constexpr NodeId npos = static_cast<NodeId>(-1);

  struct Node {
    Op op;
    NodeId a;
    NodeId b;
    Tensor value;
    double factor = 0.0;
    std::size_t r0 = 0;
    std::size_t c0 = 0;
  };

  NodeId push(Op op, NodeId a, NodeId b, Tensor value) {
    nodes_.push_back(Node{op, a, b, std::move(value)});
    grads_.clear();
    return nodes_.size() - 1;
  }

  NodeId binary(Op op, NodeId a, NodeId b) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    if (!x.same_shape(y)) {
      const char* name = op == Op::add ? "add" : op == Op::sub ? "sub" : "mul";
      throw std::invalid_argument(std::string(name) + ": " + x.shape_str() +
                                  " vs " + y.shape_str());
    }
    Tensor out = x;
    switch (op) {
      case Op::add:
        for (std::size_t i = 0; i < out.size(); ++i)
          out.values()[i] += y.values()[i];
        break;
      case Op::sub:
        for (std::size_t i = 0; i < out.size(); ++i)
          out.values()[i] -= y.values()[i];
        break;
      default:
        for (std::size_t i = 0; i < out.size(); ++i)
          out.values()[i] *= y.values()[i];
        break;
    }
    flops_ += out.size();
    return push(op, a, b, std::move(out));
  }

  void propagate(NodeId id) {
    const Node& n = nodes_[id];
    const Tensor& g = grads_[id];
    switch (n.op) {
      case Op::input:
        break;
      case Op::matmul: {
        const Tensor& x = nodes_[n.a].value;
        const Tensor& y = nodes_[n.b].value;
        Tensor& ga = grads_[n.a];
        Tensor& gb = grads_[n.b];
        // dA += dC * B^T
        for (std::size_t i = 0; i < x.rows(); ++i) {
          for (std::size_t j = 0; j < y.cols(); ++j) {
            const double gv = g(i, j);
            if (gv == 0.0) continue;
            for (std::size_t k = 0; k < x.cols(); ++k) {
              ga(i, k) += gv * y(k, j);
            }
          }
        }
        // dB += A^T * dC
        for (std::size_t k = 0; k < x.cols(); ++k) {
          for (std::size_t i = 0; i < x.rows(); ++i) {
            const double xv = x(i, k);
            if (xv == 0.0) continue;
            for (std::size_t j = 0; j < y.cols(); ++j) {
              gb(k, j) += xv * g(i, j);
            }
          }
        }
        break;
      }
      case Op::add:
        accumulate(n.a, g, 1.0);
        accumulate(n.b, g, 1.0);
        break;
      case Op::sub:
        accumulate(n.a, g, 1.0);
        accumulate(n.b, g, -1.0);
        break;
      case Op::mul: {
        const Tensor& x = nodes_[n.a].value;
        const Tensor& y = nodes_[n.b].value;
        Tensor& ga = grads_[n.a];
        Tensor& gb = grads_[n.b];
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga.values()[i] += g.values()[i] * y.values()[i];
          gb.values()[i] += g.values()[i] * x.values()[i];
        }
        break;
      }
      case Op::scale:
        accumulate(n.a, g, n.factor);
        break;
      case Op::relu: {
        const Tensor& x = nodes_[n.a].value;
        Tensor& ga = grads_[n.a];
        // Subgradient at 0 is 0.
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (x.values()[i] > 0.0) ga.values()[i] += g.values()[i];
        }
        break;
      }
      case Op::softplus: {
        const Tensor& x = nodes_[n.a].value;
        Tensor& ga = grads_[n.a];
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga.values()[i] += g.values()[i] * detail::sigmoid(x.values()[i]);
        }
        break;
      }
      case Op::exp: {
        Tensor& ga = grads_[n.a];
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga.values()[i] += g.values()[i] * n.value.values()[i];
        }
        break;
      }
      case Op::log: {
        const Tensor& x = nodes_[n.a].value;
        Tensor& ga = grads_[n.a];
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga.values()[i] += g.values()[i] / x.values()[i];
        }
        break;
      }
      case Op::square: {
        const Tensor& x = nodes_[n.a].value;
        Tensor& ga = grads_[n.a];
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga.values()[i] += g.values()[i] * 2.0 * x.values()[i];
        }
        break;
      }
      case Op::sqrt: {
        Tensor& ga = grads_[n.a];
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga.values()[i] += g.values()[i] * 0.5 / n.value.values()[i];
        }
        break;
      }
      case Op::sum: {
        Tensor& ga = grads_[n.a];
        const double gv = g.values()[0];
        for (double& v : ga.values()) v += gv;
        break;
      }
      case Op::mean: {
        Tensor& ga = grads_[n.a];
        const double gv =
            g.values()[0] / static_cast<double>(nodes_[n.a].value.size());
        for (double& v : ga.values()) v += gv;
        break;
      }
      case Op::concat: {
        const Tensor& x = nodes_[n.a].value;
        const Tensor& y = nodes_[n.b].value;
        Tensor& ga = grads_[n.a];
        Tensor& gb = grads_[n.b];
        for (std::size_t i = 0; i < x.rows(); ++i) {
          for (std::size_t j = 0; j < x.cols(); ++j) ga(i, j) += g(i, j);
          for (std::size_t j = 0; j < y.cols(); ++j)
            gb(i, j) += g(i, x.cols() + j);
        }
        break;
      }
      case Op::slice: {
        Tensor& ga = grads_[n.a];
        for (std::size_t i = 0; i < g.rows(); ++i) {
          for (std::size_t j = 0; j < g.cols(); ++j) {
            ga(n.r0 + i, n.c0 + j) += g(i, j);
          }
        }
        break;
      }
      case Op::broadcast_row: {
        Tensor& ga = grads_[n.a];
        for (std::size_t i = 0; i < g.rows(); ++i) {
          for (std::size_t j = 0; j < g.cols(); ++j) ga(0, j) += g(i, j);
        }
        break;
      }
    }
  }

  void accumulate(NodeId target, const Tensor& g, double factor) {
    Tensor& t = grads_[target];
    for (std::size_t i = 0; i < g.size(); ++i) {
      t.values()[i] += factor * g.values()[i];
    }
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::uint64_t flops_ = 0;
};

// Elementwise reciprocal of a strictly positive tensor, composed from the
// primitive ops so gradients come for free.
inline NodeId reciprocal_pos(Graph& g, NodeId x) {
  return g.exp(g.scale(g.log(x), -1.0));
}

// (r, c) -> (r, 1) row sums.
inline NodeId row_sum(Graph& g, NodeId x) {
  return g.matmul(x, g.constant(Tensor::ones(g.value(x).cols(), 1)));
}

// Broadcast a (1, 1) scalar node to an (rows, 1) column.
inline NodeId broadcast_scalar(Graph& g, NodeId s, std::size_t rows) {
  return g.matmul(g.constant(Tensor::ones(rows, 1)), s);
}

}  // namespace sure
