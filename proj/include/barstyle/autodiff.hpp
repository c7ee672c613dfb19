/**
 * @file autodiff.hpp
 * @brief Tape-based reverse-mode differentiation over dense double matrices,
 *        plus the Adam optimizer and the warm-up/cosine learning-rate schedule.
 *
 * A Graph records every op in execution order, so the tape itself is a
 * topological order and backward() is a single reverse sweep. Parameters live
 * in a ParameterStore that outlives graphs; a graph adds its parameter
 * gradients into the store's gradient buffers.
 *
 * Every value is a 2-D matrix (row-major). Vectors are 1 x n rows.
 */
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "barstyle/error.hpp"

namespace barstyle::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline std::string shape_str(const Matrix& m) {
  return "(" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ")";
}

// ---- parameters --------------------------------------------------------------

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;  ///< same shape as value; zeroed by ParameterStore::zero_grad
};

/// Named parameters with stable addresses, iterated in registration order.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore& other) { *this = other; }
  ParameterStore& operator=(const ParameterStore& other) {
    if (this == &other) return *this;
    params_.clear();
    index_.clear();
    for (const auto& p : other.params_) add(p->name, p->value);
    return *this;
  }
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter& add(const std::string& name, Matrix init) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    auto p = std::make_unique<Parameter>();
    p->name = name;
    p->grad = Matrix::Zero(init.rows(), init.cols());
    p->value = std::move(init);
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter " + name);
    return *params_[it->second];
  }
  const Parameter& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter " + name);
    return *params_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->grad.setZero();
  }

  double grad_norm() const {
    double s = 0;
    for (const auto& p : params_) s += p->grad.squaredNorm();
    return std::sqrt(s);
  }

  /// Copies values (not gradients) of same-named parameters from `other`.
  void copy_values_from(const ParameterStore& other) {
    for (auto& p : params_) {
      const auto& src = other.get(p->name);
      if (src.value.rows() != p->value.rows() || src.value.cols() != p->value.cols())
        throw ShapeMismatch("parameter " + p->name + " " + shape_str(p->value) + " vs " + shape_str(src.value));
      p->value = src.value;
    }
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, std::size_t> index_;
};

inline Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

// ---- graph -------------------------------------------------------------------

enum class OpKind {
  Input,
  Param,
  MatMul,
  Add,
  Mul,
  Scale,
  Concat,
  Split,
  Embedding,
  Softmax,
  LayerNorm,
  Relu,
  PRelu,
  Gelu,
  Sigmoid,
  Softplus,
  Log,
  ClampMin,
  Mean,
  Sum,
  CrossEntropy,
  Reparameterize,
};

class Graph;

/// Handle to a node in a Graph.
struct Var {
  Graph* graph = nullptr;
  int id = -1;
  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

class Graph {
 public:
  struct Node {
    OpKind kind;
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    std::function<void(Graph&, Node&)> backward;
  };

  Graph() { nodes_.reserve(256); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  std::size_t size() const { return nodes_.size(); }
  Node& node(int id) { return nodes_[id]; }
  const Node& node(int id) const { return nodes_[id]; }
  OpKind kind(Var v) const { return nodes_[v.id].kind; }

  Var input(Matrix value, bool requires_grad = false) {
    return push(OpKind::Input, std::move(value), requires_grad, nullptr);
  }

  /// Parameter leaf; each parameter enters a graph once and is reused on later requests.
  Var param(Parameter& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return {this, it->second};
    Var v = push(OpKind::Param, p.value, true, nullptr);
    nodes_[v.id].param = &p;
    param_nodes_[&p] = v.id;
    return v;
  }

  /// Reverse sweep from a 1x1 loss; parameter gradients are added to the store.
  void backward(Var loss) {
    const Matrix& l = nodes_[loss.id].value;
    if (l.rows() != 1 || l.cols() != 1) throw NotScalarLoss("loss has shape " + shape_str(l));
    for (auto& n : nodes_)
      if (n.requires_grad) n.grad.setZero(n.value.rows(), n.value.cols());
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad(0, 0) = 1.0;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.requires_grad) continue;
      if (n.backward) n.backward(*this, n);
      if (n.param) n.param->grad += n.grad;
    }
  }

  Matrix& grad_of(int id) { return nodes_[id].grad; }
  bool needs(int id) const { return nodes_[id].requires_grad; }

  Var push(OpKind kind, Matrix value, bool requires_grad, std::function<void(Graph&, Node&)> backward) {
    Node n;
    n.kind = kind;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

 private:
  std::vector<Node> nodes_;
  std::map<const Parameter*, int> param_nodes_;
};

inline const Matrix& Var::value() const { return graph->node(id).value; }
inline const Matrix& Var::grad() const { return graph->node(id).grad; }

namespace detail {

inline void require_same_graph(Var a, Var b) {
  if (a.graph != b.graph) throw std::invalid_argument("vars belong to different graphs");
}

inline bool any_grad(std::initializer_list<Var> vs) {
  for (Var v : vs)
    if (v.graph->needs(v.id)) return true;
  return false;
}

}  // namespace detail

// ---- ops -----------------------------------------------------------------------

/// A (n x k) * B (k x m).
inline Var matmul(Var a, Var b) {
  detail::require_same_graph(a, b);
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  if (A.cols() != B.rows()) throw ShapeMismatch("matmul " + shape_str(A) + " * " + shape_str(B));
  Graph& g = *a.graph;
  int ia = a.id, ib = b.id;
  return g.push(OpKind::MatMul, A * B, detail::any_grad({a, b}), [ia, ib](Graph& g, Graph::Node& n) {
    if (g.needs(ia)) g.grad_of(ia).noalias() += n.grad * g.node(ib).value.transpose();
    if (g.needs(ib)) g.grad_of(ib).noalias() += g.node(ia).value.transpose() * n.grad;
  });
}

/// A (n x k) * B^T for B (m x k).
inline Var matmul_nt(Var a, Var b) {
  detail::require_same_graph(a, b);
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  if (A.cols() != B.cols()) throw ShapeMismatch("matmul_nt " + shape_str(A) + " * " + shape_str(B) + "^T");
  Graph& g = *a.graph;
  int ia = a.id, ib = b.id;
  return g.push(OpKind::MatMul, A * B.transpose(), detail::any_grad({a, b}), [ia, ib](Graph& g, Graph::Node& n) {
    if (g.needs(ia)) g.grad_of(ia).noalias() += n.grad * g.node(ib).value;
    if (g.needs(ib)) g.grad_of(ib).noalias() += n.grad.transpose() * g.node(ia).value;
  });
}

/// Elementwise sum; `b` may also be a 1 x m row broadcast over the rows of `a`.
inline Var add(Var a, Var b) {
  detail::require_same_graph(a, b);
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  Graph& g = *a.graph;
  int ia = a.id, ib = b.id;
  if (A.rows() == B.rows() && A.cols() == B.cols()) {
    return g.push(OpKind::Add, A + B, detail::any_grad({a, b}), [ia, ib](Graph& g, Graph::Node& n) {
      if (g.needs(ia)) g.grad_of(ia) += n.grad;
      if (g.needs(ib)) g.grad_of(ib) += n.grad;
    });
  }
  if (B.rows() == 1 && B.cols() == A.cols()) {
    Matrix out = A.rowwise() + B.row(0);
    return g.push(OpKind::Add, std::move(out), detail::any_grad({a, b}), [ia, ib](Graph& g, Graph::Node& n) {
      if (g.needs(ia)) g.grad_of(ia) += n.grad;
      if (g.needs(ib)) g.grad_of(ib) += n.grad.colwise().sum();
    });
  }
  throw ShapeMismatch("add " + shape_str(A) + " + " + shape_str(B));
}

/// Elementwise product; `b` may also be an n x 1 column broadcast over the columns of `a`.
inline Var mul(Var a, Var b) {
  detail::require_same_graph(a, b);
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  Graph& g = *a.graph;
  int ia = a.id, ib = b.id;
  if (A.rows() == B.rows() && A.cols() == B.cols()) {
    return g.push(OpKind::Mul, A.cwiseProduct(B), detail::any_grad({a, b}), [ia, ib](Graph& g, Graph::Node& n) {
      if (g.needs(ia)) g.grad_of(ia) += n.grad.cwiseProduct(g.node(ib).value);
      if (g.needs(ib)) g.grad_of(ib) += n.grad.cwiseProduct(g.node(ia).value);
    });
  }
  if (B.cols() == 1 && B.rows() == A.rows()) {
    Matrix out = A.array().colwise() * B.col(0).array();
    return g.push(OpKind::Mul, std::move(out), detail::any_grad({a, b}), [ia, ib](Graph& g, Graph::Node& n) {
      const Matrix& av = g.node(ia).value;
      const Matrix& bv = g.node(ib).value;
      if (g.needs(ia)) g.grad_of(ia).array() += n.grad.array().colwise() * bv.col(0).array();
      if (g.needs(ib)) g.grad_of(ib) += n.grad.cwiseProduct(av).rowwise().sum();
    });
  }
  throw ShapeMismatch("mul " + shape_str(A) + " * " + shape_str(B));
}

/// scale * a + shift, with constants.
inline Var affine(Var a, double scale, double shift = 0.0) {
  Graph& g = *a.graph;
  int ia = a.id;
  Matrix out = (a.value().array() * scale + shift).matrix();
  return g.push(OpKind::Scale, std::move(out), detail::any_grad({a}), [ia, scale](Graph& g, Graph::Node& n) {
    g.grad_of(ia) += scale * n.grad;
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat of nothing");
  Graph& g = *parts[0].graph;
  Eigen::Index rows = parts[0].rows(), cols = 0;
  bool rg = false;
  for (Var p : parts) {
    detail::require_same_graph(parts[0], p);
    if (p.rows() != rows) throw ShapeMismatch("concat_cols row mismatch");
    cols += p.cols();
    rg = rg || g.needs(p.id);
  }
  Matrix out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> layout;
  Eigen::Index c = 0;
  for (Var p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    layout.push_back({p.id, c});
    c += p.cols();
  }
  return g.push(OpKind::Concat, std::move(out), rg, [layout](Graph& g, Graph::Node& n) {
    for (auto [id, off] : layout)
      if (g.needs(id)) g.grad_of(id) += n.grad.middleCols(off, g.node(id).value.cols());
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat of nothing");
  Graph& g = *parts[0].graph;
  Eigen::Index cols = parts[0].cols(), rows = 0;
  bool rg = false;
  for (Var p : parts) {
    detail::require_same_graph(parts[0], p);
    if (p.cols() != cols) throw ShapeMismatch("concat_rows column mismatch");
    rows += p.rows();
    rg = rg || g.needs(p.id);
  }
  Matrix out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> layout;
  Eigen::Index r = 0;
  for (Var p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    layout.push_back({p.id, r});
    r += p.rows();
  }
  return g.push(OpKind::Concat, std::move(out), rg, [layout](Graph& g, Graph::Node& n) {
    for (auto [id, off] : layout)
      if (g.needs(id)) g.grad_of(id) += n.grad.middleRows(off, g.node(id).value.rows());
  });
}

/// Columns [begin, begin + width).
inline Var split_cols(Var a, Eigen::Index begin, Eigen::Index width) {
  if (begin < 0 || width < 0 || begin + width > a.cols()) throw ShapeMismatch("split_cols out of range");
  Graph& g = *a.graph;
  int ia = a.id;
  Matrix out = a.value().middleCols(begin, width);
  return g.push(OpKind::Split, std::move(out), detail::any_grad({a}), [ia, begin, width](Graph& g, Graph::Node& n) {
    g.grad_of(ia).middleCols(begin, width) += n.grad;
  });
}

/// Rows [begin, begin + count).
inline Var split_rows(Var a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > a.rows()) throw ShapeMismatch("split_rows out of range");
  Graph& g = *a.graph;
  int ia = a.id;
  Matrix out = a.value().middleRows(begin, count);
  return g.push(OpKind::Split, std::move(out), detail::any_grad({a}), [ia, begin, count](Graph& g, Graph::Node& n) {
    g.grad_of(ia).middleRows(begin, count) += n.grad;
  });
}

/// Row gather: out[i] = table[ids[i]]. Used for token embeddings and per-token bar conditions.
inline Var embedding(Var table, std::vector<int> ids) {
  const Matrix& T = table.value();
  Matrix out(static_cast<Eigen::Index>(ids.size()), T.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= T.rows())
      throw ShapeMismatch("embedding index " + std::to_string(ids[i]) + " outside table " + shape_str(T));
    out.row(static_cast<Eigen::Index>(i)) = T.row(ids[i]);
  }
  Graph& g = *table.graph;
  int it = table.id;
  return g.push(OpKind::Embedding, std::move(out), detail::any_grad({table}),
                [it, ids = std::move(ids)](Graph& g, Graph::Node& n) {
                  Matrix& gt = g.grad_of(it);
                  for (std::size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += n.grad.row(static_cast<Eigen::Index>(i));
                });
}

/// Row-wise softmax of (a + mask); mask entries are 0 or -inf. Fully masked rows are an error.
inline Var softmax(Var a, std::shared_ptr<const Matrix> mask = nullptr) {
  const Matrix& A = a.value();
  if (mask && (mask->rows() != A.rows() || mask->cols() != A.cols()))
    throw ShapeMismatch("softmax mask " + shape_str(*mask) + " vs " + shape_str(A));
  Matrix out(A.rows(), A.cols());
  for (Eigen::Index r = 0; r < A.rows(); ++r) {
    RowVector x = A.row(r);
    if (mask) x += mask->row(r);
    double m = x.maxCoeff();
    if (!std::isfinite(m)) throw ShapeMismatch("softmax row " + std::to_string(r) + " fully masked");
    // vectorized exp clamps very negative inputs, so masked entries are zeroed explicitly
    RowVector e = (x.array() == kNegInf).select(0.0, (x.array() - m).exp()).matrix();
    out.row(r) = e / e.sum();
  }
  Graph& g = *a.graph;
  int ia = a.id;
  return g.push(OpKind::Softmax, std::move(out), detail::any_grad({a}), [ia](Graph& g, Graph::Node& n) {
    const Matrix& y = n.value;
    Eigen::VectorXd dot = n.grad.cwiseProduct(y).rowwise().sum();
    g.grad_of(ia).array() += y.array() * (n.grad.array().colwise() - dot.array());
  });
}

/// Per-row normalization followed by gain and bias (1 x d each).
inline Var layer_norm(Var x, Var gain, Var bias, double eps = kLayerNormEps) {
  const Matrix& X = x.value();
  const Eigen::Index d = X.cols();
  if (gain.cols() != d || bias.cols() != d || gain.rows() != 1 || bias.rows() != 1)
    throw ShapeMismatch("layer_norm affine shape");
  Matrix xhat(X.rows(), d);
  Eigen::VectorXd inv_std(X.rows());
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    double mu = X.row(r).mean();
    double var = (X.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (X.row(r).array() - mu) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  Graph& g = *x.graph;
  int ix = x.id, ig = gain.id, ib = bias.id;
  return g.push(OpKind::LayerNorm, std::move(out), detail::any_grad({x, gain, bias}),
                [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g, Graph::Node& n) {
                  if (g.needs(ig)) g.grad_of(ig) += n.grad.cwiseProduct(xhat).colwise().sum();
                  if (g.needs(ib)) g.grad_of(ib) += n.grad.colwise().sum();
                  if (g.needs(ix)) {
                    const auto d = static_cast<double>(xhat.cols());
                    Matrix dxhat = n.grad.array().rowwise() * g.node(ig).value.row(0).array();
                    Eigen::VectorXd m1 = dxhat.rowwise().mean();
                    Eigen::VectorXd m2 = dxhat.cwiseProduct(xhat).rowwise().sum() / d;
                    Matrix dx = ((dxhat.array().colwise() - m1.array()) - xhat.array().colwise() * m2.array())
                                    .colwise() *
                                inv_std.array();
                    g.grad_of(ix) += dx;
                  }
                });
}

namespace detail {

template <class F, class DF>
Var unary(Var a, OpKind kind, F f, DF df) {
  const Matrix& A = a.value();
  Matrix out = A.unaryExpr(f);
  Graph& g = *a.graph;
  int ia = a.id;
  return g.push(kind, std::move(out), any_grad({a}), [ia, df](Graph& g, Graph::Node& n) {
    const Matrix& x = g.node(ia).value;
    Matrix& gx = g.grad_of(ia);
    for (Eigen::Index i = 0; i < x.size(); ++i) gx.data()[i] += n.grad.data()[i] * df(x.data()[i], n.value.data()[i]);
  });
}

}  // namespace detail

inline Var relu(Var a) {
  return detail::unary(
      a, OpKind::Relu, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Var sigmoid(Var a) {
  return detail::unary(
      a, OpKind::Sigmoid,
      [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var softplus(Var a) {
  return detail::unary(
      a, OpKind::Softplus, [](double x) { return x > 30 ? x : std::log1p(std::exp(x)); },
      [](double x, double) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); });
}

/// Exact (erf-based) GELU.
inline Var gelu(Var a) {
  return detail::unary(
      a, OpKind::Gelu, [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); },
      [](double x, double) {
        constexpr double inv_sqrt_2pi = 0.3989422804014327;
        return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
      });
}

inline Var log(Var a) {
  return detail::unary(
      a, OpKind::Log, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

/// max(floor, x); gradient flows only where x > floor.
inline Var clamp_min(Var a, double floor) {
  return detail::unary(
      a, OpKind::ClampMin, [floor](double x) { return x > floor ? x : floor; },
      [floor](double x, double) { return x > floor ? 1.0 : 0.0; });
}

/// Parametric ReLU with a learnable per-column slope (1 x d).
inline Var prelu(Var x, Var slope) {
  const Matrix& X = x.value();
  if (slope.rows() != 1 || slope.cols() != X.cols()) throw ShapeMismatch("prelu slope shape");
  const Matrix& S = slope.value();
  Matrix out(X.rows(), X.cols());
  for (Eigen::Index r = 0; r < X.rows(); ++r)
    for (Eigen::Index c = 0; c < X.cols(); ++c) out(r, c) = X(r, c) > 0 ? X(r, c) : S(0, c) * X(r, c);
  Graph& g = *x.graph;
  int ix = x.id, is = slope.id;
  return g.push(OpKind::PRelu, std::move(out), detail::any_grad({x, slope}), [ix, is](Graph& g, Graph::Node& n) {
    const Matrix& X = g.node(ix).value;
    const Matrix& S = g.node(is).value;
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
      for (Eigen::Index c = 0; c < X.cols(); ++c) {
        double gr = n.grad(r, c);
        if (X(r, c) > 0) {
          if (g.needs(ix)) g.grad_of(ix)(r, c) += gr;
        } else {
          if (g.needs(ix)) g.grad_of(ix)(r, c) += gr * S(0, c);
          if (g.needs(is)) g.grad_of(is)(0, c) += gr * X(r, c);
        }
      }
    }
  });
}

/// Mean of all entries, as 1 x 1.
inline Var mean(Var a) {
  const Matrix& A = a.value();
  if (A.size() == 0) throw ShapeMismatch("mean of empty matrix");
  Matrix out(1, 1);
  out(0, 0) = A.mean();
  Graph& g = *a.graph;
  int ia = a.id;
  auto count = static_cast<double>(A.size());
  return g.push(OpKind::Mean, std::move(out), detail::any_grad({a}), [ia, count](Graph& g, Graph::Node& n) {
    g.grad_of(ia).array() += n.grad(0, 0) / count;
  });
}

/// Sum of all entries, as 1 x 1.
inline Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  Graph& g = *a.graph;
  int ia = a.id;
  return g.push(OpKind::Sum, std::move(out), detail::any_grad({a}), [ia](Graph& g, Graph::Node& n) {
    g.grad_of(ia).array() += n.grad(0, 0);
  });
}

/// Mean negative log-likelihood of `targets` under row-wise softmax(logits); rows with target < 0 are ignored.
inline Var cross_entropy(Var logits, std::vector<int> targets) {
  const Matrix& L = logits.value();
  if (static_cast<Eigen::Index>(targets.size()) != L.rows())
    throw ShapeMismatch("cross_entropy: " + std::to_string(targets.size()) + " targets for " + shape_str(L));
  Matrix probs(L.rows(), L.cols());
  double total = 0;
  int counted = 0;
  for (Eigen::Index r = 0; r < L.rows(); ++r) {
    double m = L.row(r).maxCoeff();
    RowVector e = (L.row(r).array() - m).exp().matrix();
    double z = e.sum();
    probs.row(r) = e / z;
    int t = targets[r];
    if (t < 0) continue;
    if (t >= L.cols()) throw ShapeMismatch("cross_entropy target out of range");
    total += -(L(r, t) - m - std::log(z));
    ++counted;
  }
  Matrix out(1, 1);
  out(0, 0) = counted ? total / counted : 0.0;
  Graph& g = *logits.graph;
  int il = logits.id;
  return g.push(OpKind::CrossEntropy, std::move(out), detail::any_grad({logits}),
                [il, probs = std::move(probs), targets = std::move(targets), counted](Graph& g, Graph::Node& n) {
                  if (!counted) return;
                  Matrix& gl = g.grad_of(il);
                  double s = n.grad(0, 0) / counted;
                  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
                    int t = targets[r];
                    if (t < 0) continue;
                    gl.row(r) += s * probs.row(r);
                    gl(r, t) -= s;
                  }
                });
}

/// z = mu + sigma * eps with eps held fixed; gradient reaches both mu and sigma.
inline Var reparameterize(Var mu, Var sigma, const Matrix& eps) {
  detail::require_same_graph(mu, sigma);
  const Matrix& M = mu.value();
  const Matrix& S = sigma.value();
  if (M.rows() != S.rows() || M.cols() != S.cols() || eps.rows() != M.rows() || eps.cols() != M.cols())
    throw ShapeMismatch("reparameterize shapes");
  Matrix out = M + S.cwiseProduct(eps);
  Graph& g = *mu.graph;
  int im = mu.id, is = sigma.id;
  return g.push(OpKind::Reparameterize, std::move(out), detail::any_grad({mu, sigma}),
                [im, is, eps](Graph& g, Graph::Node& n) {
                  if (g.needs(im)) g.grad_of(im) += n.grad;
                  if (g.needs(is)) g.grad_of(is) += n.grad.cwiseProduct(eps);
                });
}

inline Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  return gaussian_matrix(rows, cols, 1.0, rng);
}

// ---- optimizer -----------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0.0;  ///< global gradient-norm clip; 0 disables
};

struct AdamState {
  AdamConfig config;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  long step = 0;

  void reset(const ParameterStore& store) {
    m.clear();
    v.clear();
    for (std::size_t i = 0; i < store.size(); ++i) {
      m.push_back(Matrix::Zero(store[i].value.rows(), store[i].value.cols()));
      v.push_back(Matrix::Zero(store[i].value.rows(), store[i].value.cols()));
    }
    step = 0;
  }
};

/// One bias-corrected Adam update of every parameter from its accumulated gradient.
inline void adam_step(ParameterStore& store, AdamState& state, double lr) {
  if (state.m.size() != store.size()) state.reset(store);
  const auto& c = state.config;
  double scale = 1.0;
  if (c.clip_norm > 0) {
    double norm = store.grad_norm();
    if (norm > c.clip_norm) scale = c.clip_norm / norm;
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < store.size(); ++i) {
    Parameter& p = store[i];
    if (state.m[i].rows() != p.value.rows() || state.m[i].cols() != p.value.cols())
      throw ShapeMismatch("optimizer state for " + p.name);
    auto grad = (p.grad * scale).array();
    state.m[i].array() = c.beta1 * state.m[i].array() + (1 - c.beta1) * grad;
    state.v[i].array() = c.beta2 * state.v[i].array() + (1 - c.beta2) * grad.square();
    p.value.array() -= lr * (state.m[i].array() / bc1) / ((state.v[i].array() / bc2).sqrt() + c.eps);
  }
}

struct LrSchedule {
  double peak = 1e-4;
  long warmup_steps = 200;
  long decay_steps = 200'000;
  double final_lr = 5e-6;
};

/// Linear warm-up from 0 to peak, cosine decay to final_lr, then constant.
inline double lr_schedule(long step, const LrSchedule& s) {
  if (step < 0) throw std::invalid_argument("negative step");
  if (step < s.warmup_steps) return s.peak * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  long t = step - s.warmup_steps;
  if (t >= s.decay_steps) return s.final_lr;
  constexpr double pi = 3.14159265358979323846;
  double frac = static_cast<double>(t) / static_cast<double>(s.decay_steps);
  return s.final_lr + (s.peak - s.final_lr) * 0.5 * (1.0 + std::cos(pi * frac));
}

}  // namespace barstyle::ad
