#pragma once

// Central finite-difference oracle for the autodiff ops, shared by unit and acceptance tests.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "barstyle/autodiff.hpp"

namespace testsupport {

using barstyle::ad::Graph;
using barstyle::ad::Matrix;
using barstyle::ad::Var;

struct GradCase {
  std::vector<Matrix> inputs;
  std::function<Var(Graph&, const std::vector<Var>&)> build;
};

struct GradReport {
  double max_rel_error = 0;
};

/// Random matrix whose entries stay at least `gap` away from every value in `avoid`.
inline Matrix random_away_from(std::mt19937_64& rng, long r, long c, std::vector<double> avoid = {0.0},
                               double gap = 1e-2, double scale = 1.0) {
  std::normal_distribution<double> g(0, scale);
  Matrix m(r, c);
  for (long i = 0; i < m.size(); ++i) {
    double x;
    bool ok;
    do {
      x = g(rng);
      ok = true;
      for (double a : avoid) ok = ok && std::abs(x - a) > gap;
    } while (!ok);
    m.data()[i] = x;
  }
  return m;
}

inline double forward_loss(const GradCase& gc, const std::vector<Matrix>& inputs, const Matrix& weights) {
  Graph g;
  std::vector<Var> vs;
  for (const auto& m : inputs) vs.push_back(g.input(m));
  Var out = gc.build(g, vs);
  return out.value().cwiseProduct(weights).sum();
}

/// Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||) over all inputs, h = 1e-5.
inline GradReport check_gradients(const GradCase& gc, std::mt19937_64& rng) {
  using namespace barstyle::ad;
  Matrix weights;
  std::vector<Matrix> analytic;
  {
    Graph g;
    std::vector<Var> vs;
    for (const auto& m : gc.inputs) vs.push_back(g.input(m, true));
    Var out = gc.build(g, vs);
    weights = gaussian_matrix(out.rows(), out.cols(), 1.0, rng);
    Var loss = sum(mul(out, g.input(weights)));
    g.backward(loss);
    for (Var v : vs) analytic.push_back(v.grad());
  }
  const double h = 1e-5;
  double diff2 = 0, a2 = 0, n2 = 0;
  std::vector<Matrix> probe = gc.inputs;
  for (std::size_t k = 0; k < probe.size(); ++k) {
    for (long i = 0; i < probe[k].size(); ++i) {
      double keep = probe[k].data()[i];
      probe[k].data()[i] = keep + h;
      double up = forward_loss(gc, probe, weights);
      probe[k].data()[i] = keep - h;
      double down = forward_loss(gc, probe, weights);
      probe[k].data()[i] = keep;
      double numeric = (up - down) / (2 * h);
      double a = analytic[k].data()[i];
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
    }
  }
  double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-10});
  return {std::sqrt(diff2) / denom};
}

struct OpFamily {
  std::string name;
  std::function<GradCase(std::mt19937_64&)> make;
};

/// One random-case generator per op kind.
inline std::vector<OpFamily> op_families() {
  using namespace barstyle::ad;
  auto dim = [](std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  std::vector<OpFamily> f;
  f.push_back({"matmul", [=](std::mt19937_64& rng) {
                 int n = dim(rng, 1, 5), k = dim(rng, 1, 5), m = dim(rng, 1, 5);
                 bool nt = dim(rng, 0, 1);
                 GradCase c;
                 c.inputs = {gaussian_matrix(n, k, 1, rng), nt ? gaussian_matrix(m, k, 1, rng) : gaussian_matrix(k, m, 1, rng)};
                 c.build = [nt](Graph&, const std::vector<Var>& v) { return nt ? matmul_nt(v[0], v[1]) : matmul(v[0], v[1]); };
                 return c;
               }});
  f.push_back({"add", [=](std::mt19937_64& rng) {
                 int n = dim(rng, 1, 5), m = dim(rng, 1, 5);
                 bool row = dim(rng, 0, 1);
                 GradCase c;
                 c.inputs = {gaussian_matrix(n, m, 1, rng), gaussian_matrix(row ? 1 : n, m, 1, rng)};
                 c.build = [](Graph&, const std::vector<Var>& v) { return add(v[0], v[1]); };
                 return c;
               }});
  f.push_back({"mul", [=](std::mt19937_64& rng) {
                 int n = dim(rng, 1, 5), m = dim(rng, 1, 5);
                 bool col = dim(rng, 0, 1);
                 GradCase c;
                 c.inputs = {gaussian_matrix(n, m, 1, rng), gaussian_matrix(n, col ? 1 : m, 1, rng)};
                 c.build = [](Graph&, const std::vector<Var>& v) { return mul(v[0], v[1]); };
                 return c;
               }});
  f.push_back({"scale", [=](std::mt19937_64& rng) {
                 double s = std::normal_distribution<double>(0, 2)(rng), t = std::normal_distribution<double>(0, 1)(rng);
                 GradCase c;
                 c.inputs = {gaussian_matrix(dim(rng, 1, 5), dim(rng, 1, 5), 1, rng)};
                 c.build = [s, t](Graph&, const std::vector<Var>& v) { return affine(v[0], s, t); };
                 return c;
               }});
  f.push_back({"concat", [=](std::mt19937_64& rng) {
                 int n = dim(rng, 1, 4);
                 bool rows = dim(rng, 0, 1);
                 GradCase c;
                 for (int i = 0; i < 3; ++i)
                   c.inputs.push_back(rows ? gaussian_matrix(dim(rng, 1, 4), n, 1, rng) : gaussian_matrix(n, dim(rng, 1, 4), 1, rng));
                 c.build = [rows](Graph&, const std::vector<Var>& v) { return rows ? concat_rows(v) : concat_cols(v); };
                 return c;
               }});
  f.push_back({"split", [=](std::mt19937_64& rng) {
                 int n = dim(rng, 1, 5), m = dim(rng, 2, 7);
                 bool rows = dim(rng, 0, 1);
                 int len = rows ? n : m;
                 int b = dim(rng, 0, len - 1), w = dim(rng, 1, len - b);
                 GradCase c;
                 c.inputs = {gaussian_matrix(n, m, 1, rng)};
                 c.build = [=](Graph&, const std::vector<Var>& v) { return rows ? split_rows(v[0], b, w) : split_cols(v[0], b, w); };
                 return c;
               }});
  f.push_back({"embedding", [=](std::mt19937_64& rng) {
                 int vocab = dim(rng, 2, 8), d = dim(rng, 1, 5), T = dim(rng, 1, 10);
                 std::vector<int> ids;
                 for (int i = 0; i < T; ++i) ids.push_back(dim(rng, 0, vocab - 1));
                 GradCase c;
                 c.inputs = {gaussian_matrix(vocab, d, 1, rng)};
                 c.build = [ids](Graph&, const std::vector<Var>& v) { return embedding(v[0], ids); };
                 return c;
               }});
  f.push_back({"softmax", [=](std::mt19937_64& rng) {
                 int n = dim(rng, 1, 5), m = dim(rng, 1, 6);
                 auto mask = std::make_shared<Matrix>(Matrix::Zero(n, m));
                 bool masked = dim(rng, 0, 1);
                 if (masked)
                   for (int r = 0; r < n; ++r)
                     for (int col = 0; col < m; ++col)
                       if (col != r % m && dim(rng, 0, 2) == 0) (*mask)(r, col) = kNegInf;
                 GradCase c;
                 c.inputs = {gaussian_matrix(n, m, 2, rng)};
                 std::shared_ptr<const Matrix> mk = masked ? mask : nullptr;
                 c.build = [mk](Graph&, const std::vector<Var>& v) { return softmax(v[0], mk); };
                 return c;
               }});
  f.push_back({"layer-norm", [=](std::mt19937_64& rng) {
                 int n = dim(rng, 1, 5), d = dim(rng, 2, 8);
                 GradCase c;
                 c.inputs = {gaussian_matrix(n, d, 1, rng), gaussian_matrix(1, d, 1, rng), gaussian_matrix(1, d, 1, rng)};
                 c.build = [](Graph&, const std::vector<Var>& v) { return layer_norm(v[0], v[1], v[2]); };
                 return c;
               }});
  f.push_back({"relu", [=](std::mt19937_64& rng) {
                 GradCase c;
                 c.inputs = {random_away_from(rng, dim(rng, 1, 5), dim(rng, 1, 5))};
                 c.build = [](Graph&, const std::vector<Var>& v) { return relu(v[0]); };
                 return c;
               }});
  f.push_back({"parametric-relu", [=](std::mt19937_64& rng) {
                 int n = dim(rng, 1, 5), d = dim(rng, 1, 5);
                 GradCase c;
                 c.inputs = {random_away_from(rng, n, d), gaussian_matrix(1, d, 0.5, rng)};
                 c.build = [](Graph&, const std::vector<Var>& v) { return prelu(v[0], v[1]); };
                 return c;
               }});
  f.push_back({"gelu", [=](std::mt19937_64& rng) {
                 GradCase c;
                 c.inputs = {gaussian_matrix(dim(rng, 1, 5), dim(rng, 1, 5), 2, rng)};
                 c.build = [](Graph&, const std::vector<Var>& v) { return gelu(v[0]); };
                 return c;
               }});
  f.push_back({"sigmoid", [=](std::mt19937_64& rng) {
                 GradCase c;
                 c.inputs = {gaussian_matrix(dim(rng, 1, 5), dim(rng, 1, 5), 3, rng)};
                 c.build = [](Graph&, const std::vector<Var>& v) { return sigmoid(v[0]); };
                 return c;
               }});
  f.push_back({"softplus", [=](std::mt19937_64& rng) {
                 GradCase c;
                 c.inputs = {gaussian_matrix(dim(rng, 1, 5), dim(rng, 1, 5), 3, rng)};
                 c.build = [](Graph&, const std::vector<Var>& v) { return softplus(v[0]); };
                 return c;
               }});
  f.push_back({"log", [=](std::mt19937_64& rng) {
                 GradCase c;
                 Matrix x = gaussian_matrix(dim(rng, 1, 5), dim(rng, 1, 5), 1, rng);
                 c.inputs = {(x.array().abs() + 0.2).matrix()};
                 c.build = [](Graph&, const std::vector<Var>& v) { return log(v[0]); };
                 return c;
               }});
  f.push_back({"clamp-min", [=](std::mt19937_64& rng) {
                 double floor = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
                 GradCase c;
                 c.inputs = {random_away_from(rng, dim(rng, 1, 5), dim(rng, 1, 5), {floor})};
                 c.build = [floor](Graph&, const std::vector<Var>& v) { return clamp_min(v[0], floor); };
                 return c;
               }});
  f.push_back({"mean", [=](std::mt19937_64& rng) {
                 GradCase c;
                 c.inputs = {gaussian_matrix(dim(rng, 1, 5), dim(rng, 1, 5), 1, rng)};
                 c.build = [](Graph&, const std::vector<Var>& v) { return mean(v[0]); };
                 return c;
               }});
  f.push_back({"sum", [=](std::mt19937_64& rng) {
                 GradCase c;
                 c.inputs = {gaussian_matrix(dim(rng, 1, 5), dim(rng, 1, 5), 1, rng)};
                 c.build = [](Graph&, const std::vector<Var>& v) { return sum(v[0]); };
                 return c;
               }});
  f.push_back({"cross-entropy", [=](std::mt19937_64& rng) {
                 int n = dim(rng, 1, 6), m = dim(rng, 2, 8);
                 std::vector<int> t;
                 for (int i = 0; i < n; ++i) t.push_back(i > 0 && dim(rng, 0, 5) == 0 ? -1 : dim(rng, 0, m - 1));
                 GradCase c;
                 c.inputs = {gaussian_matrix(n, m, 2, rng)};
                 c.build = [t](Graph&, const std::vector<Var>& v) { return cross_entropy(v[0], t); };
                 return c;
               }});
  f.push_back({"reparameterize", [=](std::mt19937_64& rng) {
                 int n = dim(rng, 1, 4), d = dim(rng, 1, 6);
                 Matrix eps = standard_normal(n, d, rng);
                 GradCase c;
                 Matrix s = gaussian_matrix(n, d, 1, rng);
                 c.inputs = {gaussian_matrix(n, d, 1, rng), (s.array().abs() + 0.1).matrix()};
                 c.build = [eps](Graph&, const std::vector<Var>& v) { return reparameterize(v[0], v[1], eps); };
                 return c;
               }});
  return f;
}

}  // namespace testsupport
