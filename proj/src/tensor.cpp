#include "udes/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "udes/errors.hpp"
#include "udes/numerics.hpp"

namespace udes {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  if (s.size() == 1) os << ',';
  os << ')';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

namespace detail {
std::span<double> Node::grad_buffer() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}
}  // namespace detail

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value.assign(shape_numel(shape), value);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("Tensor::from: shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({}, {v}, requires_grad); }

namespace {
const Node& checked(const std::shared_ptr<Node>& n) {
  if (!n) throw ContractError("use of an undefined Tensor");
  return *n;
}
}  // namespace

const Shape& Tensor::shape() const { return checked(node_).shape; }
std::size_t Tensor::numel() const { return checked(node_).value.size(); }
std::size_t Tensor::row_size() const {
  const auto& s = shape();
  if (s.empty()) return 1;
  return s[0] == 0 ? 0 : numel() / s[0];
}
std::span<const double> Tensor::data() const { return checked(node_).value; }
std::span<double> Tensor::mutable_data() {
  checked(node_);
  return node_->value;
}
double Tensor::item() const {
  if (numel() != 1) throw ContractError("Tensor::item: tensor has " + std::to_string(numel()) + " elements");
  return node_->value[0];
}
bool Tensor::requires_grad() const { return checked(node_).requires_grad; }
void Tensor::set_requires_grad(bool on) {
  checked(node_);
  if (!node_->leaf) throw ContractError("set_requires_grad on a non-leaf tensor");
  node_->requires_grad = on;
}
bool Tensor::is_leaf() const { return checked(node_).leaf; }
bool Tensor::has_grad() const { return !checked(node_).grad.empty(); }
std::span<const double> Tensor::grad() const { return checked(node_).grad; }
std::span<double> Tensor::mutable_grad() {
  checked(node_);
  return node_->grad_buffer();
}
void Tensor::zero_grad() {
  checked(node_);
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}
Tensor Tensor::detach() const { return from(shape(), node_->value, false); }
Tensor Tensor::clone() const { return from(shape(), node_->value, node_->requires_grad); }

// ---------------------------------------------------------------------------
// backward

void backward(const Tensor& root) {
  if (!root.defined()) throw ContractError("backward: undefined root");
  if (root.numel() != 1) {
    throw ContractError("backward: root must be a scalar, got shape " + shape_str(root.shape()));
  }
  if (!root.requires_grad()) throw ContractError("backward: root is not connected to any differentiable leaf");

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->leaf) n->grad.assign(n->value.size(), 0.0);
  }
  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->leaf && n->backward) n->backward(*n);
  }
  for (Node* n : order) {
    if (!n->leaf) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step) {
  if (!(step >= 1e-7 && step <= 1e-3)) throw ContractError("finite_diff_check: step must lie in [1e-7, 1e-3]");
  Tensor probe = Tensor::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  Tensor out = f(probe);
  backward(out);
  std::vector<double> analytic(probe.grad().begin(), probe.grad().end());
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    std::vector<double> plus(x.data().begin(), x.data().end());
    std::vector<double> minus = plus;
    plus[i] += step;
    minus[i] -= step;
    const double fp = f(Tensor::from(x.shape(), std::move(plus))).item();
    const double fm = f(Tensor::from(x.shape(), std::move(minus))).item();
    const double central = (fp - fm) / (2.0 * step);
    worst = std::max(worst, std::abs(analytic[i] - central) / (std::abs(central) + 1e-12));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// primitives

namespace ad {
namespace {

Tensor make_result(Shape shape, std::vector<double> values, std::vector<NodePtr> parents,
                   std::function<void(Node&)> bwd) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  bool any = false;
  for (const auto& p : parents) any = any || p->requires_grad;
  if (any) {
    n->requires_grad = true;
    n->leaf = false;
    n->parents = std::move(parents);
    n->backward = std::move(bwd);
  }
  return Tensor(std::move(n));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_2d(const Tensor& a, const char* op) {
  if (a.ndim() != 2) throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(a.shape()));
}

// Scalar-tensor operands broadcast; otherwise shapes must agree.
template <typename Fwd, typename DA, typename DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, DA da, DB db) {
  const bool a_scalar = a.numel() == 1 && b.numel() != 1;
  const bool b_scalar = b.numel() == 1 && a.numel() != 1;
  // Two single-element operands combine under the higher-rank shape.
  const bool singles = a.numel() == 1 && b.numel() == 1;
  if (!a_scalar && !b_scalar && !singles) require_same_shape(a, b, op);
  const Shape out_shape = a_scalar || (singles && b.ndim() > a.ndim()) ? b.shape() : a.shape();
  const std::size_t n = shape_numel(out_shape);
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[a_scalar ? 0 : i], bv[b_scalar ? 0 : i]);
  return make_result(out_shape, std::move(out), {a.node(), b.node()},
                     [a_scalar, b_scalar, da, db](Node& self) {
                       Node& pa = *self.parents[0];
                       Node& pb = *self.parents[1];
                       const std::size_t n = self.value.size();
                       if (pa.requires_grad) {
                         auto g = pa.grad_buffer();
                         for (std::size_t i = 0; i < n; ++i) {
                           const double x = pa.value[a_scalar ? 0 : i];
                           const double y = pb.value[b_scalar ? 0 : i];
                           g[a_scalar ? 0 : i] += self.grad[i] * da(x, y);
                         }
                       }
                       if (pb.requires_grad) {
                         auto g = pb.grad_buffer();
                         for (std::size_t i = 0; i < n; ++i) {
                           const double x = pa.value[a_scalar ? 0 : i];
                           const double y = pb.value[b_scalar ? 0 : i];
                           g[b_scalar ? 0 : i] += self.grad[i] * db(x, y);
                         }
                       }
                     });
}

// Elementwise unary op whose derivative is a function of (input, output).
template <typename Fwd, typename D>
Tensor unary(const Tensor& a, Fwd fwd, D d) {
  auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return make_result(a.shape(), std::move(out), {a.node()}, [d](Node& self) {
    Node& p = *self.parents[0];
    auto g = p.grad_buffer();
    for (std::size_t i = 0; i < self.value.size(); ++i) g[i] += self.grad[i] * d(p.value[i], self.value[i]);
  });
}

double stable_softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(n * m, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* o = out.data() + i * m;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = A[i * k + t];
      const double* brow = B + t * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * brow[j];
    }
  }
  return make_result({n, m}, std::move(out), {a.node(), b.node()}, [n, k, m](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const double* G = self.grad.data();
    if (pa.requires_grad) {
      auto ga = pa.grad_buffer();
      const double* B = pb.value.data();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t t = 0; t < k; ++t) {
          double acc = 0.0;
          const double* brow = B + t * m;
          const double* grow = G + i * m;
          for (std::size_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
          ga[i * k + t] += acc;
        }
      }
    }
    if (pb.requires_grad) {
      auto gb = pb.grad_buffer();
      const double* A = pa.value.data();
      for (std::size_t i = 0; i < n; ++i) {
        const double* grow = G + i * m;
        for (std::size_t t = 0; t < k; ++t) {
          const double av = A[i * k + t];
          double* gbrow = gb.data() + t * m;
          for (std::size_t j = 0; j < m; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double s) {
  return unary(
      a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(
      a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x < 0.0 ? 0.0 : x; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor softplus(const Tensor& a) {
  return unary(a, stable_softplus, [](double x, double) { return sigmoid(x); });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor abs(const Tensor& a) {
  // Subgradient 0 at the kink.
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor lgamma(const Tensor& a) {
  return unary(
      a, [](double x) { return udes::lgamma(x); }, [](double x, double) { return udes::digamma(x); });
}

Tensor digamma(const Tensor& a) {
  return unary(
      a, [](double x) { return udes::digamma(x); }, [](double x, double) { return udes::trigamma(x); });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (lo > hi) throw ContractError("clamp: lo > hi");
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return make_result({}, {acc}, {a.node()}, [](Node& self) {
    Node& p = *self.parents[0];
    auto g = p.grad_buffer();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_cols(const Tensor& a) {
  require_2d(a, "sum_cols");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  std::vector<double> out(r, 0.0);
  auto av = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += av[i * c + j];
  return make_result({r, 1}, std::move(out), {a.node()}, [r, c](Node& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i];
  });
}

Tensor expand_cols(const Tensor& a, std::size_t cols) {
  if (a.ndim() != 2 || a.shape()[1] != 1) throw ShapeError("expand_cols: expected (R, 1), got " + shape_str(a.shape()));
  const std::size_t r = a.shape()[0];
  std::vector<double> out(r * cols);
  auto av = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = av[i];
  return make_result({r, cols}, std::move(out), {a.node()}, [r, cols](Node& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < cols; ++j) acc += self.grad[i * cols + j];
      g[i] += acc;
    }
  });
}

Tensor gather_cols(const Tensor& a, std::span<const int> labels) {
  require_2d(a, "gather_cols");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  if (labels.size() != r) throw ShapeError("gather_cols: label count does not match rows");
  std::vector<std::size_t> idx(r);
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) throw ContractError("gather_cols: label out of range");
    idx[i] = i * c + static_cast<std::size_t>(labels[i]);
    out[i] = a.data()[idx[i]];
  }
  return make_result({r, 1}, std::move(out), {a.node()}, [idx = std::move(idx)](Node& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += self.grad[i];
  });
}

Tensor masked_max_cols(const Tensor& a, std::span<const int> labels) {
  require_2d(a, "masked_max_cols");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  if (c < 2) throw ShapeError("masked_max_cols: need at least two columns");
  if (labels.size() != r) throw ShapeError("masked_max_cols: label count does not match rows");
  std::vector<std::size_t> idx(r);
  std::vector<double> out(r);
  auto av = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t j = 0; j < c; ++j) {
      if (static_cast<int>(j) == labels[i]) continue;
      if (av[i * c + j] > best) {
        best = av[i * c + j];
        arg = j;
      }
    }
    idx[i] = i * c + arg;
    out[i] = best;
  }
  return make_result({r, 1}, std::move(out), {a.node()}, [idx = std::move(idx)](Node& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += self.grad[i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {a.node()}, [](Node& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || a.ndim() != b.ndim() || a.shape()[0] != b.shape()[0]) {
    throw ShapeError("concat_channels: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  for (std::size_t d = 2; d < a.ndim(); ++d) {
    if (a.shape()[d] != b.shape()[d]) {
      throw ShapeError("concat_channels: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
  }
  const std::size_t n = a.shape()[0];
  const std::size_t ra = a.row_size(), rb = b.row_size();
  Shape s = a.shape();
  s[1] += b.shape()[1];
  std::vector<double> out(n * (ra + rb));
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().begin() + i * ra, ra, out.begin() + i * (ra + rb));
    std::copy_n(b.data().begin() + i * rb, rb, out.begin() + i * (ra + rb) + ra);
  }
  return make_result(std::move(s), std::move(out), {a.node(), b.node()}, [n, ra, rb](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto g = pa.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < ra; ++j) g[i * ra + j] += self.grad[i * (ra + rb) + j];
    }
    if (pb.requires_grad) {
      auto g = pb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < rb; ++j) g[i * rb + j] += self.grad[i * (ra + rb) + ra + j];
    }
  });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.ndim() < 1 || a.ndim() != b.ndim() ||
      !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    throw ShapeError("concat_rows: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  Shape s = a.shape();
  s[0] += b.shape()[0];
  std::vector<double> out(a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  const std::size_t na = a.numel();
  return make_result(std::move(s), std::move(out), {a.node(), b.node()}, [na](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto g = pa.grad_buffer();
      for (std::size_t i = 0; i < na; ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[na + i];
    }
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.ndim() < 1 || begin > end || end > a.shape()[0]) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + shape_str(a.shape()));
  }
  const std::size_t rs = a.row_size();
  Shape s = a.shape();
  s[0] = end - begin;
  std::vector<double> out(a.data().begin() + begin * rs, a.data().begin() + end * rs);
  return make_result(std::move(s), std::move(out), {a.node()}, [off = begin * rs](Node& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[off + i] += self.grad[i];
  });
}

Tensor tile_rows(const Tensor& a, std::size_t times) {
  if (a.ndim() < 1) throw ShapeError("tile_rows: scalar input");
  Shape s = a.shape();
  s[0] *= times;
  const std::size_t n = a.numel();
  std::vector<double> out;
  out.reserve(n * times);
  for (std::size_t k = 0; k < times; ++k) out.insert(out.end(), a.data().begin(), a.data().end());
  return make_result(std::move(s), std::move(out), {a.node()}, [n, times](Node& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t k = 0; k < times; ++k)
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[k * n + i];
  });
}

Tensor repeat_rows(const Tensor& a, std::size_t times, std::size_t block) {
  if (a.ndim() < 1) throw ShapeError("repeat_rows: scalar input");
  if (block == 0 || a.shape()[0] % block != 0) {
    throw ShapeError("repeat_rows: " + std::to_string(a.shape()[0]) + " rows not divisible into blocks of " +
                     std::to_string(block));
  }
  const std::size_t groups = a.shape()[0] / block;
  const std::size_t width = block * a.row_size();
  Shape s = a.shape();
  s[0] *= times;
  std::vector<double> out(groups * times * width);
  auto av = a.data();
  for (std::size_t i = 0; i < groups; ++i)
    for (std::size_t k = 0; k < times; ++k)
      std::copy_n(av.begin() + i * width, width, out.begin() + (i * times + k) * width);
  return make_result(std::move(s), std::move(out), {a.node()}, [groups, width, times](Node& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < groups; ++i)
      for (std::size_t k = 0; k < times; ++k)
        for (std::size_t j = 0; j < width; ++j) g[i * width + j] += self.grad[(i * times + k) * width + j];
  });
}

Tensor expand_channels(const Tensor& a, const Shape& spatial) {
  require_2d(a, "expand_channels");
  const std::size_t r = a.shape()[0], c = a.shape()[1], hw = shape_numel(spatial);
  Shape s{r, c};
  s.insert(s.end(), spatial.begin(), spatial.end());
  std::vector<double> out(r * c * hw);
  auto av = a.data();
  for (std::size_t i = 0; i < r * c; ++i) std::fill_n(out.begin() + i * hw, hw, av[i]);
  return make_result(std::move(s), std::move(out), {a.node()}, [rc = r * c, hw](Node& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < rc; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < hw; ++j) acc += self.grad[i * hw + j];
      g[i] += acc;
    }
  });
}

Tensor sum_row_blocks(const Tensor& a, std::size_t block, std::size_t group) {
  if (a.ndim() < 1 || block == 0 || group == 0 || a.shape()[0] % (block * group) != 0) {
    throw ShapeError("sum_row_blocks: rows of " + shape_str(a.shape()) + " not divisible into blocks of " +
                     std::to_string(block) + " x " + std::to_string(group));
  }
  const std::size_t rs = a.row_size();
  const std::size_t groups = a.shape()[0] / (block * group);
  Shape s = a.shape();
  s[0] = groups * block;
  std::vector<double> out(groups * block * rs, 0.0);
  auto av = a.data();
  for (std::size_t gi = 0; gi < groups; ++gi)
    for (std::size_t t = 0; t < group; ++t)
      for (std::size_t b = 0; b < block; ++b) {
        const double* src = av.data() + ((gi * group + t) * block + b) * rs;
        double* dst = out.data() + (gi * block + b) * rs;
        for (std::size_t j = 0; j < rs; ++j) dst[j] += src[j];
      }
  return make_result(std::move(s), std::move(out), {a.node()}, [groups, group, block, rs](Node& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t gi = 0; gi < groups; ++gi)
      for (std::size_t t = 0; t < group; ++t)
        for (std::size_t b = 0; b < block; ++b)
          for (std::size_t j = 0; j < rs; ++j)
            g[((gi * group + t) * block + b) * rs + j] += self.grad[(gi * block + b) * rs + j];
  });
}

Tensor prod_row_blocks(const Tensor& a, std::size_t block) {
  if (a.ndim() < 1 || block == 0 || a.shape()[0] % block != 0) {
    throw ShapeError("prod_row_blocks: rows of " + shape_str(a.shape()) + " not divisible by " + std::to_string(block));
  }
  const std::size_t rs = a.row_size();
  const std::size_t members = a.shape()[0] / block;
  const std::size_t width = block * rs;
  Shape s = a.shape();
  s[0] = block;
  std::vector<double> out(width, 1.0);
  auto av = a.data();
  for (std::size_t m = 0; m < members; ++m)
    for (std::size_t i = 0; i < width; ++i) out[i] *= av[m * width + i];
  return make_result(std::move(s), std::move(out), {a.node()}, [members, width](Node& self) {
    Node& p = *self.parents[0];
    auto g = p.grad_buffer();
    for (std::size_t m = 0; m < members; ++m)
      for (std::size_t i = 0; i < width; ++i) {
        double others = 1.0;
        for (std::size_t j = 0; j < members; ++j)
          if (j != m) others *= p.value[j * width + i];
        g[m * width + i] += self.grad[i] * others;
      }
  });
}

Tensor gather_flat(const Tensor& a, std::span<const long> index, Shape out_shape) {
  if (shape_numel(out_shape) != index.size()) throw ShapeError("gather_flat: index count does not match output shape");
  std::vector<double> out(index.size());
  const auto n = static_cast<long>(a.numel());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n) throw ContractError("gather_flat: index out of range");
    out[i] = index[i] < 0 ? 0.0 : a.data()[static_cast<std::size_t>(index[i])];
  }
  std::vector<long> idx(index.begin(), index.end());
  return make_result(std::move(out_shape), std::move(out), {a.node()}, [idx = std::move(idx)](Node& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i)
      if (idx[i] >= 0) g[static_cast<std::size_t>(idx[i])] += self.grad[i];
  });
}

Tensor conv2d(const Tensor& x, const Tensor& w) {
  if (x.ndim() != 4 || w.ndim() != 4) {
    throw ShapeError("conv2d: expected (N,C,H,W) and (O,C,k,k), got " + shape_str(x.shape()) + " and " +
                     shape_str(w.shape()));
  }
  const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::size_t O = w.shape()[0], K = w.shape()[2];
  if (w.shape()[1] != C || w.shape()[3] != K || K % 2 == 0) {
    throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
  }
  const long pad = static_cast<long>(K / 2);
  std::vector<double> out(N * O * H * W, 0.0);
  const double* X = x.data().data();
  const double* Wt = w.data().data();
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t ki = 0; ki < K; ++ki)
            for (std::size_t kj = 0; kj < K; ++kj) {
              const std::size_t widx = ((o * C + c) * K + ki) * K + kj;
              for (std::size_t i = 0; i < H; ++i) {
                const long si = static_cast<long>(i) + static_cast<long>(ki) - pad;
                if (si < 0 || si >= static_cast<long>(H)) continue;
                for (std::size_t j = 0; j < W; ++j) {
                  const long sj = static_cast<long>(j) + static_cast<long>(kj) - pad;
                  if (sj < 0 || sj >= static_cast<long>(W)) continue;
                  const std::size_t xidx = ((n * C + c) * H + static_cast<std::size_t>(si)) * W + static_cast<std::size_t>(sj);
                  const std::size_t oidx = ((n * O + o) * H + i) * W + j;
                  fn(xidx, widx, oidx);
                }
              }
            }
  };
  for_each_tap([&](std::size_t xi, std::size_t wi, std::size_t oi) { out[oi] += X[xi] * Wt[wi]; });
  return make_result({N, O, H, W}, std::move(out), {x.node(), w.node()}, [for_each_tap](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    const double* G = self.grad.data();
    if (px.requires_grad) {
      auto gx = px.grad_buffer();
      const double* Wt = pw.value.data();
      for_each_tap([&](std::size_t xi, std::size_t wi, std::size_t oi) { gx[xi] += G[oi] * Wt[wi]; });
    }
    if (pw.requires_grad) {
      auto gw = pw.grad_buffer();
      const double* X = px.value.data();
      for_each_tap([&](std::size_t xi, std::size_t wi, std::size_t oi) { gw[wi] += G[oi] * X[xi]; });
    }
  });
}

}  // namespace ad
}  // namespace udes
