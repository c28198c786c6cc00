#include "diffcls/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "diffcls/error.hpp"

namespace diffcls {

namespace {

thread_local bool tl_grad_enabled = true;
thread_local bool tl_strict_mode = false;

using NodePtr = std::shared_ptr<detail::Node>;

void check_finite(const std::vector<double>& values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by '") + op + "'");
    }
  }
}

// Builds an op result. History is recorded only when a gradient can flow.
Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                   std::vector<NodePtr> inputs, std::function<void(detail::Node&)> backward) {
  if (tl_strict_mode) check_finite(data, op);
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool needs = false;
  if (tl_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

std::size_t prod(const Shape& s, std::size_t begin, std::size_t end) {
  std::size_t p = 1;
  for (std::size_t i = begin; i < end; ++i) p *= s[i];
  return p;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_string(a) +
                           " with " + shape_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` laid against `out`, zero along broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t i = in.size() - 1 - k;
    const std::size_t o = out.size() - 1 - k;
    strides[o] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

struct BroadcastMap {
  std::vector<std::size_t> a;
  std::vector<std::size_t> b;
};

// Offset of each output element inside a and b.
BroadcastMap make_broadcast_map(const Shape& sa, const Shape& sb, const Shape& out) {
  const std::size_t n = shape_numel(out);
  BroadcastMap map;
  map.a.resize(n);
  map.b.resize(n);
  const auto ta = broadcast_strides(sa, out);
  const auto tb = broadcast_strides(sb, out);
  std::vector<std::size_t> idx(out.size(), 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    map.a[flat] = oa;
    map.b[flat] = ob;
    for (std::size_t d = out.size(); d-- > 0;) {
      ++idx[d];
      oa += ta[d];
      ob += tb[d];
      if (idx[d] < out[d]) break;
      oa -= ta[d] * idx[d];
      ob -= tb[d] * idx[d];
      idx[d] = 0;
    }
  }
  return map;
}

// Generic broadcasting binary op. `fwd(x, y)` is the value, `dx(x, y)` and
// `dy(x, y)` are the partial derivatives.
template <class Fwd, class Dx, class Dy>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Dx dx, Dy dy) {
  const auto& na = a.node();
  const auto& nb = b.node();
  if (na->shape == nb->shape) {
    const std::size_t n = na->data.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(na->data[i], nb->data[i]);
    return make_result(na->shape, std::move(out), name, {na, nb}, [dx, dy](detail::Node& self) {
      auto& x = *self.inputs[0];
      auto& y = *self.inputs[1];
      const std::size_t n = self.data.size();
      if (x.requires_grad) {
        x.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) x.grad[i] += self.grad[i] * dx(x.data[i], y.data[i]);
      }
      if (y.requires_grad) {
        y.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) y.grad[i] += self.grad[i] * dy(x.data[i], y.data[i]);
      }
    });
  }
  Shape out_shape = broadcast_shape(na->shape, nb->shape, name);
  auto map = std::make_shared<BroadcastMap>(make_broadcast_map(na->shape, nb->shape, out_shape));
  const std::size_t n = map->a.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(na->data[map->a[i]], nb->data[map->b[i]]);
  return make_result(std::move(out_shape), std::move(out), name, {na, nb},
                     [dx, dy, map](detail::Node& self) {
                       auto& x = *self.inputs[0];
                       auto& y = *self.inputs[1];
                       const std::size_t n = self.data.size();
                       if (x.requires_grad) {
                         x.ensure_grad();
                         for (std::size_t i = 0; i < n; ++i) {
                           const std::size_t ia = map->a[i], ib = map->b[i];
                           x.grad[ia] += self.grad[i] * dx(x.data[ia], y.data[ib]);
                         }
                       }
                       if (y.requires_grad) {
                         y.ensure_grad();
                         for (std::size_t i = 0; i < n; ++i) {
                           const std::size_t ia = map->a[i], ib = map->b[i];
                           y.grad[ib] += self.grad[i] * dy(x.data[ia], y.data[ib]);
                         }
                       }
                     });
}

// Elementwise unary op; `deriv(x, y)` receives input and output values.
template <class Fwd, class Deriv>
Tensor unary_op(const Tensor& x, const char* name, Fwd fwd, Deriv deriv) {
  const auto& nx = x.node();
  std::vector<double> out(nx->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(nx->data[i]);
  return make_result(nx->shape, std::move(out), name, {nx}, [deriv](detail::Node& self) {
    auto& in = *self.inputs[0];
    in.ensure_grad();
    for (std::size_t i = 0; i < self.data.size(); ++i) {
      in.grad[i] += self.grad[i] * deriv(in.data[i], self.data[i]);
    }
  });
}

void check_axis(const Tensor& x, std::size_t axis, const char* op) {
  if (axis >= x.rank()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + shape_string(x.shape()));
  }
}

// C[m x n] += A[m x k] B[k x n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x k] += G[m x n] B[k x n]^T
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* g, const double* b,
             double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      c[i * k + p] += acc;
    }
  }
}

// C[k x n] += A[m x k]^T G[m x n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* g,
             double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) { return prod(shape, 0, shape.size()); }

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------- Tensor

Tensor::Tensor() : node_(std::make_shared<detail::Node>()) { node_->data.assign(1, 0.0); }

Tensor::Tensor(Shape shape, double fill, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  node_->data.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_string(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return Tensor(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
  return Tensor(std::move(shape), 1.0, requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  Shape shape{values.size()};
  return Tensor(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows,
                      bool requires_grad) {
  const std::size_t m = rows.size();
  const std::size_t n = m ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(m * n);
  for (const auto& row : rows) {
    if (row.size() != n) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(Shape{m, n}, std::move(data), requires_grad);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("dim(): axis out of range");
  return node_->shape[axis];
}

double Tensor::item() const {
  if (numel() != 1) {
    throw UsageError("item() on tensor of shape " + shape_string(shape()));
  }
  return node_->data[0];
}

double Tensor::at(std::size_t i, std::size_t j) const {
  if (rank() != 2) throw DimensionError("at(i, j) requires a matrix");
  return node_->data[i * node_->shape[1] + j];
}

Tensor& Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

std::span<double> Tensor::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

void Tensor::backward() const {
  if (numel() != 1) {
    throw UsageError("backward() requires a scalar loss, got shape " + shape_string(shape()));
  }
  if (!node_->requires_grad) {
    throw UsageError("backward() on a tensor that does not require gradients");
  }
  const ComputationTape tape = ComputationTape::record(*this);
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  tape.replay_backward();
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = node_->shape;
  node->data = node_->data;
  return Tensor(std::move(node));
}

Tensor Tensor::clone() const {
  Tensor copy = detach();
  copy.node_->requires_grad = node_->requires_grad;
  return copy;
}

// ---------------------------------------------------------------- tape

ComputationTape ComputationTape::record(const Tensor& root) {
  ComputationTape tape;
  std::unordered_set<const detail::Node*> visited;
  // Iterative post-order DFS.
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      NodePtr child = node->inputs[next++];
      if (child->requires_grad && visited.insert(child.get()).second) {
        stack.emplace_back(std::move(child), 0);
      }
    } else {
      tape.nodes_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

void ComputationTape::replay_backward() const {
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    detail::Node& node = **it;
    if (!node.backward || node.grad.empty()) continue;
    node.backward(node);
    // Interior gradients are consumed once; leaves keep theirs.
    node.grad.clear();
    node.grad.shrink_to_fit();
  }
}

// ---------------------------------------------------------------- modes

NoGradGuard::NoGradGuard() : previous_(tl_grad_enabled) { tl_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { tl_grad_enabled = previous_; }
bool grad_enabled() { return tl_grad_enabled; }

void set_strict_mode(bool on) { tl_strict_mode = on; }
bool strict_mode() { return tl_strict_mode; }
StrictModeGuard::StrictModeGuard(bool on) : previous_(tl_strict_mode) { tl_strict_mode = on; }
StrictModeGuard::~StrictModeGuard() { tl_strict_mode = previous_; }

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; }, [](double x, double y) { return -x / (y * y); });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary_op(
      x, "add_scalar", [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double c) {
  return unary_op(
      x, "mul_scalar", [c](double v) { return v * c; }, [c](double, double) { return c; });
}

Tensor neg(const Tensor& x) { return mul_scalar(x, -1.0); }

Tensor exp(const Tensor& x) {
  return unary_op(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary_op(
      x, "sqrt", [](double v) { return std::sqrt(v); },
      [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& x) {
  return unary_op(
      x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor softplus(const Tensor& x) {
  return unary_op(
      x, "softplus",
      [](double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](double v, double) {
        return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& x) {
  const auto& nx = x.node();
  double total = 0.0;
  for (double v : nx->data) total += v;
  return make_result(Shape{}, {total}, "sum", {nx}, [](detail::Node& self) {
    auto& in = *self.inputs[0];
    in.ensure_grad();
    for (double& g : in.grad) g += self.grad[0];
  });
}

Tensor sum(const Tensor& x, std::size_t axis, bool keepdim) {
  check_axis(x, axis, "sum");
  const auto& nx = x.node();
  const Shape& s = nx->shape;
  const std::size_t outer = prod(s, 0, axis), n = s[axis], inner = prod(s, axis + 1, s.size());
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i)
        out[o * inner + i] += nx->data[(o * n + k) * inner + i];
  Shape out_shape = s;
  if (keepdim) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  return make_result(std::move(out_shape), std::move(out), "sum_axis", {nx},
                     [outer, n, inner](detail::Node& self) {
                       auto& in = *self.inputs[0];
                       in.ensure_grad();
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t k = 0; k < n; ++k)
                           for (std::size_t i = 0; i < inner; ++i)
                             in.grad[(o * n + k) * inner + i] += self.grad[o * inner + i];
                     });
}

Tensor mean(const Tensor& x) {
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mean(const Tensor& x, std::size_t axis, bool keepdim) {
  check_axis(x, axis, "mean");
  return mul_scalar(sum(x, axis, keepdim), 1.0 / static_cast<double>(x.dim(axis)));
}

// ---------------------------------------------------------------- shape

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                         shape_string(shape));
  }
  const auto& nx = x.node();
  return make_result(std::move(shape), nx->data, "reshape", {nx}, [](detail::Node& self) {
    auto& in = *self.inputs[0];
    in.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
  });
}

Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1) {
  check_axis(x, axis0, "transpose");
  check_axis(x, axis1, "transpose");
  const auto& nx = x.node();
  const Shape& in_shape = nx->shape;
  const std::size_t rank = in_shape.size();
  Shape out_shape = in_shape;
  std::swap(out_shape[axis0], out_shape[axis1]);

  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t d = rank; d-- > 1;) in_strides[d - 1] = in_strides[d] * in_shape[d];
  std::vector<std::size_t> walk = in_strides;  // stride in input per output axis
  std::swap(walk[axis0], walk[axis1]);

  const std::size_t n = nx->data.size();
  auto source = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    (*source)[flat] = offset;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      offset += walk[d];
      if (idx[d] < out_shape[d]) break;
      offset -= walk[d] * idx[d];
      idx[d] = 0;
    }
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = nx->data[(*source)[i]];
  return make_result(std::move(out_shape), std::move(out), "transpose", {nx},
                     [source](detail::Node& self) {
                       auto& in = *self.inputs[0];
                       in.ensure_grad();
                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                         in.grad[(*source)[i]] += self.grad[i];
                       }
                     });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw UsageError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) {
      throw DimensionError("concat: incompatible shapes " + shape_string(first) + " and " +
                           shape_string(s));
    }
    out_shape[axis] += s[axis];
  }
  const std::size_t outer = prod(first, 0, axis);
  const std::size_t inner = prod(first, axis + 1, first.size());
  const std::size_t out_row = out_shape[axis] * inner;
  std::vector<double> out(shape_numel(out_shape));
  std::vector<NodePtr> inputs;
  std::vector<std::size_t> widths;  // per-part axis extent * inner
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().begin() + static_cast<std::ptrdiff_t>(o * w), w,
                  out.begin() + static_cast<std::ptrdiff_t>(o * out_row + col));
    }
    col += w;
    widths.push_back(w);
    inputs.push_back(p.node());
  }
  return make_result(std::move(out_shape), std::move(out), "concat", std::move(inputs),
                     [outer, out_row, widths](detail::Node& self) {
                       std::size_t col = 0;
                       for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                         auto& in = *self.inputs[k];
                         const std::size_t w = widths[k];
                         if (in.requires_grad) {
                           in.ensure_grad();
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t i = 0; i < w; ++i)
                               in.grad[o * w + i] += self.grad[o * out_row + col + i];
                         }
                         col += w;
                       }
                     });
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> indices) {
  if (table.rank() != 2) throw DimensionError("embedding_lookup: table must be a matrix");
  const std::size_t rows = table.dim(0), width = table.dim(1);
  std::vector<double> out(indices.size() * width);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= rows) {
      throw UsageError("embedding_lookup: index " + std::to_string(indices[r]) +
                       " out of range for " + std::to_string(rows) + " rows");
    }
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(indices[r] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_result(Shape{indices.size(), width}, std::move(out), "embedding",
                     {table.node()}, [idx, width](detail::Node& self) {
                       auto& in = *self.inputs[0];
                       in.ensure_grad();
                       for (std::size_t r = 0; r < idx.size(); ++r)
                         for (std::size_t j = 0; j < width; ++j)
                           in.grad[idx[r] * width + j] += self.grad[r * width + j];
                     });
}

// ---------------------------------------------------------------- matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& na = a.node();
  const auto& nb = b.node();
  const Shape& sa = na->shape;
  const Shape& sb = nb->shape;
  if (sa.size() < 2 || sb.size() < 2) {
    throw DimensionError("matmul: operands must have rank >= 2, got " + shape_string(sa) +
                         " and " + shape_string(sb));
  }
  std::size_t batch = 1, m = 0, k = 0, n = 0;
  bool batched_b = false;
  Shape out_shape;
  if (sb.size() == 2) {
    k = sa.back();
    m = shape_numel(sa) / k;
    n = sb[1];
    if (sb[0] != k) {
      throw DimensionError("matmul: inner dimensions differ in " + shape_string(sa) + " @ " +
                           shape_string(sb));
    }
    out_shape = sa;
    out_shape.back() = n;
  } else if (sa.size() == 3 && sb.size() == 3) {
    if (sa[0] != sb[0] || sa[2] != sb[1]) {
      throw DimensionError("matmul: incompatible batched shapes " + shape_string(sa) + " @ " +
                           shape_string(sb));
    }
    batch = sa[0];
    m = sa[1];
    k = sa[2];
    n = sb[2];
    batched_b = true;
    out_shape = {batch, m, n};
  } else {
    throw DimensionError("matmul: unsupported ranks " + shape_string(sa) + " @ " +
                         shape_string(sb));
  }
  std::vector<double> out(batch * m * n, 0.0);
  const std::size_t b_step = batched_b ? k * n : 0;
  for (std::size_t q = 0; q < batch; ++q) {
    gemm_nn(m, k, n, na->data.data() + q * m * k, nb->data.data() + q * b_step,
            out.data() + q * m * n);
  }
  return make_result(std::move(out_shape), std::move(out), "matmul", {na, nb},
                     [batch, m, k, n, b_step](detail::Node& self) {
                       auto& x = *self.inputs[0];
                       auto& y = *self.inputs[1];
                       if (x.requires_grad) x.ensure_grad();
                       if (y.requires_grad) y.ensure_grad();
                       for (std::size_t q = 0; q < batch; ++q) {
                         const double* g = self.grad.data() + q * m * n;
                         if (x.requires_grad) {
                           gemm_nt(m, k, n, g, y.data.data() + q * b_step,
                                   x.grad.data() + q * m * k);
                         }
                         if (y.requires_grad) {
                           gemm_tn(m, k, n, x.data.data() + q * m * k, g,
                                   y.grad.data() + q * b_step);
                         }
                       }
                     });
}

// ---------------------------------------------------------------- softmax

Tensor softmax(const Tensor& x, std::size_t axis) {
  check_axis(x, axis, "softmax");
  const auto& nx = x.node();
  const Shape& s = nx->shape;
  const std::size_t outer = prod(s, 0, axis), n = s[axis], inner = prod(s, axis + 1, s.size());
  std::vector<double> out(nx->data.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      double mx = nx->data[base];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, nx->data[base + k * inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double e = std::exp(nx->data[base + k * inner] - mx);
        out[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= total;
    }
  }
  return make_result(s, std::move(out), "softmax", {nx}, [outer, n, inner](detail::Node& self) {
    auto& in = *self.inputs[0];
    in.ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < n; ++k)
          dot += self.grad[base + k * inner] * self.data[base + k * inner];
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t j = base + k * inner;
          in.grad[j] += self.data[j] * (self.grad[j] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  check_axis(x, axis, "log_softmax");
  const auto& nx = x.node();
  const Shape& s = nx->shape;
  const std::size_t outer = prod(s, 0, axis), n = s[axis], inner = prod(s, axis + 1, s.size());
  std::vector<double> out(nx->data.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      double mx = nx->data[base];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, nx->data[base + k * inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < n; ++k) total += std::exp(nx->data[base + k * inner] - mx);
      const double lse = mx + std::log(total);
      for (std::size_t k = 0; k < n; ++k)
        out[base + k * inner] = nx->data[base + k * inner] - lse;
    }
  }
  return make_result(s, std::move(out), "log_softmax", {nx},
                     [outer, n, inner](detail::Node& self) {
                       auto& in = *self.inputs[0];
                       in.ensure_grad();
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t i = 0; i < inner; ++i) {
                           const std::size_t base = o * n * inner + i;
                           double total = 0.0;
                           for (std::size_t k = 0; k < n; ++k) total += self.grad[base + k * inner];
                           for (std::size_t k = 0; k < n; ++k) {
                             const std::size_t j = base + k * inner;
                             in.grad[j] += self.grad[j] - std::exp(self.data[j]) * total;
                           }
                         }
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& scale, const Tensor& shift, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t last = x.rank() - 1;
  if (scale.numel() != x.dim(last) || shift.numel() != x.dim(last)) {
    throw DimensionError("layer_norm: scale/shift must match the last axis of " +
                         shape_string(x.shape()));
  }
  const Tensor centered = x - mean(x, last, true);
  const Tensor var = mean(square(centered), last, true);
  return centered / sqrt(var + eps) * scale + shift;
}

Tensor batch_norm(const Tensor& x, const Tensor& scale, const Tensor& shift,
                  BatchNormStats& stats, bool training, double eps, double momentum) {
  if (x.rank() != 2) {
    throw DimensionError("batch_norm: expected [B x d] input, got " + shape_string(x.shape()));
  }
  const std::size_t batch = x.dim(0), width = x.dim(1);
  if (scale.numel() != width || shift.numel() != width) {
    throw DimensionError("batch_norm: scale/shift width mismatch");
  }
  if (stats.running_mean.empty()) {
    stats.running_mean.assign(width, 0.0);
    stats.running_var.assign(width, 1.0);
  }
  if (stats.running_mean.size() != width || stats.running_var.size() != width) {
    throw DimensionError("batch_norm: running statistics width mismatch");
  }
  if (training) {
    if (batch < 2) throw ConfigError("batch_norm: training mode requires a batch of at least 2");
    const Tensor mu = mean(x, 0, true);
    const Tensor centered = x - mu;
    const Tensor var = mean(square(centered), 0, true);
    const double unbias = static_cast<double>(batch) / static_cast<double>(batch - 1);
    for (std::size_t j = 0; j < width; ++j) {
      stats.running_mean[j] = (1.0 - momentum) * stats.running_mean[j] + momentum * mu[j];
      stats.running_var[j] = (1.0 - momentum) * stats.running_var[j] + momentum * var[j] * unbias;
    }
    return centered / sqrt(var + eps) * scale + shift;
  }
  std::vector<double> inv_std(width);
  for (std::size_t j = 0; j < width; ++j) inv_std[j] = 1.0 / std::sqrt(stats.running_var[j] + eps);
  const Tensor mu(Shape{1, width}, stats.running_mean);
  const Tensor inv(Shape{1, width}, std::move(inv_std));
  return (x - mu) * inv * scale + shift;
}

// ---------------------------------------------------------------- conv

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t stride) {
  if (input.rank() != 4 || weight.rank() != 4) {
    throw DimensionError("conv2d: expected 4-d input and weight, got " +
                         shape_string(input.shape()) + " and " + shape_string(weight.shape()));
  }
  const std::size_t batch = input.dim(0), channels = input.dim(1), height = input.dim(2),
                    width = input.dim(3);
  const std::size_t out_ch = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != channels || bias.numel() != out_ch) {
    throw DimensionError("conv2d: channel mismatch between input " +
                         shape_string(input.shape()) + " and weight " +
                         shape_string(weight.shape()));
  }
  if (stride == 0 || kh > height || kw > width) throw ConfigError("conv2d: invalid kernel/stride");
  const std::size_t oh = (height - kh) / stride + 1, ow = (width - kw) / stride + 1;
  const auto& ni = input.node();
  const auto& nw = weight.node();
  const auto& nb = bias.node();
  std::vector<double> out(batch * out_ch * oh * ow);
  auto in_at = [=](std::size_t b, std::size_t c, std::size_t y, std::size_t x) {
    return ((b * channels + c) * height + y) * width + x;
  };
  auto w_at = [=](std::size_t o, std::size_t c, std::size_t p, std::size_t q) {
    return ((o * channels + c) * kh + p) * kw + q;
  };
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < out_ch; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = nb->data[o];
          for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t p = 0; p < kh; ++p)
              for (std::size_t q = 0; q < kw; ++q)
                acc += ni->data[in_at(b, c, i * stride + p, j * stride + q)] *
                       nw->data[w_at(o, c, p, q)];
          out[((b * out_ch + o) * oh + i) * ow + j] = acc;
        }
  return make_result(
      Shape{batch, out_ch, oh, ow}, std::move(out), "conv2d", {ni, nw, nb},
      [=](detail::Node& self) {
        auto& x = *self.inputs[0];
        auto& w = *self.inputs[1];
        auto& bs = *self.inputs[2];
        if (x.requires_grad) x.ensure_grad();
        if (w.requires_grad) w.ensure_grad();
        if (bs.requires_grad) bs.ensure_grad();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t o = 0; o < out_ch; ++o)
            for (std::size_t i = 0; i < oh; ++i)
              for (std::size_t j = 0; j < ow; ++j) {
                const double g = self.grad[((b * out_ch + o) * oh + i) * ow + j];
                if (bs.requires_grad) bs.grad[o] += g;
                for (std::size_t c = 0; c < channels; ++c)
                  for (std::size_t p = 0; p < kh; ++p)
                    for (std::size_t q = 0; q < kw; ++q) {
                      const std::size_t xi = in_at(b, c, i * stride + p, j * stride + q);
                      const std::size_t wi = w_at(o, c, p, q);
                      if (x.requires_grad) x.grad[xi] += g * w.data[wi];
                      if (w.requires_grad) w.grad[wi] += g * x.data[xi];
                    }
              }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_string(logits.shape()) +
                         " do not match " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t classes = logits.dim(1);
  Tensor one_hot(logits.shape(), 0.0);
  auto oh = one_hot.mutable_data();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) throw UsageError("cross_entropy: label out of range");
    oh[i * classes + labels[i]] = 1.0;
  }
  return -sum(log_softmax(logits, 1) * one_hot) / static_cast<double>(labels.size());
}

}  // namespace diffcls
