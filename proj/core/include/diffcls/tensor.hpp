#pragma once

// Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//
// A Tensor is a shared handle to a node holding shape, row-major data and an
// optional gradient buffer. Operations on tensors that require gradients
// record their inputs and a local backward rule; `backward()` orders the
// recorded graph topologically into a ComputationTape and replays it in
// reverse. Graphs are confined to the thread that builds them.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace diffcls {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient flows in
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
 public:
  /// An empty rank-0 tensor holding 0.
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  /// In-place access to the values. Mutating a tensor that already feeds a
  /// recorded graph invalidates that graph's gradients.
  std::span<double> mutable_data() { return node_->data; }
  double item() const;
  double operator[](std::size_t flat_index) const { return node_->data[flat_index]; }
  double at(std::size_t i, std::size_t j) const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; empty span when no gradient has been accumulated.
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad();
  void zero_grad();

  /// Reverse pass from a scalar. Gradients accumulate into every
  /// requires_grad tensor reachable from this one.
  void backward() const;

  /// Same values, no history, no gradient.
  Tensor detach() const;
  /// Deep copy of values; keeps requires_grad, drops history and gradient.
  Tensor clone() const;

  const char* op_name() const { return node_->op; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // Internal: used by the operation implementations.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Topologically ordered list of the nodes reachable from a root. Each node
/// appears after all of its inputs.
class ComputationTape {
 public:
  static ComputationTape record(const Tensor& root);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::shared_ptr<detail::Node>>& nodes() const { return nodes_; }

  /// Runs every node's backward rule once, last node first.
  void replay_backward() const;

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Strict mode: every operation output is screened for NaN/Inf and a
/// NumericError is thrown on detection. Per thread; off by default.
void set_strict_mode(bool on);
bool strict_mode();

class StrictModeGuard {
 public:
  explicit StrictModeGuard(bool on);
  ~StrictModeGuard();
  StrictModeGuard(const StrictModeGuard&) = delete;
  StrictModeGuard& operator=(const StrictModeGuard&) = delete;

 private:
  bool previous_;
};

// ---- elementwise (numpy-style broadcasting) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
Tensor neg(const Tensor& x);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor softplus(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }
inline Tensor operator+(const Tensor& x, double c) { return add_scalar(x, c); }
inline Tensor operator-(const Tensor& x, double c) { return add_scalar(x, -c); }
inline Tensor operator*(const Tensor& x, double c) { return mul_scalar(x, c); }
inline Tensor operator*(double c, const Tensor& x) { return mul_scalar(x, c); }
inline Tensor operator/(const Tensor& x, double c) { return mul_scalar(x, 1.0 / c); }

// ---- reductions ----
Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::size_t axis, bool keepdim = false);

// ---- shape ----
Tensor reshape(const Tensor& x, Shape shape);
/// Swaps two axes.
Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// Rows `indices` of a [n x d] table, as an [indices.size() x d] tensor.
Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> indices);

// ---- linear algebra ----
/// [m x k] @ [k x n]; [b x m x k] @ [b x k x n]; or [... x k] @ [k x n].
Tensor matmul(const Tensor& a, const Tensor& b);

// ---- normalization / probability ----
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);

/// Normalizes over the last axis, then applies per-feature scale and shift.
Tensor layer_norm(const Tensor& x, const Tensor& scale, const Tensor& shift,
                  double eps = 1e-5);

struct BatchNormStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Batch normalization over axis 0 of a [B x d] input. Training mode uses
/// batch statistics (requires B >= 2) and updates `stats` with momentum 0.1;
/// evaluation mode uses `stats`.
Tensor batch_norm(const Tensor& x, const Tensor& scale, const Tensor& shift,
                  BatchNormStats& stats, bool training, double eps = kBatchNormEps,
                  double momentum = kBatchNormMomentum);

/// Valid (unpadded) 2D convolution. input [B x C x H x W], weight
/// [O x C x k x k], bias [O]; output [B x O x H' x W'].
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              std::size_t stride);

/// Mean cross-entropy of logits [B x C] against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

}  // namespace diffcls
