#pragma once

// Tape-based reverse-mode automatic differentiation over dense row-major
// float64 tensors. Backward rules are written in terms of the same
// differentiable primitives, so a backward pass run on a tape constructed
// with retain_for_higher_order appends differentiable nodes and can itself be
// differentiated (Hessian-vector products, mixed partials).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace bilopt::autodiff {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised when an operation meets or produces NaN/Inf.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Node;
class GradientMap;
class Tensor;
GradientMap backward(const Tensor& loss);

class Tensor {
 public:
  Tensor() = default;

  /// Non-differentiable value.
  static Tensor constant(Shape shape, std::vector<double> values);
  /// Parameter leaf; gradients are reported for it.
  static Tensor leaf(Shape shape, std::vector<double> values, bool requires_grad = true);
  static Tensor zeros(Shape shape);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  std::size_t size() const;
  std::span<const double> values() const;
  double item() const;
  double at(std::size_t r, std::size_t c) const;
  bool requires_grad() const;
  bool is_leaf() const;

  /// Writable storage of a leaf. Only valid for leaves (no recorded history).
  std::span<double> mutable_values();

  /// Copy of the value with no history.
  Tensor detach() const;
  /// Fresh leaf holding a copy of this value.
  Tensor clone_leaf(bool requires_grad = true) const;

  const Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& handle() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out, const Tensor& out,
                                                     const std::vector<Tensor>& inputs)>;

struct Node {
  const char* op = "leaf";
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::vector<Tensor> inputs;
  BackwardFn backward;
  std::uint64_t tape_id = 0;
  std::size_t tape_index = 0;
};

/// Ordered record of differentiable operations. Constructing a tape makes it
/// the active tape of the calling thread until it is destroyed. Nodes are
/// appended in creation order, which is a topological order.
class Tape {
 public:
  explicit Tape(bool retain_for_higher_order = false);
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool retains_higher_order() const { return retain_; }
  std::size_t size() const { return nodes_.size(); }
  std::uint64_t id() const { return id_; }

  const std::shared_ptr<Node>& node_at(std::size_t index) const { return nodes_[index]; }

  static Tape* active();

 private:
  friend Tensor make_result(const char*, Shape, std::vector<double>, std::vector<Tensor>, BackwardFn);

  std::vector<std::shared_ptr<Node>> nodes_;
  std::uint64_t id_;
  bool retain_;
  Tape* previous_;
};

/// Disables recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool recording_enabled();

/// Creates an op result; records it on the active tape when any input requires
/// a gradient. Checks inputs and output for non-finite values.
Tensor make_result(const char* op, Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   BackwardFn backward);

// ---- primitives -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor sum(const Tensor& a);  // -> rank-0 scalar
Tensor expand(const Tensor& scalar, Shape shape);
Tensor sum_rows(const Tensor& a);                          // m x n -> 1 x n
Tensor broadcast_rows(const Tensor& row, std::size_t m);   // 1 x n -> m x n
Tensor sum_cols(const Tensor& a);                          // m x n -> m x 1
Tensor broadcast_cols(const Tensor& col, std::size_t n);   // m x 1 -> m x n
Tensor mean_rows(const Tensor& a);                         // m x n -> 1 x n
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor softmax(const Tensor& a);      // along the last axis, rows of a 2-D tensor
Tensor log_softmax(const Tensor& a);  // along the last axis
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
Tensor scatter_rows(const Tensor& rows, std::span<const int> ids, std::size_t table_rows);
Tensor pick(const Tensor& a, std::span<const int> cols);  // m x n -> m x 1, a[i, cols[i]]
Tensor place(const Tensor& col, std::span<const int> cols, std::size_t n);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);
Tensor pad_rows(const Tensor& a, std::size_t start, std::size_t total);
/// Contracts the last axis of `t` (..., k) with vector `v` (k elements).
Tensor contract_last(const Tensor& t, const Tensor& v);
Tensor dot(const Tensor& a, const Tensor& b);

/// Forward: the row of `candidates` (N x F) at argmax(probs), lowest index on
/// ties, copied exactly. Backward: as if probs (1 x N) . candidates had been
/// returned.
Tensor straight_through_select(const Tensor& probs, const Tensor& candidates);

/// Index of the largest value, lowest index on ties.
std::size_t argmax(std::span<const double> values);

// ---- differentiation ------------------------------------------------------

/// Gradients of a scalar `loss` with respect to `wrt`. Tensors that do not
/// influence the loss get zeros. With create_graph the returned gradients are
/// themselves recorded on the active tape (which must retain higher order).
std::vector<Tensor> grad(const Tensor& loss, std::span<const Tensor> wrt, bool create_graph = false);

class GradientMap {
 public:
  /// Gradient of `t`, or zeros of its shape when it was not reached.
  Tensor get(const Tensor& t) const;
  std::size_t size() const { return grads_.size(); }

 private:
  friend GradientMap backward(const Tensor& loss);
  std::unordered_map<const Node*, Tensor> grads_;
};

/// Gradients for every requires-grad leaf reachable from `loss`.
GradientMap backward(const Tensor& loss);

/// (d^2 loss / d wrt^2) v. `v` is the concatenation of the flattened `wrt`.
std::vector<double> hvp(const Tensor& loss, std::span<const Tensor> wrt, std::span<const double> v);

/// v^T (d^2 loss / d first d second), as a flat vector over `second`.
std::vector<double> mixed_second_derivative(const Tensor& loss, std::span<const Tensor> first,
                                            std::span<const Tensor> second, std::span<const double> v);

/// Holds the first-order gradient graph of a loss so repeated second-order
/// products reuse a single forward/backward.
class SecondOrder {
 public:
  SecondOrder(const Tensor& loss, std::vector<Tensor> first);
  const std::vector<Tensor>& gradient() const { return gradient_; }
  std::vector<double> gradient_flat() const;
  /// H v with H the Hessian w.r.t. `first`.
  std::vector<double> hessian_vector(std::span<const double> v) const;
  /// v^T d/d second of grad_first.
  std::vector<double> mixed(std::span<const Tensor> second, std::span<const double> v) const;

 private:
  Tensor contract(std::span<const double> v) const;
  std::vector<Tensor> first_;
  std::vector<Tensor> gradient_;
};

// ---- flat-vector helpers --------------------------------------------------

std::size_t total_size(std::span<const Tensor> ts);
std::vector<double> flatten(std::span<const Tensor> ts);
/// Splits `flat` into constants shaped like `like`.
std::vector<Tensor> unflatten(std::span<const double> flat, std::span<const Tensor> like);

}  // namespace bilopt::autodiff
