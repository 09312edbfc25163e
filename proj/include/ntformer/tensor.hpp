#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <vector>

namespace ntformer {

enum class Precision { kSingle, kDouble };

template <typename T>
constexpr Precision precision_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? Precision::kSingle : Precision::kDouble;
}

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

// Dense row-major array of rank 1 to 3.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_[axis]; }
  std::size_t size() const { return data_.size(); }
  // Extent of the last axis and the product of the others.
  std::size_t inner() const { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t outer() const { return inner() == 0 ? 0 : data_.size() / inner(); }
  static constexpr Precision precision() { return precision_of<T>(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }
  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * inner() + c]; }
  T at(std::size_t r, std::size_t c) const { return data_[r * inner() + c]; }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { std::fill(grad.values().begin(), grad.values().end(), T(0)); }
};

// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

// Keys the counter-based dropout generator; masks depend only on these and
// the order in which dropout sites are visited.
struct DropoutKey {
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;
  std::uint64_t batch = 0;
};

enum class Activation { kRelu, kGelu };

// Record of executed operations. Nodes are appended in execution order, so
// reverse index order is a valid reverse topological order.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, Var self)>;

  Tape() = default;
  Tape(bool training, DropoutKey key) : training_(training), key_(key) {}

  Var constant(Tensor<T> value);
  // Leaf bound to a Parameter; backward() adds into parameter.grad. Binding
  // the same Parameter twice returns the same Var.
  Var parameter(Parameter<T>& p);

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  // Gradient of the last backward() target with respect to v (zeros if none).
  Tensor<T> grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  // Reverse-mode sweep from a scalar loss. Throws std::invalid_argument if
  // the loss has more than one element.
  void backward(Var loss);

  bool training() const { return training_; }
  const DropoutKey& dropout_key() const { return key_; }
  std::uint64_t next_dropout_site() { return dropout_sites_++; }
  std::size_t size() const { return nodes_.size(); }

  // Used by op implementations.
  Var record(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn backward,
             const char* op);
  Var record(Tensor<T> value, std::span<const Var> inputs, BackwardFn backward, const char* op);
  const Tensor<T>& grad_ref(Var v) const { return nodes_[v.id].grad; }
  // Zero-initialized on first use.
  T* grad_buffer(Var v);

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> bound_;
  bool training_ = false;
  DropoutKey key_;
  std::uint64_t dropout_sites_ = 0;
};

namespace ops {

// op(a) * op(b). Supported ranks: 2x2, 3x2 (rows of every batch share b; no
// transpose of a) and 3x3 (batched, transposes apply to the last two axes).
template <typename T>
Var matmul(Tape<T>& t, Var a, Var b, bool trans_a = false, bool trans_b = false);
template <typename T>
Var add(Tape<T>& t, Var a, Var b);
// Adds a rank-1 bias along the last axis.
template <typename T>
Var add_bias(Tape<T>& t, Var a, Var bias);
template <typename T>
Var scale(Tape<T>& t, Var a, T factor);
// Softmax over the last axis, max-subtracted.
template <typename T>
Var softmax_rows(Tape<T>& t, Var a);
template <typename T>
Var activation(Tape<T>& t, Var a, Activation kind);
template <typename T>
Var relu(Tape<T>& t, Var a) {
  return activation(t, a, Activation::kRelu);
}
// Inverted dropout: in training mode each element is zeroed with probability
// p and survivors are scaled by 1/(1-p). Identity in eval mode or when p == 0.
template <typename T>
Var dropout(Tape<T>& t, Var a, double p);
// Per-row normalization over the last axis followed by gamma * x + beta.
template <typename T>
Var layer_norm(Tape<T>& t, Var a, Var gamma, Var beta, T eps = T(1e-5));
// Rows of a rank-2 table selected by `ids`. With `batch` > 0 the result is
// reshaped to batch x (ids/batch) x d.
template <typename T>
Var gather_rows(Tape<T>& t, Var table, std::span<const std::uint32_t> ids,
                std::size_t batch = 0);
template <typename T>
Var concat_last(Tape<T>& t, std::span<const Var> parts);
// Row 0 of each sequence: B x L x D -> B x D, or L x D -> 1 x D.
template <typename T>
Var first_row(Tape<T>& t, Var a);
// Column j of a rank-2 tensor as B x 1.
template <typename T>
Var column(Tape<T>& t, Var a, std::size_t j);
// Multiplies row b of a (B x D) by w[b] (w is B x 1).
template <typename T>
Var row_scale(Tape<T>& t, Var a, Var w);
template <typename T>
Var sum(Tape<T>& t, Var a);
// Mean softmax cross-entropy of logits (B x C) against integer labels.
template <typename T>
Var cross_entropy(Tape<T>& t, Var logits, std::span<const int> labels);

}  // namespace ops

struct GradCheckResult {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares reverse-mode gradients of `loss` with central differences
// (f(θ+εe) - f(θ-εe)) / 2ε on every coordinate of every parameter. The
// relative error uses max(|a|, |b|, 1e-6) as denominator: at ε = 1e-5 the
// difference quotient carries ~1e-11 of roundoff, so smaller gradients are
// held to an absolute 1e-10 instead of a meaningless ratio. `loss` must build a
// fresh tape each call; a second evaluation that differs from the first
// throws std::runtime_error.
GradCheckResult finite_difference_check(
    const std::function<Var(Tape<double>&)>& loss,
    std::span<Parameter<double>* const> params, double eps = 1e-5);

}  // namespace ntformer
