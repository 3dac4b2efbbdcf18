#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "vitlm/errors.hpp"

namespace vitlm {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <std::floating_point T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
};

/// Dense row-major tensor handle. Copies share storage; use clone() for a
/// deep copy. Parameters are the only tensors mutated in place (by optimizers).
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (numel(shape) != data.size()) {
      throw DimensionError("shape " + shape_str(shape) + " needs " +
                           std::to_string(numel(shape)) + " elements, got " +
                           std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  static Tensor vector(std::vector<T> values, bool requires_grad = false) {
    auto n = values.size();
    return Tensor({n}, std::move(values), requires_grad);
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows,
                       bool requires_grad = false) {
    std::size_t cols = rows.begin()->size();
    std::vector<T> data;
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(data), requires_grad);
  }

  static Tensor identity(std::size_t n) {
    auto t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.node_->data[i * n + i] = T(1);
    return t;
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }

  T item() const {
    if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
  }

  T at(std::size_t i) const { return node_->data.at(i); }
  T at(std::size_t i, std::size_t j) const {
    return node_->data.at(i * node_->shape.back() + j);
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }

  /// Grad buffer, zero-filled on first access.
  std::span<T> grad_buffer() const {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
    return node_->grad;
  }
  void clear_grad() { node_->grad.clear(); }

  Tensor clone() const {
    return Tensor(node_->shape, node_->data, node_->requires_grad);
  }

  /// Same storage identity (used by the tape to detect shared inputs).
  const void* id() const noexcept { return node_.get(); }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

template <std::floating_point T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  auto da = a.data();
  auto db = b.data();
  return std::equal(da.begin(), da.end(), db.begin(), [](T x, T y) {
    return std::memcmp(&x, &y, sizeof(T)) == 0;
  });
}

/// Define-by-run record of differentiable ops. Constructing a Tape makes it
/// the active recorder for the current thread until it is destroyed; ops run
/// with no active tape (or with only constant inputs) record nothing.
template <std::floating_point T>
class Tape {
 public:
  struct Entry {
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    std::function<void()> backward;
  };

  Tape() : previous_(active_slot()) { active_slot() = this; }
  ~Tape() { active_slot() = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_slot(); }

  void record(std::vector<Tensor<T>> inputs, Tensor<T> output,
              std::function<void()> rule) {
    entries_.push_back({std::move(inputs), std::move(output), std::move(rule)});
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }

  /// Reverse sweep from a scalar loss. Tensors that never receive a gradient
  /// are left untouched; gradients accumulate across shared uses.
  void backward(Tensor<T> loss) {
    if (loss.size() != 1) {
      throw ContractError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    }
    if (entries_.empty()) throw ContractError("backward() on an empty tape");
    if (!loss.requires_grad()) throw ContractError("loss does not depend on any tracked tensor");
    loss.grad_buffer()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->output.has_grad()) it->backward();
    }
  }

 private:
  static Tape*& active_slot() {
    thread_local Tape* slot = nullptr;
    return slot;
  }

  std::vector<Entry> entries_;
  Tape* previous_;
};

namespace detail {

template <std::floating_point T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor<T>* t) { return t->requires_grad(); });
}

template <std::floating_point T>
void check_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.data()) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string("non-finite value produced by ") + op +
                           " (output shape " + shape_str(t.shape()) + ")");
    }
  }
}

}  // namespace detail

}  // namespace vitlm
