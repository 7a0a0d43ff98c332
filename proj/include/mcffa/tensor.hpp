#pragma once

// Dense rank-<=4 tensors with reverse-mode automatic differentiation.
//
// A tensor is a cheap shared handle. Operations that see at least one input
// with requires_grad() (while gradient recording is enabled) attach a
// backward rule to their result; backward() orders the reachable graph into
// a Tape and runs the rules in reverse. Gradients accumulate into leaves;
// intermediate gradients and rules are released afterwards.
//
// The element type is a template parameter. The production path uses float
// (`Tensor`); the double instantiation (`TensorD`) backs high-precision
// gradient oracles.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mcffa {

using Shape = std::vector<std::size_t>;

constexpr std::size_t kMaxRank = 4;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename T>
struct TensorImpl;

template <typename T>
using TensorImplPtr = std::shared_ptr<TensorImpl<T>>;

// Backward rule of one recorded operation. Receives the output node (whose
// grad is fully accumulated) and pushes contributions into its inputs.
template <typename T>
using BackwardFn = std::function<void(TensorImpl<T>& out)>;

template <typename T>
struct OpRecord {
  std::string name;
  std::vector<TensorImplPtr<T>> inputs;
  BackwardFn<T> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::unique_ptr<OpRecord<T>> op;  // null for leaves

  // Lazily zero-initialised gradient buffer.
  std::span<T> grad_buffer();
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(TensorImplPtr<T> impl) : impl_(std::move(impl)) {}

  static BasicTensor zeros(const Shape& shape, bool requires_grad = false);
  static BasicTensor full(const Shape& shape, T value, bool requires_grad = false);
  static BasicTensor from(const Shape& shape, std::vector<T> values, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const T> data() const;
  // Direct write access, for parameter initialisation, optimizer updates and
  // finite-difference perturbation. Not recorded.
  std::span<T> mutable_data();
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  BasicTensor& set_requires_grad(bool value);
  bool has_grad() const;
  // Gradient values; all zeros when nothing has been accumulated yet.
  std::vector<T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  bool is_leaf() const;
  // Name of the operation that produced this tensor, empty for leaves.
  std::string op_name() const;

  // Runs reverse-mode differentiation from this scalar.
  void backward() const;

  // Same values, no history, no gradient tracking.
  BasicTensor detach() const;
  BasicTensor clone() const;

  TensorImplPtr<T> impl() const { return impl_; }

 private:
  TensorImplPtr<T> impl_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

// Converts element type; the result is a fresh leaf.
template <typename To, typename From>
BasicTensor<To> tensor_cast(const BasicTensor<From>& x, bool requires_grad = false) {
  std::vector<To> values(x.data().begin(), x.data().end());
  return BasicTensor<To>::from(x.shape(), std::move(values), requires_grad);
}

// Topologically ordered list of the operations reachable from a root.
template <typename T>
class Tape {
 public:
  static Tape record(const BasicTensor<T>& root);

  // Producers always precede their consumers.
  const std::vector<TensorImplPtr<T>>& nodes() const noexcept { return nodes_; }
  bool empty() const noexcept { return nodes_.empty(); }

  void run_backward(const BasicTensor<T>& root);

 private:
  std::vector<TensorImplPtr<T>> nodes_;
};

// Gradient recording toggle, scoped to the calling thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// When enabled, every op verifies that finite inputs gave finite outputs.
// Defaults to on in builds without NDEBUG.
void set_debug_checks(bool enabled);
bool debug_checks();

// Builds the result of an operation. `backward` is attached only when some
// input requires grad and recording is enabled.
template <typename T>
BasicTensor<T> make_result(std::string op_name, Shape shape, std::vector<T> data,
                           std::vector<BasicTensor<T>> inputs, BackwardFn<T> backward);

}  // namespace mcffa
