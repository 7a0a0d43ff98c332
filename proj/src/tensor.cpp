#include "mcffa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "mcffa/errors.hpp"

namespace mcffa {

namespace {

thread_local bool t_grad_enabled = true;

#ifdef NDEBUG
bool g_debug_checks = false;
#else
bool g_debug_checks = true;
#endif

void validate_shape(const Shape& shape) {
  if (shape.size() > kMaxRank) {
    throw ShapeError("tensor rank " + std::to_string(shape.size()) + " exceeds " +
                     std::to_string(kMaxRank));
  }
  for (std::size_t extent : shape) {
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
  }
}

template <typename T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
TensorImplPtr<T> new_impl(Shape shape, std::vector<T> data, bool requires_grad) {
  validate_shape(shape);
  if (numel(shape) != data.size()) {
    throw ShapeError("shape " + to_string(shape) + " needs " + std::to_string(numel(shape)) +
                     " values, got " + std::to_string(data.size()));
  }
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return impl;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) n *= extent;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

template <typename T>
std::span<T> TensorImpl<T>::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), T{0});
  return grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, T{0}, requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(const Shape& shape, T value, bool requires_grad) {
  validate_shape(shape);
  return BasicTensor<T>(new_impl<T>(shape, std::vector<T>(mcffa::numel(shape), value), requires_grad));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from(const Shape& shape, std::vector<T> values, bool requires_grad) {
  return BasicTensor<T>(new_impl<T>(shape, std::move(values), requires_grad));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return BasicTensor<T>(new_impl<T>({}, {value}, requires_grad));
}

template <typename T>
const Shape& BasicTensor<T>::shape() const {
  if (!impl_) throw ShapeError("use of undefined tensor");
  return impl_->shape;
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(s));
  }
  return s[axis];
}

template <typename T>
std::size_t BasicTensor<T>::numel() const { return mcffa::numel(shape()); }

template <typename T>
std::span<const T> BasicTensor<T>::data() const {
  shape();
  return impl_->data;
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_data() {
  shape();
  return impl_->data;
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return impl_->data[0];
}

template <typename T>
T BasicTensor<T>::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch for " + to_string(s));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) throw ShapeError("index out of range for " + to_string(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return impl_->data[flat];
}

template <typename T>
bool BasicTensor<T>::requires_grad() const { return impl_ && impl_->requires_grad; }

template <typename T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool value) {
  shape();
  impl_->requires_grad = value;
  return *this;
}

template <typename T>
bool BasicTensor<T>::has_grad() const { return impl_ && !impl_->grad.empty(); }

template <typename T>
std::vector<T> BasicTensor<T>::grad() const {
  shape();
  if (impl_->grad.empty()) return std::vector<T>(impl_->data.size(), T{0});
  return impl_->grad;
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_grad() {
  shape();
  return impl_->grad_buffer();
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  shape();
  impl_->grad.assign(impl_->data.size(), T{0});
}

template <typename T>
bool BasicTensor<T>::is_leaf() const { return impl_ && !impl_->op; }

template <typename T>
std::string BasicTensor<T>::op_name() const { return impl_ && impl_->op ? impl_->op->name : std::string{}; }

template <typename T>
void BasicTensor<T>::backward() const {
  if (!impl_) throw ShapeError("backward on undefined tensor");
  if (numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + to_string(shape()));
  }
  Tape<T> tape = Tape<T>::record(*this);
  if (tape.empty()) throw ShapeError("backward on an empty tape: loss was not produced by a recorded op");
  tape.run_backward(*this);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const { return BasicTensor<T>(new_impl(shape(), impl_->data, false)); }

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
  return BasicTensor<T>(new_impl(shape(), impl_->data, impl_->requires_grad));
}

template <typename T>
Tape<T> Tape<T>::record(const BasicTensor<T>& root) {
  Tape<T> tape;
  if (!root.defined() || !root.impl()->op) return tape;
  // Iterative post-order DFS over op nodes.
  std::unordered_set<const TensorImpl<T>*> visited;
  std::vector<std::pair<TensorImplPtr<T>, std::size_t>> stack;
  stack.emplace_back(root.impl(), 0);
  visited.insert(root.impl().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->op->inputs.size()) {
      TensorImplPtr<T> child = node->op->inputs[next++];
      if (child->op && visited.insert(child.get()).second) stack.emplace_back(child, 0);
    } else {
      tape.nodes_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

template <typename T>
void Tape<T>::run_backward(const BasicTensor<T>& root) {
  TensorImplPtr<T> out = root.impl();
  out->grad_buffer()[0] += T{1};
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    TensorImpl<T>& node = **it;
    if (!node.grad.empty()) node.op->backward(node);
  }
  // Consume the tape: drop rules and intermediate gradients.
  for (auto& node : nodes_) {
    node->op.reset();
    node->grad.clear();
    node->grad.shrink_to_fit();
    node->requires_grad = false;
  }
  nodes_.clear();
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

void set_debug_checks(bool enabled) { g_debug_checks = enabled; }
bool debug_checks() { return g_debug_checks; }

template <typename T>
BasicTensor<T> make_result(std::string op_name, Shape shape, std::vector<T> data,
                           std::vector<BasicTensor<T>> inputs, BackwardFn<T> backward) {
  if (g_debug_checks && !all_finite<T>(data)) {
    bool inputs_finite = std::all_of(inputs.begin(), inputs.end(),
                                     [](const BasicTensor<T>& t) { return all_finite<T>(t.data()); });
    if (inputs_finite) throw NumericError(op_name + " produced non-finite output from finite inputs");
  }
  bool track = false;
  if (grad_enabled()) {
    track = std::any_of(inputs.begin(), inputs.end(), [](const BasicTensor<T>& t) { return t.requires_grad(); });
  }
  auto impl = new_impl<T>(std::move(shape), std::move(data), track);
  if (track) {
    auto record = std::make_unique<OpRecord<T>>();
    record->name = std::move(op_name);
    record->inputs.reserve(inputs.size());
    for (const BasicTensor<T>& t : inputs) record->inputs.push_back(t.impl());
    record->backward = std::move(backward);
    impl->op = std::move(record);
  }
  return BasicTensor<T>(std::move(impl));
}

template struct TensorImpl<float>;
template struct TensorImpl<double>;
template class BasicTensor<float>;
template class BasicTensor<double>;
template class Tape<float>;
template class Tape<double>;
template Tensor make_result(std::string, Shape, std::vector<float>, std::vector<Tensor>, BackwardFn<float>);
template TensorD make_result(std::string, Shape, std::vector<double>, std::vector<TensorD>, BackwardFn<double>);

}  // namespace mcffa
