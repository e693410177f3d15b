#include "expnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "expnet/errors.hpp"

namespace expnet {

struct TensorAccess {
  static const std::shared_ptr<detail::TensorImpl>& impl(const Tensor& t) { return t.impl_; }
  static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl) { return Tensor(std::move(impl)); }
};

namespace {

thread_local bool g_grad_enabled = true;
bool g_debug_checks = false;

detail::TensorImpl& require(const std::shared_ptr<detail::TensorImpl>& impl) {
  if (!impl) throw ContractError("operation on an undefined tensor");
  return *impl;
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_to_string(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows, bool requires_grad) {
  std::vector<double> data;
  std::size_t width = rows.size() ? rows.begin()->size() : 0;
  for (const auto& row : rows) {
    if (row.size() != width) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(Shape{rows.size(), width}, std::move(data), requires_grad);
}

Tensor Tensor::vector(std::initializer_list<double> values, bool requires_grad) {
  return Tensor(Shape{values.size()}, std::vector<double>(values), requires_grad);
}

const Shape& Tensor::shape() const { return require(impl_).shape; }
std::size_t Tensor::numel() const { return require(impl_).data.size(); }

std::size_t Tensor::rows() const {
  if (rank() != 2) throw DimensionError("rows() needs a matrix, got " + shape_to_string(shape()));
  return shape()[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw DimensionError("cols() needs a matrix, got " + shape_to_string(shape()));
  return shape()[1];
}

std::span<const double> Tensor::data() const { return require(impl_).data; }
std::span<double> Tensor::mutable_data() { return require(impl_).data; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_to_string(shape()));
  return impl_->data[0];
}

double Tensor::at(std::size_t i) const { return require(impl_).data.at(i); }

double Tensor::at(std::size_t row, std::size_t col) const {
  if (row >= rows() || col >= cols()) throw std::out_of_range("tensor index out of range");
  return impl_->data[row * cols() + col];
}

bool Tensor::requires_grad() const { return require(impl_).requires_grad; }
void Tensor::set_requires_grad(bool value) { require(impl_).requires_grad = value; }

bool Tensor::has_grad() const { return !require(impl_).grad.empty(); }
std::span<const double> Tensor::grad() const { return require(impl_).grad; }

std::span<double> Tensor::mutable_grad() {
  auto& impl = require(impl_);
  if (impl.grad.empty()) impl.grad.assign(impl.data.size(), 0.0);
  return impl.grad;
}

void Tensor::zero_grad() {
  auto& impl = require(impl_);
  std::fill(impl.grad.begin(), impl.grad.end(), 0.0);
}

bool Tensor::has_node() const { return require(impl_).node != nullptr; }

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data, false); }

Tensor Tensor::clone() const { return Tensor(shape(), impl_->data, impl_->requires_grad); }

Mask Mask::transposed() const {
  Mask out(cols, rows, false);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.set(c, r, (*this)(r, c));
  return out;
}

Mask Mask::causal(std::size_t n) {
  Mask m(n, n, false);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t <= i; ++t) m.set(i, t, true);
  return m;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

void set_debug_checks(bool enabled) { g_debug_checks = enabled; }
bool debug_checks() { return g_debug_checks; }

void backward(const Tensor& loss) {
  const auto& root = TensorAccess::impl(loss);
  if (!root) throw ContractError("backward on an undefined tensor");
  if (root->data.size() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_to_string(root->shape));
  }
  if (!root->requires_grad) return;

  // Iterative post-order DFS: `order` ends up topologically sorted with
  // every node after all of its inputs.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> visited;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->node && next < impl->node->inputs.size()) {
      auto* child = impl->node->inputs[next++].get();
      if (visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }

  if (root->grad.empty()) root->grad.assign(1, 0.0);
  root->grad[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* impl = *it;
    if (!impl->node) continue;
    if (!impl->grad.empty()) impl->node->backward(impl->data, impl->grad);
    // Intermediate gradients are consumed exactly once.
    impl->grad.clear();
    impl->grad.shrink_to_fit();
  }
}

namespace detail {

Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   BackwardFn backward) {
  return make_result(std::move(shape), std::move(data), std::vector<Tensor>(inputs),
                     std::move(backward));
}

Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   BackwardFn backward) {
  if (g_debug_checks) {
    for (double v : data) {
      if (!std::isfinite(v)) throw ContractError("non-finite value produced by tensor op");
    }
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      impl->requires_grad = true;
      impl->node = std::make_shared<Node>();
      for (const auto& in : inputs) {
        if (in.requires_grad()) impl->node->inputs.push_back(TensorAccess::impl(in));
      }
      impl->node->backward = std::move(backward);
    }
  }
  return TensorAccess::wrap(std::move(impl));
}

std::span<double> grad_sink(const Tensor& t) {
  auto& impl = require(TensorAccess::impl(t));
  if (!impl.requires_grad) return {};
  if (impl.grad.empty()) impl.grad.assign(impl.data.size(), 0.0);
  return impl.grad;
}

}  // namespace detail

}  // namespace expnet
