#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace expnet {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {
struct TensorImpl;
}

/// Dense row-major array of doubles with an optional reverse-mode autodiff
/// record. Copies are shallow handles onto the same storage; the producing
/// op never writes a tensor again after returning it.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  /// Builds a 2-D tensor from nested rows. All rows must have equal width.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false);
  static Tensor vector(std::initializer_list<double> values, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  /// Leading dimension of a matrix. Requires rank 2.
  std::size_t rows() const;
  /// Trailing dimension of a matrix. Requires rank 2.
  std::size_t cols() const;

  std::span<const double> data() const;
  /// Writable view for parameter updates and test fixtures. Never call this
  /// on a tensor that already participates in a recorded graph.
  std::span<double> mutable_data();

  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// True when this tensor was produced by a recorded op (not a leaf).
  bool has_node() const;

  /// Value copy detached from any graph.
  Tensor detach() const;
  /// Same-shape deep copy that keeps requires_grad but drops the graph.
  Tensor clone() const;

  const detail::TensorImpl* impl() const noexcept { return impl_.get(); }

 private:
  friend struct TensorAccess;
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Boolean rows x cols grid. true = position is allowed (kept).
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<unsigned char> allowed;

  Mask() = default;
  Mask(std::size_t r, std::size_t c, bool fill = true)
      : rows(r), cols(c), allowed(r * c, fill ? 1 : 0) {}

  bool operator()(std::size_t r, std::size_t c) const { return allowed[r * cols + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) { allowed[r * cols + c] = v ? 1 : 0; }
  Mask transposed() const;

  /// Lower-triangular (key t visible to query row i when t <= i).
  static Mask causal(std::size_t n);
};

/// Computes d(loss)/d(leaf) for every requires-grad leaf reachable from
/// `loss` and accumulates it into the leaf's grad buffer. Nodes are visited
/// once each in reverse topological order.
void backward(const Tensor& loss);

/// Disables graph recording on the current thread while alive.
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

/// When on, every op output is scanned for NaN/Inf and nonnegative-only ops
/// validate their inputs. Off by default.
void set_debug_checks(bool enabled);
bool debug_checks();

namespace detail {

/// Backward rule: receives the producing op's output values and the
/// gradient flowing into that output.
using BackwardFn =
    std::function<void(std::span<const double> out_data, std::span<const double> out_grad)>;

struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> node;
};

/// Wraps a freshly computed op result. Records a graph node when grad mode
/// is on and at least one operand requires grad.
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs,
                   BackwardFn backward);
Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   BackwardFn backward);

/// Lazily allocated gradient buffer of `t`, or an empty span when `t` does
/// not require grad (backward rules skip such operands).
std::span<double> grad_sink(const Tensor& t);

}  // namespace detail

}  // namespace expnet
