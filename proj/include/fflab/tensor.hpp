#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fflab {

/// Extent of a rank-4 tensor in (batch, channel, height, width) order.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  std::string str() const;

  bool operator==(const Shape&) const = default;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for misuse of the recorded graph (stale or non-scalar backward).
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  // Position in the thread's graph; -1 for leaves and untracked results.
  std::int64_t node = -1;
  std::uint64_t epoch = 0;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

using ImplPtr = std::shared_ptr<TensorImpl>;

}  // namespace detail

/// Shared handle to dense float64 storage plus an optional gradient.
///
/// Copies alias the same storage, the way parameters are shared between a
/// layer and the optimizer. Use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->grad_buffer(); }
  void zero_grad();

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  double item() const;
  double at(int n, int c, int h, int w) const;
  double& at(int n, int c, int h, int w);

  /// Independent copy of the values, detached from any graph.
  Tensor clone() const;
  /// Same values, no graph history, requires_grad off.
  Tensor detach() const { return clone(); }

  detail::TensorImpl* impl() const { return impl_.get(); }
  const detail::ImplPtr& impl_ptr() const { return impl_; }
  explicit Tensor(detail::ImplPtr impl) : impl_(std::move(impl)) {}

 private:
  detail::ImplPtr impl_;
};

/// Ordered record of differentiable operations for the current thread.
///
/// Records are appended in execution order, so every operand precedes its
/// consumer. backward() walks them in reverse and then clears the graph,
/// releasing every saved intermediate.
class Graph {
 public:
  using BackwardFn = std::function<void(const std::vector<double>& grad_out)>;

  struct Record {
    detail::ImplPtr output;
    std::vector<detail::ImplPtr> operands;
    BackwardFn backward;
  };

  static Graph& current();

  /// Appends a record if grad mode is on and any operand requires grad.
  /// Marks `output` as requiring grad in that case. Returns whether the
  /// record was kept, so callers can skip saving intermediates.
  bool record(const Tensor& output, std::vector<detail::ImplPtr> operands,
              BackwardFn backward);
  bool wants_grad(std::initializer_list<const Tensor*> operands) const;

  std::size_t size() const { return records_.size(); }
  std::uint64_t epoch() const { return epoch_; }
  void clear();

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  void backward(const Tensor& loss);

 private:
  std::vector<Record> records_;
  std::uint64_t epoch_ = 1;
  bool grad_enabled_ = true;
};

/// Disables recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(Graph::current().grad_enabled()) {
    Graph::current().set_grad_enabled(false);
  }
  ~NoGradGuard() { Graph::current().set_grad_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Accumulates d(loss)/d(leaf) into every reachable requires_grad tensor.
/// Throws GraphError for a non-scalar loss or a graph that was already
/// consumed by an earlier backward().
void backward(const Tensor& loss);

}  // namespace fflab
