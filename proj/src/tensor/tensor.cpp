#include "fflab/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace fflab {

std::string Shape::str() const {
  std::ostringstream os;
  os << n << "x" << c << "x" << h << "x" << w;
  return os.str();
}

namespace {

detail::ImplPtr make_impl(Shape shape, std::vector<double> values,
                          bool requires_grad) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0)
    throw ShapeError("negative extent in shape " + shape.str());
  if (values.size() != shape.numel())
    throw ShapeError("shape " + shape.str() + " needs " +
                     std::to_string(shape.numel()) + " values, got " +
                     std::to_string(values.size()));
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape;
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return impl;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  return Tensor(make_impl(shape, std::vector<double>(shape.numel(), value),
                          requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  return Tensor(make_impl(shape, std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return full({1, 1, 1, 1}, value, requires_grad);
}

void Tensor::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1)
    throw ShapeError("item() on tensor of shape " + shape().str());
  return impl_->data[0];
}

double Tensor::at(int n, int c, int h, int w) const {
  const Shape& s = shape();
  return impl_->data[((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w +
                     w];
}

double& Tensor::at(int n, int c, int h, int w) {
  const Shape& s = shape();
  return impl_->data[((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w +
                     w];
}

Tensor Tensor::clone() const {
  return Tensor(make_impl(shape(), impl_->data, false));
}

Graph& Graph::current() {
  thread_local Graph graph;
  return graph;
}

bool Graph::wants_grad(std::initializer_list<const Tensor*> operands) const {
  if (!grad_enabled_) return false;
  for (const Tensor* t : operands)
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  return false;
}

bool Graph::record(const Tensor& output, std::vector<detail::ImplPtr> operands,
                   BackwardFn backward) {
  if (!grad_enabled_) return false;
  const bool any = std::any_of(operands.begin(), operands.end(),
                               [](const detail::ImplPtr& p) {
                                 return p != nullptr && p->requires_grad;
                               });
  if (!any) return false;
  detail::TensorImpl* out = output.impl();
  out->requires_grad = true;
  out->node = static_cast<std::int64_t>(records_.size());
  out->epoch = epoch_;
  records_.push_back(
      {output.impl_ptr(), std::move(operands), std::move(backward)});
  return true;
}

void Graph::clear() {
  records_.clear();
  ++epoch_;
}

void Graph::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw GraphError("backward() needs a scalar loss, got shape " +
                     (loss.defined() ? loss.shape().str() : "<undefined>"));
  detail::TensorImpl* root = loss.impl();
  if (root->node < 0)
    throw GraphError("backward(): loss was not produced by a recorded graph");
  if (root->epoch != epoch_ ||
      static_cast<std::size_t>(root->node) >= records_.size() ||
      records_[root->node].output.get() != root)
    throw GraphError(
        "backward(): stale graph; the forward pass must be re-run first");

  root->grad_buffer()[0] += 1.0;
  for (std::int64_t i = root->node; i >= 0; --i) {
    Record& rec = records_[static_cast<std::size_t>(i)];
    if (rec.output->grad.empty()) continue;
    rec.backward(rec.output->grad);
  }
  clear();
}

void backward(const Tensor& loss) { Graph::current().backward(loss); }

}  // namespace fflab
