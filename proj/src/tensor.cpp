#include "mmformer/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "mmformer/errors.hpp"

namespace mmformer {

namespace {

std::atomic<std::uint64_t> g_sequence{0};

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, std::vector<double> values,
                                              bool requires_grad) {
  if (values.size() != shape_numel(shape)) {
    throw DimensionError("tensor data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return impl;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor() : impl_(make_impl({}, {0.0}, false)) {}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : impl_(make_impl(std::move(shape), std::move(values), requires_grad)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }
Tensor Tensor::ones(Shape shape, bool requires_grad) { return full(std::move(shape), 1.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

Tensor Tensor::from_impl(std::shared_ptr<detail::TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(impl_->shape));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::span<const double> Tensor::data() const { return impl_->data; }

std::span<double> Tensor::mutable_data() {
  if (impl_->grad_fn) throw ContractError("cannot write into a tensor produced by a recorded op");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (impl_->grad_fn) throw ContractError("requires_grad can only be toggled on leaves");
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return impl_->grad_fn == nullptr; }

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::vector<double> Tensor::grad() const {
  if (impl_->grad.empty()) return std::vector<double>(numel(), 0.0);
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(numel(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data, false); }

Tensor Tensor::clone() const { return Tensor(impl_->shape, impl_->data, impl_->requires_grad && is_leaf()); }

namespace {

// Tensors reachable from `root` through requires_grad edges, each once.
std::vector<detail::TensorImpl*> reachable(detail::TensorImpl* root) {
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> seen;
  std::vector<detail::TensorImpl*> stack{root};
  seen.insert(root);
  while (!stack.empty()) {
    auto* t = stack.back();
    stack.pop_back();
    order.push_back(t);
    if (!t->grad_fn) continue;
    for (const auto& in : t->grad_fn->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  return order;
}

}  // namespace

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) throw ContractError("backward on a loss that does not require gradients");

  auto tensors = reachable(loss.impl().get());
  std::unordered_map<detail::TensorImpl*, std::vector<double>> pass;
  pass.reserve(tensors.size());
  for (auto* t : tensors) pass[t].assign(t->data.size(), 0.0);
  pass[loss.impl().get()][0] = 1.0;

  std::vector<detail::TensorImpl*> interior;
  for (auto* t : tensors) {
    if (t->grad_fn) interior.push_back(t);
  }
  // Reverse execution order.
  std::sort(interior.begin(), interior.end(), [](auto* a, auto* b) {
    return a->grad_fn->sequence > b->grad_fn->sequence;
  });

  for (auto* t : interior) {
    const auto& node = *t->grad_fn;
    detail::BackwardArgs args{t->data, pass[t], {}};
    args.grad_inputs.reserve(node.inputs.size());
    for (const auto& in : node.inputs) {
      args.grad_inputs.push_back(in->requires_grad ? pass[in.get()].data() : nullptr);
    }
    node.backward(args);
  }

  for (auto* t : tensors) {
    const auto& g = pass[t];
    if (t->grad.empty()) t->grad.assign(g.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) t->grad[i] += g[i];
  }
}

std::size_t graph_size(const Tensor& t) {
  std::size_t n = 0;
  for (auto* impl : reachable(t.impl().get())) n += impl->grad_fn ? 1 : 0;
  return n;
}

namespace detail {

Tensor make_result(const char* name, Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                   BackwardFn backward) {
  for (double v : values) {
    if (!std::isfinite(v)) throw DomainError(std::string("non-finite value produced by ") + name);
  }
  bool needs_grad = false;
  for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
  auto impl = make_impl(std::move(shape), std::move(values), needs_grad);
  if (needs_grad) {
    auto node = std::make_shared<Node>();
    node->sequence = g_sequence.fetch_add(1, std::memory_order_relaxed);
    node->name = name;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.impl());
    node->backward = std::move(backward);
    impl->grad_fn = std::move(node);
  }
  return Tensor::from_impl(std::move(impl));
}

}  // namespace detail

}  // namespace mmformer
