#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mmformer {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

struct TensorImpl;

// Arguments handed to a recorded op's backward rule. `grad_inputs[i]` is null
// when input i does not take part in differentiation.
struct BackwardArgs {
  std::span<const double> output;
  std::span<const double> grad_output;
  std::vector<double*> grad_inputs;
};

using BackwardFn = std::function<void(const BackwardArgs&)>;

// One executed op on the tape. Holds its inputs but never its output, so the
// graph owns no cycles.
struct Node {
  std::uint64_t sequence = 0;
  const char* name = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;
};

}  // namespace detail

// Dense row-major float64 tensor. Copies are cheap handles onto shared storage;
// use clone() for an independent copy.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Writable view. Only leaves may be written; interior values are owned by the tape.
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t flat) const { return data()[flat]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  // Accumulated gradient; all zeros when nothing has been accumulated yet.
  std::vector<double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Same values, no graph history, no gradient requirement.
  Tensor detach() const;
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  bool defined() const { return impl_ != nullptr; }

  // Used by ops to build graph records.
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  static Tensor from_impl(std::shared_ptr<detail::TensorImpl> impl);

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
// requires_grad tensor reachable from `loss`.
void backward(const Tensor& loss);

// Number of tape nodes reachable from `t`, each counted once.
std::size_t graph_size(const Tensor& t);

namespace detail {

// Creates the output of an op. A tape node is recorded only when at least one
// input requires gradients. Throws DomainError if any output value is non-finite.
Tensor make_result(const char* name, Shape shape, std::vector<double> values,
                   std::vector<Tensor> inputs, BackwardFn backward);

}  // namespace detail

}  // namespace mmformer
