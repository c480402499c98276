#pragma once

#include <cstddef>
#include <vector>

#include "mmformer/tensor.hpp"

namespace mmformer {

// Matrix product of [m x k] and [k x n].
Tensor matmul(const Tensor& a, const Tensor& b);
// Transpose of a rank-2 tensor.
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// Binary pointwise ops. Operands either share a shape, one of them holds a
// single element, or both have the same rank and every extent pair is equal
// or contains a 1 (a singleton extent is repeated along that axis).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// Throws DomainError when any divisor is zero.
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
Tensor sigmoid(const Tensor& a);
// Throws DomainError for non-positive input.
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
// Throws DomainError for negative input.
Tensor sqrt(const Tensor& a);
Tensor relu(const Tensor& a);
// Gradient passes only where lo <= x <= hi.
Tensor clamp(const Tensor& a, double lo, double hi);

enum class Pointwise { add, sub, mul, div, sigmoid, log, exp, sqrt, relu, clamp, scale };

// Dispatching form. Unary ops ignore `b`; `p0`/`p1` carry scale factor or clamp bounds.
Tensor elementwise(Pointwise op, const Tensor& a, const Tensor& b = Tensor(), double p0 = 0.0,
                   double p1 = 0.0);

// Reductions keep the reduced axis with extent 1.
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a, std::size_t axis);
// max/min route the gradient to the first extremum along the axis.
Tensor max(const Tensor& a, std::size_t axis);
Tensor min(const Tensor& a, std::size_t axis);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

enum class Reduction { sum, mean, max, min };
Tensor reduce(Reduction op, const Tensor& a, std::size_t axis);

// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& a, std::size_t axis);

// Half-open range [begin, end) along `axis`.
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

// Cosine similarity of every row of `rows` [n x k] with `anchor` [1 x k],
// returned as [1 x n]. Entries where either vector has zero norm are 0 and
// carry zero gradient.
Tensor cosine_similarity(const Tensor& rows, const Tensor& anchor);

}  // namespace mmformer
