#include "mmformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Core>

#include "mmformer/errors.hpp"

namespace mmformer {

using detail::BackwardArgs;
using detail::make_result;

namespace {

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for " +
                         shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixMap = Eigen::Map<RowMatrix>;
using ConstRowMatrixMap = Eigen::Map<const RowMatrix>;

ConstRowMatrixMap const_map(std::span<const double> values, std::size_t rows, std::size_t cols) {
  return ConstRowMatrixMap(values.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

RowMatrixMap mutable_map(double* values, std::size_t rows, std::size_t cols) {
  return RowMatrixMap(values, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + " expects a rank-2 tensor, got " + shape_str(t.shape()));
}

// Output shape and per-axis source strides of a broadcast binary op; a zero
// stride repeats the source along that axis.
struct Broadcast {
  Shape shape;
  std::vector<std::size_t> sa;
  std::vector<std::size_t> sb;
  bool same = false;
};

Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  if (a == b) {
    bc.shape = a;
    bc.same = true;
    return bc;
  }
  const auto na = shape_numel(a);
  const auto nb = shape_numel(b);
  if (nb == 1 || na == 1) {
    bc.shape = nb == 1 ? a : b;
    bc.sa.assign(bc.shape.size(), 0);
    bc.sb.assign(bc.shape.size(), 0);
    std::size_t stride = 1;
    for (std::size_t d = bc.shape.size(); d-- > 0;) {
      (na == 1 ? bc.sb : bc.sa)[d] = stride;
      stride *= bc.shape[d];
    }
    if (na == 1 && nb == 1) bc.sa = bc.sb;
    return bc;
  }
  if (a.size() != b.size()) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
  }
  const auto rank = a.size();
  bc.shape.resize(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    if (a[d] != b[d] && a[d] != 1 && b[d] != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    bc.shape[d] = std::max(a[d], b[d]);
  }
  bc.sa.resize(rank);
  bc.sb.resize(rank);
  std::size_t stride_a = 1, stride_b = 1;
  for (std::size_t d = rank; d-- > 0;) {
    bc.sa[d] = a[d] == 1 ? 0 : stride_a;
    bc.sb[d] = b[d] == 1 ? 0 : stride_b;
    stride_a *= a[d];
    stride_b *= b[d];
  }
  return bc;
}

// Calls fn(i, ia, ib) for every output element i in row-major order.
template <typename Fn>
void for_each_pair(const Broadcast& bc, std::size_t n, Fn fn) {
  if (bc.same) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
    return;
  }
  const auto rank = bc.shape.size();
  if (rank == 0) {
    fn(0, 0, 0);
    return;
  }
  // The innermost axis is walked directly; the outer axes by odometer.
  const auto inner = bc.shape[rank - 1];
  const auto ia_step = bc.sa[rank - 1], ib_step = bc.sb[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offa = 0, offb = 0;
  for (std::size_t i = 0; i < n; i += inner) {
    for (std::size_t j = 0; j < inner; ++j) fn(i + j, offa + j * ia_step, offb + j * ib_step);
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      offa += bc.sa[d];
      offb += bc.sb[d];
      if (idx[d] < bc.shape[d]) break;
      offa -= bc.sa[d] * idx[d];
      offb -= bc.sb[d] * idx[d];
      idx[d] = 0;
    }
  }
}

// Shared driver for binary pointwise ops. `fwd(x, y)` gives the value,
// `dfa/dfb(x, y, out)` the partial derivatives.
template <typename F, typename DA, typename DB>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, F fwd, DA dfa, DB dfb) {
  auto bc = broadcast(a.shape(), b.shape(), name);
  const auto n = shape_numel(bc.shape);
  const auto xa = a.data();
  const auto xb = b.data();
  std::vector<double> out(n);
  for_each_pair(bc, n, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = fwd(xa[ia], xb[ib]); });
  auto shape = bc.shape;
  return make_result(
      name, std::move(shape), std::move(out), {a, b},
      [a, b, bc = std::move(bc), dfa, dfb](const BackwardArgs& g) {
        const auto xa = a.data();
        const auto xb = b.data();
        double* ga = g.grad_inputs[0];
        double* gb = g.grad_inputs[1];
        for_each_pair(bc, g.output.size(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
          const double go = g.grad_output[i];
          if (ga) ga[ia] += go * dfa(xa[ia], xb[ib], g.output[i]);
          if (gb) gb[ib] += go * dfb(xa[ia], xb[ib], g.output[i]);
        });
      });
}

// `df(x, y)` is the derivative given input x and output y.
template <typename F, typename D>
Tensor unary(const char* name, const Tensor& a, F fwd, D df) {
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = fwd(x[i]);
  return make_result(name, a.shape(), std::move(out), {a}, [a, df](const BackwardArgs& g) {
    const auto x = a.data();
    for (std::size_t i = 0; i < x.size(); ++i) g.grad_inputs[0][i] += g.grad_output[i] * df(x[i], g.output[i]);
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  mutable_map(out.data(), m, n).noalias() = const_map(a.data(), m, k) * const_map(b.data(), k, n);
  return make_result("matmul", {m, n}, std::move(out), {a, b}, [a, b, m, k, n](const BackwardArgs& g) {
    const auto go = const_map(g.grad_output, m, n);
    if (double* ga = g.grad_inputs[0]) mutable_map(ga, m, k).noalias() += go * const_map(b.data(), k, n).transpose();
    if (double* gb = g.grad_inputs[1]) mutable_map(gb, k, n).noalias() += const_map(a.data(), m, k).transpose() * go;
  });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const auto r = a.dim(0), c = a.dim(1);
  const auto x = a.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return make_result("transpose", {c, r}, std::move(out), {a}, [r, c](const BackwardArgs& g) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g.grad_inputs[0][i * c + j] += g.grad_output[j * r + i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {a}, [](const BackwardArgs& g) {
    for (std::size_t i = 0; i < g.grad_output.size(); ++i) g.grad_inputs[0][i] += g.grad_output[i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.data()) {
    if (v == 0.0) throw DomainError("div: division by zero");
  }
  return binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return unary(
      "add_scalar", a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
  }
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor sqrt(const Tensor& a) {
  for (double v : a.data()) {
    if (v < 0.0) throw DomainError("sqrt: negative input " + std::to_string(v));
  }
  return unary(
      "sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (lo > hi) throw DomainError("clamp: lower bound above upper bound");
  return unary(
      "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor elementwise(Pointwise op, const Tensor& a, const Tensor& b, double p0, double p1) {
  switch (op) {
    case Pointwise::add: return add(a, b);
    case Pointwise::sub: return sub(a, b);
    case Pointwise::mul: return mul(a, b);
    case Pointwise::div: return div(a, b);
    case Pointwise::sigmoid: return sigmoid(a);
    case Pointwise::log: return log(a);
    case Pointwise::exp: return exp(a);
    case Pointwise::sqrt: return sqrt(a);
    case Pointwise::relu: return relu(a);
    case Pointwise::clamp: return clamp(a, p0, p1);
    case Pointwise::scale: return scale(a, p0);
  }
  throw ContractError("unknown pointwise op");
}

Tensor sum(const Tensor& a, std::size_t axis) {
  const auto s = split_at(a.shape(), axis, "sum");
  if (s.len == 0) throw DimensionError("sum: empty axis");
  auto shape = a.shape();
  shape[axis] = 1;
  const auto x = a.data();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += x[(o * s.len + l) * s.inner + i];
  return make_result("sum", std::move(shape), std::move(out), {a}, [s](const BackwardArgs& g) {
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t l = 0; l < s.len; ++l)
        for (std::size_t i = 0; i < s.inner; ++i)
          g.grad_inputs[0][(o * s.len + l) * s.inner + i] += g.grad_output[o * s.inner + i];
  });
}

Tensor mean(const Tensor& a, std::size_t axis) {
  const auto s = split_at(a.shape(), axis, "mean");
  if (s.len == 0) throw DimensionError("mean: empty axis");
  return scale(sum(a, axis), 1.0 / static_cast<double>(s.len));
}

namespace {

template <typename Better>
Tensor extremum(const char* name, const Tensor& a, std::size_t axis, Better better) {
  const auto s = split_at(a.shape(), axis, name);
  if (s.len == 0) throw DimensionError(std::string(name) + ": empty axis");
  auto shape = a.shape();
  shape[axis] = 1;
  const auto x = a.data();
  std::vector<double> out(s.outer * s.inner);
  std::vector<std::size_t> arg(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = (o * s.len) * s.inner + i;
      for (std::size_t l = 1; l < s.len; ++l) {
        const auto idx = (o * s.len + l) * s.inner + i;
        if (better(x[idx], x[best])) best = idx;
      }
      out[o * s.inner + i] = x[best];
      arg[o * s.inner + i] = best;
    }
  }
  return make_result(name, std::move(shape), std::move(out), {a}, [arg = std::move(arg)](const BackwardArgs& g) {
    for (std::size_t j = 0; j < arg.size(); ++j) g.grad_inputs[0][arg[j]] += g.grad_output[j];
  });
}

}  // namespace

Tensor max(const Tensor& a, std::size_t axis) {
  return extremum("max", a, axis, [](double x, double best) { return x > best; });
}

Tensor min(const Tensor& a, std::size_t axis) {
  return extremum("min", a, axis, [](double x, double best) { return x < best; });
}

Tensor sum_all(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return make_result("sum_all", {}, {acc}, {a}, [n = a.numel()](const BackwardArgs& g) {
    for (std::size_t i = 0; i < n; ++i) g.grad_inputs[0][i] += g.grad_output[0];
  });
}

Tensor mean_all(const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("mean_all: empty tensor");
  return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor reduce(Reduction op, const Tensor& a, std::size_t axis) {
  switch (op) {
    case Reduction::sum: return sum(a, axis);
    case Reduction::mean: return mean(a, axis);
    case Reduction::max: return max(a, axis);
    case Reduction::min: return min(a, axis);
  }
  throw ContractError("unknown reduction");
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  const auto s = split_at(a.shape(), axis, "softmax");
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::size_t l) { return (o * s.len + l) * s.inner + i; };
      double hi = x[at(0)];
      for (std::size_t l = 1; l < s.len; ++l) hi = std::max(hi, x[at(l)]);
      double z = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        out[at(l)] = std::exp(x[at(l)] - hi);
        z += out[at(l)];
      }
      for (std::size_t l = 0; l < s.len; ++l) out[at(l)] /= z;
    }
  }
  return make_result("softmax", a.shape(), std::move(out), {a}, [s](const BackwardArgs& g) {
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        auto at = [&](std::size_t l) { return (o * s.len + l) * s.inner + i; };
        double dot = 0.0;
        for (std::size_t l = 0; l < s.len; ++l) dot += g.grad_output[at(l)] * g.output[at(l)];
        for (std::size_t l = 0; l < s.len; ++l)
          g.grad_inputs[0][at(l)] += g.output[at(l)] * (g.grad_output[at(l)] - dot);
      }
    }
  });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto s = split_at(a.shape(), axis, "slice");
  if (begin > end || end > s.len) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for extent " + std::to_string(s.len));
  }
  const auto width = end - begin;
  auto shape = a.shape();
  shape[axis] = width;
  const auto x = a.data();
  std::vector<double> out(s.outer * width * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < width; ++l)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[(o * width + l) * s.inner + i] = x[(o * s.len + begin + l) * s.inner + i];
  return make_result("slice", std::move(shape), std::move(out), {a}, [s, begin, width](const BackwardArgs& g) {
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t l = 0; l < width; ++l)
        for (std::size_t i = 0; i < s.inner; ++i)
          g.grad_inputs[0][(o * s.len + begin + l) * s.inner + i] += g.grad_output[(o * width + l) * s.inner + i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const auto& first = parts.front().shape();
  split_at(first, axis, "concat");
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto& sh = p.shape();
    if (sh.size() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < sh.size(); ++d) {
      if (d != axis && sh[d] != first[d]) {
        throw DimensionError("concat: " + shape_str(sh) + " incompatible with " + shape_str(first));
      }
    }
    lens.push_back(sh[axis]);
    total += sh[axis];
  }
  auto s = split_at(first, axis, "concat");
  auto shape = first;
  shape[axis] = total;
  std::vector<double> out(s.outer * total * s.inner);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto x = parts[k].data();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t l = 0; l < lens[k]; ++l)
        for (std::size_t i = 0; i < s.inner; ++i)
          out[(o * total + offset + l) * s.inner + i] = x[(o * lens[k] + l) * s.inner + i];
    offset += lens[k];
  }
  return make_result("concat", std::move(shape), std::move(out), parts,
                     [s, lens, total](const BackwardArgs& g) {
                       std::size_t offset = 0;
                       for (std::size_t k = 0; k < lens.size(); ++k) {
                         if (double* gi = g.grad_inputs[k]) {
                           for (std::size_t o = 0; o < s.outer; ++o)
                             for (std::size_t l = 0; l < lens[k]; ++l)
                               for (std::size_t i = 0; i < s.inner; ++i)
                                 gi[(o * lens[k] + l) * s.inner + i] +=
                                     g.grad_output[(o * total + offset + l) * s.inner + i];
                         }
                         offset += lens[k];
                       }
                     });
}

Tensor cosine_similarity(const Tensor& rows, const Tensor& anchor) {
  require_rank2(rows, "cosine_similarity");
  require_rank2(anchor, "cosine_similarity");
  const auto n = rows.dim(0), k = rows.dim(1);
  if (anchor.dim(0) != 1 || anchor.dim(1) != k) {
    throw DimensionError("cosine_similarity: anchor " + shape_str(anchor.shape()) + " vs rows " +
                         shape_str(rows.shape()));
  }
  const auto x = rows.data();
  const auto y = anchor.data();
  double ny = 0.0;
  for (std::size_t j = 0; j < k; ++j) ny += y[j] * y[j];
  ny = std::sqrt(ny);
  std::vector<double> norms(n), out(n, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    double dot = 0.0, nx = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      dot += x[r * k + j] * y[j];
      nx += x[r * k + j] * x[r * k + j];
    }
    norms[r] = std::sqrt(nx);
    if (norms[r] > 0.0 && ny > 0.0) out[r] = std::clamp(dot / (norms[r] * ny), -1.0, 1.0);
  }
  return make_result(
      "cosine_similarity", {1, n}, std::move(out), {rows, anchor},
      [rows, anchor, n, k, ny, norms = std::move(norms)](const BackwardArgs& g) {
        const auto x = rows.data();
        const auto y = anchor.data();
        for (std::size_t r = 0; r < n; ++r) {
          const double nx = norms[r];
          if (nx == 0.0 || ny == 0.0) continue;
          const double c = g.output[r];
          const double go = g.grad_output[r];
          for (std::size_t j = 0; j < k; ++j) {
            const double xj = x[r * k + j];
            if (g.grad_inputs[0]) g.grad_inputs[0][r * k + j] += go * (y[j] / (nx * ny) - c * xj / (nx * nx));
            if (g.grad_inputs[1]) g.grad_inputs[1][j] += go * (xj / (nx * ny) - c * y[j] / (ny * ny));
          }
        }
      });
}

}  // namespace mmformer
