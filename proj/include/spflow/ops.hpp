// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "error.hpp"
#include "tensor.hpp"

/// Differentiable operation vocabulary. Each op records one tape node.
/// Index arguments (gather/scatter) are treated as constants.
namespace spflow::ad {

using Index = std::vector<std::size_t>;

namespace detail {

template <class Real>
void check_same(const Var<Real>& a, const Var<Real>& b, const char* op) {
  require(a.value().same_shape(b.value()),
          std::string(op) + ": shape mismatch " + a.value().shape_string() + " vs " + b.value().shape_string());
}

template <class Real, class F, class D>
Var<Real> unary(const char* op, const Var<Real>& a, F f, D dfdx) {
  auto& t = a.tape();
  Tensor<Real> out(a.rows(), a.cols());
  const auto& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  const std::size_t ia = a.id();
  return t.push(op, std::move(out), {ia}, [ia, dfdx](Tape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    const auto& x = t.value(ia);
    const auto& y = t.value(self);
    auto& ga = t.adjoint(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(x[i], y[i]);
  });
}

}  // namespace detail

template <class Real>
Var<Real> matmul(const Var<Real>& a, const Var<Real>& b) {
  auto out = spflow::matmul(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push("matmul", std::move(out), {ia, ib}, [ia, ib](Tape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    const auto& av = t.value(ia);
    const auto& bv = t.value(ib);
    if (t.needs_grad(ia)) kernels::gemm_nt(g.data(), bv.data(), t.adjoint(ia).data(), av.rows(), bv.cols(), av.cols());
    if (t.needs_grad(ib)) kernels::gemm_tn(av.data(), g.data(), t.adjoint(ib).data(), av.rows(), av.cols(), bv.cols());
  });
}

template <class Real>
Var<Real> add(const Var<Real>& a, const Var<Real>& b) {
  detail::check_same(a, b, "add");
  Tensor<Real> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push("add", std::move(out), {ia, ib}, [ia, ib](Tape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    for (auto id : {ia, ib}) {
      if (!t.needs_grad(id)) continue;
      auto& gx = t.adjoint(id);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
  });
}

template <class Real>
Var<Real> sub(const Var<Real>& a, const Var<Real>& b) {
  detail::check_same(a, b, "sub");
  Tensor<Real> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push("sub", std::move(out), {ia, ib}, [ia, ib](Tape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    if (t.needs_grad(ia)) {
      auto& gx = t.adjoint(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.needs_grad(ib)) {
      auto& gx = t.adjoint(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= g[i];
    }
  });
}

/// Elementwise (Hadamard) product.
template <class Real>
Var<Real> mul(const Var<Real>& a, const Var<Real>& b) {
  detail::check_same(a, b, "mul");
  Tensor<Real> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push("mul", std::move(out), {ia, ib}, [ia, ib](Tape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    const auto& av = t.value(ia);
    const auto& bv = t.value(ib);
    if (t.needs_grad(ia)) {
      auto& gx = t.adjoint(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * bv[i];
    }
    if (t.needs_grad(ib)) {
      auto& gx = t.adjoint(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * av[i];
    }
  });
}

/// a (n x c) + row (1 x c) broadcast over rows.
template <class Real>
Var<Real> add_row(const Var<Real>& a, const Var<Real>& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row: expected 1 x " + std::to_string(a.cols()) + " row");
  Tensor<Real> out = a.value();
  const auto& r = row.value();
  const std::size_t c = a.cols();
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) += r[j];
  const std::size_t ia = a.id(), ir = row.id();
  return a.tape().push("add_row", std::move(out), {ia, ir}, [ia, ir, c](Tape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    if (t.needs_grad(ia)) {
      auto& gx = t.adjoint(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.needs_grad(ir)) {
      auto& gr = t.adjoint(ir);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < c; ++j) gr[j] += g(i, j);
    }
  });
}

/// a (n x c) times col (n x 1), i.e. every row scaled by its own factor.
template <class Real>
Var<Real> mul_col(const Var<Real>& a, const Var<Real>& col) {
  require(col.cols() == 1 && col.rows() == a.rows(), "mul_col: expected " + std::to_string(a.rows()) + " x 1 column");
  Tensor<Real> out = a.value();
  const auto& cv = col.value();
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (auto& v : out.row(i)) v *= cv[i];
  const std::size_t ia = a.id(), ic = col.id();
  return a.tape().push("mul_col", std::move(out), {ia, ic}, [ia, ic](Tape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    const auto& av = t.value(ia);
    const auto& cv = t.value(ic);
    if (t.needs_grad(ia)) {
      auto& gx = t.adjoint(ia);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gx(i, j) += g(i, j) * cv[i];
    }
    if (t.needs_grad(ic)) {
      auto& gc = t.adjoint(ic);
      for (std::size_t i = 0; i < g.rows(); ++i) {
        Real acc = 0;
        for (std::size_t j = 0; j < g.cols(); ++j) acc += g(i, j) * av(i, j);
        gc[i] += acc;
      }
    }
  });
}

/// a (n x c) times row (1 x c), i.e. every column scaled by its own factor.
template <class Real>
Var<Real> mul_row(const Var<Real>& a, const Var<Real>& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "mul_row: expected 1 x " + std::to_string(a.cols()) + " row");
  Tensor<Real> out = a.value();
  const auto& rv = row.value();
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) *= rv[j];
  const std::size_t ia = a.id(), ir = row.id();
  return a.tape().push("mul_row", std::move(out), {ia, ir}, [ia, ir](Tape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    const auto& av = t.value(ia);
    const auto& rv = t.value(ir);
    if (t.needs_grad(ia)) {
      auto& gx = t.adjoint(ia);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gx(i, j) += g(i, j) * rv[j];
    }
    if (t.needs_grad(ir)) {
      auto& gr = t.adjoint(ir);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gr[j] += g(i, j) * av(i, j);
    }
  });
}

template <class Real>
Var<Real> scale(const Var<Real>& a, Real s) {
  return detail::unary("scale", a, [s](Real x) { return s * x; }, [s](Real, Real) { return s; });
}

template <class Real>
Var<Real> add_scalar(const Var<Real>& a, Real s) {
  return detail::unary("add_scalar", a, [s](Real x) { return x + s; }, [](Real, Real) { return Real(1); });
}

template <class Real>
Var<Real> neg(const Var<Real>& a) {
  return scale(a, Real(-1));
}

template <class Real>
Var<Real> sigmoid(const Var<Real>& a) {
  return detail::unary(
      "sigmoid", a, [](Real x) { return Real(1) / (Real(1) + std::exp(-x)); },
      [](Real, Real y) { return y * (Real(1) - y); });
}

template <class Real>
Var<Real> tanh(const Var<Real>& a) {
  return detail::unary("tanh", a, [](Real x) { return std::tanh(x); }, [](Real, Real y) { return Real(1) - y * y; });
}

template <class Real>
Var<Real> exp(const Var<Real>& a) {
  return detail::unary("exp", a, [](Real x) { return std::exp(x); }, [](Real, Real y) { return y; });
}

template <class Real>
Var<Real> reciprocal(const Var<Real>& a) {
  return detail::unary("reciprocal", a, [](Real x) { return Real(1) / x; }, [](Real, Real y) { return -y * y; });
}

/// max(x, slope*x); slope 0 gives ReLU. The derivative at 0 is `slope`.
template <class Real>
Var<Real> leaky_relu(const Var<Real>& a, Real slope) {
  std::uint64_t pattern = 0;
  for (auto v : a.value().values()) pattern = pattern * 31 + (v > Real(0) ? 1 : 0);
  a.tape().note(pattern);
  return detail::unary(
      "leaky_relu", a, [slope](Real x) { return x > Real(0) ? x : slope * x; },
      [slope](Real x, Real) { return x > Real(0) ? Real(1) : slope; });
}

template <class Real>
Var<Real> relu(const Var<Real>& a) {
  return leaky_relu(a, Real(0));
}

/// exp(clamp(x, lo, hi)); zero derivative where the clamp is active.
template <class Real>
Var<Real> exp_clamped(const Var<Real>& a, Real lo, Real hi) {
  std::uint64_t pattern = 0;
  for (auto v : a.value().values()) pattern = pattern * 31 + (v < lo ? 1 : (v > hi ? 2 : 0));
  a.tape().note(pattern);
  return detail::unary(
      "exp_clamped", a, [lo, hi](Real x) { return std::exp(std::clamp(x, lo, hi)); },
      [lo, hi](Real x, Real y) { return (x < lo || x > hi) ? Real(0) : y; });
}

/// Sum of all entries, 1 x 1.
template <class Real>
Var<Real> sum(const Var<Real>& a) {
  Real acc = 0;
  for (auto v : a.value().values()) acc += v;
  const std::size_t ia = a.id();
  return a.tape().push("sum", Tensor<Real>::scalar(acc), {ia}, [ia](Tape<Real>& t, std::size_t self) {
    const Real g = t.adjoint(self)[0];
    auto& gx = t.adjoint(ia);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

/// Per-row sums, n x 1.
template <class Real>
Var<Real> row_sum(const Var<Real>& a) {
  const auto& x = a.value();
  Tensor<Real> out(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    Real acc = 0;
    for (auto v : x.row(i)) acc += v;
    out[i] = acc;
  }
  const std::size_t ia = a.id();
  return a.tape().push("row_sum", std::move(out), {ia}, [ia](Tape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    auto& gx = t.adjoint(ia);
    for (std::size_t i = 0; i < gx.rows(); ++i)
      for (auto& v : gx.row(i)) v += g[i];
  });
}

/// Per-column sums, 1 x c.
template <class Real>
Var<Real> col_sum(const Var<Real>& a) {
  const auto& x = a.value();
  Tensor<Real> out(1, x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out[j] += x(i, j);
  const std::size_t ia = a.id();
  return a.tape().push("col_sum", std::move(out), {ia}, [ia](Tape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    auto& gx = t.adjoint(ia);
    for (std::size_t i = 0; i < gx.rows(); ++i)
      for (std::size_t j = 0; j < gx.cols(); ++j) gx(i, j) += g[j];
  });
}

/// Euclidean norm of every row, n x 1. The subgradient at a zero row is 0.
template <class Real>
Var<Real> row_norm(const Var<Real>& a) {
  const auto& x = a.value();
  Tensor<Real> out(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    Real acc = 0;
    for (auto v : x.row(i)) acc += v * v;
    out[i] = std::sqrt(acc);
  }
  const std::size_t ia = a.id();
  return a.tape().push("row_norm", std::move(out), {ia}, [ia](Tape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    const auto& y = t.value(self);
    const auto& x = t.value(ia);
    auto& gx = t.adjoint(ia);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      if (y[i] <= Real(0)) continue;
      const Real s = g[i] / y[i];
      for (std::size_t j = 0; j < x.cols(); ++j) gx(i, j) += s * x(i, j);
    }
  });
}

/// Row-wise softmax with max subtraction.
template <class Real>
Var<Real> softmax_rows(const Var<Real>& a) {
  const auto& x = a.value();
  Tensor<Real> out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto r = x.row(i);
    const Real mx = *std::max_element(r.begin(), r.end());
    Real z = 0;
    for (std::size_t j = 0; j < r.size(); ++j) z += (out(i, j) = std::exp(r[j] - mx));
    for (std::size_t j = 0; j < r.size(); ++j) out(i, j) /= z;
  }
  const std::size_t ia = a.id();
  return a.tape().push("softmax_rows", std::move(out), {ia}, [ia](Tape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    const auto& y = t.value(self);
    auto& gx = t.adjoint(ia);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      Real dot = 0;
      for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) gx(i, j) += y(i, j) * (g(i, j) - dot);
    }
  });
}

/// Column concatenation of row-aligned tensors.
template <class Real>
Var<Real> concat_cols(const std::vector<Var<Real>>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t n = parts.front().rows();
  std::size_t total = 0;
  std::vector<std::size_t> ids, offsets;
  for (const auto& p : parts) {
    require(p.rows() == n, "concat_cols: row counts differ");
    ids.push_back(p.id());
    offsets.push_back(total);
    total += p.cols();
  }
  Tensor<Real> out(n, total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].value();
    for (std::size_t i = 0; i < n; ++i) std::copy(v.row(i).begin(), v.row(i).end(), out.row(i).begin() + offsets[k]);
  }
  auto& tape = parts.front().tape();
  return tape.push("concat_cols", std::move(out), std::span<const std::size_t>(ids),
                   [ids, offsets](Tape<Real>& t, std::size_t self) {
                     const auto& g = t.adjoint(self);
                     for (std::size_t k = 0; k < ids.size(); ++k) {
                       if (!t.needs_grad(ids[k])) continue;
                       auto& gx = t.adjoint(ids[k]);
                       for (std::size_t i = 0; i < gx.rows(); ++i)
                         for (std::size_t j = 0; j < gx.cols(); ++j) gx(i, j) += g(i, offsets[k] + j);
                     }
                   });
}

template <class Real>
Var<Real> concat_cols(const Var<Real>& a, const Var<Real>& b) {
  return concat_cols(std::vector<Var<Real>>{a, b});
}

/// Columns [begin, end) of `a`.
template <class Real>
Var<Real> slice_cols(const Var<Real>& a, std::size_t begin, std::size_t end) {
  require(begin <= end && end <= a.cols(), "slice_cols: bad range");
  const auto& x = a.value();
  Tensor<Real> out(x.rows(), end - begin);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = begin; j < end; ++j) out(i, j - begin) = x(i, j);
  const std::size_t ia = a.id();
  return a.tape().push("slice_cols", std::move(out), {ia}, [ia, begin](Tape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    auto& gx = t.adjoint(ia);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) gx(i, begin + j) += g(i, j);
  });
}

/// Rows [begin, end) of `a`.
template <class Real>
Var<Real> slice_rows(const Var<Real>& a, std::size_t begin, std::size_t end) {
  require(begin <= end && end <= a.rows(), "slice_rows: bad range");
  const auto& x = a.value();
  Tensor<Real> out(end - begin, x.cols());
  std::copy(x.data() + begin * x.cols(), x.data() + end * x.cols(), out.data());
  const std::size_t ia = a.id();
  return a.tape().push("slice_rows", std::move(out), {ia}, [ia, begin](Tape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    auto& gx = t.adjoint(ia);
    const std::size_t off = begin * g.cols();
    for (std::size_t i = 0; i < g.size(); ++i) gx[off + i] += g[i];
  });
}

/// out[r] = a[index[r]]. Differentiable in the values only.
template <class Real>
Var<Real> gather_rows(const Var<Real>& a, Index index) {
  const auto& x = a.value();
  Tensor<Real> out(index.size(), x.cols());
  for (std::size_t r = 0; r < index.size(); ++r) {
    require(index[r] < x.rows(), "gather_rows: index out of range");
    std::copy(x.row(index[r]).begin(), x.row(index[r]).end(), out.row(r).begin());
  }
  const std::size_t ia = a.id();
  auto idx = std::make_shared<const Index>(std::move(index));
  return a.tape().push("gather_rows", std::move(out), {ia}, [ia, idx](Tape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    auto& gx = t.adjoint(ia);
    const std::size_t c = g.cols();
    for (std::size_t r = 0; r < idx->size(); ++r) {
      const Real* src = g.data() + r * c;
      Real* dst = gx.data() + (*idx)[r] * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

/// out[index[r]] += a[r] over an output of `rows` rows.
template <class Real>
Var<Real> scatter_add_rows(const Var<Real>& a, Index index, std::size_t rows) {
  const auto& x = a.value();
  require(index.size() == x.rows(), "scatter_add_rows: one index per input row required");
  Tensor<Real> out(rows, x.cols());
  const std::size_t c = x.cols();
  for (std::size_t r = 0; r < index.size(); ++r) {
    require(index[r] < rows, "scatter_add_rows: index out of range");
    for (std::size_t j = 0; j < c; ++j) out(index[r], j) += x(r, j);
  }
  const std::size_t ia = a.id();
  auto idx = std::make_shared<const Index>(std::move(index));
  return a.tape().push("scatter_add_rows", std::move(out), {ia}, [ia, idx, c](Tape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    auto& gx = t.adjoint(ia);
    for (std::size_t r = 0; r < idx->size(); ++r)
      for (std::size_t j = 0; j < c; ++j) gx(r, j) += g((*idx)[r], j);
  });
}

/// Max over consecutive groups of `group` rows: (n*group) x c -> n x c.
template <class Real>
Var<Real> group_max(const Var<Real>& a, std::size_t group) {
  const auto& x = a.value();
  require(group > 0 && x.rows() % group == 0, "group_max: rows not divisible by group size");
  const std::size_t n = x.rows() / group, c = x.cols();
  Tensor<Real> out(n, c);
  auto arg = std::make_shared<std::vector<std::uint32_t>>(n * c);
  std::uint64_t pattern = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      std::size_t best = i * group;
      for (std::size_t r = i * group + 1; r < (i + 1) * group; ++r)
        if (x(r, j) > x(best, j)) best = r;
      out(i, j) = x(best, j);
      (*arg)[i * c + j] = static_cast<std::uint32_t>(best);
      pattern = pattern * 1099511628211ULL + best;
    }
  }
  a.tape().note(pattern);
  const std::size_t ia = a.id();
  return a.tape().push("group_max", std::move(out), {ia}, [ia, arg, c](Tape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    auto& gx = t.adjoint(ia);
    for (std::size_t k = 0; k < arg->size(); ++k) gx((*arg)[k], k % c) += g[k];
  });
}

/// One gathered summand of neighborhood_max: row `index[r]` of `values`
/// feeds neighbor slot r.
template <class Real = double>
struct GatherTerm {
  Var<Real> values;
  Index index;
};

/// Fused single-layer set convolution over groups of k neighbor slots:
///   pre[r] = sum_s terms_s.values[terms_s.index[r]] + rel[r] * w_rel + bias
///   out[i] = max_{r in group i} act(pre[r])
/// with act the leaky ReLU when `activate`, identity otherwise. Equals
/// group_max(leaky_relu(add_row(...))) of the unfused ops, including ties
/// (first slot wins), without materializing the slot tensors.
template <class Real>
Var<Real> neighborhood_max(const std::vector<GatherTerm<Real>>& terms, const Var<Real>& rel, const Var<Real>& w_rel,
                           const Var<Real>& bias, std::size_t k, bool activate, Real slope) {
  const auto& rv = rel.value();
  const auto& wv = w_rel.value();
  const auto& bv = bias.value();
  const std::size_t slots = rv.rows(), dim = rv.cols(), c = wv.cols();
  require(k > 0 && slots % k == 0, "neighborhood_max: slot count not divisible by k");
  require(wv.rows() == dim, "neighborhood_max: w_rel rows must match rel columns");
  require(bv.rows() == 1 && bv.cols() == c, "neighborhood_max: bias must be 1 x c");
  for (const auto& term : terms) {
    require(term.values.cols() == c, "neighborhood_max: term width differs from w_rel");
    require(term.index.size() == slots, "neighborhood_max: term index length differs from slot count");
    for (auto idx : term.index) require(idx < term.values.rows(), "neighborhood_max: index out of range");
  }
  const std::size_t n = slots / k;
  Tensor<Real> out(n, c);
  auto arg = std::make_shared<std::vector<std::uint32_t>>(n * c);
  std::vector<Real> pre(c), best(c);
  std::uint64_t pattern = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t r = i * k + j;
      for (std::size_t ch = 0; ch < c; ++ch) pre[ch] = bv[ch];
      for (const auto& term : terms) {
        const auto src = term.values.value().row(term.index[r]);
        for (std::size_t ch = 0; ch < c; ++ch) pre[ch] += src[ch];
      }
      for (std::size_t d = 0; d < dim; ++d) {
        const Real x = rv(r, d);
        const Real* wrow = wv.data() + d * c;
        for (std::size_t ch = 0; ch < c; ++ch) pre[ch] += x * wrow[ch];
      }
      for (std::size_t ch = 0; ch < c; ++ch) {
        if (j == 0 || pre[ch] > best[ch]) {
          best[ch] = pre[ch];
          (*arg)[i * c + ch] = static_cast<std::uint32_t>(r);
        }
      }
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      const Real v = best[ch];
      out(i, ch) = (activate && !(v > Real(0))) ? slope * v : v;
      pattern = pattern * 1099511628211ULL + (*arg)[i * c + ch] * 2 + (v > Real(0) ? 1 : 0);
    }
  }
  rel.tape().note(pattern);

  std::vector<std::size_t> inputs{rel.id(), w_rel.id(), bias.id()};
  std::vector<std::pair<std::size_t, Index>> term_ids;
  for (const auto& term : terms) {
    inputs.push_back(term.values.id());
    term_ids.emplace_back(term.values.id(), term.index);
  }
  const std::size_t ir = rel.id(), iw = w_rel.id(), ib = bias.id();
  return rel.tape().push(
      "neighborhood_max", std::move(out), std::span<const std::size_t>(inputs),
      [ir, iw, ib, term_ids = std::move(term_ids), arg, activate, slope, c, dim](Tape<Real>& t, std::size_t self) {
        const auto& g = t.adjoint(self);
        const auto& y = t.value(self);
        const auto& rv = t.value(ir);
        const auto& wv = t.value(iw);
        Tensor<Real>* grel = t.needs_grad(ir) ? &t.adjoint(ir) : nullptr;
        Tensor<Real>* gw = t.needs_grad(iw) ? &t.adjoint(iw) : nullptr;
        Tensor<Real>* gb = t.needs_grad(ib) ? &t.adjoint(ib) : nullptr;
        std::vector<Tensor<Real>*> gterms;
        for (const auto& [id, idx] : term_ids) gterms.push_back(t.needs_grad(id) ? &t.adjoint(id) : nullptr);
        for (std::size_t e = 0; e < g.size(); ++e) {
          const std::size_t ch = e % c, r = (*arg)[e];
          const Real gv = (activate && !(y[e] > Real(0))) ? g[e] * slope : g[e];
          if (gb) (*gb)[ch] += gv;
          for (std::size_t s = 0; s < gterms.size(); ++s)
            if (gterms[s]) (*gterms[s])(term_ids[s].second[r], ch) += gv;
          for (std::size_t d = 0; d < dim; ++d) {
            if (grel) (*grel)(r, d) += gv * wv(d, ch);
            if (gw) (*gw)(d, ch) += gv * rv(r, d);
          }
        }
      });
}

/// Row i of the result is b[i] where take_b[i], otherwise a[i].
template <class Real>
Var<Real> select_rows(const std::vector<bool>& take_b, const Var<Real>& a, const Var<Real>& b) {
  detail::check_same(a, b, "select_rows");
  require(take_b.size() == a.rows(), "select_rows: mask length");
  Tensor<Real> out = a.value();
  for (std::size_t i = 0; i < out.rows(); ++i)
    if (take_b[i]) std::copy(b.value().row(i).begin(), b.value().row(i).end(), out.row(i).begin());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().push("select_rows", std::move(out), {ia, ib}, [ia, ib, take_b](Tape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      const std::size_t dst = take_b[i] ? ib : ia;
      if (!t.needs_grad(dst)) continue;
      auto& gx = t.adjoint(dst);
      for (std::size_t j = 0; j < g.cols(); ++j) gx(i, j) += g(i, j);
    }
  });
}

template <class Real>
Var<Real> transpose(const Var<Real>& a) {
  const std::size_t ia = a.id();
  return a.tape().push("transpose", spflow::transpose(a.value()), {ia}, [ia](Tape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    auto& gx = t.adjoint(ia);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) gx(j, i) += g(i, j);
  });
}

/// Same row-major data under a new shape.
template <class Real>
Var<Real> reshape(const Var<Real>& a, std::size_t rows, std::size_t cols) {
  require(rows * cols == a.value().size(), "reshape: element count changes");
  Tensor<Real> out(rows, cols);
  std::copy(a.value().values().begin(), a.value().values().end(), out.values().begin());
  const std::size_t ia = a.id();
  return a.tape().push("reshape", std::move(out), {ia}, [ia](Tape<Real>& t, std::size_t self) {
    const auto& g = t.adjoint(self);
    auto& gx = t.adjoint(ia);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// Throws NumericError naming `stage` when `v` holds NaN or Inf.
template <class Real>
const Var<Real>& check_finite(const Var<Real>& v, const std::string& stage) {
  if (!v.value().all_finite()) throw NumericError(stage);
  return v;
}

}  // namespace spflow::ad
