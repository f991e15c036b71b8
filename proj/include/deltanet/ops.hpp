#pragma once

// Differentiable operations over Tensor. Free functions; every op appends
// one node with its backward rule. Shape violations throw DimensionError
// naming both shapes.

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "deltanet/tensor.hpp"

namespace deltanet {

namespace detail {

template <class S>
MatMap<S> as_mat(ArrayX<S>& a, Eigen::Index r, Eigen::Index c) {
  return MatMap<S>(a.data(), r, c);
}
template <class S>
ConstMatMap<S> as_cmat(const ArrayX<S>& a, Eigen::Index r, Eigen::Index c) {
  return ConstMatMap<S>(a.data(), r, c);
}

template <class S>
void require_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

}  // namespace detail

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows())
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  const Eigen::Index m = a.rows(), k = a.cols(), n = b.cols();
  ArrayX<S> out(m * n);
  {
    // Row-by-row products keep each output row bit-stable under changes to
    // the other rows of `a` (attention masking relies on this).
    auto am = a.matrix();
    auto bm = b.matrix();
    auto om = detail::as_mat(out, m, n);
    for (Eigen::Index i = 0; i < m; ++i) om.row(i).noalias() = am.row(i) * bm;
  }
  auto fn = [m, k, n](TensorNode<S>& nd) {
    auto g = detail::as_cmat(nd.scratch, m, n);
    auto* pa = nd.parents[0].get();
    auto* pb = nd.parents[1].get();
    if (pa->requires_grad)
      detail::as_mat(pa->scratch, m, k).noalias() +=
          g * detail::as_cmat(pb->values, k, n).transpose();
    if (pb->requires_grad)
      detail::as_mat(pb->scratch, k, n).noalias() +=
          detail::as_cmat(pa->values, m, k).transpose() * g;
  };
  return make_op<S>("matmul", {m, n}, std::move(out), {a, b}, fn);
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape("add", a, b);
  ArrayX<S> out = a.values() + b.values();
  auto fn = [](TensorNode<S>& nd) {
    for (int i = 0; i < 2; ++i)
      if (nd.parents[i]->requires_grad) nd.parents[i]->scratch += nd.scratch;
  };
  return make_op<S>("add", a.shape(), std::move(out), {a, b}, fn);
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape("sub", a, b);
  ArrayX<S> out = a.values() - b.values();
  auto fn = [](TensorNode<S>& nd) {
    if (nd.parents[0]->requires_grad) nd.parents[0]->scratch += nd.scratch;
    if (nd.parents[1]->requires_grad) nd.parents[1]->scratch -= nd.scratch;
  };
  return make_op<S>("sub", a.shape(), std::move(out), {a, b}, fn);
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  // Elementwise product; a 1x1 factor broadcasts over the other operand.
  if (a.numel() == 1 && b.numel() != 1) return mul(b, a);
  if (b.numel() == 1 && a.numel() != 1) {
    ArrayX<S> out = a.values() * b.value_at(0);
    auto fn = [](TensorNode<S>& nd) {
      auto* pa = nd.parents[0].get();
      auto* pb = nd.parents[1].get();
      if (pa->requires_grad) pa->scratch += nd.scratch * pb->values[0];
      if (pb->requires_grad) pb->scratch[0] += (nd.scratch * pa->values).sum();
    };
    return make_op<S>("mul_scalar", a.shape(), std::move(out), {a, b}, fn);
  }
  detail::require_same_shape("mul", a, b);
  ArrayX<S> out = a.values() * b.values();
  auto fn = [](TensorNode<S>& nd) {
    auto* pa = nd.parents[0].get();
    auto* pb = nd.parents[1].get();
    if (pa->requires_grad) pa->scratch += nd.scratch * pb->values;
    if (pb->requires_grad) pb->scratch += nd.scratch * pa->values;
  };
  return make_op<S>("mul", a.shape(), std::move(out), {a, b}, fn);
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  ArrayX<S> out = a.values() * c;
  auto fn = [c](TensorNode<S>& nd) {
    if (nd.parents[0]->requires_grad) nd.parents[0]->scratch += nd.scratch * c;
  };
  return make_op<S>("scale", a.shape(), std::move(out), {a}, fn);
}

template <class S>
Tensor<S> tanh(const Tensor<S>& a) {
  ArrayX<S> out = a.values().tanh();
  auto fn = [](TensorNode<S>& nd) {
    if (nd.parents[0]->requires_grad)
      nd.parents[0]->scratch += nd.scratch * (S(1) - nd.values.square());
  };
  return make_op<S>("tanh", a.shape(), std::move(out), {a}, fn);
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  ArrayX<S> out(a.numel());
  for (Eigen::Index i = 0; i < a.numel(); ++i) {
    const S x = a.value_at(i);
    out[i] = x >= S(0) ? S(1) / (S(1) + std::exp(-x))
                       : std::exp(x) / (S(1) + std::exp(x));
  }
  auto fn = [](TensorNode<S>& nd) {
    if (nd.parents[0]->requires_grad)
      nd.parents[0]->scratch += nd.scratch * nd.values * (S(1) - nd.values);
  };
  return make_op<S>("sigmoid", a.shape(), std::move(out), {a}, fn);
}

// Row-stable softmax: each output row is nonnegative and sums to 1.
template <class S>
Tensor<S> softmax_rows(const Tensor<S>& a) {
  const Eigen::Index m = a.rows(), n = a.cols();
  ArrayX<S> out(m * n);
  auto in = a.matrix();
  auto om = detail::as_mat(out, m, n);
  for (Eigen::Index r = 0; r < m; ++r) {
    const S mx = in.row(r).maxCoeff();
    om.row(r) = (in.row(r).array() - mx).exp();
    om.row(r) /= om.row(r).sum();
  }
  auto fn = [m, n](TensorNode<S>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    auto g = detail::as_cmat(nd.scratch, m, n);
    auto y = detail::as_cmat(nd.values, m, n);
    auto px = detail::as_mat(nd.parents[0]->scratch, m, n);
    for (Eigen::Index r = 0; r < m; ++r) {
      const S dot = (g.row(r).array() * y.row(r).array()).sum();
      px.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
    }
  };
  return make_op<S>("softmax_rows", a.shape(), std::move(out), {a}, fn);
}

// Softmax over the unmasked columns of every row; masked columns get weight
// exactly 0 and receive no gradient. The reductions run in ascending column
// order skipping masked entries, so the result is bit-identical to a plain
// softmax over the corresponding submatrix.
template <class S>
Tensor<S> masked_softmax_rows(const Tensor<S>& a, const std::vector<std::uint8_t>& mask) {
  const Eigen::Index m = a.rows(), n = a.cols();
  if (static_cast<Eigen::Index>(mask.size()) != n)
    throw DimensionError("masked_softmax_rows: mask length " + std::to_string(mask.size()) +
                         " vs " + std::to_string(n) + " columns");
  Eigen::Index live = 0;
  for (auto v : mask) live += (v != 0);
  if (live == 0) throw UsageError("masked_softmax_rows: all columns masked");
  ArrayX<S> out = ArrayX<S>::Zero(m * n);
  auto in = a.matrix();
  auto om = detail::as_mat(out, m, n);
  for (Eigen::Index r = 0; r < m; ++r) {
    S mx = -std::numeric_limits<S>::infinity();
    for (Eigen::Index c = 0; c < n; ++c)
      if (mask[c] && in(r, c) > mx) mx = in(r, c);
    S sum = S(0);
    for (Eigen::Index c = 0; c < n; ++c) {
      if (!mask[c]) continue;
      const S e = std::exp(in(r, c) - mx);
      om(r, c) = e;
      sum += e;
    }
    for (Eigen::Index c = 0; c < n; ++c)
      if (mask[c]) om(r, c) /= sum;
  }
  auto fn = [m, n, mask](TensorNode<S>& nd) {
    if (!nd.parents[0]->requires_grad) return;
    auto g = detail::as_cmat(nd.scratch, m, n);
    auto y = detail::as_cmat(nd.values, m, n);
    auto px = detail::as_mat(nd.parents[0]->scratch, m, n);
    for (Eigen::Index r = 0; r < m; ++r) {
      S dot = S(0);
      for (Eigen::Index c = 0; c < n; ++c)
        if (mask[c]) dot += g(r, c) * y(r, c);
      for (Eigen::Index c = 0; c < n; ++c)
        if (mask[c]) px(r, c) += y(r, c) * (g(r, c) - dot);
    }
  };
  return make_op<S>("masked_softmax_rows", a.shape(), std::move(out), {a}, fn);
}

template <class S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: empty part list");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols)
      throw DimensionError("concat_rows: column mismatch " + shape_str(p.shape()) +
                           " vs " + std::to_string(cols) + " columns");
    rows += p.rows();
  }
  ArrayX<S> out(rows * cols);
  Eigen::Index r0 = 0;
  std::vector<Eigen::Index> offsets;
  for (const auto& p : parts) {
    offsets.push_back(r0);
    detail::as_mat(out, rows, cols).middleRows(r0, p.rows()) = p.matrix();
    r0 += p.rows();
  }
  auto fn = [rows, cols, offsets](TensorNode<S>& nd) {
    auto g = detail::as_cmat(nd.scratch, rows, cols);
    for (std::size_t i = 0; i < nd.parents.size(); ++i) {
      auto* p = nd.parents[i].get();
      if (!p->requires_grad) continue;
      const Eigen::Index pr = p->values.size() / cols;
      detail::as_mat(p->scratch, pr, cols) += g.middleRows(offsets[i], pr);
    }
  };
  return make_op<S>("concat_rows", {rows, cols}, std::move(out), parts, fn);
}

template <class S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: empty part list");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows)
      throw DimensionError("concat_cols: row mismatch " + shape_str(p.shape()) + " vs " +
                           std::to_string(rows) + " rows");
    cols += p.cols();
  }
  ArrayX<S> out(rows * cols);
  Eigen::Index c0 = 0;
  std::vector<Eigen::Index> offsets;
  for (const auto& p : parts) {
    offsets.push_back(c0);
    detail::as_mat(out, rows, cols).middleCols(c0, p.cols()) = p.matrix();
    c0 += p.cols();
  }
  auto fn = [rows, cols, offsets](TensorNode<S>& nd) {
    auto g = detail::as_cmat(nd.scratch, rows, cols);
    for (std::size_t i = 0; i < nd.parents.size(); ++i) {
      auto* p = nd.parents[i].get();
      if (!p->requires_grad) continue;
      const Eigen::Index pc = p->values.size() / rows;
      detail::as_mat(p->scratch, rows, pc) += g.middleCols(offsets[i], pc);
    }
  };
  return make_op<S>("concat_cols", {rows, cols}, std::move(out), parts, fn);
}

template <class S>
Tensor<S> slice_rows(const Tensor<S>& a, Eigen::Index r0, Eigen::Index count) {
  if (r0 < 0 || count < 1 || r0 + count > a.rows())
    throw IndexError("slice_rows: rows [" + std::to_string(r0) + "," +
                     std::to_string(r0 + count) + ") out of " + shape_str(a.shape()));
  const Eigen::Index cols = a.cols();
  ArrayX<S> out(count * cols);
  detail::as_mat(out, count, cols) = a.matrix().middleRows(r0, count);
  auto fn = [r0, count, cols](TensorNode<S>& nd) {
    auto* p = nd.parents[0].get();
    if (!p->requires_grad) return;
    const Eigen::Index pr = p->values.size() / cols;
    detail::as_mat(p->scratch, pr, cols).middleRows(r0, count) +=
        detail::as_cmat(nd.scratch, count, cols);
  };
  return make_op<S>("slice_rows", {count, cols}, std::move(out), {a}, fn);
}

template <class S>
Tensor<S> slice_cols(const Tensor<S>& a, Eigen::Index c0, Eigen::Index count) {
  if (c0 < 0 || count < 1 || c0 + count > a.cols())
    throw IndexError("slice_cols: cols [" + std::to_string(c0) + "," +
                     std::to_string(c0 + count) + ") out of " + shape_str(a.shape()));
  const Eigen::Index rows = a.rows(), cols = a.cols();
  ArrayX<S> out(rows * count);
  detail::as_mat(out, rows, count) = a.matrix().middleCols(c0, count);
  auto fn = [c0, count, rows, cols](TensorNode<S>& nd) {
    auto* p = nd.parents[0].get();
    if (!p->requires_grad) return;
    detail::as_mat(p->scratch, rows, cols).middleCols(c0, count) +=
        detail::as_cmat(nd.scratch, rows, count);
  };
  return make_op<S>("slice_cols", {rows, count}, std::move(out), {a}, fn);
}

template <class S>
Tensor<S> transpose(const Tensor<S>& a) {
  const Eigen::Index m = a.rows(), n = a.cols();
  ArrayX<S> out(n * m);
  detail::as_mat(out, n, m) = a.matrix().transpose();
  auto fn = [m, n](TensorNode<S>& nd) {
    auto* p = nd.parents[0].get();
    if (p->requires_grad)
      detail::as_mat(p->scratch, m, n) += detail::as_cmat(nd.scratch, n, m).transpose();
  };
  return make_op<S>("transpose", {n, m}, std::move(out), {a}, fn);
}

template <class S>
Tensor<S> mean_pool_rows(const Tensor<S>& a) {
  const Eigen::Index m = a.rows(), n = a.cols();
  if (m < 1) throw DimensionError("mean_pool_rows: empty tensor " + shape_str(a.shape()));
  ArrayX<S> out(n);
  detail::as_mat(out, 1, n) = a.matrix().colwise().mean();
  auto fn = [m, n](TensorNode<S>& nd) {
    auto* p = nd.parents[0].get();
    if (!p->requires_grad) return;
    auto g = detail::as_cmat(nd.scratch, 1, n);
    detail::as_mat(p->scratch, m, n).rowwise() += g.row(0) / S(m);
  };
  return make_op<S>("mean_pool_rows", {1, n}, std::move(out), {a}, fn);
}

template <class S>
Tensor<S> sum_all(const Tensor<S>& a) {
  ArrayX<S> out(1);
  out[0] = a.values().sum();
  auto fn = [](TensorNode<S>& nd) {
    if (nd.parents[0]->requires_grad) nd.parents[0]->scratch += nd.scratch[0];
  };
  return make_op<S>("sum_all", {1, 1}, std::move(out), {a}, fn);
}

// m + row replicated over every row of m (bias add).
template <class S>
Tensor<S> add_rowwise(const Tensor<S>& m, const Tensor<S>& row) {
  if (row.rows() != 1 || row.cols() != m.cols())
    throw DimensionError("add_rowwise: bias " + shape_str(row.shape()) + " vs matrix " +
                         shape_str(m.shape()));
  const Eigen::Index r = m.rows(), c = m.cols();
  ArrayX<S> out(r * c);
  detail::as_mat(out, r, c) = m.matrix().rowwise() + row.matrix().row(0);
  auto fn = [r, c](TensorNode<S>& nd) {
    auto g = detail::as_cmat(nd.scratch, r, c);
    if (nd.parents[0]->requires_grad)
      detail::as_mat(nd.parents[0]->scratch, r, c) += g;
    if (nd.parents[1]->requires_grad)
      detail::as_mat(nd.parents[1]->scratch, 1, c).row(0) += g.colwise().sum();
  };
  return make_op<S>("add_rowwise", m.shape(), std::move(out), {m, row}, fn);
}

// out[0, i] = dot(q, keys.row(i)), accumulated left to right so masking a
// key elsewhere cannot perturb the remaining scores.
template <class S>
Tensor<S> row_dots(const Tensor<S>& q, const Tensor<S>& keys) {
  if (q.rows() != 1 || q.cols() != keys.cols())
    throw DimensionError("row_dots: query " + shape_str(q.shape()) + " vs keys " +
                         shape_str(keys.shape()));
  const Eigen::Index m = keys.rows(), d = keys.cols();
  ArrayX<S> out(m);
  auto qv = q.matrix();
  auto kv = keys.matrix();
  for (Eigen::Index i = 0; i < m; ++i) {
    S acc = S(0);
    for (Eigen::Index j = 0; j < d; ++j) acc += qv(0, j) * kv(i, j);
    out[i] = acc;
  }
  auto fn = [m, d](TensorNode<S>& nd) {
    auto* pq = nd.parents[0].get();
    auto* pk = nd.parents[1].get();
    auto qv = detail::as_cmat(pq->values, 1, d);
    auto kv = detail::as_cmat(pk->values, m, d);
    for (Eigen::Index i = 0; i < m; ++i) {
      const S g = nd.scratch[i];
      if (pq->requires_grad)
        detail::as_mat(pq->scratch, 1, d).row(0) += g * kv.row(i);
      if (pk->requires_grad)
        detail::as_mat(pk->scratch, m, d).row(i) += g * qv.row(0);
    }
  };
  return make_op<S>("row_dots", {1, m}, std::move(out), {q, keys}, fn);
}

// out = sum_i w[0,i] * values.row(i) over unmasked i, accumulated in index
// order; with an empty mask every row participates.
template <class S>
Tensor<S> weighted_row_sum(const Tensor<S>& w, const Tensor<S>& values,
                           const std::vector<std::uint8_t>& mask) {
  if (w.rows() != 1 || w.cols() != values.rows())
    throw DimensionError("weighted_row_sum: weights " + shape_str(w.shape()) +
                         " vs values " + shape_str(values.shape()));
  if (!mask.empty() && static_cast<Eigen::Index>(mask.size()) != values.rows())
    throw DimensionError("weighted_row_sum: mask length " + std::to_string(mask.size()) +
                         " vs " + std::to_string(values.rows()) + " rows");
  const Eigen::Index m = values.rows(), d = values.cols();
  ArrayX<S> out = ArrayX<S>::Zero(d);
  auto wv = w.matrix();
  auto vv = values.matrix();
  auto om = detail::as_mat(out, 1, d);
  for (Eigen::Index i = 0; i < m; ++i) {
    if (!mask.empty() && !mask[i]) continue;
    om.row(0) += wv(0, i) * vv.row(i);
  }
  auto fn = [m, d, mask](TensorNode<S>& nd) {
    auto* pw = nd.parents[0].get();
    auto* pv = nd.parents[1].get();
    auto g = detail::as_cmat(nd.scratch, 1, d);
    auto wv = detail::as_cmat(pw->values, 1, m);
    auto vv = detail::as_cmat(pv->values, m, d);
    for (Eigen::Index i = 0; i < m; ++i) {
      if (!mask.empty() && !mask[i]) continue;
      if (pw->requires_grad)
        detail::as_mat(pw->scratch, 1, m)(0, i) += (g.row(0).array() * vv.row(i).array()).sum();
      if (pv->requires_grad)
        detail::as_mat(pv->scratch, m, d).row(i) += wv(0, i) * g.row(0);
    }
  };
  return make_op<S>("weighted_row_sum", {1, d}, std::move(out), {w, values}, fn);
}

// base + a*b + bias, the recurrent pre-activation fused into one node.
template <class S>
Tensor<S> add_matmul_bias(const Tensor<S>& base, const Tensor<S>& a, const Tensor<S>& b,
                          const Tensor<S>& bias) {
  if (a.cols() != b.rows() || base.rows() != a.rows() || base.cols() != b.cols() ||
      bias.rows() != 1 || bias.cols() != b.cols())
    throw DimensionError("add_matmul_bias: base " + shape_str(base.shape()) + ", a " +
                         shape_str(a.shape()) + ", b " + shape_str(b.shape()) + ", bias " +
                         shape_str(bias.shape()));
  const Eigen::Index m = a.rows(), k = a.cols(), n = b.cols();
  ArrayX<S> out(m * n);
  {
    auto om = detail::as_mat(out, m, n);
    auto am = a.matrix();
    auto bm = b.matrix();
    for (Eigen::Index i = 0; i < m; ++i) om.row(i).noalias() = am.row(i) * bm;
    om.rowwise() += bias.matrix().row(0);
    om += base.matrix();
  }
  auto fn = [m, k, n](TensorNode<S>& nd) {
    auto g = detail::as_cmat(nd.scratch, m, n);
    auto* pbase = nd.parents[0].get();
    auto* pa = nd.parents[1].get();
    auto* pb = nd.parents[2].get();
    auto* pbias = nd.parents[3].get();
    if (pbase->requires_grad) detail::as_mat(pbase->scratch, m, n) += g;
    if (pa->requires_grad)
      detail::as_mat(pa->scratch, m, k).noalias() +=
          g * detail::as_cmat(pb->values, k, n).transpose();
    if (pb->requires_grad)
      detail::as_mat(pb->scratch, k, n).noalias() +=
          detail::as_cmat(pa->values, m, k).transpose() * g;
    if (pbias->requires_grad)
      detail::as_mat(pbias->scratch, 1, n).row(0) += g.colwise().sum();
  };
  return make_op<S>("add_matmul_bias", {m, n}, std::move(out), {base, a, b, bias}, fn);
}

// Fused LSTM cell: takes pre-activations z = [zi zf zg zo] (m x 4D) and the
// previous cell state (m x D), emits [h ; c] side by side (m x 2D). Gate
// layout: input, forget, cell candidate, output.
template <class S>
Tensor<S> lstm_gates(const Tensor<S>& z, const Tensor<S>& c_prev) {
  if (z.ndim() != 2 || c_prev.ndim() != 2 || z.cols() != 4 * c_prev.cols() ||
      z.rows() != c_prev.rows())
    throw DimensionError("lstm_gates: z " + shape_str(z.shape()) + " vs c_prev " +
                         shape_str(c_prev.shape()));
  const Eigen::Index m = z.rows(), d = c_prev.cols();
  ArrayX<S> out(m * 2 * d);
  auto zm = z.matrix();
  auto cm = c_prev.matrix();
  auto om = detail::as_mat(out, m, 2 * d);
  auto sigm = [](S x) {
    return x >= S(0) ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
  };
  for (Eigen::Index r = 0; r < m; ++r)
    for (Eigen::Index j = 0; j < d; ++j) {
      const S gi = sigm(zm(r, j));
      const S gf = sigm(zm(r, d + j));
      const S gg = std::tanh(zm(r, 2 * d + j));
      const S go = sigm(zm(r, 3 * d + j));
      const S c = gf * cm(r, j) + gi * gg;
      om(r, j) = go * std::tanh(c);
      om(r, d + j) = c;
    }
  auto fn = [m, d](TensorNode<S>& nd) {
    auto* pz = nd.parents[0].get();
    auto* pc = nd.parents[1].get();
    auto zm = detail::as_cmat(pz->values, m, 4 * d);
    auto cm = detail::as_cmat(pc->values, m, d);
    auto ov = detail::as_cmat(nd.values, m, 2 * d);
    auto g = detail::as_cmat(nd.scratch, m, 2 * d);
    auto sigm = [](S x) {
      return x >= S(0) ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
    };
    for (Eigen::Index r = 0; r < m; ++r)
      for (Eigen::Index j = 0; j < d; ++j) {
        const S gi = sigm(zm(r, j));
        const S gf = sigm(zm(r, d + j));
        const S gg = std::tanh(zm(r, 2 * d + j));
        const S go = sigm(zm(r, 3 * d + j));
        const S c = ov(r, d + j);
        const S tc = std::tanh(c);
        const S gh = g(r, j);
        const S gc = g(r, d + j) + gh * go * (S(1) - tc * tc);
        if (pz->requires_grad) {
          auto px = detail::as_mat(pz->scratch, m, 4 * d);
          px(r, j) += gc * gg * gi * (S(1) - gi);
          px(r, d + j) += gc * cm(r, j) * gf * (S(1) - gf);
          px(r, 2 * d + j) += gc * gi * (S(1) - gg * gg);
          px(r, 3 * d + j) += gh * tc * go * (S(1) - go);
        }
        if (pc->requires_grad) detail::as_mat(pc->scratch, m, d)(r, j) += gc * gf;
      }
  };
  return make_op<S>("lstm_gates", {m, 2 * d}, std::move(out), {z, c_prev}, fn);
}

// Mean masked negative log-likelihood of the target ids under per-step
// probability rows: -sum_t mask_t * log p_t(target_t) / sum_t mask_t.
template <class S>
Tensor<S> cross_entropy(const Tensor<S>& probs, const std::vector<int>& targets,
                        const std::vector<std::uint8_t>& mask) {
  const Eigen::Index t_steps = probs.rows(), vocab = probs.cols();
  if (static_cast<Eigen::Index>(targets.size()) != t_steps ||
      static_cast<Eigen::Index>(mask.size()) != t_steps)
    throw DimensionError("cross_entropy: " + std::to_string(t_steps) + " probability rows vs " +
                         std::to_string(targets.size()) + " targets / " +
                         std::to_string(mask.size()) + " mask entries");
  auto pm = probs.matrix();
  S denom = S(0);
  for (Eigen::Index t = 0; t < t_steps; ++t) {
    const S row_sum = pm.row(t).sum();
    if (std::abs(row_sum - S(1)) > S(1e-6))
      throw UsageError("cross_entropy: probability row " + std::to_string(t) +
                       " sums to " + std::to_string(static_cast<double>(row_sum)));
    if (targets[t] < 0 || targets[t] >= vocab)
      throw IndexError("cross_entropy: target id " + std::to_string(targets[t]) +
                       " outside vocabulary of size " + std::to_string(vocab));
    denom += S(mask[t] != 0);
  }
  if (denom == S(0)) throw UsageError("cross_entropy: mask selects no positions");
  S loss = S(0);
  for (Eigen::Index t = 0; t < t_steps; ++t)
    if (mask[t]) loss -= std::log(pm(t, targets[t]));
  ArrayX<S> out(1);
  out[0] = loss / denom;
  auto fn = [t_steps, vocab, targets, mask, denom](TensorNode<S>& nd) {
    auto* p = nd.parents[0].get();
    if (!p->requires_grad) return;
    const S g = nd.scratch[0];
    auto pv = detail::as_cmat(p->values, t_steps, vocab);
    auto px = detail::as_mat(p->scratch, t_steps, vocab);
    for (Eigen::Index t = 0; t < t_steps; ++t)
      if (mask[t]) px(t, targets[t]) -= g / (pv(t, targets[t]) * denom);
  };
  return make_op<S>("cross_entropy", {1, 1}, std::move(out), {probs}, fn);
}

// Row t of the output is table.row(ids[t]).
template <class S>
Tensor<S> embedding_lookup(const Tensor<S>& table, const std::vector<int>& ids) {
  const Eigen::Index vocab = table.rows(), dim = table.cols();
  const Eigen::Index n = static_cast<Eigen::Index>(ids.size());
  if (n == 0) throw DimensionError("embedding_lookup: empty id sequence");
  for (int id : ids)
    if (id < 0 || id >= vocab)
      throw IndexError("embedding_lookup: id " + std::to_string(id) +
                       " outside table of " + std::to_string(vocab) + " rows");
  ArrayX<S> out(n * dim);
  auto om = detail::as_mat(out, n, dim);
  auto tm = table.matrix();
  for (Eigen::Index t = 0; t < n; ++t) om.row(t) = tm.row(ids[t]);
  auto fn = [n, dim, ids](TensorNode<S>& nd) {
    auto* p = nd.parents[0].get();
    if (!p->requires_grad) return;
    const Eigen::Index vocab_rows = p->values.size() / dim;
    auto g = detail::as_cmat(nd.scratch, n, dim);
    auto px = detail::as_mat(p->scratch, vocab_rows, dim);
    for (Eigen::Index t = 0; t < n; ++t) px.row(ids[t]) += g.row(t);
  };
  return make_op<S>("embedding_lookup", {n, dim}, std::move(out), {table}, fn);
}

namespace detail {

// Neighbour table for 3x3 patches with zero padding: entry (pos, k) is the
// source spatial position for kernel offset k, or -1 when outside the grid.
inline std::vector<Eigen::Index> patch_sources(Eigen::Index h, Eigen::Index w) {
  std::vector<Eigen::Index> src(static_cast<std::size_t>(h * w * 9), -1);
  for (Eigen::Index y = 0; y < h; ++y)
    for (Eigen::Index x = 0; x < w; ++x)
      for (Eigen::Index dy = -1; dy <= 1; ++dy)
        for (Eigen::Index dx = -1; dx <= 1; ++dx) {
          const Eigen::Index yy = y + dy, xx = x + dx;
          const Eigen::Index k = (dy + 1) * 3 + (dx + 1);
          if (yy >= 0 && yy < h && xx >= 0 && xx < w)
            src[(y * w + x) * 9 + k] = yy * w + xx;
        }
  return src;
}

}  // namespace detail

// 3x3/pad-1 patch extraction from a CxHxW image into (H*W) x (9*C) rows,
// one row per spatial position, kernel-major then channel-major columns.
template <class S>
Tensor<S> im2col_image(const Tensor<S>& img) {
  if (img.ndim() != 3)
    throw DimensionError("im2col_image: expected CxHxW, got " + shape_str(img.shape()));
  const Eigen::Index c = img.shape()[0], h = img.shape()[1], w = img.shape()[2];
  const auto src = detail::patch_sources(h, w);
  ArrayX<S> out = ArrayX<S>::Zero(h * w * 9 * c);
  const auto& v = img.values();
  for (Eigen::Index pos = 0; pos < h * w; ++pos)
    for (Eigen::Index k = 0; k < 9; ++k) {
      const Eigen::Index s = src[pos * 9 + k];
      if (s < 0) continue;
      for (Eigen::Index ch = 0; ch < c; ++ch)
        out[(pos * 9 + k) * c + ch] = v[ch * h * w + s];
    }
  auto fn = [c, h, w, src](TensorNode<S>& nd) {
    auto* p = nd.parents[0].get();
    if (!p->requires_grad) return;
    for (Eigen::Index pos = 0; pos < h * w; ++pos)
      for (Eigen::Index k = 0; k < 9; ++k) {
        const Eigen::Index s = src[pos * 9 + k];
        if (s < 0) continue;
        for (Eigen::Index ch = 0; ch < c; ++ch)
          p->scratch[ch * h * w + s] += nd.scratch[(pos * 9 + k) * c + ch];
      }
  };
  return make_op<S>("im2col_image", {h * w, 9 * c}, std::move(out), {img}, fn);
}

// Same patch extraction for an intermediate position-major feature map
// ((H*W) x C rows) produced by an earlier stage.
template <class S>
Tensor<S> im2col_grid(const Tensor<S>& m, Eigen::Index h, Eigen::Index w) {
  if (m.ndim() != 2 || m.rows() != h * w)
    throw DimensionError("im2col_grid: " + shape_str(m.shape()) + " is not a " +
                         std::to_string(h) + "x" + std::to_string(w) + " grid");
  const Eigen::Index c = m.cols();
  const auto src = detail::patch_sources(h, w);
  ArrayX<S> out = ArrayX<S>::Zero(h * w * 9 * c);
  auto mv = m.matrix();
  auto om = detail::as_mat(out, h * w, 9 * c);
  for (Eigen::Index pos = 0; pos < h * w; ++pos)
    for (Eigen::Index k = 0; k < 9; ++k) {
      const Eigen::Index s = src[pos * 9 + k];
      if (s >= 0) om.row(pos).segment(k * c, c) = mv.row(s);
    }
  auto fn = [c, h, w, src](TensorNode<S>& nd) {
    auto* p = nd.parents[0].get();
    if (!p->requires_grad) return;
    auto g = detail::as_cmat(nd.scratch, h * w, 9 * c);
    auto px = detail::as_mat(p->scratch, h * w, c);
    for (Eigen::Index pos = 0; pos < h * w; ++pos)
      for (Eigen::Index k = 0; k < 9; ++k) {
        const Eigen::Index s = src[pos * 9 + k];
        if (s >= 0) px.row(s) += g.row(pos).segment(k * c, c);
      }
  };
  return make_op<S>("im2col_grid", {h * w, 9 * c}, std::move(out), {m}, fn);
}

// 2x2 average pooling over a position-major (H*W) x C feature map.
template <class S>
Tensor<S> avg_pool_2x2(const Tensor<S>& m, Eigen::Index h, Eigen::Index w) {
  if (m.ndim() != 2 || m.rows() != h * w)
    throw DimensionError("avg_pool_2x2: " + shape_str(m.shape()) + " is not a " +
                         std::to_string(h) + "x" + std::to_string(w) + " grid");
  if (h % 2 != 0 || w % 2 != 0)
    throw DimensionError("avg_pool_2x2: odd grid " + std::to_string(h) + "x" +
                         std::to_string(w));
  const Eigen::Index c = m.cols(), oh = h / 2, ow = w / 2;
  ArrayX<S> out(oh * ow * c);
  auto mv = m.matrix();
  auto om = detail::as_mat(out, oh * ow, c);
  for (Eigen::Index y = 0; y < oh; ++y)
    for (Eigen::Index x = 0; x < ow; ++x)
      om.row(y * ow + x) = (mv.row((2 * y) * w + 2 * x) + mv.row((2 * y) * w + 2 * x + 1) +
                            mv.row((2 * y + 1) * w + 2 * x) +
                            mv.row((2 * y + 1) * w + 2 * x + 1)) /
                           S(4);
  auto fn = [c, h, w, oh, ow](TensorNode<S>& nd) {
    auto* p = nd.parents[0].get();
    if (!p->requires_grad) return;
    auto g = detail::as_cmat(nd.scratch, oh * ow, c);
    auto px = detail::as_mat(p->scratch, h * w, c);
    for (Eigen::Index y = 0; y < oh; ++y)
      for (Eigen::Index x = 0; x < ow; ++x) {
        const auto quarter = g.row(y * ow + x) / S(4);
        px.row((2 * y) * w + 2 * x) += quarter;
        px.row((2 * y) * w + 2 * x + 1) += quarter;
        px.row((2 * y + 1) * w + 2 * x) += quarter;
        px.row((2 * y + 1) * w + 2 * x + 1) += quarter;
      }
  };
  return make_op<S>("avg_pool_2x2", {oh * ow, c}, std::move(out), {m}, fn);
}

}  // namespace deltanet
