// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "cmoe/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "cmoe/error.hpp"

namespace cmoe::ops {
namespace {

using detail::Node;

Tensor make_result(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                   std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->is_leaf = false;
  for (const Tensor& t : inputs) {
    if (t.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    for (const Tensor& t : inputs) node->parents.push_back(t.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

Tensor make_result_n(Shape shape, std::vector<double> values, std::span<const Tensor> inputs,
                     std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->is_leaf = false;
  for (const Tensor& t : inputs) {
    if (t.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    for (const Tensor& t : inputs) node->parents.push_back(t.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

[[noreturn]] void dim_error(const char* op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
}

void require_finite(const char* op, std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

void require_defined(const char* op, const Tensor& t) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined operand");
}

// C(m,n) += A(m,k) * B(k,n). Each output entry is summed over k in index order
// starting from zero, then added to C, so a zero C gets exactly the naive dot product.
template <std::size_t IB, std::size_t JB>
void gemm_block(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t i,
                std::size_t j, std::size_t k, std::size_t n) {
  double acc[IB][JB] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const double* bp = b + p * n + j;
    for (std::size_t ii = 0; ii < IB; ++ii) {
      const double av = a[(i + ii) * k + p];
      for (std::size_t jj = 0; jj < JB; ++jj) acc[ii][jj] += av * bp[jj];
    }
  }
  for (std::size_t ii = 0; ii < IB; ++ii) {
    for (std::size_t jj = 0; jj < JB; ++jj) c[(i + ii) * n + j + jj] += acc[ii][jj];
  }
}

template <std::size_t IB>
void gemm_rows(const double* a, const double* b, double* c, std::size_t i, std::size_t k, std::size_t n) {
  constexpr std::size_t kJB = 8;
  std::size_t j = 0;
  for (; j + kJB <= n; j += kJB) gemm_block<IB, kJB>(a, b, c, i, j, k, n);
  for (; j < n; ++j) gemm_block<IB, 1>(a, b, c, i, j, k, n);
}

void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  constexpr std::size_t kIB = 4;
  std::size_t i = 0;
  for (; i + kIB <= m; i += kIB) gemm_rows<kIB>(a, b, c, i, k, n);
  for (; i < m; ++i) gemm_rows<1>(a, b, c, i, k, n);
}

std::vector<double> transposed(const double* src, std::size_t rows, std::size_t cols) {
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  }
  return out;
}

// b is either an exact shape match or a trailing suffix of a.
bool is_suffix(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

template <typename Fwd, typename GradA, typename GradB>
Tensor binary_elementwise(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, GradA grad_a, GradB grad_b) {
  require_defined(op, a);
  require_defined(op, b);
  if (!is_suffix(a.shape(), b.shape())) dim_error(op, a, b);
  const std::size_t n = a.numel();
  const std::size_t nb = b.numel();
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i], bd[i % nb]);
  return make_result(a.shape(), std::move(out), {a, b}, [n, nb, grad_a, grad_b](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const auto& g = *self.grad;
    if (pa.requires_grad) {
      auto& ga = pa.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) ga[i] += grad_a(pa.data[i], pb.data[i % nb], g[i]);
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) gb[i % nb] += grad_b(pa.data[i], pb.data[i % nb], g[i]);
    }
  });
}

template <typename Fwd, typename Grad>
Tensor unary_elementwise(const Tensor& a, Fwd fwd, Grad grad) {
  const std::size_t n = a.numel();
  auto ad = a.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i]);
  return make_result(a.shape(), std::move(out), {a}, [n, grad](Node& self) {
    Node& pa = *self.parents[0];
    auto& ga = pa.grad_buffer();
    const auto& g = *self.grad;
    for (std::size_t i = 0; i < n; ++i) ga[i] += grad(pa.data[i], self.data[i], g[i]);
  });
}

double softplus_value(double x) {
  // log1p(exp(x)) overflows for large x; the two branches agree to machine precision.
  return x > 30.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, Transpose tb) {
  require_defined("matmul", a);
  require_defined("matmul", b);
  const bool trans = tb == Transpose::kYes;
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) dim_error("matmul", a, b);

  std::size_t batch = 1, m = 0, k = 0, n = 0;
  bool shared_b = false;
  if (as.size() == 2 && bs.size() == 2) {
    m = as[0];
    k = as[1];
    shared_b = true;
  } else if (as.size() == 3 && bs.size() == 2) {
    // A shared weight treats the batch as extra rows.
    m = as[0] * as[1];
    k = as[2];
    shared_b = true;
  } else if (as.size() == 3 && bs.size() == 3) {
    batch = as[0];
    m = as[1];
    k = as[2];
    if (bs[0] != batch) dim_error("matmul", a, b);
  } else {
    dim_error("matmul", a, b);
  }
  const std::size_t bk = trans ? bs[bs.size() - 1] : bs[bs.size() - 2];
  n = trans ? bs[bs.size() - 2] : bs[bs.size() - 1];
  if (bk != k) dim_error("matmul", a, b);

  Shape out_shape;
  if (as.size() == 2) {
    out_shape = {m, n};
  } else if (shared_b) {
    out_shape = {as[0], as[1], n};
  } else {
    out_shape = {batch, m, n};
  }

  std::vector<double> out(batch * m * n, 0.0);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t s = 0; s < batch; ++s) {
    const double* bsrc = bd.data() + s * k * n;
    std::vector<double> bt;
    if (trans) {
      bt = transposed(bsrc, n, k);
      bsrc = bt.data();
    }
    gemm_acc(ad.data() + s * m * k, bsrc, out.data() + s * m * n, m, k, n);
  }

  return make_result(std::move(out_shape), std::move(out), {a, b}, [batch, m, k, n, trans](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const auto& g = *self.grad;
    for (std::size_t s = 0; s < batch; ++s) {
      const double* gs = g.data() + s * m * n;
      const double* as_ = pa.data.data() + s * m * k;
      const double* bs_ = pb.data.data() + s * k * n;
      if (pa.requires_grad) {
        // dA(m,k) = dC(m,n) * Beff^T(n,k); with trans, Beff^T is b as stored.
        std::vector<double> beff_t;
        const double* bt = bs_;
        if (!trans) {
          beff_t = transposed(bs_, k, n);
          bt = beff_t.data();
        }
        gemm_acc(gs, bt, pa.grad_buffer().data() + s * m * k, m, n, k);
      }
      if (pb.requires_grad) {
        double* gb = pb.grad_buffer().data() + s * k * n;
        if (trans) {
          // d(b)(n,k) = dC^T(n,m) * A(m,k)
          auto gt = transposed(gs, m, n);
          gemm_acc(gt.data(), as_, gb, n, m, k);
        } else {
          // d(b)(k,n) = A^T(k,m) * dC(m,n)
          auto at = transposed(as_, m, k);
          gemm_acc(at.data(), gs, gb, k, m, n);
        }
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double g) { return g; },
      [](double, double, double g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double g) { return g; },
      [](double, double, double g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double g) { return g * y; },
      [](double x, double, double g) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_defined("div", b);
  for (double v : b.data()) {
    if (v == 0.0) throw NumericError("div: division by zero");
  }
  return binary_elementwise(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double g) { return g / y; },
      [](double x, double y, double g) { return -g * x / (y * y); });
}

Tensor scale(const Tensor& a, double factor) {
  require_defined("scale", a);
  return unary_elementwise(
      a, [factor](double x) { return x * factor; }, [factor](double, double, double g) { return g * factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  require_defined("add_scalar", a);
  return unary_elementwise(
      a, [value](double x) { return x + value; }, [](double, double, double g) { return g; });
}

Tensor relu(const Tensor& a) {
  require_defined("relu", a);
  return unary_elementwise(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double, double g) { return x > 0.0 ? g : 0.0; });
}

Tensor exp(const Tensor& a) {
  require_defined("exp", a);
  require_finite("exp", a.data());
  auto out = unary_elementwise(
      a, [](double x) { return std::exp(x); }, [](double, double y, double g) { return g * y; });
  require_finite("exp", out.data());
  return out;
}

Tensor log(const Tensor& a) {
  require_defined("log", a);
  require_finite("log", a.data());
  for (double v : a.data()) {
    if (v <= 0.0) throw NumericError("log: non-positive input");
  }
  return unary_elementwise(
      a, [](double x) { return std::log(x); }, [](double x, double, double g) { return g / x; });
}

Tensor softplus(const Tensor& a) {
  require_defined("softplus", a);
  require_finite("softplus", a.data());
  return unary_elementwise(
      a, [](double x) { return softplus_value(x); }, [](double x, double, double g) { return g * sigmoid(x); });
}

Tensor softmax(const Tensor& a, bool causal) {
  require_defined("softmax", a);
  require_finite("softmax", a.data());
  const Shape& s = a.shape();
  if (s.empty()) throw DimensionError("softmax: scalar input " + shape_str(s));
  if (causal && (s.size() != 3 || s[1] != s[2])) {
    throw DimensionError("softmax: causal mask needs a (B,S,S) input, got " + shape_str(s));
  }
  const std::size_t cols = s.back();
  const std::size_t rows = a.numel() / cols;
  const std::size_t seq = causal ? s[1] : 0;
  auto ad = a.data();
  std::vector<double> out(a.numel(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t width = causal ? (r % seq) + 1 : cols;
    const double* x = ad.data() + r * cols;
    double* y = out.data() + r * cols;
    const double mx = *std::max_element(x, x + width);
    double total = 0.0;
    for (std::size_t j = 0; j < width; ++j) total += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < width; ++j) y[j] /= total;
  }
  return make_result(s, std::move(out), {a}, [rows, cols, seq, causal](Node& self) {
    Node& pa = *self.parents[0];
    auto& ga = pa.grad_buffer();
    const auto& g = *self.grad;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t width = causal ? (r % seq) + 1 : cols;
      const double* y = self.data.data() + r * cols;
      const double* gy = g.data() + r * cols;
      double dot = 0.0;
      for (std::size_t j = 0; j < width; ++j) dot += y[j] * gy[j];
      for (std::size_t j = 0; j < width; ++j) ga[r * cols + j] += y[j] * (gy[j] - dot);
    }
  });
}

std::vector<std::size_t> topk_indices(std::span<const double> row, std::size_t top_k) {
  std::vector<std::size_t> idx(row.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(top_k), idx.end(),
                    [&](std::size_t i, std::size_t j) { return row[i] > row[j] || (row[i] == row[j] && i < j); });
  idx.resize(top_k);
  return idx;
}

Tensor topk_softmax(const Tensor& logits, std::size_t top_k) {
  require_defined("topk_softmax", logits);
  if (logits.rank() != 2) throw DimensionError("topk_softmax: expected (T,N) logits, got " + shape_str(logits.shape()));
  const std::size_t rows = logits.dim(0);
  const std::size_t cols = logits.dim(1);
  if (top_k < 1 || top_k > cols) {
    throw ContractError("topk_softmax: top_k " + std::to_string(top_k) + " not in [1, " + std::to_string(cols) + "]");
  }
  auto ld = logits.data();
  for (double v : ld) {
    if (!std::isfinite(v)) throw NumericError("topk_softmax: non-finite router logits");
  }
  std::vector<double> out(rows * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = ld.subspan(r * cols, cols);
    auto sel = topk_indices(row, top_k);
    const double mx = row[sel.front()];
    double total = 0.0;
    for (std::size_t i : sel) total += (out[r * cols + i] = std::exp(row[i] - mx));
    for (std::size_t i : sel) out[r * cols + i] /= total;
  }
  return make_result(logits.shape(), std::move(out), {logits}, [rows, cols](Node& self) {
    Node& pa = *self.parents[0];
    auto& ga = pa.grad_buffer();
    const auto& g = *self.grad;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * cols;
      const double* gy = g.data() + r * cols;
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += y[j] * gy[j];
      // Unselected entries have y == 0 and receive no gradient.
      for (std::size_t j = 0; j < cols; ++j) ga[r * cols + j] += y[j] * (gy[j] - dot);
    }
  });
}

Tensor sum(const Tensor& a) {
  require_defined("sum", a);
  double total = 0.0;
  for (double v : a.data()) total += v;
  const std::size_t n = a.numel();
  return make_result({}, {total}, {a}, [n](Node& self) {
    auto& ga = self.parents[0]->grad_buffer();
    const double g = (*self.grad)[0];
    for (std::size_t i = 0; i < n; ++i) ga[i] += g;
  });
}

Tensor mean(const Tensor& a) {
  require_defined("mean", a);
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_last(const Tensor& a) {
  require_defined("sum_last", a);
  if (a.rank() == 0) throw DimensionError("sum_last: scalar input");
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.numel() / cols;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  auto ad = a.data();
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) out[r] += ad[r * cols + j];
  }
  return make_result(std::move(out_shape), std::move(out), {a}, [rows, cols](Node& self) {
    auto& ga = self.parents[0]->grad_buffer();
    const auto& g = *self.grad;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < cols; ++j) ga[r * cols + j] += g[r];
    }
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  for (const Tensor& t : parts) require_defined("concat", t);
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
  std::size_t total_axis = 0;
  for (const Tensor& t : parts) {
    const Shape& s = t.shape();
    if (s.size() != first.size()) dim_error("concat", parts.front(), t);
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) dim_error("concat", parts.front(), t);
    }
    total_axis += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];

  Shape out_shape = first;
  out_shape[axis] = total_axis;
  const std::size_t out_row = total_axis * inner;
  std::vector<double> out(outer * out_row);
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const Tensor& t : parts) {
    const std::size_t w = t.shape()[axis] * inner;
    auto td = t.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(td.data() + o * w, w, out.data() + o * out_row + offset);
    }
    widths.push_back(w);
    offset += w;
  }
  return make_result_n(std::move(out_shape), std::move(out), parts, [outer, out_row, widths](Node& self) {
    const auto& g = *self.grad;
    std::size_t off = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      Node& pn = *self.parents[p];
      const std::size_t w = widths[p];
      if (pn.requires_grad) {
        auto& gp = pn.grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t j = 0; j < w; ++j) gp[o * w + j] += g[o * out_row + off + j];
        }
      }
      off += w;
    }
  });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  require_defined("slice", a);
  const Shape& s = a.shape();
  if (axis >= s.size()) throw DimensionError("slice: axis out of range for " + shape_str(s));
  if (begin >= end || end > s[axis]) {
    throw IndexError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                     shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t in_row = s[axis] * inner;
  const std::size_t out_w = (end - begin) * inner;
  const std::size_t off = begin * inner;
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  auto ad = a.data();
  std::vector<double> out(outer * out_w);
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(ad.data() + o * in_row + off, out_w, out.data() + o * out_w);
  return make_result(std::move(out_shape), std::move(out), {a}, [outer, in_row, out_w, off](Node& self) {
    auto& ga = self.parents[0]->grad_buffer();
    const auto& g = *self.grad;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < out_w; ++j) ga[o * in_row + off + j] += g[o * out_w + j];
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined("reshape", a);
  if (shape_numel(shape) != a.numel() || shape.size() > kMaxRank) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  auto ad = a.data();
  const std::size_t n = a.numel();
  return make_result(std::move(shape), std::vector<double>(ad.begin(), ad.end()), {a}, [n](Node& self) {
    auto& ga = self.parents[0]->grad_buffer();
    const auto& g = *self.grad;
    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows) {
  require_defined("gather_rows", table);
  if (table.rank() != 2) throw DimensionError("gather_rows: expected (N,d) table, got " + shape_str(table.shape()));
  if (rows.empty()) throw ContractError("gather_rows: empty index list");
  const std::size_t n = table.dim(0);
  const std::size_t d = table.dim(1);
  auto td = table.data();
  std::vector<double> out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) {
      throw IndexError("gather_rows: row " + std::to_string(rows[i]) + " out of range " + std::to_string(n));
    }
    std::copy_n(td.data() + rows[i] * d, d, out.data() + i * d);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make_result({rows.size(), d}, std::move(out), {table}, [idx = std::move(idx), d](Node& self) {
    auto& ga = self.parents[0]->grad_buffer();
    const auto& g = *self.grad;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) ga[idx[i] * d + j] += g[i * d + j];
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  require_defined("cross_entropy", logits);
  if (logits.rank() != 2) {
    throw DimensionError("cross_entropy: expected (N,V) logits, got " + shape_str(logits.shape()));
  }
  const std::size_t rows = logits.dim(0);
  const std::size_t cols = logits.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         shape_str(logits.shape()));
  }
  require_finite("cross_entropy", logits.data());
  auto ld = logits.data();
  std::vector<double> probs(rows * cols);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= cols) throw IndexError("cross_entropy: target " + std::to_string(targets[r]) + " >= " +
                                             std::to_string(cols));
    const double* x = ld.data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += (probs[r * cols + j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < cols; ++j) probs[r * cols + j] /= z;
    total -= x[targets[r]] - mx - std::log(z);
  }
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return make_result({}, {total / static_cast<double>(rows)}, {logits},
                     [probs = std::move(probs), tgt = std::move(tgt), rows, cols](Node& self) {
                       auto& ga = self.parents[0]->grad_buffer();
                       const double g = (*self.grad)[0] / static_cast<double>(rows);
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t j = 0; j < cols; ++j) {
                           const double onehot = j == tgt[r] ? 1.0 : 0.0;
                           ga[r * cols + j] += g * (probs[r * cols + j] - onehot);
                         }
                       }
                     });
}

}  // namespace cmoe::ops
