// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cmoe/tensor.hpp"

/// Differentiable operations. Every op validates shapes (DimensionError names
/// the op and both shapes), records a backward closure when any input carries
/// gradient, and never computes gradients for frozen inputs.
namespace cmoe::ops {

enum class Transpose { kNo, kYes };

/// a @ b, or a @ b^T with Transpose::kYes.
///   (m,k)   x (k,n)   -> (m,n)
///   (B,m,k) x (k,n)   -> (B,m,n)   weight shared across the batch
///   (B,m,k) x (B,k,n) -> (B,m,n)
Tensor matmul(const Tensor& a, const Tensor& b, Transpose tb = Transpose::kNo);

/// Elementwise a + b. b may also be a trailing suffix of a's shape (bias broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
/// log(1 + e^x), evaluated stably for large |x|.
Tensor softplus(const Tensor& a);

/// Softmax over the last axis. With causal=true on a (B,S,S) tensor, entry
/// (b,i,j) is masked for j > i.
Tensor softmax(const Tensor& a, bool causal = false);

/// Router gating over the last axis of (T,N) logits: keeps the top_k largest
/// entries per row (ties to the lowest index), softmax over those, zero elsewhere.
Tensor topk_softmax(const Tensor& logits, std::size_t top_k);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Sum over the last axis; drops that axis (rank-1 input yields a scalar).
Tensor sum_last(const Tensor& a);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& a, Shape shape);

/// Row gather from a (N,d) table: embedding lookup, and row selection in general.
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows);

/// Mean negative log-likelihood of integer targets under row-wise softmax(logits).
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);

/// Indices of the top_k largest entries of one row, ties to the lowest index,
/// ordered by descending value.
std::vector<std::size_t> topk_indices(std::span<const double> row, std::size_t top_k);

}  // namespace cmoe::ops
