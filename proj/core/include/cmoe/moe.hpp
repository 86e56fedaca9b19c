// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cmoe/rng.hpp"
#include "cmoe/tensor.hpp"

namespace cmoe::moe {

/// Low-rank adapter expert: contributes B * (A * x).
struct LoraExpert {
  Tensor A;  // (r, d_in)
  Tensor B;  // (d_out, r)
  bool frozen = false;
  int origin_task = 0;
  std::uint64_t selection_count = 0;

  std::size_t rank() const { return A.dim(0); }
  void set_frozen(bool on);
  /// Hash of A and B values; stable iff the weights are bitwise unchanged.
  std::uint64_t weight_hash() const;
  std::size_t parameter_count() const { return A.numel() + B.numel(); }
};

/// Top-k gating network. Row e of G scores expert e; only the first
/// visible_experts() experts of a layer are reachable through this router.
struct Router {
  Tensor G;  // (N_e, d_in)
  std::size_t top_k = 2;
  int owner_task = 0;

  std::size_t visible_experts() const { return G.dim(0); }
  void set_frozen(bool on);
  Router clone() const;
};

/// One router per MoE layer: the routing state that belongs to one task.
using RouterSet = std::vector<Router>;

RouterSet clone_routers(const RouterSet& routers);
void freeze_routers(RouterSet& routers);

/// Gate vector for a single token: softmax over the top-k logits of G*x,
/// zero elsewhere, ties broken toward the lower expert index.
std::vector<double> route(const Router& router, std::span<const double> x);

/// Switch-style balance loss N_e * sum_i f_i * P_i.
///
/// router_probs is the (T, N_e) full softmax of the router logits (gradient
/// flows through it); f_i is selection_counts[i] normalized by the total.
Tensor aux_balance_loss(const Tensor& router_probs, std::span<const double> selection_counts);

/// Per-expert accumulators filled while measurement is on.
struct GateStats {
  std::vector<double> selections;  // top-k membership counts
  std::vector<double> prob_sum;    // summed full-softmax probabilities
  std::uint64_t tokens = 0;

  void resize(std::size_t n_experts);
  void merge(const GateStats& other);
};

/// Collects per-layer side outputs of a forward pass.
struct MoeTrace {
  bool want_aux = false;
  bool measure = false;
  std::vector<Tensor> aux_losses;
  std::vector<GateStats> stats;  // indexed by layer
};

struct ExpertInit {
  enum class Kind { kCopyOf, kAverage, kZeroB, kWeights };
  Kind kind = Kind::kZeroB;
  std::size_t source = 0;
  Tensor A, B;  // kWeights only; copied, never aliased

  static ExpertInit copy_of(std::size_t index) { return {Kind::kCopyOf, index, {}, {}}; }
  static ExpertInit average() { return {Kind::kAverage, 0, {}, {}}; }
  static ExpertInit zero_b() { return {Kind::kZeroB, 0, {}, {}}; }
  /// Weights captured elsewhere, e.g. from an expert that has since been removed.
  static ExpertInit from_weights(Tensor a, Tensor b) { return {Kind::kWeights, 0, std::move(a), std::move(b)}; }
};

/// Feed-forward up-projection W0 adapted by an append-only group of LoRA experts.
class MoeLayer {
 public:
  MoeLayer(Tensor w0, std::size_t lora_rank, std::string name);

  const Tensor& base_weight() const { return w0_; }
  std::size_t d_in() const { return w0_.dim(1); }
  std::size_t d_out() const { return w0_.dim(0); }
  std::size_t lora_rank() const { return rank_; }
  const std::string& name() const { return name_; }

  std::vector<LoraExpert>& experts() { return experts_; }
  const std::vector<LoraExpert>& experts() const { return experts_; }
  std::size_t size() const { return experts_.size(); }

  Router& active_router() { return router_; }
  const Router& active_router() const { return router_; }
  bool has_router() const { return router_.G.defined(); }
  void activate(const Router& router);

  /// x: (T, d_in) -> (T, d_out) = x W0^T + sum_i gate_i B_i A_i x, per token.
  Tensor forward(const Tensor& x, MoeTrace* trace = nullptr, std::size_t layer_index = 0);
  /// Base path only: x W0^T.
  Tensor forward_base(const Tensor& x) const;

  /// Appends n experts tagged with task; returns their indices.
  std::vector<std::size_t> append_experts(std::size_t n, ExpertInit init, int task, Rng& rng);
  /// Drops trailing experts so that n remain.
  void truncate_experts(std::size_t n);
  /// Sets the frozen flag on every expert matching the predicate.
  void freeze_experts(const std::function<bool(const LoraExpert&)>& predicate);
  void reset_selection_counts();

  std::size_t expert_parameter_count() const;

 private:
  Tensor w0_;
  std::size_t rank_;
  std::string name_;
  std::vector<LoraExpert> experts_;
  Router router_;
};

/// New router whose first rows copy prev.G and whose extra rows are drawn
/// from U(-1/sqrt(d_in), 1/sqrt(d_in)). The result is trainable.
Router derive_router(const Router& prev, std::size_t extra_rows, int task, Rng& rng);

/// Fresh router for a group of n experts.
Router make_router(std::size_t n_experts, std::size_t d_in, std::size_t top_k, int task, Rng& rng);

}  // namespace cmoe::moe
