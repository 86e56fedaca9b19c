// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cmoe/moe.hpp"
#include "cmoe/rng.hpp"
#include "cmoe/tensor.hpp"

namespace cmoe::moe {

struct BackboneConfig {
  std::size_t vocab = 64;
  std::size_t d_model = 64;
  std::size_t d_ff = 128;
  std::size_t n_blocks = 4;
  std::size_t max_seq = 16;
  std::size_t lora_rank = 4;
  std::size_t initial_experts = 4;
  std::size_t top_k = 2;
};

/// Token ids laid out row-major as (batch, seq).
struct TokenView {
  std::span<const std::size_t> tokens;
  std::size_t batch = 0;
  std::size_t seq = 0;
};

/// Single-head causal attention block followed by an FFN whose
/// up-projection is a MoeLayer.
struct Block {
  Tensor wq, wk, wv, wo;  // (d, d)
  MoeLayer ffn_up;        // W0: (d_ff, d)
  Tensor w_down;          // (d, d_ff)
};

/// Tiny decoder. Every base weight is frozen at construction; only LoRA
/// experts and routers ever train.
class Backbone {
 public:
  Backbone(const BackboneConfig& config, Rng& rng);

  const BackboneConfig& config() const noexcept { return config_; }
  std::size_t n_layers() const noexcept { return blocks_.size(); }
  MoeLayer& layer(std::size_t h) { return blocks_.at(h).ffn_up; }
  const MoeLayer& layer(std::size_t h) const { return blocks_.at(h).ffn_up; }

  /// Installs one router per layer.
  void activate(const RouterSet& routers);
  RouterSet active_routers() const;

  /// Logits (batch, seq, vocab) through the active routers and experts.
  Tensor forward(TokenView input, MoeTrace* trace = nullptr);

  /// Final-block hidden state at the last position of each sequence, with
  /// every LoRA expert bypassed. Returns (batch, d_model) row-major.
  std::vector<double> last_token_features(TokenView input) const;

  /// All frozen base tensors, in a fixed order.
  std::vector<Tensor> base_parameters() const;
  std::uint64_t base_hash() const;
  /// Hash over base weights and every expert's weights.
  std::uint64_t model_hash() const;

  /// Deep copy of base weights and experts. Routers are cloned too.
  Backbone clone() const;

  std::size_t expert_parameter_count() const;

 private:
  Backbone() = default;
  Tensor embed(TokenView input) const;
  Tensor attention(const Block& block, const Tensor& x, std::size_t batch, std::size_t seq) const;

  BackboneConfig config_;
  Tensor tok_emb_;  // (vocab, d)
  Tensor pos_emb_;  // (max_seq, d)
  std::vector<Block> blocks_;
  Tensor w_out_;  // (vocab, d)
};

}  // namespace cmoe::moe
