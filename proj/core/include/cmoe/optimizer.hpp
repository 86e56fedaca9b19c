// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "cmoe/tensor.hpp"

namespace cmoe {

struct AdamWConfig {
  double learning_rate = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
};

/// Adam with decoupled weight decay and bias correction.
///
/// Moment buffers are created for exactly the tensors passed to add(); a
/// parameter that is frozen after registration is skipped by step() and never
/// changes.
class AdamW {
 public:
  struct Slot {
    Tensor param;
    std::vector<double> m;
    std::vector<double> v;
  };

  explicit AdamW(AdamWConfig config) : config_(config) {}

  /// Registers a trainable parameter. Registering twice is a no-op.
  void add(const Tensor& param);

  /// Applies one update to every registered trainable parameter and clears
  /// the gradients. Throws ContractError naming the first parameter that has
  /// no gradient.
  void step();

  /// Clears gradients of all registered parameters without updating.
  void zero_grad();

  const AdamWConfig& config() const noexcept { return config_; }
  std::uint64_t step_count() const noexcept { return step_count_; }
  const std::vector<Slot>& slots() const noexcept { return slots_; }

  /// Restores serialized state; slot order must match registration order.
  void restore(std::uint64_t step_count, std::vector<Slot> slots);

 private:
  AdamWConfig config_;
  std::uint64_t step_count_ = 0;
  std::vector<Slot> slots_;
};

}  // namespace cmoe
