// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "cmoe/optimizer.hpp"

#include <cmath>

#include "cmoe/error.hpp"

namespace cmoe {

void AdamW::add(const Tensor& param) {
  if (!param.defined()) throw ContractError("AdamW::add: undefined parameter");
  if (!param.is_leaf()) throw ContractError("AdamW::add: '" + param.name() + "' is not a leaf tensor");
  for (const Slot& s : slots_) {
    if (s.param.same_storage(param)) return;
  }
  slots_.push_back({param, std::vector<double>(param.numel(), 0.0), std::vector<double>(param.numel(), 0.0)});
}

void AdamW::step() {
  for (const Slot& s : slots_) {
    if (s.param.requires_grad() && !s.param.has_grad()) {
      throw ContractError("AdamW::step: parameter '" + s.param.name() + "' has no gradient");
    }
  }
  ++step_count_;
  const double t = static_cast<double>(step_count_);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  const double lr = config_.learning_rate;
  for (Slot& s : slots_) {
    if (!s.param.requires_grad()) continue;
    auto p = s.param.mutable_data();
    auto g = s.param.grad();
    for (std::size_t i = 0; i < p.size(); ++i) {
      s.m[i] = config_.beta1 * s.m[i] + (1.0 - config_.beta1) * g[i];
      s.v[i] = config_.beta2 * s.v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      p[i] -= lr * (mhat / (std::sqrt(vhat) + config_.epsilon) + config_.weight_decay * p[i]);
    }
    s.param.clear_grad();
  }
}

void AdamW::zero_grad() {
  for (Slot& s : slots_) s.param.clear_grad();
}

void AdamW::restore(std::uint64_t step_count, std::vector<Slot> slots) {
  step_count_ = step_count;
  slots_ = std::move(slots);
}

}  // namespace cmoe
