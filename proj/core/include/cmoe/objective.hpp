// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cmoe/backbone.hpp"
#include "cmoe/optimizer.hpp"
#include "cmoe/rng.hpp"
#include "cmoe/tasks.hpp"
#include "cmoe/tensor.hpp"

namespace cmoe::harness {

/// Weights of the auxiliary terms in L_CE + lambda*L_KL + eta*L_rec + kappa*L_aux.
struct LossWeights {
  double lambda = 1e-3;
  double eta = 1e-3;
  double kappa = 1e-3;
};

/// Loss terms of one step. Undefined tensors are absent and contribute 0.
struct LossComponents {
  Tensor ce;
  Tensor kl;
  Tensor rec;
  Tensor aux;
};

/// Weighted sum of the present components. A non-finite component raises
/// NumericError naming it.
Tensor total_loss(const LossComponents& parts, const LossWeights& weights);

/// Mean cross-entropy of the answer tokens, each predicted from the position before it.
Tensor answer_cross_entropy(const Tensor& logits, const tasks::Batch& batch);

/// Mean of the per-layer balance losses recorded in a trace.
Tensor mean_aux_loss(const moe::MoeTrace& trace);

/// Every tensor that receives gradient in a forward pass through the active
/// routers: unfrozen experts visible to their layer's router, and trainable routers.
std::vector<Tensor> trainable_parameters(moe::Backbone& model);

struct TrainOptions {
  std::size_t steps = 0;
  std::size_t batch_size = 32;
  double kappa = 1e-3;
  std::string stage = "train";
};

/// Minibatch training on L_CE + kappa*L_aux through the active routers.
/// Batches are drawn with replacement from `examples`. Returns per-step losses.
/// A non-finite loss raises NumericError carrying the stage and step index.
std::vector<double> train_steps(moe::Backbone& model, const tasks::TaskSpec& spec,
                                std::span<const std::vector<std::size_t>> examples, const TrainOptions& options,
                                AdamW& optimizer, Rng& rng);

/// Mean answer cross-entropy over the given examples, without gradient.
double evaluate_loss(moe::Backbone& model, const tasks::TaskSpec& spec,
                     std::span<const std::vector<std::size_t>> examples, std::size_t batch_size = 128);

}  // namespace cmoe::harness
