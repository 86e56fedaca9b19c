// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "cmoe/objective.hpp"

#include <cmath>

#include "cmoe/error.hpp"
#include "cmoe/ops.hpp"

namespace cmoe::harness {

Tensor total_loss(const LossComponents& parts, const LossWeights& weights) {
  struct Term {
    const char* name;
    const Tensor* value;
    double weight;
  };
  const Term terms[] = {{"L_CE", &parts.ce, 1.0},
                        {"L_KL", &parts.kl, weights.lambda},
                        {"L_rec", &parts.rec, weights.eta},
                        {"L_aux", &parts.aux, weights.kappa}};
  for (const Term& t : terms) {
    if (!std::isfinite(t.weight) || t.weight < 0.0) {
      throw ConfigError(std::string("total_loss: weight of ") + t.name + " must be finite and non-negative");
    }
  }
  Tensor total;
  for (const Term& t : terms) {
    if (!t.value->defined()) continue;
    if (t.value->numel() != 1) throw ContractError(std::string("total_loss: ") + t.name + " is not a scalar");
    if (!std::isfinite(t.value->item())) throw NumericError(std::string("total_loss: non-finite ") + t.name);
    Tensor term = t.weight == 1.0 ? *t.value : ops::scale(*t.value, t.weight);
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total.defined() ? total : Tensor::scalar(0.0);
}

Tensor answer_cross_entropy(const Tensor& logits, const tasks::Batch& batch) {
  std::vector<std::size_t> rows, targets;
  for (std::size_t i = 0; i < batch.tokens.size(); ++i) {
    if (!batch.loss_mask[i]) continue;
    if (i % batch.seq == 0) throw ContractError("answer position 0 has no preceding token");
    rows.push_back(i - 1);
    targets.push_back(batch.tokens[i]);
  }
  if (rows.empty()) throw ContractError("batch has no answer positions");
  const std::size_t vocab = logits.dim(logits.rank() - 1);
  Tensor flat = ops::reshape(logits, {batch.batch * batch.seq, vocab});
  return ops::cross_entropy(ops::gather_rows(flat, rows), targets);
}

Tensor mean_aux_loss(const moe::MoeTrace& trace) {
  if (trace.aux_losses.empty()) return Tensor();
  Tensor acc = trace.aux_losses.front();
  for (std::size_t i = 1; i < trace.aux_losses.size(); ++i) acc = ops::add(acc, trace.aux_losses[i]);
  return ops::scale(acc, 1.0 / static_cast<double>(trace.aux_losses.size()));
}

std::vector<Tensor> trainable_parameters(moe::Backbone& model) {
  std::vector<Tensor> out;
  for (std::size_t h = 0; h < model.n_layers(); ++h) {
    moe::MoeLayer& layer = model.layer(h);
    if (!layer.has_router()) continue;
    const std::size_t visible = layer.active_router().visible_experts();
    for (std::size_t e = 0; e < visible && e < layer.size(); ++e) {
      const moe::LoraExpert& ex = layer.experts()[e];
      if (ex.frozen) continue;
      out.push_back(ex.A);
      out.push_back(ex.B);
    }
    if (layer.active_router().G.requires_grad()) out.push_back(layer.active_router().G);
  }
  return out;
}

std::vector<double> train_steps(moe::Backbone& model, const tasks::TaskSpec& spec,
                                std::span<const std::vector<std::size_t>> examples, const TrainOptions& options,
                                AdamW& optimizer, Rng& rng) {
  if (options.steps > 0 && examples.empty()) throw ContractError(options.stage + ": no training examples");
  std::vector<double> losses;
  losses.reserve(options.steps);
  LossWeights weights;
  weights.kappa = options.kappa;
  std::vector<std::vector<std::size_t>> picked(options.batch_size);
  for (std::size_t step = 0; step < options.steps; ++step) {
    for (auto& ex : picked) ex = examples[rng.index(examples.size())];
    tasks::Batch batch = tasks::make_batch(spec, picked);
    moe::MoeTrace trace;
    trace.want_aux = options.kappa > 0.0;
    Tensor logits = model.forward(batch.view(), &trace);
    LossComponents parts;
    parts.ce = answer_cross_entropy(logits, batch);
    parts.aux = mean_aux_loss(trace);
    Tensor loss;
    try {
      loss = total_loss(parts, weights);
    } catch (const NumericError& e) {
      throw NumericError(options.stage + ": step " + std::to_string(step) + ": " + e.what());
    }
    backward(loss);
    optimizer.step();
    losses.push_back(loss.item());
  }
  return losses;
}

double evaluate_loss(moe::Backbone& model, const tasks::TaskSpec& spec,
                     std::span<const std::vector<std::size_t>> examples, std::size_t batch_size) {
  if (examples.empty()) throw ContractError("evaluate_loss: no examples");
  double total = 0.0;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, examples.size() - start);
    tasks::Batch batch = tasks::make_batch(spec, examples.subspan(start, count));
    Tensor logits = model.forward(batch.view());
    total += answer_cross_entropy(logits, batch).item() * static_cast<double>(count);
  }
  return total / static_cast<double>(examples.size());
}

}  // namespace cmoe::harness
