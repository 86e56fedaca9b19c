// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "cmoe/pgke.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "cmoe/error.hpp"

namespace cmoe::pgke {

std::string_view metric_name(ActivationMetric m) {
  return m == ActivationMetric::kTopkFrequency ? "topk-frequency" : "mean-gate-probability";
}

ActivationMetric parse_metric(std::string_view name) {
  if (name == "topk-frequency") return ActivationMetric::kTopkFrequency;
  if (name == "mean-gate-probability") return ActivationMetric::kMeanGateProbability;
  throw ConfigError("unknown activation metric '" + std::string(name) + "'");
}

void ProbeConfig::validate() const {
  if (!std::isfinite(alpha) || alpha < 0.0) throw ConfigError("probe.alpha must be finite and >= 0");
  if (!(probe_fraction > 0.0 && probe_fraction < 1.0)) throw ConfigError("probe.probe_fraction must lie in (0, 1)");
  if (n_probes_per_layer < 1) throw ConfigError("probe.n_probes_per_layer must be >= 1");
  if (n_new_experts_cap < 1) throw ConfigError("probe.n_new_experts_cap must be >= 1");
}

ProbeSplit split_probe_data(std::size_t n, double fraction, Rng& rng) {
  if (n < 2) throw ContractError("split_probe_data: need at least 2 examples");
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("split_probe_data: fraction must lie in (0, 1)");
  const auto take = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
  if (2 * take > n) {
    throw ConfigError("split_probe_data: two subsets of " + std::to_string(take) + " do not fit in " +
                      std::to_string(n) + " examples");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Fisher-Yates on our own engine so the permutation is the same everywhere.
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);
  ProbeSplit split;
  split.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take));
  split.eval.assign(order.begin() + static_cast<std::ptrdiff_t>(take),
                    order.begin() + static_cast<std::ptrdiff_t>(2 * take));
  return split;
}

ProbeHandles attach_probes(moe::Backbone& model, const moe::RouterSet& previous, const ProbeConfig& config, int task,
                           Rng& rng) {
  config.validate();
  if (previous.size() != model.n_layers()) throw StructuralError("attach_probes: router set does not match layers");
  ProbeHandles handles;
  handles.task = task;
  handles.previous = moe::clone_routers(previous);
  moe::RouterSet probe_routers;
  for (std::size_t h = 0; h < model.n_layers(); ++h) {
    moe::MoeLayer& layer = model.layer(h);
    if (previous[h].visible_experts() != layer.size()) {
      throw StructuralError("attach_probes: layer " + std::to_string(h) + " router sees " +
                            std::to_string(previous[h].visible_experts()) + " of " + std::to_string(layer.size()) +
                            " experts");
    }
    layer.freeze_experts([](const moe::LoraExpert&) { return true; });
    handles.old_counts.push_back(layer.size());
    handles.probe_indices.push_back(layer.append_experts(config.n_probes_per_layer, moe::ExpertInit::average(), task, rng));
    probe_routers.push_back(moe::derive_router(previous[h], config.n_probes_per_layer, task, rng));
    probe_routers.back().G.set_name(layer.name() + ".probe_router.task" + std::to_string(task));
  }
  model.activate(probe_routers);
  return handles;
}

std::vector<double> train_probes(moe::Backbone& model, const tasks::TaskSpec& spec,
                                 std::span<const std::vector<std::size_t>> x_train, const ProbeConfig& config,
                                 const harness::TrainOptions& options, AdamW& optimizer, Rng& rng) {
  harness::TrainOptions opts = options;
  opts.steps = config.probe_steps;
  for (const Tensor& p : harness::trainable_parameters(model)) optimizer.add(p);
  return harness::train_steps(model, spec, x_train, opts, optimizer, rng);
}

double expansion_threshold(std::span<const double> act, double alpha) {
  if (act.empty()) throw ContractError("expansion_threshold: empty activation vector");
  const double n = static_cast<double>(act.size());
  double mean = 0.0;
  for (double a : act) mean += a;
  mean /= n;
  double var = 0.0;
  for (double a : act) var += (a - mean) * (a - mean);
  return mean - alpha * std::sqrt(var / n);
}

namespace {

struct LayerDecision {
  double threshold = 0.0;
  std::size_t n_selected = 0;
  std::size_t copy_source = 0;
};

LayerDecision decide(const std::vector<double>& act, const std::vector<std::size_t>& probes, double alpha,
                     std::size_t cap) {
  LayerDecision d;
  d.threshold = expansion_threshold(act, alpha);
  std::size_t above = 0;
  bool have_best = false;
  for (std::size_t p : probes) {
    if (p >= act.size()) throw StructuralError("activation report names probe " + std::to_string(p) + " out of range");
    if (act[p] > d.threshold) ++above;
    // Busiest probe overall; ties go to the lower index.
    if (!have_best || act[p] > act[d.copy_source]) {
      d.copy_source = p;
      have_best = true;
    }
  }
  d.n_selected = std::min(above, cap);
  return d;
}

}  // namespace

ActivationReport activation_stats(moe::Backbone& model, const ProbeHandles& handles, const tasks::TaskSpec& spec,
                                  std::span<const std::vector<std::size_t>> x_eval, const ProbeConfig& config) {
  if (x_eval.empty()) throw ContractError("activation_stats: empty evaluation subset");
  moe::MoeTrace trace;
  trace.measure = true;
  constexpr std::size_t kChunk = 128;
  for (std::size_t start = 0; start < x_eval.size(); start += kChunk) {
    const std::size_t count = std::min(kChunk, x_eval.size() - start);
    tasks::Batch batch = tasks::make_batch(spec, x_eval.subspan(start, count));
    model.forward(batch.view(), &trace);
  }
  ActivationReport report(model.n_layers());
  for (std::size_t h = 0; h < model.n_layers(); ++h) {
    const moe::GateStats& st = trace.stats.at(h);
    LayerActivation& la = report[h];
    const double total = std::accumulate(st.selections.begin(), st.selections.end(), 0.0);
    for (std::size_t e = 0; e < st.selections.size(); ++e) {
      la.topk_frequency.push_back(st.selections[e] / total);
      la.mean_gate_probability.push_back(st.prob_sum[e] / static_cast<double>(st.tokens));
    }
    la.act = config.activation_metric == ActivationMetric::kTopkFrequency ? la.topk_frequency
                                                                          : la.mean_gate_probability;
    la.probe_indices = handles.probe_indices.at(h);
    const LayerDecision d = decide(la.act, la.probe_indices, config.alpha, config.n_new_experts_cap);
    la.threshold = d.threshold;
    la.n_selected = d.n_selected;
    la.selected = d.n_selected > 0;
    la.copy_source = d.copy_source;
  }
  return report;
}

ExpansionPlan select_expansion(const ActivationReport& report, const ProbeConfig& config) {
  ExpansionPlan plan;
  for (std::size_t h = 0; h < report.size(); ++h) {
    const LayerDecision d = decide(report[h].act, report[h].probe_indices, config.alpha, config.n_new_experts_cap);
    if (d.n_selected > 0) plan.layers.push_back({h, d.n_selected, d.copy_source});
  }
  return plan;
}

ExpansionPlan every_layer_plan(const ActivationReport& report, std::size_t cap) {
  ExpansionPlan plan;
  for (std::size_t h = 0; h < report.size(); ++h) {
    const LayerDecision d = decide(report[h].act, report[h].probe_indices, 0.0, cap);
    plan.layers.push_back({h, cap, d.copy_source});
  }
  return plan;
}

ParamCounts plan_parameters(const ExpansionPlan& plan, const moe::RouterSet& previous, const moe::Backbone& model,
                            std::size_t cap) {
  ParamCounts counts;
  std::vector<std::size_t> n_new(model.n_layers(), 0);
  for (const LayerPlan& lp : plan.layers) {
    if (lp.layer >= model.n_layers()) throw StructuralError("plan names unknown layer " + std::to_string(lp.layer));
    n_new[lp.layer] = lp.n_new;
  }
  for (std::size_t h = 0; h < model.n_layers(); ++h) {
    const moe::MoeLayer& layer = model.layer(h);
    const std::size_t expert = layer.lora_rank() * (layer.d_in() + layer.d_out());
    const std::size_t prev_rows = previous.at(h).visible_experts();
    counts.added += n_new[h] * expert + (prev_rows + n_new[h]) * layer.d_in();
    counts.every_layer += cap * expert + (prev_rows + cap) * layer.d_in();
  }
  return counts;
}

moe::RouterSet expand_and_finetune(moe::Backbone& model, const ProbeHandles& handles, const ExpansionPlan& plan,
                                   const tasks::TaskSpec& spec, std::span<const std::vector<std::size_t>> x_task,
                                   const harness::TrainOptions& options, AdamW& optimizer, Rng& rng) {
  std::vector<const LayerPlan*> by_layer(model.n_layers(), nullptr);
  for (const LayerPlan& lp : plan.layers) {
    if (lp.layer >= model.n_layers()) throw StructuralError("plan names unknown layer " + std::to_string(lp.layer));
    by_layer[lp.layer] = &lp;
  }
  moe::RouterSet routers;
  for (std::size_t h = 0; h < model.n_layers(); ++h) {
    moe::MoeLayer& layer = model.layer(h);
    const LayerPlan* lp = by_layer[h];
    Tensor a, b;
    if (lp) {
      const auto& probes = handles.probe_indices.at(h);
      if (std::find(probes.begin(), probes.end(), lp->copy_source) == probes.end()) {
        throw StructuralError("layer " + std::to_string(h) + ": copy source " + std::to_string(lp->copy_source) +
                              " is not a probe");
      }
      a = layer.experts()[lp->copy_source].A.clone();
      b = layer.experts()[lp->copy_source].B.clone();
    }
    layer.truncate_experts(handles.old_counts.at(h));
    const std::size_t n_new = lp ? lp->n_new : 0;
    if (n_new > 0) layer.append_experts(n_new, moe::ExpertInit::from_weights(a, b), handles.task, rng);
    routers.push_back(moe::derive_router(handles.previous.at(h), n_new, handles.task, rng));
    routers.back().G.set_name(layer.name() + ".router.task" + std::to_string(handles.task));
  }
  for (std::size_t h = 0; h < model.n_layers(); ++h) {
    model.layer(h).freeze_experts([&](const moe::LoraExpert& e) { return e.origin_task < handles.task; });
  }
  model.activate(routers);
  for (const Tensor& p : harness::trainable_parameters(model)) optimizer.add(p);
  harness::train_steps(model, spec, x_task, options, optimizer, rng);

  for (std::size_t h = 0; h < model.n_layers(); ++h) {
    model.layer(h).freeze_experts([](const moe::LoraExpert&) { return true; });
  }
  // Frozen in place: the returned set shares storage with the active routers.
  moe::RouterSet out = model.active_routers();
  moe::freeze_routers(out);
  return out;
}

}  // namespace cmoe::pgke
