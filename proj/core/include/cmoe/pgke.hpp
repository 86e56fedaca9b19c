// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "cmoe/backbone.hpp"
#include "cmoe/objective.hpp"
#include "cmoe/optimizer.hpp"
#include "cmoe/rng.hpp"
#include "cmoe/tasks.hpp"

/// Probe-guided expert growth. A new task first trains temporary probe
/// experts next to the frozen group; layers whose probes end up heavily used
/// get permanent copies of their busiest probe.
namespace cmoe::pgke {

enum class ActivationMetric { kTopkFrequency, kMeanGateProbability };

std::string_view metric_name(ActivationMetric m);
ActivationMetric parse_metric(std::string_view name);

struct ProbeConfig {
  double alpha = 0.8;
  double probe_fraction = 0.10;
  std::size_t n_probes_per_layer = 2;
  std::size_t probe_steps = 100;
  ActivationMetric activation_metric = ActivationMetric::kTopkFrequency;
  std::size_t n_new_experts_cap = 2;

  /// Throws ConfigError on out-of-range fields.
  void validate() const;
};

struct ProbeSplit {
  std::vector<std::size_t> train;  // indices into the task dataset
  std::vector<std::size_t> eval;
};

/// Two disjoint subsets of ceil(fraction * n) indices each, from a seeded shuffle.
ProbeSplit split_probe_data(std::size_t n, double fraction, Rng& rng);

/// Bookkeeping for the probe phase of one task.
struct ProbeHandles {
  int task = 0;
  std::vector<std::size_t> old_counts;                // experts per layer before attach
  std::vector<std::vector<std::size_t>> probe_indices;  // per layer
  moe::RouterSet previous;                            // task i-1 routers, untouched copies
};

/// Freezes every existing expert, appends n_probes_per_layer average-initialized
/// probes per layer and activates routers derived from `previous`.
ProbeHandles attach_probes(moe::Backbone& model, const moe::RouterSet& previous, const ProbeConfig& config, int task,
                           Rng& rng);

/// Trains probes and probe routers on L_CE + kappa*L_aux. `optimizer` should
/// be fresh; every trainable tensor is registered with it. Returns step losses.
std::vector<double> train_probes(moe::Backbone& model, const tasks::TaskSpec& spec,
                                 std::span<const std::vector<std::size_t>> x_train, const ProbeConfig& config,
                                 const harness::TrainOptions& options, AdamW& optimizer, Rng& rng);

struct LayerActivation {
  std::vector<double> act;  // per expert, under the configured metric
  std::vector<double> topk_frequency;
  std::vector<double> mean_gate_probability;
  std::vector<std::size_t> probe_indices;
  double threshold = 0.0;
  bool selected = false;
  std::size_t n_selected = 0;
  std::size_t copy_source = 0;  // busiest probe; meaningful when selected
};

/// One entry per layer.
using ActivationReport = std::vector<LayerActivation>;

/// Measures both metrics over every token of x_eval in one pass and fills
/// the threshold and selection fields for the configured metric.
ActivationReport activation_stats(moe::Backbone& model, const ProbeHandles& handles, const tasks::TaskSpec& spec,
                                  std::span<const std::vector<std::size_t>> x_eval, const ProbeConfig& config);

/// mean(act) - alpha * std(act), population std.
double expansion_threshold(std::span<const double> act, double alpha);

struct LayerPlan {
  std::size_t layer = 0;
  std::size_t n_new = 0;
  std::size_t copy_source = 0;  // layer-local index of the probe to copy
};

struct ExpansionPlan {
  std::vector<LayerPlan> layers;  // expanded layers only, ascending
  bool empty() const { return layers.empty(); }
  std::size_t expanded_layers() const { return layers.size(); }
};

/// Probes with act strictly above the layer threshold, capped; recomputed
/// from act and probe_indices alone.
ExpansionPlan select_expansion(const ActivationReport& report, const ProbeConfig& config);

/// The counterfactual that adds `cap` experts to every layer.
ExpansionPlan every_layer_plan(const ActivationReport& report, std::size_t cap);

struct ParamCounts {
  std::size_t added = 0;        // new expert weights plus the task's router snapshot
  std::size_t every_layer = 0;  // same for the every-layer plan
  double ratio() const { return every_layer == 0 ? 0.0 : static_cast<double>(added) / every_layer; }
};

/// Parameters a plan adds on top of the previous routers.
ParamCounts plan_parameters(const ExpansionPlan& plan, const moe::RouterSet& previous, const moe::Backbone& model,
                            std::size_t cap);

/// Removes probes, appends copies of the chosen probes, derives the task
/// routers and fine-tunes with every older expert frozen. `optimizer` should be
/// fresh. Returns the frozen task routers.
moe::RouterSet expand_and_finetune(moe::Backbone& model, const ProbeHandles& handles, const ExpansionPlan& plan,
                                   const tasks::TaskSpec& spec, std::span<const std::vector<std::size_t>> x_task,
                                   const harness::TrainOptions& options, AdamW& optimizer, Rng& rng);

/// Everything the probe phase of one task decided.
struct ExpansionReport {
  int task = 0;
  double alpha = 0.8;
  ActivationMetric metric = ActivationMetric::kTopkFrequency;
  std::size_t cap = 0;
  ActivationReport layers;
  ExpansionPlan plan;
  ParamCounts params;
  std::size_t expert_params_before = 0;
  std::size_t expert_params_after = 0;
};

}  // namespace cmoe::pgke
