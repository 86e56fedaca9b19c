// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cmoe/backbone.hpp"
#include "cmoe/objective.hpp"
#include "cmoe/optimizer.hpp"
#include "cmoe/pgke.hpp"
#include "cmoe/ptl.hpp"
#include "cmoe/tasks.hpp"

namespace cmoe::harness {

inline constexpr int kManifestSchemaVersion = 1;
inline constexpr const char* kArtifactVersion = "0.1.0";

enum class RoutingMode { kPtl, kOracle, kLast, kRandom, kShared };

std::string_view routing_name(RoutingMode m);
RoutingMode parse_routing(std::string_view name);
/// Comma-separated list, e.g. "ptl,oracle,shared". Duplicates are an error.
std::vector<RoutingMode> parse_routing_list(std::string_view list);

/// Which layers grow on tasks after the first.
enum class ExpansionStrategy {
  kAdaptive,    // probe-guided plan
  kEveryLayer,  // cap experts on every layer
  kRandom,      // as many layers as the adaptive plan, chosen at random, cap experts each
  kNone,        // routers only
};

std::string_view expansion_name(ExpansionStrategy s);
ExpansionStrategy parse_expansion(std::string_view name);

struct TrainingConfig {
  double learning_rate = 2e-4;
  double probe_learning_rate = 3e-4;
  std::size_t batch_size = 32;
  std::size_t bootstrap_steps = 600;  // task 0, initial expert group
  std::size_t finetune_steps = 400;   // later tasks, after expansion
  std::size_t shared_steps = 400;     // single-router baseline, tasks after the first
  ExpansionStrategy expansion = ExpansionStrategy::kAdaptive;
};

/// Everything that determines a run. Every field has a default.
struct RunConfig {
  tasks::StreamConfig stream;
  moe::BackboneConfig model;
  pgke::ProbeConfig probe;
  ptl::VaeConfig ptl;
  LossWeights loss;
  TrainingConfig train;
  std::vector<RoutingMode> routing = {RoutingMode::kPtl, RoutingMode::kOracle, RoutingMode::kLast,
                                      RoutingMode::kRandom, RoutingMode::kShared};
  std::uint64_t seed = 0;
  std::string out_dir = "cmoe-run";

  /// Throws ConfigError naming the first invalid field.
  void validate() const;
  bool wants(RoutingMode m) const;
};

/// Named starting points: "default" (lr 2e-4, probe lr 3e-4) and "desk"
/// (higher learning rates that reach usable accuracy in a few minutes).
RunConfig preset(std::string_view name);
std::vector<std::string> preset_names();

std::string config_to_json(const RunConfig& config);
/// Fields present in `text` override `base`. Unknown fields, type errors and
/// syntax errors raise ConfigError with the field path or line. A run
/// manifest is accepted too; its "config" object is used.
RunConfig config_from_json(std::string_view text, const RunConfig& base = RunConfig{});

/// a[j][i]: accuracy on task i right after training task j.
class AccuracyMatrix {
 public:
  explicit AccuracyMatrix(std::size_t n_tasks = 0);

  std::size_t size() const noexcept { return n_; }
  void set(std::size_t after, std::size_t task, double value);
  double at(std::size_t after, std::size_t task) const;
  bool has(std::size_t after, std::size_t task) const;
  /// All entries with after >= task present.
  bool complete() const;

 private:
  std::size_t n_;
  std::vector<std::optional<double>> cells_;
};

enum class MeanSetting { kImmediate, kLast };

/// (1/(N-1)) sum_{i<N-1} (a[N-1][i] - a[i][i]). ContractError if incomplete or N < 2.
double bwt(const AccuracyMatrix& m);
double mean_accuracy(const AccuracyMatrix& m, MeanSetting setting);

/// Mean last-token feature distance between tasks versus spread within tasks.
struct FeatureSeparation {
  double min_between = 0.0;  // smallest distance between two task means
  double max_within = 0.0;   // largest RMS distance of a task's features from its mean
  bool separated() const { return min_between > max_within; }
};

FeatureSeparation feature_separation(const moe::Backbone& model, const std::vector<tasks::TaskSpec>& specs,
                                     std::size_t samples_per_task = 256);

/// Prompt-only last-token features, (n, d_model).
Tensor prompt_features(const moe::Backbone& model, const tasks::TaskSpec& spec,
                       std::span<const std::vector<std::size_t>> examples);

struct OptimizerSnapshot {
  std::uint64_t step_count = 0;
  struct Slot {
    std::string name;
    std::vector<double> m, v;
  };
  std::vector<Slot> slots;
};

/// Live state of a continual run.
struct RunState {
  RunConfig config;
  std::vector<tasks::TaskSpec> stream;
  moe::Backbone model;
  ptl::PrimitiveBank bank;
  std::optional<moe::Backbone> shared;  // single-router baseline
  std::vector<pgke::ExpansionReport> reports;
  std::size_t tasks_trained = 0;
  OptimizerSnapshot last_optimizer;
  FeatureSeparation separation;
};

/// Builds the backbone and stream. The shared baseline is created when the
/// config asks for shared routing.
RunState init_run(const RunConfig& config);
/// Same, with an explicit stream (e.g. from a manifest).
RunState init_run(const RunConfig& config, std::vector<tasks::TaskSpec> stream);

using Logger = std::function<void(const std::string&)>;

/// Trains the next task of the stream from `data`, which must be that task's
/// training set. Task 0 bootstraps the initial expert group; later tasks run
/// the probe, expansion and fine-tune stages. Then fits the task VAE, builds
/// its primitive and appends (primitive, routers) to the bank. Any failure is
/// rethrown as StageError naming the stage.
void train_task(RunState& state, const tasks::TaskData& data, const Logger& log = {});

/// Sequential fine-tuning of the single-router baseline on the same data.
void train_shared(RunState& state, const tasks::TaskData& data, const Logger& log = {});

/// Per-sample routing outcome of one evaluation.
struct EvalResult {
  std::vector<double> accuracy;              // per task 0..after
  std::vector<std::vector<std::size_t>> routed;  // chosen bank index per sample, per task
};

/// Row `after` of the accuracy matrix under one routing mode.
EvalResult evaluate_all(RunState& state, std::size_t after, RoutingMode mode);

/// Column-normalized located-vs-true frequencies over each task's eval set:
/// out[p][t] = share of task t samples located as task p.
std::vector<std::vector<double>> confusion_matrix(RunState& state, std::span<const tasks::TaskSpec> specs);

struct ParamReport {
  std::vector<pgke::ParamCounts> per_task;  // tasks after the first
  pgke::ParamCounts total;
};

ParamReport param_report(const RunState& state);

/// Results of a full run.
struct RunResult {
  std::map<RoutingMode, AccuracyMatrix> matrices;
  std::vector<double> locate_accuracy;  // per task, final bank
  std::vector<std::vector<double>> confusion;
  ParamReport params;
};

/// init_run + train_task/train_shared/evaluate_all over the whole stream.
/// Training sets are sealed as soon as their task is done.
RunResult run_stream(RunState& state, const Logger& log = {});

/// Flat CSV: header, one accuracy record per (mode, after, task), then summaries.
std::string metrics_csv(const RunConfig& config, const RunResult& result);

/// Schema-versioned JSON: config, stream, expansion reports, parameter
/// counts, metrics.
std::string run_manifest_json(const RunState& state, const RunResult* result);

/// Writes metrics.csv, manifest.json and checkpoint/ under config.out_dir.
void write_outputs(const RunState& state, const RunResult& result);

/// Checkpoint directory: manifest.json + params.bin. Load validates every
/// field and checksum before building any state.
void save_checkpoint(const RunState& state, const std::filesystem::path& dir);
RunState load_checkpoint(const std::filesystem::path& dir);

/// Expansion report of one task as loaded from a checkpoint or run manifest.
std::optional<pgke::ExpansionReport> find_report(const RunState& state, int task);

}  // namespace cmoe::harness
