// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

// cmoe: run continual-learning streams and inspect their checkpoints.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
// Settings resolve as flag > CMOE_OUT (output dir only) > --config file >
// --preset > built-in default.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "cmoe/error.hpp"
#include "cmoe/harness.hpp"
#include "cmoe/io.hpp"

namespace {

using namespace cmoe;
using harness::RoutingMode;

constexpr int kRuntime = 1;
constexpr int kUsage = 2;

struct RunFlags {
  std::string config_path;
  std::string preset = "default";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> tasks;
  std::optional<std::string> similarity;
  std::optional<std::string> routing;
  std::optional<double> alpha;
  std::optional<std::size_t> probes_per_layer;
  std::optional<std::size_t> cap;
  std::optional<std::string> out;
  bool quiet = false;
};

harness::RunConfig resolve(const RunFlags& f) {
  harness::RunConfig c = harness::preset(f.preset);
  if (!f.config_path.empty()) {
    std::string text;
    try {
      text = io::read_file(f.config_path);
    } catch (const LoadError& e) {
      throw ConfigError(e.what());
    }
    c = harness::config_from_json(text, c);
  }
  if (const char* env = std::getenv("CMOE_OUT"); env && *env) c.out_dir = env;
  if (f.seed) c.seed = *f.seed;
  if (f.tasks) c.stream.n_tasks = *f.tasks;
  if (f.similarity) c.stream.similarity = tasks::parse_similarity(*f.similarity);
  if (f.routing) c.routing = harness::parse_routing_list(*f.routing);
  if (f.alpha) c.probe.alpha = *f.alpha;
  if (f.probes_per_layer) c.probe.n_probes_per_layer = *f.probes_per_layer;
  if (f.cap) c.probe.n_new_experts_cap = *f.cap;
  if (f.out) c.out_dir = *f.out;
  c.validate();
  return c;
}

void print_summary(const harness::RunConfig& c, const harness::RunResult& r) {
  std::printf("%-8s %10s %10s %10s\n", "routing", "immediate", "last", "bwt(pp)");
  for (RoutingMode m : c.routing) {
    const harness::AccuracyMatrix& a = r.matrices.at(m);
    const double bwt = a.size() >= 2 ? 100.0 * harness::bwt(a) : 0.0;
    std::printf("%-8s %10.2f %10.2f %10.2f\n", std::string(harness::routing_name(m)).c_str(),
                100.0 * harness::mean_accuracy(a, harness::MeanSetting::kImmediate),
                100.0 * harness::mean_accuracy(a, harness::MeanSetting::kLast), bwt);
  }
  std::printf("locate accuracy:");
  for (double v : r.locate_accuracy) std::printf(" %.3f", v);
  std::printf("\n");
  if (!r.params.per_task.empty()) std::printf("param ratio vs every-layer: %.3f\n", r.params.total.ratio());
}

int cmd_run(const RunFlags& f) {
  harness::RunConfig config;
  try {
    config = resolve(f);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "cmoe run: config error: %s\n", e.what());
    return kUsage;
  }
  try {
    harness::Logger log;
    if (!f.quiet) log = [](const std::string& line) { std::fprintf(stderr, "%s\n", line.c_str()); };
    harness::RunState state = harness::init_run(config);
    const harness::RunResult result = harness::run_stream(state, log);
    harness::write_outputs(state, result);
    print_summary(config, result);
    std::printf("outputs in %s\n", config.out_dir.c_str());
  } catch (const StageError& e) {
    std::fprintf(stderr, "cmoe run: failed in stage %s: %s\n", e.stage().c_str(), e.what());
    return kRuntime;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "cmoe run: config error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "cmoe run: %s\n", e.what());
    return kRuntime;
  }
  return 0;
}

void print_vector(const char* label, const std::vector<double>& v) {
  std::printf("  %-22s", label);
  for (double x : v) std::printf(" %.6f", x);
  std::printf("\n");
}

int cmd_probe_report(const std::string& checkpoint, int task, std::optional<double> alpha) {
  harness::RunState state = harness::load_checkpoint(checkpoint);
  const std::optional<pgke::ExpansionReport> found = harness::find_report(state, task);
  if (!found) {
    std::fprintf(stderr, "cmoe probe-report: no expansion report for task %d (task 0 bootstraps, %zu tasks trained)\n",
                 task, state.tasks_trained);
    return kUsage;
  }
  const pgke::ExpansionReport& r = *found;
  pgke::ProbeConfig probe = state.config.probe;
  probe.alpha = alpha.value_or(r.alpha);
  probe.n_new_experts_cap = r.cap;
  std::printf("task %d  alpha %.4g  metric %s  cap %zu\n", r.task, probe.alpha,
              std::string(pgke::metric_name(r.metric)).c_str(), r.cap);
  std::vector<std::size_t> planned(r.layers.size(), 0);
  for (const pgke::LayerPlan& lp : r.plan.layers) planned.at(lp.layer) = lp.n_new;
  for (std::size_t h = 0; h < r.layers.size(); ++h) {
    const pgke::LayerActivation& la = r.layers[h];
    const double threshold = pgke::expansion_threshold(la.act, probe.alpha);
    std::size_t above = 0;
    for (std::size_t p : la.probe_indices) above += la.act.at(p) > threshold ? 1 : 0;
    const std::size_t n_s = alpha ? std::min(above, r.cap) : planned[h];
    std::printf("layer %zu: ", h);
    if (n_s == 0) {
      std::printf("not expanded\n");
    } else {
      std::printf("expanded, N_s = %zu, copy source expert %zu\n", n_s, la.copy_source);
    }
    print_vector("act", la.act);
    print_vector("topk_frequency", la.topk_frequency);
    print_vector("mean_gate_probability", la.mean_gate_probability);
    std::printf("  %-22s", "probes");
    for (std::size_t p : la.probe_indices) std::printf(" %zu", p);
    std::printf("\n  %-22s %.6f\n", "threshold", threshold);
  }
  std::printf("params added %zu  every-layer %zu  ratio %.4f\n", r.params.added, r.params.every_layer, r.params.ratio());
  std::printf("expert params before %zu  after %zu\n", r.expert_params_before, r.expert_params_after);
  if (alpha) std::printf("(alpha overridden; N_s recomputed from the stored activations)\n");
  return 0;
}

int cmd_confusion(const std::string& checkpoint, const std::string& stream_path) {
  harness::RunState state = harness::load_checkpoint(checkpoint);
  if (state.bank.empty()) {
    std::fprintf(stderr, "cmoe confusion: checkpoint holds an empty bank\n");
    return kUsage;
  }
  std::vector<tasks::TaskSpec> specs(state.stream.begin(),
                                     state.stream.begin() + static_cast<std::ptrdiff_t>(state.bank.size()));
  if (!stream_path.empty()) {
    try {
      specs = tasks::stream_from_json(io::read_file(stream_path));
    } catch (const Error& e) {
      std::fprintf(stderr, "cmoe confusion: %s\n", e.what());
      return kUsage;
    }
  }
  const auto m = harness::confusion_matrix(state, specs);
  std::printf("predicted\\true");
  for (std::size_t t = 0; t < specs.size(); ++t) std::printf(",task%zu", t);
  std::printf("\n");
  for (std::size_t p = 0; p < m.size(); ++p) {
    std::printf("task%zu", p);
    for (double v : m[p]) std::printf(",%.4f", v);
    std::printf("\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual mixture-of-LoRA-experts with probe-guided expansion and task location"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(cmoe::harness::kArtifactVersion));

  RunFlags flags;
  CLI::App* run = app.add_subcommand("run", "Train and evaluate a full task stream");
  run->add_option("--config", flags.config_path, "JSON config; overrides the preset")->check(CLI::ExistingFile);
  run->add_option("--preset", flags.preset, "Starting config")
      ->check(CLI::IsMember(cmoe::harness::preset_names()))
      ->capture_default_str();
  run->add_option("--seed", flags.seed, "Run seed (default 0)");
  run->add_option("--tasks", flags.tasks, "Number of tasks (default 4)");
  run->add_option("--similarity", flags.similarity, "Stream profile (default disjoint)")
      ->check(CLI::IsMember({"disjoint", "overlapping", "duplicate"}));
  run->add_option("--routing", flags.routing, "Comma-separated modes from ptl,oracle,last,random,shared (default all)");
  run->add_option("--alpha", flags.alpha, "Expansion threshold factor (default 0.8)");
  run->add_option("--probes-per-layer", flags.probes_per_layer, "Probe experts per layer (default 2)");
  run->add_option("--cap", flags.cap, "Max new experts per layer (default 2)");
  run->add_option("--out", flags.out, "Output directory; beats CMOE_OUT (default cmoe-run)");
  run->add_flag("--quiet", flags.quiet, "No per-stage progress on stderr");

  std::string checkpoint;
  int task = 1;
  std::optional<double> alpha;
  CLI::App* probe = app.add_subcommand("probe-report", "Print a task's expansion report from a checkpoint");
  probe->add_option("checkpoint", checkpoint, "Checkpoint directory")->required();
  probe->add_option("--task", task, "Task id (default 1)");
  probe->add_option("--alpha", alpha, "Recompute thresholds with this alpha");

  std::string stream_path;
  CLI::App* confusion = app.add_subcommand("confusion", "Located-vs-true task matrix over each task's eval set");
  confusion->add_option("checkpoint", checkpoint, "Checkpoint directory")->required();
  confusion->add_option("--stream", stream_path, "Stream JSON (default: the checkpoint's trained tasks)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  if (run->parsed()) return cmd_run(flags);
  try {
    if (probe->parsed()) return cmd_probe_report(checkpoint, task, alpha);
    return cmd_confusion(checkpoint, stream_path);
  } catch (const cmoe::ConfigError& e) {
    std::fprintf(stderr, "cmoe: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "cmoe: %s\n", e.what());
    return kRuntime;
  }
}
