// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "cmoe/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "cmoe/error.hpp"
#include "cmoe/ops.hpp"

namespace cmoe::harness {

AccuracyMatrix::AccuracyMatrix(std::size_t n_tasks) : n_(n_tasks), cells_(n_tasks * n_tasks) {}

void AccuracyMatrix::set(std::size_t after, std::size_t task, double value) {
  if (after >= n_ || task > after) throw IndexError("accuracy matrix: entry (" + std::to_string(after) + ", " +
                                                    std::to_string(task) + ") outside the lower triangle");
  if (!(value >= 0.0 && value <= 1.0)) throw ContractError("accuracy matrix: value outside [0, 1]");
  cells_[after * n_ + task] = value;
}

bool AccuracyMatrix::has(std::size_t after, std::size_t task) const {
  return after < n_ && task <= after && cells_[after * n_ + task].has_value();
}

double AccuracyMatrix::at(std::size_t after, std::size_t task) const {
  if (!has(after, task)) {
    throw ContractError("accuracy matrix: entry (" + std::to_string(after) + ", " + std::to_string(task) +
                        ") missing");
  }
  return *cells_[after * n_ + task];
}

bool AccuracyMatrix::complete() const {
  for (std::size_t j = 0; j < n_; ++j) {
    for (std::size_t i = 0; i <= j; ++i) {
      if (!has(j, i)) return false;
    }
  }
  return true;
}

double bwt(const AccuracyMatrix& m) {
  if (m.size() < 2) throw ContractError("bwt: need at least 2 tasks");
  if (!m.complete()) throw ContractError("bwt: accuracy matrix incomplete");
  const std::size_t last = m.size() - 1;
  double acc = 0.0;
  for (std::size_t i = 0; i < last; ++i) acc += m.at(last, i) - m.at(i, i);
  return acc / static_cast<double>(last);
}

double mean_accuracy(const AccuracyMatrix& m, MeanSetting setting) {
  if (m.size() == 0) throw ContractError("mean_accuracy: empty matrix");
  const std::size_t last = m.size() - 1;
  double acc = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) acc += setting == MeanSetting::kImmediate ? m.at(i, i) : m.at(last, i);
  return acc / static_cast<double>(m.size());
}

Tensor prompt_features(const moe::Backbone& model, const tasks::TaskSpec& spec,
                       std::span<const std::vector<std::size_t>> examples) {
  if (examples.empty()) throw ContractError("prompt_features: no examples");
  const std::size_t d = model.config().d_model;
  const std::size_t plen = spec.prompt_len();
  std::vector<double> out;
  out.reserve(examples.size() * d);
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < examples.size(); start += kChunk) {
    const std::size_t count = std::min(kChunk, examples.size() - start);
    const tasks::Batch batch = tasks::make_batch(spec, examples.subspan(start, count));
    const std::vector<std::size_t> prompts = batch.prompt_tokens(plen);
    const std::vector<double> f = model.last_token_features({prompts, count, plen});
    out.insert(out.end(), f.begin(), f.end());
  }
  return Tensor::from({examples.size(), d}, std::move(out));
}

FeatureSeparation feature_separation(const moe::Backbone& model, const std::vector<tasks::TaskSpec>& specs,
                                     std::size_t samples_per_task) {
  const std::size_t d = model.config().d_model;
  std::vector<std::vector<double>> means;
  FeatureSeparation sep;
  for (const tasks::TaskSpec& spec : specs) {
    std::vector<std::vector<std::size_t>> ex;
    for (std::size_t i = 0; i < samples_per_task; ++i) ex.push_back(tasks::make_example(spec, tasks::Split::kTrain, i));
    const Tensor f = prompt_features(model, spec, ex);
    auto fd = f.data();
    std::vector<double> mean(d, 0.0);
    for (std::size_t r = 0; r < ex.size(); ++r) {
      for (std::size_t k = 0; k < d; ++k) mean[k] += fd[r * d + k];
    }
    for (double& m : mean) m /= static_cast<double>(ex.size());
    double spread = 0.0;
    for (std::size_t r = 0; r < ex.size(); ++r) {
      for (std::size_t k = 0; k < d; ++k) spread += (fd[r * d + k] - mean[k]) * (fd[r * d + k] - mean[k]);
    }
    sep.max_within = std::max(sep.max_within, std::sqrt(spread / static_cast<double>(ex.size())));
    means.push_back(std::move(mean));
  }
  sep.min_between = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < means.size(); ++a) {
    for (std::size_t b = a + 1; b < means.size(); ++b) {
      double dist = 0.0;
      for (std::size_t k = 0; k < d; ++k) dist += (means[a][k] - means[b][k]) * (means[a][k] - means[b][k]);
      sep.min_between = std::min(sep.min_between, std::sqrt(dist));
    }
  }
  if (means.size() < 2) sep.min_between = 0.0;
  return sep;
}

namespace {

Rng task_rng(const RunConfig& c, std::string_view tag, std::size_t task) {
  return Rng(c.seed).fork(tag).fork(static_cast<std::uint64_t>(task));
}

std::vector<std::vector<std::size_t>> gather(const std::vector<std::vector<std::size_t>>& all,
                                             const std::vector<std::size_t>& idx) {
  std::vector<std::vector<std::size_t>> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(all.at(i));
  return out;
}

moe::Backbone build_backbone(const RunConfig& c) {
  Rng rng = Rng(c.seed).fork("backbone");
  return moe::Backbone(c.model, rng);
}

// Runs fn as a named stage; library errors are rethrown carrying the stage name.
template <typename Fn>
auto stage(const std::string& name, const Logger& log, Fn&& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  try {
    if constexpr (std::is_void_v<decltype(fn())>) {
      fn();
      if (log) {
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        char buf[64];
        std::snprintf(buf, sizeof buf, " (%.1fs)", s);
        log(name + buf);
      }
    } else {
      auto out = fn();
      if (log) {
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        char buf[64];
        std::snprintf(buf, sizeof buf, " (%.1fs)", s);
        log(name + buf);
      }
      return out;
    }
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(name, e.what());
  }
}

OptimizerSnapshot snapshot(const AdamW& opt) {
  OptimizerSnapshot s;
  s.step_count = opt.step_count();
  for (const AdamW::Slot& slot : opt.slots()) s.slots.push_back({slot.param.name(), slot.m, slot.v});
  return s;
}

void bootstrap_group(moe::Backbone& model, const moe::BackboneConfig& mc, int task, Rng& rng) {
  moe::RouterSet routers;
  for (std::size_t h = 0; h < model.n_layers(); ++h) {
    moe::MoeLayer& layer = model.layer(h);
    layer.append_experts(mc.initial_experts, moe::ExpertInit::zero_b(), task, rng);
    routers.push_back(moe::make_router(mc.initial_experts, layer.d_in(), mc.top_k, task, rng));
    routers.back().G.set_name(layer.name() + ".router.task" + std::to_string(task));
  }
  model.activate(routers);
}

pgke::ExpansionPlan choose_plan(const RunConfig& c, const pgke::ActivationReport& report, Rng& rng) {
  const pgke::ExpansionPlan adaptive = pgke::select_expansion(report, c.probe);
  switch (c.train.expansion) {
    case ExpansionStrategy::kAdaptive: return adaptive;
    case ExpansionStrategy::kEveryLayer: return pgke::every_layer_plan(report, c.probe.n_new_experts_cap);
    case ExpansionStrategy::kNone: return {};
    case ExpansionStrategy::kRandom: {
      const pgke::ExpansionPlan every = pgke::every_layer_plan(report, c.probe.n_new_experts_cap);
      std::vector<std::size_t> order(every.layers.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
      order.resize(adaptive.expanded_layers());
      std::sort(order.begin(), order.end());
      pgke::ExpansionPlan plan;
      for (std::size_t h : order) plan.layers.push_back(every.layers[h]);
      return plan;
    }
  }
  return adaptive;
}

}  // namespace

RunState init_run(const RunConfig& config) {
  config.validate();
  tasks::StreamConfig sc = config.stream;
  sc.seed = config.seed;
  return init_run(config, tasks::generate_stream(sc));
}

RunState init_run(const RunConfig& config, std::vector<tasks::TaskSpec> stream) {
  config.validate();
  if (stream.empty()) throw ConfigError("stream: no tasks");
  for (const tasks::TaskSpec& s : stream) {
    if (s.vocab_hi > config.model.vocab) throw ConfigError("stream: task window exceeds model.vocab");
    if (s.seq_len > config.model.max_seq) throw ConfigError("stream: sequence longer than model.max_seq");
  }
  RunState state{config, std::move(stream), build_backbone(config), {}, std::nullopt, {}, 0, {}, {}};
  if (config.wants(RoutingMode::kShared)) state.shared = build_backbone(config);
  state.separation = feature_separation(state.model, state.stream);
  return state;
}

void train_task(RunState& st, const tasks::TaskData& data, const Logger& log) {
  const std::size_t t = st.tasks_trained;
  if (t >= st.stream.size()) throw ContractError("train_task: stream already complete");
  if (!(data.spec() == st.stream[t])) {
    throw ContractError("train_task: data belongs to task " + std::to_string(data.spec().task_id) + ", expected " +
                        std::to_string(t));
  }
  const RunConfig& c = st.config;
  const tasks::TaskSpec& spec = st.stream[t];
  const auto& examples = data.examples();
  const int task = static_cast<int>(t);
  const std::string tag = "task " + std::to_string(t) + " ";
  TrainOptions opts;
  opts.batch_size = c.train.batch_size;
  opts.kappa = c.loss.kappa;

  moe::RouterSet routers;
  if (t == 0) {
    routers = stage(tag + "bootstrap", log, [&] {
      Rng rng = task_rng(c, "bootstrap", t);
      bootstrap_group(st.model, c.model, task, rng);
      AdamW opt(AdamWConfig{c.train.learning_rate});
      for (const Tensor& p : trainable_parameters(st.model)) opt.add(p);
      opts.steps = c.train.bootstrap_steps;
      opts.stage = "bootstrap";
      train_steps(st.model, spec, examples, opts, opt, rng);
      st.last_optimizer = snapshot(opt);
      for (std::size_t h = 0; h < st.model.n_layers(); ++h) {
        st.model.layer(h).freeze_experts([](const moe::LoraExpert&) { return true; });
      }
      moe::RouterSet out = st.model.active_routers();
      moe::freeze_routers(out);
      return out;
    });
  } else {
    const moe::RouterSet& previous = st.bank.at(t - 1).router;
    pgke::ExpansionReport report;
    report.task = task;
    report.alpha = c.probe.alpha;
    report.metric = c.probe.activation_metric;
    report.cap = c.probe.n_new_experts_cap;
    report.expert_params_before = st.model.expert_parameter_count();
    Rng rng = task_rng(c, "pgke", t);
    const pgke::ProbeSplit split = stage(tag + "split_probe_data", log, [&] {
      return pgke::split_probe_data(examples.size(), c.probe.probe_fraction, rng);
    });
    const auto x_train = gather(examples, split.train);
    const auto x_eval = gather(examples, split.eval);
    const pgke::ProbeHandles handles =
        stage(tag + "attach_probes", log, [&] { return pgke::attach_probes(st.model, previous, c.probe, task, rng); });
    stage(tag + "train_probes", log, [&] {
      AdamW opt(AdamWConfig{c.train.probe_learning_rate});
      TrainOptions po = opts;
      po.stage = "train_probes";
      pgke::train_probes(st.model, spec, x_train, c.probe, po, opt, rng);
    });
    report.layers = stage(tag + "activation_stats", log,
                          [&] { return pgke::activation_stats(st.model, handles, spec, x_eval, c.probe); });
    report.plan = stage(tag + "select_expansion", log, [&] { return choose_plan(c, report.layers, rng); });
    report.params = pgke::plan_parameters(report.plan, previous, st.model, c.probe.n_new_experts_cap);
    routers = stage(tag + "expand_and_finetune", log, [&] {
      AdamW opt(AdamWConfig{c.train.learning_rate});
      TrainOptions fo = opts;
      fo.steps = c.train.finetune_steps;
      fo.stage = "expand_and_finetune";
      moe::RouterSet out = pgke::expand_and_finetune(st.model, handles, report.plan, spec, examples, fo, opt, rng);
      st.last_optimizer = snapshot(opt);
      return out;
    });
    report.expert_params_after = st.model.expert_parameter_count();
    st.reports.push_back(std::move(report));
  }

  const Tensor features = stage(tag + "features", log, [&] { return prompt_features(st.model, spec, examples); });
  ptl::VaeModel vae = stage(tag + "fit_task_vae", log, [&] {
    Rng rng = task_rng(c, "vae", t);
    return ptl::fit_task_vae(features, c.ptl, c.loss, task, rng);
  });
  ptl::TaskPrimitive primitive = stage(tag + "build_primitive", log, [&] {
    // The last T instances of the task's training order.
    const std::size_t n = features.dim(0);
    const std::size_t take = std::min(c.ptl.primitive_samples, n);
    const Tensor recent = ops::slice(features, 0, n - take, n);
    Rng rng = task_rng(c, "primitive", t);
    return ptl::build_primitive(vae, recent.detach(), c.ptl.n_rep, rng, c.ptl.reduction);
  });
  st.bank.insert({primitive, std::move(vae), std::move(routers)});
  st.tasks_trained = t + 1;
}

void train_shared(RunState& st, const tasks::TaskData& data, const Logger& log) {
  if (!st.shared) throw ConfigError("train_shared: run has no shared baseline");
  const RunConfig& c = st.config;
  const std::size_t t = static_cast<std::size_t>(data.spec().task_id);
  stage("task " + std::to_string(t) + " shared_baseline", log, [&] {
    moe::Backbone& model = *st.shared;
    Rng rng = task_rng(c, "shared", t);
    if (!model.layer(0).has_router()) bootstrap_group(model, c.model, 0, rng);
    AdamW opt(AdamWConfig{c.train.learning_rate});
    for (const Tensor& p : trainable_parameters(model)) opt.add(p);
    TrainOptions opts;
    opts.batch_size = c.train.batch_size;
    opts.kappa = c.loss.kappa;
    opts.steps = t == 0 ? c.train.bootstrap_steps : c.train.shared_steps;
    opts.stage = "shared_baseline";
    train_steps(model, data.spec(), data.examples(), opts, opt, rng);
  });
}

namespace {

ptl::PrimitiveBank bank_prefix(const ptl::PrimitiveBank& bank, std::size_t n) {
  ptl::PrimitiveBank out;
  for (std::size_t i = 0; i < n; ++i) out.mutable_entries().push_back(bank.at(i));
  return out;
}

// Exact-match flags for examples, all run through the model's active routers.
std::vector<bool> score_examples(moe::Backbone& model, const tasks::TaskSpec& spec,
                                 std::span<const std::vector<std::size_t>> examples) {
  std::vector<bool> out;
  out.reserve(examples.size());
  constexpr std::size_t kChunk = 100;
  for (std::size_t start = 0; start < examples.size(); start += kChunk) {
    const std::size_t count = std::min(kChunk, examples.size() - start);
    const tasks::Batch batch = tasks::make_batch(spec, examples.subspan(start, count));
    const std::vector<bool> ok = tasks::exact_match(model.forward(batch.view()), batch);
    out.insert(out.end(), ok.begin(), ok.end());
  }
  return out;
}

}  // namespace

EvalResult evaluate_all(RunState& st, std::size_t after, RoutingMode mode) {
  if (after >= st.tasks_trained) {
    throw ContractError("evaluate_all: task " + std::to_string(after) + " has not been trained");
  }
  const RunConfig& c = st.config;
  EvalResult result;
  if (mode == RoutingMode::kShared) {
    if (!st.shared) throw ConfigError("evaluate_all: shared routing requested but the baseline was not trained");
    for (std::size_t i = 0; i <= after; ++i) {
      const tasks::TaskData eval(st.stream[i], tasks::Split::kEval);
      const std::vector<bool> ok = score_examples(*st.shared, st.stream[i], eval.examples());
      result.accuracy.push_back(static_cast<double>(std::count(ok.begin(), ok.end(), true)) /
                                static_cast<double>(ok.size()));
      result.routed.emplace_back(ok.size(), 0);
    }
    return result;
  }

  const moe::RouterSet restore = st.model.active_routers();
  const ptl::PrimitiveBank bank = bank_prefix(st.bank, after + 1);
  for (std::size_t i = 0; i <= after; ++i) {
    const tasks::TaskData eval(st.stream[i], tasks::Split::kEval);
    const auto& ex = eval.examples();
    std::vector<std::size_t> route(ex.size(), i);
    switch (mode) {
      case RoutingMode::kOracle: break;
      case RoutingMode::kLast: std::fill(route.begin(), route.end(), after); break;
      case RoutingMode::kRandom: {
        Rng rng = Rng(c.seed).fork("random-routing").fork(after).fork(static_cast<std::uint64_t>(i));
        for (std::size_t& r : route) r = rng.index(after + 1);
        break;
      }
      case RoutingMode::kPtl: {
        Rng rng = Rng(c.seed).fork("locate").fork(after).fork(static_cast<std::uint64_t>(i));
        route = ptl::locate_tasks(bank, prompt_features(st.model, st.stream[i], ex), {c.ptl.n_rep, c.ptl.reduction},
                                  rng);
        break;
      }
      case RoutingMode::kShared: break;
    }
    std::vector<bool> ok(ex.size(), false);
    for (std::size_t r = 0; r <= after; ++r) {
      std::vector<std::size_t> members;
      for (std::size_t k = 0; k < ex.size(); ++k) {
        if (route[k] == r) members.push_back(k);
      }
      if (members.empty()) continue;
      st.model.activate(bank.at(r).router);
      const auto group = gather(ex, members);
      const std::vector<bool> g = score_examples(st.model, st.stream[i], group);
      for (std::size_t k = 0; k < members.size(); ++k) ok[members[k]] = g[k];
    }
    result.accuracy.push_back(static_cast<double>(std::count(ok.begin(), ok.end(), true)) /
                              static_cast<double>(ok.size()));
    result.routed.push_back(std::move(route));
  }
  st.model.activate(restore);
  return result;
}

std::vector<std::vector<double>> confusion_matrix(RunState& st, std::span<const tasks::TaskSpec> specs) {
  if (st.bank.empty()) throw ContractError("confusion: empty bank");
  const std::size_t n = st.bank.size();
  std::vector<std::vector<double>> m(n, std::vector<double>(specs.size(), 0.0));
  for (std::size_t t = 0; t < specs.size(); ++t) {
    const tasks::TaskData eval(specs[t], tasks::Split::kEval);
    Rng rng = Rng(st.config.seed).fork("confusion").fork(static_cast<std::uint64_t>(t));
    const auto located = ptl::locate_tasks(st.bank, prompt_features(st.model, specs[t], eval.examples()),
                                           {st.config.ptl.n_rep, st.config.ptl.reduction}, rng);
    for (std::size_t p : located) m[p][t] += 1.0;
    for (std::size_t p = 0; p < n; ++p) m[p][t] /= static_cast<double>(located.size());
  }
  return m;
}

ParamReport param_report(const RunState& st) {
  ParamReport r;
  for (const pgke::ExpansionReport& e : st.reports) {
    r.per_task.push_back(e.params);
    r.total.added += e.params.added;
    r.total.every_layer += e.params.every_layer;
  }
  return r;
}

RunResult run_stream(RunState& st, const Logger& log) {
  RunResult result;
  const std::size_t n = st.stream.size();
  for (RoutingMode m : st.config.routing) result.matrices.emplace(m, AccuracyMatrix(n));
  if (st.tasks_trained != 0) throw ContractError("run_stream: state already holds trained tasks");
  if (st.config.stream.similarity == tasks::Similarity::kDisjoint && !st.separation.separated()) {
    throw StageError("stream", "task features are not separated (between " + std::to_string(st.separation.min_between) +
                                   " <= within " + std::to_string(st.separation.max_within) + ")");
  }
  for (std::size_t j = 0; j < n; ++j) {
    tasks::TaskData data(st.stream[j], tasks::Split::kTrain);
    train_task(st, data, log);
    if (st.shared) train_shared(st, data, log);
    data.seal();
    for (RoutingMode m : st.config.routing) {
      const EvalResult row = stage("task " + std::to_string(j) + " evaluate " + std::string(routing_name(m)), log,
                                   [&] { return evaluate_all(st, j, m); });
      for (std::size_t i = 0; i <= j; ++i) result.matrices.at(m).set(j, i, row.accuracy[i]);
    }
  }
  result.confusion = stage("confusion", log, [&] { return confusion_matrix(st, st.stream); });
  for (std::size_t t = 0; t < n; ++t) result.locate_accuracy.push_back(result.confusion[t][t]);
  result.params = param_report(st);
  return result;
}

std::optional<pgke::ExpansionReport> find_report(const RunState& state, int task) {
  for (const pgke::ExpansionReport& r : state.reports) {
    if (r.task == task) return r;
  }
  return std::nullopt;
}

}  // namespace cmoe::harness
