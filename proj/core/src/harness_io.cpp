// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <sstream>

#include "archive.hpp"
#include "cmoe/error.hpp"
#include "cmoe/harness.hpp"
#include "cmoe/io.hpp"
#include "serialize.hpp"

namespace cmoe::harness {

using archive::field;
using archive::json;

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

json report_to_json(const pgke::ExpansionReport& r) {
  json layers = json::array();
  for (std::size_t h = 0; h < r.layers.size(); ++h) {
    const pgke::LayerActivation& la = r.layers[h];
    layers.push_back({{"layer", h},
                      {"act", la.act},
                      {"topk_frequency", la.topk_frequency},
                      {"mean_gate_probability", la.mean_gate_probability},
                      {"probe_indices", la.probe_indices},
                      {"threshold", la.threshold},
                      {"selected", la.selected},
                      {"n_selected", la.n_selected},
                      {"copy_source", la.copy_source}});
  }
  json plan = json::array();
  for (const pgke::LayerPlan& lp : r.plan.layers) {
    plan.push_back({{"layer", lp.layer}, {"n_new", lp.n_new}, {"copy_source", lp.copy_source}});
  }
  return {{"task", r.task},
          {"alpha", r.alpha},
          {"activation_metric", pgke::metric_name(r.metric)},
          {"cap", r.cap},
          {"layers", layers},
          {"plan", plan},
          {"params",
           {{"added", r.params.added}, {"every_layer", r.params.every_layer}, {"ratio", r.params.ratio()}}},
          {"expert_params_before", r.expert_params_before},
          {"expert_params_after", r.expert_params_after}};
}

pgke::ExpansionReport report_from_json(const json& j, const std::string& path) {
  pgke::ExpansionReport r;
  r.task = field<int>(j, "task", path);
  r.alpha = field<double>(j, "alpha", path);
  try {
    r.metric = pgke::parse_metric(field<std::string>(j, "activation_metric", path));
  } catch (const ConfigError& e) {
    archive::throw_bad(path + ".activation_metric", e.what());
  }
  r.cap = field<std::size_t>(j, "cap", path);
  const json layers = field<json>(j, "layers", path);
  for (std::size_t h = 0; h < layers.size(); ++h) {
    const std::string p = path + ".layers[" + std::to_string(h) + "]";
    pgke::LayerActivation la;
    la.act = field<std::vector<double>>(layers[h], "act", p);
    la.topk_frequency = field<std::vector<double>>(layers[h], "topk_frequency", p);
    la.mean_gate_probability = field<std::vector<double>>(layers[h], "mean_gate_probability", p);
    la.probe_indices = field<std::vector<std::size_t>>(layers[h], "probe_indices", p);
    la.threshold = field<double>(layers[h], "threshold", p);
    la.selected = field<bool>(layers[h], "selected", p);
    la.n_selected = field<std::size_t>(layers[h], "n_selected", p);
    la.copy_source = field<std::size_t>(layers[h], "copy_source", p);
    r.layers.push_back(std::move(la));
  }
  const json plan = field<json>(j, "plan", path);
  for (std::size_t k = 0; k < plan.size(); ++k) {
    const std::string p = path + ".plan[" + std::to_string(k) + "]";
    r.plan.layers.push_back({field<std::size_t>(plan[k], "layer", p), field<std::size_t>(plan[k], "n_new", p),
                             field<std::size_t>(plan[k], "copy_source", p)});
  }
  const json params = field<json>(j, "params", path);
  r.params.added = field<std::size_t>(params, "added", path + ".params");
  r.params.every_layer = field<std::size_t>(params, "every_layer", path + ".params");
  r.expert_params_before = field<std::size_t>(j, "expert_params_before", path);
  r.expert_params_after = field<std::size_t>(j, "expert_params_after", path);
  return r;
}

json matrix_json(const AccuracyMatrix& m) {
  json rows = json::array();
  for (std::size_t j = 0; j < m.size(); ++j) {
    json row = json::array();
    for (std::size_t i = 0; i <= j; ++i) row.push_back(m.has(j, i) ? json(m.at(j, i)) : json());
    rows.push_back(row);
  }
  return rows;
}

json run_manifest(const RunState& st, const RunResult* result) {
  json reports = json::array();
  for (const pgke::ExpansionReport& r : st.reports) reports.push_back(report_to_json(r));
  const ParamReport params = param_report(st);
  json per_task = json::array();
  for (const pgke::ParamCounts& p : params.per_task) {
    per_task.push_back({{"added", p.added}, {"every_layer", p.every_layer}, {"ratio", p.ratio()}});
  }
  json out = {
      {"schema_version", kManifestSchemaVersion},
      {"artifact_version", kArtifactVersion},
      {"seed", st.config.seed},
      {"config", json::parse(config_to_json(st.config))},
      {"stream", json::parse(tasks::stream_to_json(st.stream))},
      {"tasks_trained", st.tasks_trained},
      {"feature_separation",
       {{"min_between", st.separation.min_between},
        {"max_within", st.separation.max_within},
        {"separated", st.separation.separated()}}},
      {"expansion_reports", reports},
      {"param_report",
       {{"per_task", per_task},
        {"total",
         {{"added", params.total.added},
          {"every_layer", params.total.every_layer},
          {"ratio", params.total.ratio()}}}}},
  };
  if (result) {
    json metrics = json::object();
    for (const auto& [mode, m] : result->matrices) {
      json entry = {{"matrix", matrix_json(m)}};
      if (m.complete()) {
        entry["mean_immediate"] = mean_accuracy(m, MeanSetting::kImmediate);
        entry["mean_last"] = mean_accuracy(m, MeanSetting::kLast);
        if (m.size() >= 2) entry["bwt"] = bwt(m);
      }
      metrics[std::string(routing_name(mode))] = entry;
    }
    out["metrics"] = metrics;
    out["locate_accuracy"] = result->locate_accuracy;
    out["confusion"] = result->confusion;
  }
  return out;
}

}  // namespace

std::string metrics_csv(const RunConfig& config, const RunResult& result) {
  std::ostringstream out;
  out << "record,routing,after_task,eval_task,metric,value\n";
  for (RoutingMode mode : config.routing) {
    const auto it = result.matrices.find(mode);
    if (it == result.matrices.end()) continue;
    const AccuracyMatrix& m = it->second;
    const std::string name(routing_name(mode));
    for (std::size_t j = 0; j < m.size(); ++j) {
      for (std::size_t i = 0; i <= j; ++i) {
        if (m.has(j, i)) out << "accuracy," << name << ',' << j << ',' << i << ",exact_match," << num(m.at(j, i)) << '\n';
      }
    }
    if (m.complete()) {
      out << "summary," << name << ",,,mean_immediate," << num(mean_accuracy(m, MeanSetting::kImmediate)) << '\n';
      out << "summary," << name << ",,,mean_last," << num(mean_accuracy(m, MeanSetting::kLast)) << '\n';
      if (m.size() >= 2) out << "summary," << name << ",,,bwt," << num(bwt(m)) << '\n';
    }
  }
  for (std::size_t t = 0; t < result.locate_accuracy.size(); ++t) {
    out << "summary,ptl,," << t << ",locate_accuracy," << num(result.locate_accuracy[t]) << '\n';
  }
  for (std::size_t k = 0; k < result.params.per_task.size(); ++k) {
    const pgke::ParamCounts& p = result.params.per_task[k];
    out << "summary,,," << k + 1 << ",params_added," << p.added << '\n';
    out << "summary,,," << k + 1 << ",params_every_layer," << p.every_layer << '\n';
    out << "summary,,," << k + 1 << ",param_ratio," << num(p.ratio()) << '\n';
  }
  if (!result.params.per_task.empty()) {
    out << "summary,,,,param_ratio," << num(result.params.total.ratio()) << '\n';
  }
  return out.str();
}

std::string run_manifest_json(const RunState& state, const RunResult* result) {
  return run_manifest(state, result).dump(1) + "\n";
}

void write_outputs(const RunState& state, const RunResult& result) {
  const std::filesystem::path dir = state.config.out_dir;
  io::write_file_atomic(dir / "metrics.csv", metrics_csv(state.config, result));
  io::write_file_atomic(dir / "manifest.json", run_manifest_json(state, &result));
  for (const pgke::ExpansionReport& r : state.reports) {
    io::write_file_atomic(dir / ("expansion_task" + std::to_string(r.task) + ".json"),
                          report_to_json(r).dump(1) + "\n");
  }
  std::ostringstream conf;
  conf << "predicted\\true";
  const std::size_t n_true = result.confusion.empty() ? 0 : result.confusion[0].size();
  for (std::size_t t = 0; t < n_true; ++t) conf << ",task" << t;
  conf << '\n';
  for (std::size_t p = 0; p < result.confusion.size(); ++p) {
    conf << "task" << p;
    for (double v : result.confusion[p]) conf << ',' << num(v);
    conf << '\n';
  }
  io::write_file_atomic(dir / "confusion.csv", conf.str());
  save_checkpoint(state, dir / "checkpoint");
}

namespace {

json put_experts(archive::Writer& w, const std::string& prefix, const moe::Backbone& model) {
  json layers = json::array();
  for (std::size_t h = 0; h < model.n_layers(); ++h) {
    json experts = json::array();
    const auto& ex = model.layer(h).experts();
    for (std::size_t e = 0; e < ex.size(); ++e) {
      const std::string p = prefix + ".layer" + std::to_string(h) + ".expert" + std::to_string(e);
      w.put(p + ".A", ex[e].A);
      w.put(p + ".B", ex[e].B);
      experts.push_back({{"A", p + ".A"},
                         {"B", p + ".B"},
                         {"label_A", ex[e].A.name()},
                         {"label_B", ex[e].B.name()},
                         {"frozen", ex[e].frozen},
                         {"origin_task", ex[e].origin_task},
                         {"selection_count", ex[e].selection_count}});
    }
    json layer = {{"experts", experts}};
    layers.push_back(layer);
  }
  json routers = json::array();
  if (model.n_layers() > 0 && model.layer(0).has_router()) {
    routers = serialize::put_router_set(w, prefix + ".active", model.active_routers());
  }
  return {{"layers", layers}, {"active_routers", routers}};
}

void get_experts(const archive::Reader& r, const json& j, const std::string& path, moe::Backbone& model) {
  const json layers = field<json>(j, "layers", path);
  if (!layers.is_array() || layers.size() != model.n_layers()) archive::throw_bad(path + ".layers", "layer count mismatch");
  for (std::size_t h = 0; h < model.n_layers(); ++h) {
    moe::MoeLayer& layer = model.layer(h);
    const std::string lp = path + ".layers[" + std::to_string(h) + "]";
    const json experts = field<json>(layers[h], "experts", lp);
    for (std::size_t e = 0; e < experts.size(); ++e) {
      const std::string p = lp + ".experts[" + std::to_string(e) + "]";
      moe::LoraExpert ex;
      const bool frozen = field<bool>(experts[e], "frozen", p);
      ex.A = r.get(field<std::string>(experts[e], "A", p), {layer.lora_rank(), layer.d_in()}, !frozen);
      ex.B = r.get(field<std::string>(experts[e], "B", p), {layer.d_out(), layer.lora_rank()}, !frozen);
      ex.A.set_name(field<std::string>(experts[e], "label_A", p));
      ex.B.set_name(field<std::string>(experts[e], "label_B", p));
      ex.frozen = frozen;
      ex.origin_task = field<int>(experts[e], "origin_task", p);
      ex.selection_count = field<std::uint64_t>(experts[e], "selection_count", p);
      layer.experts().push_back(std::move(ex));
    }
  }
  const json routers = field<json>(j, "active_routers", path);
  if (!routers.empty()) {
    try {
      model.activate(serialize::get_router_set(r, routers, path + ".active_routers"));
    } catch (const StructuralError& e) {
      archive::throw_bad(path + ".active_routers", e.what());
    }
  }
}

}  // namespace

void save_checkpoint(const RunState& st, const std::filesystem::path& dir) {
  archive::Writer w;
  json base = json::array();
  for (const Tensor& t : st.model.base_parameters()) {
    w.put("base." + t.name(), t);
    base.push_back("base." + t.name());
  }
  json manifest;
  manifest["run"] = run_manifest(st, nullptr);
  manifest["model"] = put_experts(w, "model", st.model);
  manifest["model"]["base"] = base;
  manifest["bank"] = serialize::put_bank(w, st.bank);
  manifest["shared"] = st.shared ? put_experts(w, "shared", *st.shared) : json();
  json slots = json::array();
  for (std::size_t k = 0; k < st.last_optimizer.slots.size(); ++k) {
    const auto& s = st.last_optimizer.slots[k];
    const std::string p = "optimizer.slot" + std::to_string(k);
    w.put(p + ".m", {s.m.size()}, s.m);
    w.put(p + ".v", {s.v.size()}, s.v);
    slots.push_back({{"param", s.name}, {"m", p + ".m"}, {"v", p + ".v"}});
  }
  manifest["optimizer"] = {{"step_count", st.last_optimizer.step_count}, {"slots", slots}};
  archive::save(dir, std::move(manifest), w, "cmoe-checkpoint");
}

RunState load_checkpoint(const std::filesystem::path& dir) {
  archive::Loaded loaded = archive::load(dir, "cmoe-checkpoint");
  const json& m = loaded.manifest;
  const archive::Reader& r = loaded.reader;
  const json run = field<json>(m, "run", "manifest");
  const int schema = field<int>(run, "schema_version", "manifest.run");
  if (schema != kManifestSchemaVersion) {
    archive::throw_bad("manifest.run.schema_version", "unsupported schema " + std::to_string(schema));
  }
  RunConfig config;
  std::vector<tasks::TaskSpec> stream;
  try {
    config = config_from_json(field<json>(run, "config", "manifest.run").dump());
    stream = tasks::stream_from_json(field<json>(run, "stream", "manifest.run").dump());
  } catch (const ConfigError& e) {
    throw LoadError(std::string("manifest.run: ") + e.what());
  }

  Rng rng = Rng(config.seed).fork("backbone");
  moe::Backbone model(config.model, rng);
  const json model_j = field<json>(m, "model", "manifest");
  const json base = field<json>(model_j, "base", "manifest.model");
  std::vector<Tensor> params = model.base_parameters();
  if (!base.is_array() || base.size() != params.size()) archive::throw_bad("manifest.model.base", "tensor count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor t = r.get(base[k].get<std::string>(), params[k].shape(), false);
    std::copy(t.data().begin(), t.data().end(), params[k].mutable_data().begin());
  }
  get_experts(r, model_j, "manifest.model", model);

  std::optional<moe::Backbone> shared;
  const json shared_j = field<json>(m, "shared", "manifest");
  if (!shared_j.is_null()) {
    shared = model.clone();
    for (std::size_t h = 0; h < shared->n_layers(); ++h) shared->layer(h).truncate_experts(0);
    get_experts(r, shared_j, "manifest.shared", *shared);
  }

  ptl::PrimitiveBank bank = serialize::get_bank(r, field<json>(m, "bank", "manifest"), "manifest.bank");

  OptimizerSnapshot opt;
  const json opt_j = field<json>(m, "optimizer", "manifest");
  opt.step_count = field<std::uint64_t>(opt_j, "step_count", "manifest.optimizer");
  const json slots = field<json>(opt_j, "slots", "manifest.optimizer");
  for (std::size_t k = 0; k < slots.size(); ++k) {
    const std::string p = "manifest.optimizer.slots[" + std::to_string(k) + "]";
    opt.slots.push_back({field<std::string>(slots[k], "param", p), r.values(field<std::string>(slots[k], "m", p)),
                         r.values(field<std::string>(slots[k], "v", p))});
  }

  std::vector<pgke::ExpansionReport> reports;
  const json reports_j = field<json>(run, "expansion_reports", "manifest.run");
  for (std::size_t k = 0; k < reports_j.size(); ++k) {
    reports.push_back(report_from_json(reports_j[k], "manifest.run.expansion_reports[" + std::to_string(k) + "]"));
  }
  const json sep = field<json>(run, "feature_separation", "manifest.run");
  FeatureSeparation separation{field<double>(sep, "min_between", "manifest.run.feature_separation"),
                               field<double>(sep, "max_within", "manifest.run.feature_separation")};
  const auto trained = field<std::size_t>(run, "tasks_trained", "manifest.run");
  if (trained != bank.size() || trained > stream.size()) {
    archive::throw_bad("manifest.run.tasks_trained", "does not match the bank");
  }
  return RunState{std::move(config), std::move(stream), std::move(model), std::move(bank), std::move(shared),
                  std::move(reports), trained, std::move(opt), separation};
}

}  // namespace cmoe::harness
