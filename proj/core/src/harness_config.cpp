// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <set>

#include <json.hpp>

#include "cmoe/error.hpp"
#include "cmoe/harness.hpp"

namespace cmoe::harness {

using nlohmann::json;

std::string_view routing_name(RoutingMode m) {
  switch (m) {
    case RoutingMode::kPtl: return "ptl";
    case RoutingMode::kOracle: return "oracle";
    case RoutingMode::kLast: return "last";
    case RoutingMode::kRandom: return "random";
    case RoutingMode::kShared: return "shared";
  }
  return "?";
}

RoutingMode parse_routing(std::string_view name) {
  for (RoutingMode m : {RoutingMode::kPtl, RoutingMode::kOracle, RoutingMode::kLast, RoutingMode::kRandom,
                        RoutingMode::kShared}) {
    if (routing_name(m) == name) return m;
  }
  throw ConfigError("unknown routing mode '" + std::string(name) + "' (expected ptl, oracle, last, random, shared)");
}

std::vector<RoutingMode> parse_routing_list(std::string_view list) {
  std::vector<RoutingMode> out;
  std::size_t start = 0;
  while (start <= list.size()) {
    const std::size_t comma = std::min(list.find(',', start), list.size());
    const std::string_view item = list.substr(start, comma - start);
    if (item.empty()) throw ConfigError("routing: empty entry in '" + std::string(list) + "'");
    const RoutingMode m = parse_routing(item);
    if (std::find(out.begin(), out.end(), m) != out.end()) {
      throw ConfigError("routing: '" + std::string(item) + "' listed twice");
    }
    out.push_back(m);
    start = comma + 1;
  }
  return out;
}

std::string_view expansion_name(ExpansionStrategy s) {
  switch (s) {
    case ExpansionStrategy::kAdaptive: return "adaptive";
    case ExpansionStrategy::kEveryLayer: return "every-layer";
    case ExpansionStrategy::kRandom: return "random";
    case ExpansionStrategy::kNone: return "none";
  }
  return "?";
}

ExpansionStrategy parse_expansion(std::string_view name) {
  for (ExpansionStrategy s : {ExpansionStrategy::kAdaptive, ExpansionStrategy::kEveryLayer, ExpansionStrategy::kRandom,
                              ExpansionStrategy::kNone}) {
    if (expansion_name(s) == name) return s;
  }
  throw ConfigError("unknown expansion strategy '" + std::string(name) + "'");
}

namespace {

std::string_view reduction_name(ptl::ScoreReduction r) {
  return r == ptl::ScoreReduction::kMeanLog ? "mean-log" : "log-mean-exp";
}

ptl::ScoreReduction parse_reduction(std::string_view name) {
  if (name == "mean-log") return ptl::ScoreReduction::kMeanLog;
  if (name == "log-mean-exp") return ptl::ScoreReduction::kLogMeanExp;
  throw ConfigError("unknown score reduction '" + std::string(name) + "'");
}

void require(bool ok, const std::string& field, const std::string& why) {
  if (!ok) throw ConfigError(field + ": " + why);
}

bool positive_finite(double v) { return std::isfinite(v) && v > 0.0; }

}  // namespace

bool RunConfig::wants(RoutingMode m) const { return std::find(routing.begin(), routing.end(), m) != routing.end(); }

void RunConfig::validate() const {
  require(stream.n_tasks >= 2, "stream.n_tasks", "must be >= 2");
  require(stream.train_size >= 2, "stream.train_size", "must be >= 2");
  require(stream.eval_size >= 1, "stream.eval_size", "must be >= 1");
  require(stream.vocab == model.vocab, "stream.vocab", "must equal model.vocab");
  require(model.d_model > 0 && model.d_ff > 0 && model.n_blocks > 0, "model", "extents must be positive");
  require(model.max_seq >= 8, "model.max_seq", "must be >= 8 to hold every task family");
  require(model.lora_rank >= 1, "model.lora_rank", "must be >= 1");
  require(model.initial_experts >= 1, "model.initial_experts", "must be >= 1");
  require(model.top_k >= 1 && model.top_k <= model.initial_experts, "model.top_k", "must lie in [1, initial_experts]");
  probe.validate();
  require(ptl.d_latent >= 1, "ptl.d_latent", "must be >= 1");
  require(ptl.n_rep >= 1, "ptl.n_rep", "must be >= 1");
  require(ptl.primitive_samples >= 2, "ptl.primitive_samples", "must be >= 2");
  require(ptl.primitive_samples <= stream.train_size, "ptl.primitive_samples", "exceeds stream.train_size");
  require(ptl.batch_size >= 1, "ptl.batch_size", "must be >= 1");
  require(positive_finite(ptl.learning_rate), "ptl.learning_rate", "must be positive");
  for (auto [name, v] : {std::pair{"loss.lambda", loss.lambda}, {"loss.eta", loss.eta}, {"loss.kappa", loss.kappa}}) {
    require(std::isfinite(v) && v >= 0.0, name, "must be finite and >= 0");
  }
  require(positive_finite(train.learning_rate), "train.learning_rate", "must be positive");
  require(positive_finite(train.probe_learning_rate), "train.probe_learning_rate", "must be positive");
  require(train.batch_size >= 1, "train.batch_size", "must be >= 1");
  require(!routing.empty(), "routing", "at least one mode is required");
  require(!out_dir.empty(), "out_dir", "must not be empty");
}

RunConfig preset(std::string_view name) {
  RunConfig c;
  if (name == "default") return c;
  // Desk presets keep the 2:3 ratio between normal and probe learning rates
  // but scale both by 10 so the toy tasks converge in a few hundred steps.
  auto desk = [](RunConfig& d) {
    d.train.learning_rate = 2e-3;
    d.train.probe_learning_rate = 3e-3;
    d.train.batch_size = 16;
    d.train.bootstrap_steps = 1500;
    d.train.finetune_steps = 1200;
    d.train.shared_steps = 1200;
    d.probe.probe_steps = 100;
  };
  if (name == "desk") {
    desk(c);
    return c;
  }
  if (name == "desk-8") {
    desk(c);
    c.stream.n_tasks = 8;
    return c;
  }
  if (name == "every-layer" || name == "no-extend" || name == "random-layers") {
    desk(c);
    c.train.expansion = name == "every-layer" ? ExpansionStrategy::kEveryLayer
                        : name == "no-extend" ? ExpansionStrategy::kNone
                                              : ExpansionStrategy::kRandom;
    return c;
  }
  throw ConfigError("unknown preset '" + std::string(name) + "'");
}

std::vector<std::string> preset_names() { return {"default", "desk", "desk-8", "every-layer", "no-extend", "random-layers"}; }

std::string config_to_json(const RunConfig& c) {
  json routing = json::array();
  for (RoutingMode m : c.routing) routing.push_back(routing_name(m));
  json j = {
      {"seed", c.seed},
      {"out_dir", c.out_dir},
      {"routing", routing},
      {"stream",
       {{"n_tasks", c.stream.n_tasks},
        {"similarity", tasks::similarity_name(c.stream.similarity)},
        {"vocab", c.stream.vocab},
        {"train_size", c.stream.train_size},
        {"eval_size", c.stream.eval_size}}},
      {"model",
       {{"vocab", c.model.vocab},
        {"d_model", c.model.d_model},
        {"d_ff", c.model.d_ff},
        {"n_blocks", c.model.n_blocks},
        {"max_seq", c.model.max_seq},
        {"lora_rank", c.model.lora_rank},
        {"initial_experts", c.model.initial_experts},
        {"top_k", c.model.top_k}}},
      {"probe",
       {{"alpha", c.probe.alpha},
        {"probe_fraction", c.probe.probe_fraction},
        {"n_probes_per_layer", c.probe.n_probes_per_layer},
        {"probe_steps", c.probe.probe_steps},
        {"activation_metric", pgke::metric_name(c.probe.activation_metric)},
        {"n_new_experts_cap", c.probe.n_new_experts_cap}}},
      {"ptl",
       {{"d_latent", c.ptl.d_latent},
        {"n_rep", c.ptl.n_rep},
        {"primitive_samples", c.ptl.primitive_samples},
        {"train_steps", c.ptl.train_steps},
        {"batch_size", c.ptl.batch_size},
        {"learning_rate", c.ptl.learning_rate},
        {"reduction", reduction_name(c.ptl.reduction)}}},
      {"loss", {{"lambda", c.loss.lambda}, {"eta", c.loss.eta}, {"kappa", c.loss.kappa}}},
      {"train",
       {{"learning_rate", c.train.learning_rate},
        {"probe_learning_rate", c.train.probe_learning_rate},
        {"batch_size", c.train.batch_size},
        {"bootstrap_steps", c.train.bootstrap_steps},
        {"finetune_steps", c.train.finetune_steps},
        {"shared_steps", c.train.shared_steps},
        {"expansion", expansion_name(c.train.expansion)}}},
  };
  return j.dump(2);
}

namespace {

// Reads known keys of one JSON object into typed fields; anything else is an error.
class ObjectReader {
 public:
  ObjectReader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    try {
      out = obj_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(field(key) + ": wrong type (" + obj_.at(key).dump() + ")");
    }
  }

  template <typename T, typename Parse>
  void get_enum(const char* key, T& out, Parse parse) {
    std::string text;
    bool present = obj_.contains(key);
    get(key, text);
    if (!present) return;
    try {
      out = parse(text);
    } catch (const ConfigError& e) {
      throw ConfigError(field(key) + ": " + e.what());
    }
  }

  ObjectReader child(const char* key) {
    seen_.insert(key);
    static const json kEmpty = json::object();
    return ObjectReader(obj_.contains(key) ? obj_.at(key) : kEmpty, field(key));
  }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()) + ": unknown field");
    }
  }

  void mark(const char* key) { seen_.insert(key); }
  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool contains(const char* key) const { return obj_.contains(key); }
  const json& raw(const char* key) const { return obj_.at(key); }

 private:
  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

std::size_t line_of(std::string_view text, std::size_t byte) {
  byte = std::min(byte, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(byte), '\n'));
}

}  // namespace

RunConfig config_from_json(std::string_view text, const RunConfig& base) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: syntax error at line " + std::to_string(line_of(text, e.byte)) + ": " + e.what());
  }
  if (doc.is_object() && doc.contains("schema_version") && doc.contains("config")) doc = doc.at("config");

  RunConfig c = base;
  ObjectReader top(doc, "");
  top.get("seed", c.seed);
  top.get("out_dir", c.out_dir);
  if (top.contains("routing")) {
    const json& r = top.raw("routing");
    std::string joined;
    if (r.is_string()) {
      joined = r.get<std::string>();
    } else if (r.is_array()) {
      for (const json& item : r) {
        if (!item.is_string()) throw ConfigError("routing: entries must be strings");
        joined += (joined.empty() ? "" : ",") + item.get<std::string>();
      }
    } else {
      throw ConfigError("routing: expected a list of modes");
    }
    try {
      c.routing = parse_routing_list(joined);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("routing: ") + e.what());
    }
  }
  top.mark("routing");

  ObjectReader stream = top.child("stream");
  stream.get("n_tasks", c.stream.n_tasks);
  stream.get_enum("similarity", c.stream.similarity, tasks::parse_similarity);
  stream.get("vocab", c.stream.vocab);
  stream.get("train_size", c.stream.train_size);
  stream.get("eval_size", c.stream.eval_size);
  stream.finish();

  ObjectReader model = top.child("model");
  model.get("vocab", c.model.vocab);
  model.get("d_model", c.model.d_model);
  model.get("d_ff", c.model.d_ff);
  model.get("n_blocks", c.model.n_blocks);
  model.get("max_seq", c.model.max_seq);
  model.get("lora_rank", c.model.lora_rank);
  model.get("initial_experts", c.model.initial_experts);
  model.get("top_k", c.model.top_k);
  model.finish();

  ObjectReader probe = top.child("probe");
  probe.get("alpha", c.probe.alpha);
  probe.get("probe_fraction", c.probe.probe_fraction);
  probe.get("n_probes_per_layer", c.probe.n_probes_per_layer);
  probe.get("probe_steps", c.probe.probe_steps);
  probe.get_enum("activation_metric", c.probe.activation_metric, pgke::parse_metric);
  probe.get("n_new_experts_cap", c.probe.n_new_experts_cap);
  probe.finish();

  ObjectReader p = top.child("ptl");
  p.get("d_latent", c.ptl.d_latent);
  p.get("n_rep", c.ptl.n_rep);
  p.get("primitive_samples", c.ptl.primitive_samples);
  p.get("train_steps", c.ptl.train_steps);
  p.get("batch_size", c.ptl.batch_size);
  p.get("learning_rate", c.ptl.learning_rate);
  p.get_enum("reduction", c.ptl.reduction, parse_reduction);
  p.finish();

  ObjectReader loss = top.child("loss");
  loss.get("lambda", c.loss.lambda);
  loss.get("eta", c.loss.eta);
  loss.get("kappa", c.loss.kappa);
  loss.finish();

  ObjectReader train = top.child("train");
  train.get("learning_rate", c.train.learning_rate);
  train.get("probe_learning_rate", c.train.probe_learning_rate);
  train.get("batch_size", c.train.batch_size);
  train.get("bootstrap_steps", c.train.bootstrap_steps);
  train.get("finetune_steps", c.train.finetune_steps);
  train.get("shared_steps", c.train.shared_steps);
  train.get_enum("expansion", c.train.expansion, parse_expansion);
  train.finish();

  top.finish();
  c.validate();
  return c;
}

}  // namespace cmoe::harness
