// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "cmoe/error.hpp"
#include "cmoe/pgke.hpp"
#include "cmoe/rng.hpp"
#include "pgke_oracle.hpp"

using namespace cmoe;

namespace {

struct Fixture {
  Rng rng{41};
  moe::Backbone model;
  moe::RouterSet routers;
  tasks::TaskSpec spec;
  std::vector<std::vector<std::size_t>> examples;

  static moe::BackboneConfig config() {
    moe::BackboneConfig c;
    c.n_blocks = 2;
    return c;
  }

  Fixture() : model(config(), rng) {
    for (std::size_t h = 0; h < model.n_layers(); ++h) {
      model.layer(h).append_experts(2, moe::ExpertInit::zero_b(), 0, rng);
      for (auto& e : model.layer(h).experts()) {
        for (double& v : e.B.mutable_data()) v = rng.uniform(-0.1, 0.1);
        e.set_frozen(true);
      }
      routers.push_back(moe::make_router(2, 64, 2, 0, rng));
    }
    moe::freeze_routers(routers);
    model.activate(routers);
    spec = tasks::generate_stream({})[1];
    for (std::uint64_t i = 0; i < 40; ++i) examples.push_back(tasks::make_example(spec, tasks::Split::kTrain, i));
  }
};

}  // namespace

TEST_CASE("split_probe_data") {
  Rng a(3), b(3);
  const pgke::ProbeSplit s = pgke::split_probe_data(100, 0.10, a);
  CHECK(s.train.size() == 10);
  CHECK(s.eval.size() == 10);
  std::set<std::size_t> both(s.train.begin(), s.train.end());
  both.insert(s.eval.begin(), s.eval.end());
  CHECK(both.size() == 20);
  CHECK(*both.rbegin() < 100);
  const pgke::ProbeSplit t = pgke::split_probe_data(100, 0.10, b);
  CHECK(s.train == t.train);
  CHECK(s.eval == t.eval);

  Rng c(5);
  const pgke::ProbeSplit m = pgke::split_probe_data(2, 0.5, c);
  CHECK(m.train.size() == 1);
  CHECK(m.eval.size() == 1);
  CHECK(m.train[0] != m.eval[0]);

  Rng d(5);
  CHECK(pgke::split_probe_data(95, 0.10, d).train.size() == 10);
  CHECK_THROWS_AS(pgke::split_probe_data(3, 0.6, d), ConfigError);
  CHECK_THROWS_AS(pgke::split_probe_data(1, 0.1, d), ContractError);
}

TEST_CASE("expansion_threshold examples") {
  const std::vector<double> act{0.5, 0.3, 0.1, 0.1};
  CHECK(pgke::expansion_threshold(act, 0.8) == doctest::Approx(0.25 - 0.8 * std::sqrt(0.0275)).epsilon(1e-14));
  CHECK(pgke::expansion_threshold(act, 0.8) == doctest::Approx(0.11734).epsilon(1e-4));
  const std::vector<double> flat{0.2, 0.2, 0.2};
  CHECK(pgke::expansion_threshold(flat, 2.0) == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(pgke::expansion_threshold(act, 0.0) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK_THROWS_AS(pgke::expansion_threshold(std::vector<double>{}, 0.8), ContractError);
}

TEST_CASE("select_expansion examples") {
  pgke::ProbeConfig cfg;
  pgke::ActivationReport report(2);
  report[0].act = {0.5, 0.3, 0.1, 0.1};
  report[0].probe_indices = {2, 3};
  report[1].act = {0.2, 0.2, 0.3, 0.3};
  report[1].probe_indices = {2, 3};
  const pgke::ExpansionPlan plan = pgke::select_expansion(report, cfg);
  REQUIRE(plan.layers.size() == 1);
  CHECK(plan.layers[0].layer == 1);
  CHECK(plan.layers[0].n_new == 2);
  CHECK(plan.layers[0].copy_source == 2);  // tie between the probes: lower index

  cfg.n_new_experts_cap = 1;
  CHECK(pgke::select_expansion(report, cfg).layers[0].n_new == 1);

  pgke::ActivationReport none(1);
  none[0].act = {0.7, 0.3, 0.0, 0.0};
  none[0].probe_indices = {2, 3};
  CHECK(pgke::select_expansion(none, pgke::ProbeConfig{}).empty());

  pgke::ActivationReport bad(1);
  bad[0].act = {1.0};
  bad[0].probe_indices = {4};
  CHECK_THROWS_AS(pgke::select_expansion(bad, pgke::ProbeConfig{}), StructuralError);
}

TEST_CASE("select_expansion agrees with brute-force enumeration") {
  Rng rng(77);
  std::size_t disagreements = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const double alpha = std::array<double, 3>{0.0, 0.8, 2.0}[static_cast<std::size_t>(trial) % 3];
    pgke::ProbeConfig cfg;
    cfg.alpha = alpha;
    cfg.n_new_experts_cap = 1 + rng.index(3);
    pgke::ActivationReport report(1 + rng.index(4));
    for (auto& layer : report) {
      const std::size_t n = 3 + rng.index(8);
      double total = 0;
      for (std::size_t e = 0; e < n; ++e) {
        layer.act.push_back(rng.uniform(0, 1));
        total += layer.act.back();
      }
      for (double& a : layer.act) a /= total;
      const std::size_t probes = 1 + rng.index(n - 1);
      for (std::size_t p = n - probes; p < n; ++p) layer.probe_indices.push_back(p);
    }
    const pgke::ExpansionPlan plan = pgke::select_expansion(report, cfg);
    std::size_t k = 0;
    for (std::size_t h = 0; h < report.size(); ++h) {
      const auto ref = oracle::decide(report[h].act, report[h].probe_indices, alpha, cfg.n_new_experts_cap);
      const pgke::LayerPlan* got = k < plan.layers.size() && plan.layers[k].layer == h ? &plan.layers[k++] : nullptr;
      if ((got ? got->n_new : 0) != ref.n_new) ++disagreements;
      if (got && got->copy_source != ref.copy_source) ++disagreements;
    }
  }
  CHECK(disagreements == 0);
}

TEST_CASE("probe lifecycle on a small model") {
  Fixture f;
  pgke::ProbeConfig cfg;
  cfg.probe_steps = 3;
  Rng rng(1);
  const std::uint64_t old_hash = f.model.model_hash();
  const pgke::ProbeHandles handles = pgke::attach_probes(f.model, f.routers, cfg, 1, rng);
  CHECK(handles.old_counts == std::vector<std::size_t>{2, 2});
  CHECK(handles.probe_indices[0] == std::vector<std::size_t>{2, 3});
  const auto& ex = f.model.layer(0).experts();
  for (std::size_t i = 0; i < ex[0].B.numel(); ++i) CHECK(ex[2].B.at(i) == (ex[0].B.at(i) + ex[1].B.at(i)) / 2);
  CHECK(f.model.layer(0).active_router().visible_experts() == 4);
  CHECK(f.model.layer(0).active_router().G.name() == "block0.probe_router.task1");

  harness::TrainOptions opts;
  opts.batch_size = 8;
  AdamW opt(AdamWConfig{1e-2});
  pgke::train_probes(f.model, f.spec, f.examples, cfg, opts, opt, rng);
  // Old experts are frozen; the previous routers were copied, not trained.
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t e = 0; e < 2; ++e) CHECK(f.model.layer(h).experts()[e].frozen);
  }
  CHECK(f.routers[0].G.requires_grad() == false);

  const pgke::ActivationReport report = pgke::activation_stats(f.model, handles, f.spec, f.examples, cfg);
  REQUIRE(report.size() == 2);
  for (const auto& la : report) {
    double s = 0, p = 0;
    for (double v : la.topk_frequency) s += v;
    for (double v : la.mean_gate_probability) p += v;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(la.act == la.topk_frequency);
    CHECK(la.threshold == doctest::Approx(pgke::expansion_threshold(la.act, cfg.alpha)).epsilon(1e-15));
  }

  // Expand layer 1 only, with zero fine-tune steps so the copies are observable.
  pgke::ExpansionPlan plan;
  plan.layers.push_back({1, 2, 3});
  const moe::LoraExpert probe = f.model.layer(1).experts()[3];
  const std::uint64_t probe_hash = probe.weight_hash();
  const pgke::ParamCounts counts = pgke::plan_parameters(plan, f.routers, f.model, 2);
  // Layer 1: 2 experts of r(d_in + d_out) + 4 router rows; layer 0: 2 router rows.
  CHECK(counts.added == 2 * 4 * (64 + 128) + 4 * 64 + 2 * 64);
  CHECK(counts.every_layer == 2 * (2 * 4 * (64 + 128) + 4 * 64));
  harness::TrainOptions none = opts;
  none.steps = 0;
  AdamW opt2(AdamWConfig{1e-2});
  moe::RouterSet out = pgke::expand_and_finetune(f.model, handles, plan, f.spec, f.examples, none, opt2, rng);
  CHECK(f.model.layer(0).size() == 2);
  CHECK(f.model.layer(1).size() == 4);
  CHECK(f.model.layer(1).experts()[2].weight_hash() == probe_hash);
  CHECK(f.model.layer(1).experts()[3].weight_hash() == probe_hash);
  CHECK(f.model.layer(1).experts()[2].origin_task == 1);
  CHECK(out[0].visible_experts() == 2);
  CHECK(out[1].visible_experts() == 4);
  CHECK(out[1].G.name() == "block1.router.task1");
  for (const auto& r : out) CHECK_FALSE(r.G.requires_grad());
  CHECK(out[1].G.same_storage(f.model.layer(1).active_router().G));
  // Rows copied from the previous router.
  for (std::size_t i = 0; i < 2 * 64; ++i) CHECK(out[1].G.at(i) == f.routers[1].G.at(i));
  (void)old_hash;
}

TEST_CASE("fine-tune trains only the new task's experts") {
  Fixture f;
  pgke::ProbeConfig cfg;
  cfg.probe_steps = 2;
  Rng rng(2);
  std::vector<std::uint64_t> before;
  for (std::size_t h = 0; h < 2; ++h) {
    for (const auto& e : f.model.layer(h).experts()) before.push_back(e.weight_hash());
  }
  const pgke::ProbeHandles handles = pgke::attach_probes(f.model, f.routers, cfg, 1, rng);
  harness::TrainOptions opts;
  opts.batch_size = 8;
  AdamW o1(AdamWConfig{1e-2});
  pgke::train_probes(f.model, f.spec, f.examples, cfg, opts, o1, rng);
  pgke::ExpansionPlan plan;
  plan.layers.push_back({0, 1, 2});
  opts.steps = 3;
  AdamW o2(AdamWConfig{1e-2});
  const std::uint64_t copy_hash = f.model.layer(0).experts()[2].weight_hash();
  pgke::expand_and_finetune(f.model, handles, plan, f.spec, f.examples, opts, o2, rng);
  std::size_t k = 0;
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t e = 0; e < 2; ++e) CHECK(f.model.layer(h).experts()[e].weight_hash() == before[k++]);
  }
  CHECK(f.model.layer(0).experts()[2].weight_hash() != copy_hash);
  for (std::size_t h = 0; h < 2; ++h) {
    for (const auto& e : f.model.layer(h).experts()) CHECK(e.frozen);
  }
}

TEST_CASE("activation stats under a flat router") {
  Fixture f;
  pgke::ProbeConfig cfg;
  Rng rng(3);
  const pgke::ProbeHandles handles = pgke::attach_probes(f.model, f.routers, cfg, 1, rng);
  // Equal logits: every token picks experts 0 and 1, full softmax is uniform.
  for (std::size_t h = 0; h < 2; ++h) {
    for (double& v : f.model.layer(h).active_router().G.mutable_data()) v = 0.0;
  }
  const auto report = pgke::activation_stats(f.model, handles, f.spec, f.examples, cfg);
  CHECK(report[0].topk_frequency == std::vector<double>{0.5, 0.5, 0.0, 0.0});
  for (double v : report[0].mean_gate_probability) CHECK(v == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(report[0].n_selected == 0);

  pgke::ProbeConfig gate = cfg;
  gate.activation_metric = pgke::ActivationMetric::kMeanGateProbability;
  const auto by_prob = pgke::activation_stats(f.model, handles, f.spec, f.examples, gate);
  CHECK(by_prob[0].act == by_prob[0].mean_gate_probability);
}

TEST_CASE("every-layer plan and parameter ratios") {
  Fixture f;
  pgke::ActivationReport report(2);
  for (auto& la : report) {
    la.act = {0.4, 0.4, 0.1, 0.1};
    la.probe_indices = {2, 3};
  }
  const pgke::ExpansionPlan every = pgke::every_layer_plan(report, 2);
  CHECK(every.expanded_layers() == 2);
  const pgke::ParamCounts full = pgke::plan_parameters(every, f.routers, f.model, 2);
  CHECK(full.ratio() == 1.0);
  const pgke::ParamCounts empty = pgke::plan_parameters({}, f.routers, f.model, 2);
  CHECK(empty.added == 2 * 2 * 64);
  CHECK(empty.ratio() < 1.0);
}

TEST_CASE("probe config validation") {
  pgke::ProbeConfig c;
  CHECK_NOTHROW(c.validate());
  c.alpha = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.probe_fraction = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.n_probes_per_layer = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(pgke::parse_metric("mean-gate-probability") == pgke::ActivationMetric::kMeanGateProbability);
  CHECK_THROWS_AS(pgke::parse_metric("x"), ConfigError);
}
