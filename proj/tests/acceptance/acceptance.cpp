// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Prints one PASS/FAIL line per acceptance criterion and exits non-zero if
// any fails. Criteria 4, 6, 7, 8 and 10 train full desk-scale streams, so a
// complete run takes a while on one core.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "cmoe/backbone.hpp"
#include "cmoe/error.hpp"
#include "cmoe/harness.hpp"
#include "cmoe/moe.hpp"
#include "cmoe/objective.hpp"
#include "cmoe/ops.hpp"
#include "cmoe/pgke.hpp"
#include "cmoe/ptl.hpp"
#include "gradcheck.hpp"
#include "moe_oracle.hpp"
#include "pgke_oracle.hpp"
#include "scratch_dir.hpp"
#include "toy_loss.hpp"

using namespace cmoe;
using harness::RoutingMode;

namespace {

// Tolerances, pinned.
constexpr double kGradTol = 1e-3;
constexpr double kGradSeconds = 60.0;
constexpr double kDenseTol = 1e-10;
constexpr double kGateSumTol = 1e-9;
constexpr double kStreamSeconds = 600.0;
constexpr double kLocateMin = 0.90;
constexpr double kSharedBwtMax = -0.05;
constexpr double kPtlBwtMin = -0.02;
constexpr double kKlMcRel = 0.02;
constexpr double kLikelihoodTol = 1e-9;

constexpr std::uint64_t kSeeds[] = {0, 1, 2, 3, 4};
constexpr std::size_t kOrderingSeeds = 3;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void progress(const std::string& s) { std::cerr << "  .. " << s << std::endl; }

Tensor project(const Tensor& y, Rng rng) { return ops::sum(ops::mul(y, Tensor::uniform(y.shape(), 1.0, rng))); }

// ---------------------------------------------------------------- 1

double worst_op_gradient(Rng& rng) {
  using testing::gradcheck;
  auto param = [&](Shape s, double bound = 1.0) { return Tensor::uniform(std::move(s), bound, rng, true); };
  const Rng r0 = rng.fork(0);
  double worst = 0.0;
  auto check = [&](const std::function<Tensor()>& f, std::vector<Tensor> ps) {
    worst = std::max(worst, gradcheck(f, ps));
  };

  Tensor a = param({3, 4}), b = param({3, 4}), bias = param({4}), w = param({4, 5}), wt = param({5, 4});
  Tensor a3 = param({2, 3, 4}), b3 = param({2, 4, 3});
  for (double& v : a.mutable_data()) v += v >= 0 ? 0.1 : -0.1;  // off relu's kink
  for (double& v : b.mutable_data()) v += v >= 0 ? 1.0 : -1.0;  // away from zero for div
  Tensor pos = param({3, 4});
  for (double& v : pos.mutable_data()) v = std::abs(v) + 0.5;
  Tensor logits = param({2, 3, 5}, 2.0), sq = param({2, 4, 4}, 2.0), g = param({6, 5}, 2.0), table = param({6, 3});

  check([&] { return project(ops::matmul(a3, w), r0); }, {a3, w});
  check([&] { return project(ops::matmul(a3, wt, ops::Transpose::kYes), r0); }, {a3, wt});
  check([&] { return project(ops::matmul(a3, b3), r0); }, {a3, b3});
  check([&] { return project(ops::add(a, bias), r0); }, {a, bias});
  check([&] { return project(ops::sub(a, b), r0); }, {a, b});
  check([&] { return project(ops::mul(a, b), r0); }, {a, b});
  check([&] { return project(ops::div(a, b), r0); }, {a, b});
  check([&] { return project(ops::scale(a, -2.5), r0); }, {a});
  check([&] { return project(ops::add_scalar(a, 0.7), r0); }, {a});
  check([&] { return project(ops::relu(a), r0); }, {a});
  check([&] { return project(ops::exp(a), r0); }, {a});
  check([&] { return project(ops::log(pos), r0); }, {pos});
  check([&] { return project(ops::softplus(a), r0); }, {a});
  check([&] { return project(ops::softmax(logits), r0); }, {logits});
  check([&] { return project(ops::softmax(sq, true), r0); }, {sq});
  check([&] { return project(ops::topk_softmax(g, 2), r0); }, {g});
  check([&] { return ops::mean(ops::exp(a)); }, {a});
  check([&] { return project(ops::sum_last(a), r0); }, {a});
  check([&] { return project(ops::reshape(a, {2, 6}), r0); }, {a});
  check([&] { return project(ops::slice(a, 1, 1, 3), r0); }, {a});
  check([&] {
    const Tensor parts[] = {a, ops::reshape(bias, {1, 4})};
    return project(ops::concat(parts, 0), r0);
  }, {a, bias});
  const std::size_t rows[] = {4, 0, 4, 2};
  check([&] { return project(ops::gather_rows(table, rows), r0); }, {table});
  const std::size_t targets[] = {1, 3, 0};
  check([&] { return ops::cross_entropy(a, targets); }, {a});
  return worst;
}

Verdict criterion1() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  const double ops_err = worst_op_gradient(rng);
  const double loss_err = testing::toy_total_loss_gradient(rng);
  const double secs = seconds_since(t0);
  const double worst = std::max(ops_err, loss_err);
  return {worst <= kGradTol && secs < kGradSeconds,
          fmt("max rel err ops %.2e, total_loss %.2e (tol %.0e); %.1f s (limit %.0f s)", ops_err, loss_err, kGradTol,
              secs, kGradSeconds)};
}

// ---------------------------------------------------------------- 2, 3

moe::MoeLayer random_layer(std::size_t d_in, std::size_t d_out, std::size_t rank, std::size_t n, std::size_t k,
                           Rng& rng) {
  moe::MoeLayer layer(Tensor::uniform({d_out, d_in}, 0.5, rng), rank, "layer");
  layer.append_experts(n, moe::ExpertInit::zero_b(), 0, rng);
  for (moe::LoraExpert& e : layer.experts()) {
    for (double& v : e.B.mutable_data()) v = rng.uniform(-0.5, 0.5);
  }
  layer.activate(moe::make_router(n, d_in, k, 0, rng));
  return layer;
}

Verdict criterion2() {
  Rng rng(202);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.index(6);
    const std::size_t k = 1 + rng.index(n);
    moe::MoeLayer layer = random_layer(3 + rng.index(5), 2 + rng.index(5), 1 + rng.index(4), n, k, rng);
    const Tensor x = Tensor::uniform({1 + rng.index(6), layer.d_in()}, 1.0, rng);
    const Tensor y = layer.forward(x);
    const std::vector<double> ref = oracle::dense_moe(layer, x);
    for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(y.at(i) - ref[i]));
  }
  std::size_t mismatched = 0;
  for (int trial = 0; trial < 20; ++trial) {
    moe::MoeLayer layer = random_layer(2 + rng.index(6), 2 + rng.index(6), 1 + rng.index(3), 1, 1, rng);
    const Tensor x = Tensor::uniform({1 + rng.index(5), layer.d_in()}, 1.0, rng);
    const Tensor y = layer.forward(x);
    const std::vector<double> ref = oracle::single_expert(layer, x);
    for (std::size_t i = 0; i < ref.size(); ++i) mismatched += y.at(i) != ref[i] ? 1 : 0;
  }
  return {worst <= kDenseTol && mismatched == 0,
          fmt("100 layers max |moe - dense| %.2e (tol %.0e); single expert top_k 1: %zu inexact entries", worst,
              kDenseTol, mismatched)};
}

Verdict criterion3() {
  Rng rng(303);
  std::size_t bad = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t n = 1 + rng.index(8);
    const std::size_t k = 1 + rng.index(n);
    const std::size_t d = 1 + rng.index(6);
    moe::Router r{Tensor::uniform({n, d}, 2.0, rng), k, 0};
    std::vector<double> x(d);
    for (double& v : x) v = rng.uniform(-1, 1);
    const auto g = moe::route(r, x);
    std::size_t nonzero = 0;
    double sum = 0;
    for (double v : g) {
      nonzero += v != 0.0 ? 1 : 0;
      sum += v;
    }
    worst = std::max(worst, std::abs(sum - 1.0));
    bad += (nonzero != k || std::abs(sum - 1.0) > kGateSumTol) ? 1 : 0;
  }
  return {bad == 0, fmt("10000 routings: %zu violations, max |sum - 1| %.2e (tol %.0e)", bad, worst, kGateSumTol)};
}

// ---------------------------------------------------------------- 5

Verdict criterion5() {
  Rng rng(505);
  std::size_t disagreements = 0, cases = 0;
  for (double alpha : {0.0, 0.8, 2.0}) {
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t n_old = 1 + rng.index(6), n_probe = 1 + rng.index(4);
      pgke::LayerActivation la;
      for (std::size_t e = 0; e < n_old + n_probe; ++e) {
        // Some ties and zeros, the edge cases for a strict comparison.
        const double v = rng.index(4) == 0 ? 0.25 * static_cast<double>(rng.index(4)) : rng.uniform(0, 1);
        la.act.push_back(v);
      }
      for (std::size_t e = n_old; e < n_old + n_probe; ++e) la.probe_indices.push_back(e);
      pgke::ProbeConfig cfg;
      cfg.alpha = alpha;
      cfg.n_new_experts_cap = 1 + rng.index(3);
      const pgke::ExpansionPlan plan = pgke::select_expansion({la}, cfg);
      const oracle::Decision want = oracle::decide(la.act, la.probe_indices, alpha, cfg.n_new_experts_cap);
      const std::size_t got_n = plan.empty() ? 0 : plan.layers[0].n_new;
      const bool agree = got_n == want.n_new && (got_n == 0 || plan.layers[0].copy_source == want.copy_source);
      disagreements += agree ? 0 : 1;
      ++cases;
    }
  }
  return {disagreements == 0, fmt("%zu random Act vectors, alpha in {0, 0.8, 2}: %zu disagreements", cases,
                                  disagreements)};
}

// ---------------------------------------------------------------- 9

Verdict criterion9() {
  Rng rng(909);
  // KL closed form against a Monte Carlo estimate of E_q[log q - log p].
  double worst_kl = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t k = 3;
    std::vector<double> mu(k), sigma(k);
    for (std::size_t i = 0; i < k; ++i) {
      mu[i] = rng.uniform(-1.5, 1.5);
      sigma[i] = rng.uniform(0.3, 2.0);
    }
    const double closed = ptl::kl_divergence(Tensor::from({1, k}, mu), Tensor::from({1, k}, sigma)).at(0);
    const std::vector<double> zero(k, 0.0), one(k, 1.0);
    double mc = 0.0;
    const int draws = 400000;
    for (int s = 0; s < draws; ++s) {
      std::vector<double> z(k);
      for (std::size_t i = 0; i < k; ++i) z[i] = mu[i] + sigma[i] * rng.normal();
      mc += ptl::log_likelihood(mu, sigma, z) - ptl::log_likelihood(zero, one, z);
    }
    mc /= draws;
    worst_kl = std::max(worst_kl, std::abs(mc - closed) / closed);
  }
  // Diagonal log-density against the log of the explicit product of 1-D densities.
  double worst_ll = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 1 + rng.index(8);
    std::vector<double> mu(d), sigma(d), f(d);
    double product = 1.0;
    for (std::size_t i = 0; i < d; ++i) {
      mu[i] = rng.uniform(-1, 1);
      sigma[i] = rng.uniform(0.5, 2.0);
      f[i] = rng.uniform(-2, 2);
      const double u = (f[i] - mu[i]) / sigma[i];
      product *= std::exp(-0.5 * u * u) / (sigma[i] * std::sqrt(2.0 * std::numbers::pi));
    }
    worst_ll = std::max(worst_ll, std::abs(ptl::log_likelihood(mu, sigma, f) - std::log(product)));
  }
  // softplus positivity, including far negative inputs.
  std::vector<double> xs(10000);
  for (double& v : xs) v = rng.uniform(-40, 40);
  const Tensor sp = ops::softplus(Tensor::from({xs.size()}, xs));
  std::size_t nonpositive = 0;
  for (double v : sp.data()) nonpositive += v > 0.0 ? 0 : 1;
  return {worst_kl <= kKlMcRel && worst_ll <= kLikelihoodTol && nonpositive == 0,
          fmt("KL vs MC rel err %.3f (tol %.2f); log-likelihood vs product %.2e (tol %.0e); softplus <= 0: %zu/10000",
              worst_kl, kKlMcRel, worst_ll, kLikelihoodTol, nonpositive)};
}

// ---------------------------------------------------------------- stream runs

struct StreamRun {
  harness::RunState state;
  harness::RunResult result;
  double seconds = 0.0;
};

StreamRun run_desk(std::uint64_t seed, tasks::Similarity similarity, std::vector<RoutingMode> routing) {
  harness::RunConfig c = harness::preset("desk");
  c.seed = seed;
  c.stream.similarity = similarity;
  c.routing = std::move(routing);
  const auto t0 = std::chrono::steady_clock::now();
  StreamRun r{harness::init_run(c), {}, 0.0};
  r.result = harness::run_stream(r.state);
  r.seconds = seconds_since(t0);
  progress(fmt("seed %llu %s: %.0f s", static_cast<unsigned long long>(seed),
               std::string(tasks::similarity_name(similarity)).c_str(), r.seconds));
  return r;
}

double expanded_layers(const harness::RunState& st) {
  double total = 0;
  for (const auto& rep : st.reports) total += static_cast<double>(rep.plan.expanded_layers());
  return total / static_cast<double>(st.reports.size());
}

Verdict criterion4(const StreamRun& run) {
  const harness::AccuracyMatrix& o = run.result.matrices.at(RoutingMode::kOracle);
  std::size_t differ = 0;
  for (std::size_t j = 1; j < o.size(); ++j) {
    for (std::size_t i = 0; i < j; ++i) differ += o.at(j, i) == o.at(i, i) ? 0 : 1;
  }
  const double b = harness::bwt(o);
  return {differ == 0 && b == 0.0 && run.seconds <= kStreamSeconds,
          fmt("oracle a[j][i] != a[i][i] in %zu cells, BWT %.17g; full stream %.0f s (limit %.0f s)", differ, b,
              run.seconds, kStreamSeconds)};
}

Verdict criterion6(const std::vector<StreamRun>& disjoint, const std::vector<StreamRun>& duplicate) {
  double dis = 0, dup = 0, worst_ratio = 0;
  for (const auto& r : disjoint) {
    dis += expanded_layers(r.state);
    worst_ratio = std::max(worst_ratio, r.result.params.total.ratio());
  }
  for (const auto& r : duplicate) dup += expanded_layers(r.state);
  dis /= static_cast<double>(disjoint.size());
  dup /= static_cast<double>(duplicate.size());
  return {dup < dis && worst_ratio < 1.0,
          fmt("mean expanded layers per task: duplicate %.2f vs disjoint %.2f over %zu seeds; max disjoint param "
              "ratio %.3f (must be < 1)",
              dup, dis, disjoint.size(), worst_ratio)};
}

Verdict criterion7(const std::vector<StreamRun>& runs) {
  double worst = 1.0;
  std::string per;
  for (const auto& r : runs) {
    for (double a : r.result.locate_accuracy) worst = std::min(worst, a);
  }
  for (double a : runs.front().result.locate_accuracy) per += fmt("%.3f ", a);
  return {worst >= kLocateMin, fmt("min per-task locate accuracy %.3f over %zu seeds (need >= %.2f); seed 0: %s",
                                   worst, runs.size(), kLocateMin, per.c_str())};
}

Verdict criterion8(const std::vector<StreamRun>& runs) {
  std::map<RoutingMode, double> last, b;
  for (const auto& r : runs) {
    for (const auto& [m, mat] : r.result.matrices) {
      last[m] += harness::mean_accuracy(mat, harness::MeanSetting::kLast) / static_cast<double>(runs.size());
      b[m] += harness::bwt(mat) / static_cast<double>(runs.size());
    }
  }
  using enum RoutingMode;
  const bool order = last[kOracle] >= last[kPtl] && last[kPtl] > last[kLast] && last[kLast] >= last[kRandom];
  const bool forgetting = b[kPtl] > b[kShared] && b[kShared] <= kSharedBwtMax && b[kPtl] >= kPtlBwtMin;
  return {order && forgetting,
          fmt("mean of %zu seeds, last-row mean: oracle %.3f ptl %.3f last %.3f random %.3f; BWT ptl %.3f (>= %.2f) "
              "shared %.3f (<= %.2f)",
              runs.size(), last[kOracle], last[kPtl], last[kLast], last[kRandom], b[kPtl], kPtlBwtMin, b[kShared],
              kSharedBwtMax)};
}

Verdict criterion10(StreamRun& run) {
  // Rerun determinism on a short stream, persistence on the full one.
  harness::RunConfig c = harness::preset("desk");
  c.train.bootstrap_steps = 60;
  c.train.finetune_steps = 40;
  c.train.shared_steps = 40;
  c.probe.probe_steps = 20;
  c.ptl.train_steps = 60;
  std::string csv[2];
  for (auto& out : csv) {
    harness::RunState st = harness::init_run(c);
    out = harness::metrics_csv(st.config, harness::run_stream(st));
  }
  testing::ScratchDir dir("acceptance");
  harness::save_checkpoint(run.state, dir.path() / "ckpt");
  harness::RunState back = harness::load_checkpoint(dir.path() / "ckpt");
  const std::size_t last = run.state.tasks_trained - 1;
  std::size_t differ = 0;
  for (RoutingMode m : run.state.config.routing) {
    const auto a = harness::evaluate_all(run.state, last, m), b = harness::evaluate_all(back, last, m);
    differ += (a.accuracy == b.accuracy && a.routed == b.routed) ? 0 : 1;
  }
  return {csv[0] == csv[1] && differ == 0,
          fmt("rerun metrics byte-identical: %s; routing modes differing after save/load: %zu",
              csv[0] == csv[1] ? "yes" : "no", differ)};
}

}  // namespace

// Usage: acceptance [--known-failing N,N,...]
// Listed criteria still print FAIL (marked "known") but do not set the exit
// code, so ctest can gate on everything else.
int main(int argc, char** argv) {
  std::set<int> known;
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) != "--known-failing") continue;
    std::istringstream list(argv[i + 1]);
    for (std::string item; std::getline(list, item, ',');) known.insert(std::stoi(item));
  }
  int failed = 0, failed_known = 0;
  auto report = [&](int n, const char* name, const std::function<Verdict()>& f) {
    Verdict v;
    try {
      v = f();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    if (!v.pass) (known.count(n) ? failed_known : failed) += 1;
    const char* tag = v.pass ? "PASS" : known.count(n) ? "FAIL (known)" : "FAIL";
    std::cout << tag << "  " << n << ". " << name << ": " << v.detail << std::endl;
  };

  report(1, "gradient suite", criterion1);
  report(2, "moe exactness", criterion2);
  report(3, "gate contract", criterion3);
  report(5, "expansion rule vs brute force", criterion5);
  report(9, "vae numerics", criterion9);

  const std::vector<RoutingMode> all = {RoutingMode::kPtl, RoutingMode::kOracle, RoutingMode::kLast,
                                        RoutingMode::kRandom, RoutingMode::kShared};
  std::vector<StreamRun> disjoint, duplicate;
  try {
    for (std::uint64_t s : kSeeds) {
      disjoint.push_back(run_desk(s, tasks::Similarity::kDisjoint,
                                  disjoint.size() < kOrderingSeeds ? all
                                                                   : std::vector{RoutingMode::kPtl,
                                                                                 RoutingMode::kOracle}));
    }
    for (std::uint64_t s : kSeeds) duplicate.push_back(run_desk(s, tasks::Similarity::kDuplicate, {RoutingMode::kOracle}));
  } catch (const std::exception& e) {
    std::cout << "FAIL  stream runs: " << e.what() << std::endl;
    return 1;
  }
  const std::vector<StreamRun> ordering(disjoint.begin(), disjoint.begin() + kOrderingSeeds);

  report(4, "no forgetting under oracle routing", [&] { return criterion4(disjoint.front()); });
  report(6, "adaptive expansion", [&] { return criterion6(disjoint, duplicate); });
  report(7, "task location", [&] { return criterion7(ordering); });
  report(8, "routing ablation ordering", [&] { return criterion8(ordering); });
  report(10, "determinism and persistence", [&] { return criterion10(disjoint.front()); });

  if (failed + failed_known == 0) {
    std::cout << "all criteria pass" << std::endl;
  } else {
    std::cout << fmt("%d criteria fail (%d known)", failed + failed_known, failed_known) << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
