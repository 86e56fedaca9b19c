// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "cmoe/moe.hpp"

#include <cmath>
#include <string>

#include "cmoe/error.hpp"
#include "cmoe/ops.hpp"

namespace cmoe::moe {

void LoraExpert::set_frozen(bool on) {
  frozen = on;
  A.set_requires_grad(!on);
  B.set_requires_grad(!on);
}

std::uint64_t LoraExpert::weight_hash() const {
  return content_hash(A.data()) * 31 + content_hash(B.data());
}

void Router::set_frozen(bool on) { G.set_requires_grad(!on); }

Router Router::clone() const { return Router{G.clone(), top_k, owner_task}; }

RouterSet clone_routers(const RouterSet& routers) {
  RouterSet out;
  out.reserve(routers.size());
  for (const Router& r : routers) out.push_back(r.clone());
  return out;
}

void freeze_routers(RouterSet& routers) {
  for (Router& r : routers) r.set_frozen(true);
}

std::vector<double> route(const Router& router, std::span<const double> x) {
  const std::size_t n = router.visible_experts();
  const std::size_t d = router.G.dim(1);
  if (x.size() != d) {
    throw DimensionError("route: token has " + std::to_string(x.size()) + " features, router expects " +
                         std::to_string(d));
  }
  auto g = router.G.data();
  std::vector<double> logits(n, 0.0);
  for (std::size_t e = 0; e < n; ++e) {
    for (std::size_t k = 0; k < d; ++k) logits[e] += g[e * d + k] * x[k];
  }
  Tensor gates = ops::topk_softmax(Tensor::from({1, n}, std::move(logits)), router.top_k);
  auto gd = gates.data();
  return {gd.begin(), gd.end()};
}

Tensor aux_balance_loss(const Tensor& router_probs, std::span<const double> selection_counts) {
  if (!router_probs.defined() || router_probs.rank() != 2) {
    throw ContractError("aux_balance_loss: expected (T, N_e) router probabilities");
  }
  const std::size_t n = router_probs.dim(1);
  if (selection_counts.size() != n) {
    throw DimensionError("aux_balance_loss: " + std::to_string(selection_counts.size()) + " counts for " +
                         std::to_string(n) + " experts");
  }
  double total = 0.0;
  for (double c : selection_counts) total += c;
  if (total <= 0.0) throw ContractError("aux_balance_loss: no routed tokens");
  std::vector<double> f(n);
  for (std::size_t i = 0; i < n; ++i) f[i] = selection_counts[i] / total;
  const double tokens = static_cast<double>(router_probs.dim(0));
  Tensor weighted = ops::matmul(router_probs, Tensor::from({n, 1}, std::move(f)));
  return ops::scale(ops::sum(weighted), static_cast<double>(n) / tokens);
}

void GateStats::resize(std::size_t n_experts) {
  if (selections.size() < n_experts) {
    selections.resize(n_experts, 0.0);
    prob_sum.resize(n_experts, 0.0);
  }
}

void GateStats::merge(const GateStats& other) {
  resize(other.selections.size());
  for (std::size_t i = 0; i < other.selections.size(); ++i) {
    selections[i] += other.selections[i];
    prob_sum[i] += other.prob_sum[i];
  }
  tokens += other.tokens;
}

MoeLayer::MoeLayer(Tensor w0, std::size_t lora_rank, std::string name)
    : w0_(std::move(w0)), rank_(lora_rank), name_(std::move(name)) {
  if (!w0_.defined() || w0_.rank() != 2) throw DimensionError("MoeLayer: base weight must be (d_out, d_in)");
  if (rank_ < 1) throw ConfigError("MoeLayer: LoRA rank must be >= 1");
  w0_.set_requires_grad(false);
}

void MoeLayer::activate(const Router& router) {
  if (router.G.dim(1) != d_in()) {
    throw StructuralError(name_ + ": router input width " + std::to_string(router.G.dim(1)) + " != " +
                          std::to_string(d_in()));
  }
  if (router.visible_experts() > experts_.size()) {
    throw StructuralError(name_ + ": router sees " + std::to_string(router.visible_experts()) +
                          " experts but layer holds " + std::to_string(experts_.size()));
  }
  router_ = router;
}

Tensor MoeLayer::forward_base(const Tensor& x) const { return ops::matmul(x, w0_, ops::Transpose::kYes); }

Tensor MoeLayer::forward(const Tensor& x, MoeTrace* trace, std::size_t layer_index) {
  if (!has_router()) throw StructuralError(name_ + ": no active router");
  const std::size_t n = router_.visible_experts();
  if (n > experts_.size() || n == 0) {
    throw StructuralError(name_ + ": router sees " + std::to_string(n) + " experts but layer holds " +
                          std::to_string(experts_.size()));
  }
  if (router_.top_k > n) throw StructuralError(name_ + ": top_k exceeds visible experts");
  using ops::Transpose;

  Tensor base = ops::matmul(x, w0_, Transpose::kYes);
  Tensor logits = ops::matmul(x, router_.G, Transpose::kYes);
  Tensor gates = ops::topk_softmax(logits, router_.top_k);

  std::vector<Tensor> as, bs;
  as.reserve(n);
  bs.reserve(n);
  for (std::size_t e = 0; e < n; ++e) {
    as.push_back(experts_[e].A);
    bs.push_back(experts_[e].B);
  }
  Tensor a_all = ops::concat(as, 0);  // (n*r, d_in)
  Tensor b_all = ops::concat(bs, 1);  // (d_out, n*r)

  // Spread each gate across its expert's r latent columns.
  std::vector<double> expand(n * n * rank_, 0.0);
  for (std::size_t e = 0; e < n; ++e) {
    for (std::size_t j = 0; j < rank_; ++j) expand[e * n * rank_ + e * rank_ + j] = 1.0;
  }
  Tensor gate_cols = ops::matmul(gates, Tensor::from({n, n * rank_}, std::move(expand)));
  Tensor latent = ops::matmul(x, a_all, Transpose::kYes);
  Tensor delta = ops::matmul(ops::mul(latent, gate_cols), b_all, Transpose::kYes);
  Tensor out = ops::add(base, delta);

  if (trace && (trace->want_aux || trace->measure)) {
    const std::size_t tokens = x.dim(0);
    auto ld = logits.data();
    std::vector<double> counts(n, 0.0);
    for (std::size_t t = 0; t < tokens; ++t) {
      for (std::size_t e : ops::topk_indices(ld.subspan(t * n, n), router_.top_k)) counts[e] += 1.0;
    }
    Tensor probs = ops::softmax(logits);
    if (trace->want_aux) trace->aux_losses.push_back(aux_balance_loss(probs, counts));
    if (trace->measure) {
      if (trace->stats.size() <= layer_index) trace->stats.resize(layer_index + 1);
      GateStats& st = trace->stats[layer_index];
      st.resize(n);
      auto pd = probs.data();
      for (std::size_t t = 0; t < tokens; ++t) {
        for (std::size_t e = 0; e < n; ++e) st.prob_sum[e] += pd[t * n + e];
      }
      for (std::size_t e = 0; e < n; ++e) {
        st.selections[e] += counts[e];
        experts_[e].selection_count += static_cast<std::uint64_t>(counts[e]);
      }
      st.tokens += tokens;
    }
  }
  return out;
}

std::vector<std::size_t> MoeLayer::append_experts(std::size_t n, ExpertInit init, int task, Rng& rng) {
  if (n == 0) throw ContractError(name_ + ": append_experts with n = 0");
  const std::size_t old = experts_.size();
  std::vector<std::size_t> added;
  for (std::size_t i = 0; i < n; ++i) {
    LoraExpert ex;
    switch (init.kind) {
      case ExpertInit::Kind::kCopyOf: {
        if (init.source >= old) {
          throw IndexError(name_ + ": copy source " + std::to_string(init.source) + " out of range " +
                           std::to_string(old));
        }
        ex.A = experts_[init.source].A.clone();
        ex.B = experts_[init.source].B.clone();
        break;
      }
      case ExpertInit::Kind::kAverage: {
        if (old == 0) throw ContractError(name_ + ": average init over an empty expert group");
        std::vector<double> a(rank_ * d_in(), 0.0), b(d_out() * rank_, 0.0);
        for (std::size_t e = 0; e < old; ++e) {
          auto ad = experts_[e].A.data();
          auto bd = experts_[e].B.data();
          for (std::size_t k = 0; k < a.size(); ++k) a[k] += ad[k];
          for (std::size_t k = 0; k < b.size(); ++k) b[k] += bd[k];
        }
        for (double& v : a) v /= static_cast<double>(old);
        for (double& v : b) v /= static_cast<double>(old);
        ex.A = Tensor::from({rank_, d_in()}, std::move(a));
        ex.B = Tensor::from({d_out(), rank_}, std::move(b));
        break;
      }
      case ExpertInit::Kind::kZeroB: {
        ex.A = Tensor::uniform({rank_, d_in()}, 1.0 / std::sqrt(static_cast<double>(d_in())), rng);
        ex.B = Tensor::zeros({d_out(), rank_});
        break;
      }
      case ExpertInit::Kind::kWeights: {
        if (!init.A.defined() || !init.B.defined() || init.A.shape() != Shape{rank_, d_in()} ||
            init.B.shape() != Shape{d_out(), rank_}) {
          throw DimensionError(name_ + ": explicit expert weights do not match the layer");
        }
        ex.A = init.A.clone();
        ex.B = init.B.clone();
        break;
      }
    }
    const std::size_t index = experts_.size();
    ex.A.set_name(name_ + ".expert" + std::to_string(index) + ".A");
    ex.B.set_name(name_ + ".expert" + std::to_string(index) + ".B");
    ex.origin_task = task;
    ex.set_frozen(false);
    experts_.push_back(std::move(ex));
    added.push_back(index);
  }
  return added;
}

void MoeLayer::truncate_experts(std::size_t n) {
  if (n > experts_.size()) throw IndexError(name_ + ": cannot truncate to more experts than present");
  experts_.resize(n);
}

void MoeLayer::freeze_experts(const std::function<bool(const LoraExpert&)>& predicate) {
  for (LoraExpert& e : experts_) {
    if (predicate(e)) e.set_frozen(true);
  }
}

void MoeLayer::reset_selection_counts() {
  for (LoraExpert& e : experts_) e.selection_count = 0;
}

std::size_t MoeLayer::expert_parameter_count() const {
  std::size_t total = 0;
  for (const LoraExpert& e : experts_) total += e.parameter_count();
  return total;
}

Router derive_router(const Router& prev, std::size_t extra_rows, int task, Rng& rng) {
  const std::size_t rows = prev.visible_experts();
  const std::size_t d = prev.G.dim(1);
  auto pd = prev.G.data();
  std::vector<double> g(pd.begin(), pd.end());
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t i = 0; i < extra_rows * d; ++i) g.push_back(rng.uniform(-bound, bound));
  Router out{Tensor::from({rows + extra_rows, d}, std::move(g), true), prev.top_k, task};
  out.G.set_name(prev.G.name());
  return out;
}

Router make_router(std::size_t n_experts, std::size_t d_in, std::size_t top_k, int task, Rng& rng) {
  if (top_k < 1 || top_k > n_experts) throw ConfigError("router: top_k must lie in [1, N_e]");
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
  return Router{Tensor::uniform({n_experts, d_in}, bound, rng, true), top_k, task};
}

}  // namespace cmoe::moe
