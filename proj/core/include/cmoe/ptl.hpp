// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "cmoe/moe.hpp"
#include "cmoe/objective.hpp"
#include "cmoe/rng.hpp"
#include "cmoe/tensor.hpp"

/// Task location from frozen last-token features. Each task gets a small
/// Gaussian VAE; a query is scored by its reconstruction log-probability under
/// every task's VAE, z-normalized by that task's own score statistics.
namespace cmoe::ptl {

/// How the N_rep decoded likelihoods of one query are combined.
enum class ScoreReduction {
  kMeanLog,     // mean of log-densities (default)
  kLogMeanExp,  // log of the mean density
};

struct VaeConfig {
  std::size_t d_latent = 16;
  std::size_t n_rep = 10;
  std::size_t primitive_samples = 256;  // T
  std::size_t train_steps = 400;
  std::size_t batch_size = 64;
  double learning_rate = 3e-3;
  ScoreReduction reduction = ScoreReduction::kMeanLog;
};

/// Linear encoder/decoder maps; the two scale heads go through softplus.
struct VaeModel {
  Tensor enc_mu_w, enc_mu_b;        // (d_latent, d_model), (d_latent)
  Tensor enc_sigma_w, enc_sigma_b;  // (d_latent, d_model), (d_latent)
  Tensor dec_mu_w, dec_mu_b;        // (d_model, d_latent), (d_model)
  Tensor dec_sigma_w, dec_sigma_b;  // (d_model, d_latent), (d_model)
  std::size_t d_model = 0;
  std::size_t d_latent = 0;
  int owner_task = 0;

  /// Weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero, all trainable.
  static VaeModel init(std::size_t d_model, std::size_t d_latent, int task, Rng& rng);
  /// All-zero weights and biases (frozen).
  static VaeModel zeros(std::size_t d_model, std::size_t d_latent, int task);

  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  VaeModel clone() const;
  void set_frozen(bool on);
};

struct Gaussian {
  Tensor mu;     // (N, k)
  Tensor sigma;  // (N, k), strictly positive
};

/// f: (N, d_model). Raises NumericError on non-finite input.
Gaussian encode(const VaeModel& vae, const Tensor& f);
/// z: (N, d_latent) -> reconstruction mean and scale, (N, d_model).
Gaussian decode(const VaeModel& vae, const Tensor& z);

/// z = mu + sigma * eps with eps ~ N(0, 1); differentiable in mu and sigma.
Tensor sample_latent(const Tensor& mu, const Tensor& sigma, Rng& rng);

/// Per-row diagonal Gaussian log-density of f, shape (N).
Tensor log_likelihood(const Gaussian& rec, const Tensor& f);
/// Scalar form for one feature vector. Throws ContractError if any sigma <= 0.
double log_likelihood(std::span<const double> mu, std::span<const double> sigma, std::span<const double> f);

/// Per-row KL(N(mu, sigma^2) || N(0, 1)), shape (N).
Tensor kl_divergence(const Tensor& mu, const Tensor& sigma);

/// Mean over n_rep latent draws of the decoded log-likelihood, shape (N),
/// differentiable.
Tensor rec_logprob(const VaeModel& vae, const Tensor& f, std::size_t n_rep, Rng& rng);

/// Scoring form of rec_logprob under either reduction; no graph is kept.
std::vector<double> score(const VaeModel& vae, const Tensor& f, std::size_t n_rep, Rng& rng,
                          ScoreReduction reduction = ScoreReduction::kMeanLog);

/// Minimizes eta * (-rec_logprob) + lambda * KL on features (n, d_model)
/// with Adam. Only the new VAE is read or written. Returns it frozen.
VaeModel fit_task_vae(const Tensor& features, const VaeConfig& config, const harness::LossWeights& weights,
                      int task, Rng& rng);

struct TaskPrimitive {
  double mean_logp = 0.0;
  double std_logp = 1.0;
  std::size_t sample_count = 0;
  int owner_task = 0;
};

inline constexpr double kStdFloor = 1e-6;

/// Mean and population std (floored) of the given scores.
TaskPrimitive primitive_from_scores(std::span<const double> scores, int task);
/// Scores the T feature rows and summarizes them. Needs T >= 2.
TaskPrimitive build_primitive(const VaeModel& vae, const Tensor& recent, std::size_t n_rep, Rng& rng,
                              ScoreReduction reduction = ScoreReduction::kMeanLog);

struct BankEntry {
  TaskPrimitive primitive;
  VaeModel vae;
  moe::RouterSet router;
};

/// Key-value bank: one (primitive, VAE) key and router value per trained task,
/// in training order.
class PrimitiveBank {
 public:
  void insert(BankEntry entry);
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const BankEntry& at(std::size_t i) const { return entries_.at(i); }
  const std::vector<BankEntry>& entries() const noexcept { return entries_; }
  /// Unchecked append for tests that need duplicated or permuted banks.
  std::vector<BankEntry>& mutable_entries() noexcept { return entries_; }

 private:
  std::vector<BankEntry> entries_;
};

struct LocateOptions {
  std::size_t n_rep = 10;
  ScoreReduction reduction = ScoreReduction::kMeanLog;
};

/// z-scores (N rows x bank size) of feature rows against every entry. The
/// latent noise of an entry is keyed by its owner task, so the score of a
/// query under a task does not depend on where that task sits in the bank.
std::vector<std::vector<double>> z_scores(const PrimitiveBank& bank, const Tensor& features,
                                          const LocateOptions& options, Rng& rng);

/// argmax_i of the z-scores, lowest bank index on exact ties.
std::size_t argmax_first(std::span<const double> values);

/// Located bank index per feature row. Throws ContractError on an empty bank.
std::vector<std::size_t> locate_tasks(const PrimitiveBank& bank, const Tensor& features,
                                      const LocateOptions& options, Rng& rng);
std::size_t locate_task(const PrimitiveBank& bank, std::span<const double> feature, const LocateOptions& options,
                        Rng& rng);

/// Directory with manifest.json + params.bin; the round trip is bit-exact.
void save_bank(const PrimitiveBank& bank, const std::filesystem::path& dir);
PrimitiveBank load_bank(const std::filesystem::path& dir);

}  // namespace cmoe::ptl
