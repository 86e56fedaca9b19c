// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "cmoe/ptl.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "cmoe/error.hpp"
#include "cmoe/ops.hpp"
#include "cmoe/optimizer.hpp"
#include "serialize.hpp"

namespace cmoe::ptl {

using ops::Transpose;

namespace {

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  return ops::add(ops::matmul(x, w, Transpose::kYes), b);
}

void check_features(const VaeModel& vae, const Tensor& f, const char* who) {
  if (f.rank() != 2 || f.dim(1) != vae.d_model) {
    throw DimensionError(std::string(who) + ": features " + shape_str(f.shape()) + " do not match d_model " +
                         std::to_string(vae.d_model));
  }
  for (double v : f.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(who) + ": non-finite feature");
  }
}

}  // namespace

VaeModel VaeModel::init(std::size_t d_model, std::size_t d_latent, int task, Rng& rng) {
  if (d_model == 0 || d_latent == 0) throw ConfigError("vae: extents must be positive");
  const double down = 1.0 / std::sqrt(static_cast<double>(d_model));
  const double up = 1.0 / std::sqrt(static_cast<double>(d_latent));
  VaeModel v;
  v.d_model = d_model;
  v.d_latent = d_latent;
  v.owner_task = task;
  v.enc_mu_w = Tensor::uniform({d_latent, d_model}, down, rng, true);
  v.enc_mu_b = Tensor::zeros({d_latent}, true);
  v.enc_sigma_w = Tensor::uniform({d_latent, d_model}, down, rng, true);
  v.enc_sigma_b = Tensor::zeros({d_latent}, true);
  v.dec_mu_w = Tensor::uniform({d_model, d_latent}, up, rng, true);
  v.dec_mu_b = Tensor::zeros({d_model}, true);
  v.dec_sigma_w = Tensor::uniform({d_model, d_latent}, up, rng, true);
  v.dec_sigma_b = Tensor::zeros({d_model}, true);
  return v;
}

VaeModel VaeModel::zeros(std::size_t d_model, std::size_t d_latent, int task) {
  VaeModel v;
  v.d_model = d_model;
  v.d_latent = d_latent;
  v.owner_task = task;
  v.enc_mu_w = Tensor::zeros({d_latent, d_model});
  v.enc_mu_b = Tensor::zeros({d_latent});
  v.enc_sigma_w = Tensor::zeros({d_latent, d_model});
  v.enc_sigma_b = Tensor::zeros({d_latent});
  v.dec_mu_w = Tensor::zeros({d_model, d_latent});
  v.dec_mu_b = Tensor::zeros({d_model});
  v.dec_sigma_w = Tensor::zeros({d_model, d_latent});
  v.dec_sigma_b = Tensor::zeros({d_model});
  return v;
}

std::vector<Tensor> VaeModel::parameters() const {
  return {enc_mu_w, enc_mu_b, enc_sigma_w, enc_sigma_b, dec_mu_w, dec_mu_b, dec_sigma_w, dec_sigma_b};
}

std::size_t VaeModel::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& t : parameters()) n += t.numel();
  return n;
}

VaeModel VaeModel::clone() const {
  VaeModel v = *this;
  v.enc_mu_w = enc_mu_w.clone();
  v.enc_mu_b = enc_mu_b.clone();
  v.enc_sigma_w = enc_sigma_w.clone();
  v.enc_sigma_b = enc_sigma_b.clone();
  v.dec_mu_w = dec_mu_w.clone();
  v.dec_mu_b = dec_mu_b.clone();
  v.dec_sigma_w = dec_sigma_w.clone();
  v.dec_sigma_b = dec_sigma_b.clone();
  return v;
}

void VaeModel::set_frozen(bool on) {
  for (Tensor t : parameters()) t.set_requires_grad(!on);
}

Gaussian encode(const VaeModel& vae, const Tensor& f) {
  check_features(vae, f, "encode");
  return {affine(f, vae.enc_mu_w, vae.enc_mu_b), ops::softplus(affine(f, vae.enc_sigma_w, vae.enc_sigma_b))};
}

Gaussian decode(const VaeModel& vae, const Tensor& z) {
  if (z.rank() != 2 || z.dim(1) != vae.d_latent) {
    throw DimensionError("decode: latent " + shape_str(z.shape()) + " does not match d_latent " +
                         std::to_string(vae.d_latent));
  }
  return {affine(z, vae.dec_mu_w, vae.dec_mu_b), ops::softplus(affine(z, vae.dec_sigma_w, vae.dec_sigma_b))};
}

Tensor sample_latent(const Tensor& mu, const Tensor& sigma, Rng& rng) {
  if (mu.shape() != sigma.shape()) {
    throw DimensionError("sample_latent: mu " + shape_str(mu.shape()) + " vs sigma " + shape_str(sigma.shape()));
  }
  std::vector<double> eps(mu.numel());
  for (double& e : eps) e = rng.normal();
  return ops::add(mu, ops::mul(sigma, Tensor::from(mu.shape(), std::move(eps))));
}

Tensor log_likelihood(const Gaussian& rec, const Tensor& f) {
  if (rec.mu.shape() != f.shape() || rec.sigma.shape() != f.shape() || f.rank() != 2) {
    throw DimensionError("log_likelihood: mu " + shape_str(rec.mu.shape()) + ", sigma " +
                         shape_str(rec.sigma.shape()) + ", feature " + shape_str(f.shape()));
  }
  for (double s : rec.sigma.data()) {
    if (!(s > 0.0)) throw ContractError("log_likelihood: sigma must be positive");
  }
  Tensor diff = ops::sub(f, rec.mu);
  Tensor z = ops::div(diff, rec.sigma);
  Tensor per_dim = ops::add(ops::log(rec.sigma), ops::scale(ops::mul(z, z), 0.5));
  return ops::add_scalar(ops::scale(ops::sum_last(per_dim), -1.0), -kHalfLog2Pi * static_cast<double>(f.dim(1)));
}

double log_likelihood(std::span<const double> mu, std::span<const double> sigma, std::span<const double> f) {
  if (mu.size() != f.size() || sigma.size() != f.size()) throw DimensionError("log_likelihood: length mismatch");
  double acc = 0.0;
  for (std::size_t d = 0; d < f.size(); ++d) {
    if (!(sigma[d] > 0.0)) throw ContractError("log_likelihood: sigma must be positive");
    const double z = (f[d] - mu[d]) / sigma[d];
    acc += -std::log(sigma[d]) - kHalfLog2Pi - 0.5 * z * z;
  }
  return acc;
}

Tensor kl_divergence(const Tensor& mu, const Tensor& sigma) {
  if (mu.shape() != sigma.shape()) throw DimensionError("kl_divergence: mu/sigma shapes differ");
  for (double s : sigma.data()) {
    if (!(s > 0.0)) throw ContractError("kl_divergence: sigma must be positive");
  }
  // -1/2 (1 + log s^2 - m^2 - s^2) summed over the latent axis.
  Tensor s2 = ops::mul(sigma, sigma);
  Tensor inner = ops::sub(ops::add_scalar(ops::scale(ops::log(sigma), 2.0), 1.0), ops::add(ops::mul(mu, mu), s2));
  Tensor sum = inner.rank() == 1 ? ops::sum(inner) : ops::sum_last(inner);
  return ops::scale(sum, -0.5);
}

Tensor rec_logprob(const VaeModel& vae, const Tensor& f, std::size_t n_rep, Rng& rng) {
  if (n_rep < 1) throw ConfigError("rec_logprob: n_rep must be >= 1");
  const Gaussian lat = encode(vae, f);
  Tensor acc;
  for (std::size_t i = 0; i < n_rep; ++i) {
    Tensor ll = log_likelihood(decode(vae, sample_latent(lat.mu, lat.sigma, rng)), f);
    acc = acc.defined() ? ops::add(acc, ll) : ll;
  }
  return n_rep == 1 ? acc : ops::scale(acc, 1.0 / static_cast<double>(n_rep));
}

std::vector<double> score(const VaeModel& vae, const Tensor& f, std::size_t n_rep, Rng& rng,
                          ScoreReduction reduction) {
  if (reduction == ScoreReduction::kMeanLog) {
    Tensor s = rec_logprob(vae, f.detach(), n_rep, rng);
    return {s.data().begin(), s.data().end()};
  }
  if (n_rep < 1) throw ConfigError("score: n_rep must be >= 1");
  const Gaussian lat = encode(vae, f.detach());
  const std::size_t n = f.dim(0);
  std::vector<std::vector<double>> lls(n_rep);
  for (auto& ll : lls) {
    Tensor t = log_likelihood(decode(vae, sample_latent(lat.mu, lat.sigma, rng)), f);
    ll.assign(t.data().begin(), t.data().end());
  }
  std::vector<double> out(n);
  for (std::size_t row = 0; row < n; ++row) {
    double hi = lls[0][row];
    for (const auto& ll : lls) hi = std::max(hi, ll[row]);
    double acc = 0.0;
    for (const auto& ll : lls) acc += std::exp(ll[row] - hi);
    out[row] = hi + std::log(acc / static_cast<double>(n_rep));
  }
  return out;
}

VaeModel fit_task_vae(const Tensor& features, const VaeConfig& config, const harness::LossWeights& weights, int task,
                      Rng& rng) {
  if (features.rank() != 2 || features.dim(0) == 0) throw ContractError("fit_task_vae: need a (n, d) feature set");
  VaeModel vae = VaeModel::init(features.dim(1), config.d_latent, task, rng);
  check_features(vae, features, "fit_task_vae");
  AdamW opt(AdamWConfig{config.learning_rate});
  for (const Tensor& p : vae.parameters()) opt.add(p);
  const std::size_t n = features.dim(0);
  const std::size_t d = features.dim(1);
  const std::size_t batch = std::min(config.batch_size, n);
  auto fd = features.data();
  std::vector<double> rows(batch * d);
  for (std::size_t step = 0; step < config.train_steps; ++step) {
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t src = rng.index(n);
      std::copy_n(fd.data() + src * d, d, rows.data() + b * d);
    }
    Tensor f = Tensor::from({batch, d}, rows);
    const Gaussian lat = encode(vae, f);
    Tensor ll = log_likelihood(decode(vae, sample_latent(lat.mu, lat.sigma, rng)), f);
    harness::LossComponents parts;
    parts.rec = ops::scale(ops::mean(ll), -1.0);
    parts.kl = ops::mean(kl_divergence(lat.mu, lat.sigma));
    Tensor loss;
    try {
      loss = harness::total_loss(parts, weights);
    } catch (const NumericError& e) {
      throw NumericError("fit_task_vae: step " + std::to_string(step) + ": " + e.what());
    }
    backward(loss);
    opt.step();
  }
  vae.set_frozen(true);
  return vae;
}

TaskPrimitive primitive_from_scores(std::span<const double> scores, int task) {
  if (scores.size() < 2) throw ContractError("build_primitive: need at least 2 instances");
  double mean = 0.0;
  for (double s : scores) mean += s;
  mean /= static_cast<double>(scores.size());
  double var = 0.0;
  for (double s : scores) var += (s - mean) * (s - mean);
  var /= static_cast<double>(scores.size());
  return {mean, std::max(std::sqrt(var), kStdFloor), scores.size(), task};
}

TaskPrimitive build_primitive(const VaeModel& vae, const Tensor& recent, std::size_t n_rep, Rng& rng,
                              ScoreReduction reduction) {
  if (recent.rank() != 2 || recent.dim(0) < 2) throw ContractError("build_primitive: need at least 2 instances");
  const std::vector<double> s = score(vae, recent, n_rep, rng, reduction);
  return primitive_from_scores(s, vae.owner_task);
}

void PrimitiveBank::insert(BankEntry entry) {
  if (entry.primitive.owner_task != static_cast<int>(entries_.size()) ||
      entry.vae.owner_task != entry.primitive.owner_task) {
    throw ContractError("bank: entry for task " + std::to_string(entry.primitive.owner_task) +
                        " inserted at position " + std::to_string(entries_.size()));
  }
  if (!(entry.primitive.std_logp > 0.0)) throw ContractError("bank: primitive std must be positive");
  entries_.push_back(std::move(entry));
}

std::vector<std::vector<double>> z_scores(const PrimitiveBank& bank, const Tensor& features,
                                          const LocateOptions& options, Rng& rng) {
  if (bank.empty()) throw ContractError("locate_task: empty bank");
  const std::uint64_t base = rng.next_u64();
  const std::size_t n = features.dim(0);
  std::vector<std::vector<double>> z(n, std::vector<double>(bank.size()));
  for (std::size_t i = 0; i < bank.size(); ++i) {
    const BankEntry& e = bank.at(i);
    Rng local(derive_seed(base, static_cast<std::uint64_t>(e.primitive.owner_task)));
    const std::vector<double> s = score(e.vae, features, options.n_rep, local, options.reduction);
    for (std::size_t row = 0; row < n; ++row) z[row][i] = (s[row] - e.primitive.mean_logp) / e.primitive.std_logp;
  }
  return z;
}

std::size_t argmax_first(std::span<const double> values) {
  if (values.empty()) throw ContractError("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

std::vector<std::size_t> locate_tasks(const PrimitiveBank& bank, const Tensor& features,
                                      const LocateOptions& options, Rng& rng) {
  const auto z = z_scores(bank, features, options, rng);
  std::vector<std::size_t> out;
  out.reserve(z.size());
  for (const auto& row : z) out.push_back(argmax_first(row));
  return out;
}

std::size_t locate_task(const PrimitiveBank& bank, std::span<const double> feature, const LocateOptions& options,
                        Rng& rng) {
  Tensor f = Tensor::from({1, feature.size()}, {feature.begin(), feature.end()});
  return locate_tasks(bank, f, options, rng).front();
}

void save_bank(const PrimitiveBank& bank, const std::filesystem::path& dir) {
  archive::Writer w;
  archive::json manifest;
  manifest["bank"] = serialize::put_bank(w, bank);
  archive::save(dir, std::move(manifest), w, "cmoe-bank");
}

PrimitiveBank load_bank(const std::filesystem::path& dir) {
  archive::Loaded loaded = archive::load(dir, "cmoe-bank");
  return serialize::get_bank(loaded.reader, archive::field<archive::json>(loaded.manifest, "bank", "manifest"),
                             "manifest.bank");
}

}  // namespace cmoe::ptl

namespace cmoe::serialize {

using archive::field;

json put_router_set(archive::Writer& w, const std::string& prefix, const moe::RouterSet& routers) {
  json out = json::array();
  for (std::size_t h = 0; h < routers.size(); ++h) {
    const std::string name = prefix + ".layer" + std::to_string(h) + ".G";
    w.put(name, routers[h].G);
    out.push_back({{"G", name},
                   {"top_k", routers[h].top_k},
                   {"owner_task", routers[h].owner_task},
                   {"trainable", routers[h].G.requires_grad()}});
  }
  return out;
}

moe::RouterSet get_router_set(const archive::Reader& r, const json& j, const std::string& path) {
  if (!j.is_array()) archive::throw_bad(path, "not an array");
  moe::RouterSet out;
  for (std::size_t h = 0; h < j.size(); ++h) {
    const std::string p = path + "[" + std::to_string(h) + "]";
    moe::Router router;
    router.G = r.get(field<std::string>(j[h], "G", p), field<bool>(j[h], "trainable", p));
    router.top_k = field<std::size_t>(j[h], "top_k", p);
    router.owner_task = field<int>(j[h], "owner_task", p);
    if (router.G.rank() != 2 || router.top_k < 1 || router.top_k > router.G.dim(0)) {
      archive::throw_bad(p, "inconsistent router shape or top_k");
    }
    out.push_back(std::move(router));
  }
  return out;
}

namespace {

const char* const kVaeFields[] = {"enc_mu_w", "enc_mu_b", "enc_sigma_w", "enc_sigma_b",
                                  "dec_mu_w", "dec_mu_b", "dec_sigma_w", "dec_sigma_b"};

}  // namespace

json put_bank(archive::Writer& w, const ptl::PrimitiveBank& bank) {
  json entries = json::array();
  for (std::size_t i = 0; i < bank.size(); ++i) {
    const ptl::BankEntry& e = bank.at(i);
    const std::string prefix = "bank.entry" + std::to_string(i);
    const std::vector<Tensor> params = e.vae.parameters();
    json vae = {{"d_model", e.vae.d_model}, {"d_latent", e.vae.d_latent}, {"owner_task", e.vae.owner_task}};
    for (std::size_t k = 0; k < params.size(); ++k) {
      const std::string name = prefix + ".vae." + kVaeFields[k];
      w.put(name, params[k]);
      vae[kVaeFields[k]] = name;
    }
    // mean/std go through the blob as well so the round trip never depends on
    // decimal formatting.
    const std::string prim = prefix + ".primitive";
    w.put(prim, {2}, std::vector<double>{e.primitive.mean_logp, e.primitive.std_logp});
    entries.push_back({{"primitive",
                        {{"values", prim},
                         {"mean_logp", e.primitive.mean_logp},
                         {"std_logp", e.primitive.std_logp},
                         {"sample_count", e.primitive.sample_count},
                         {"owner_task", e.primitive.owner_task}}},
                       {"vae", vae},
                       {"router", put_router_set(w, prefix + ".router", e.router)}});
  }
  return {{"entries", entries}};
}

ptl::PrimitiveBank get_bank(const archive::Reader& r, const json& j, const std::string& path) {
  const json entries = field<json>(j, "entries", path);
  if (!entries.is_array()) archive::throw_bad(path + ".entries", "not an array");
  ptl::PrimitiveBank bank;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const std::string p = path + ".entries[" + std::to_string(i) + "]";
    const json prim = field<json>(entries[i], "primitive", p);
    const std::vector<double> mv = r.values(field<std::string>(prim, "values", p + ".primitive"));
    if (mv.size() != 2) archive::throw_bad(p + ".primitive.values", "expected 2 values");
    ptl::BankEntry e;
    e.primitive = {mv[0], mv[1], field<std::size_t>(prim, "sample_count", p + ".primitive"),
                   field<int>(prim, "owner_task", p + ".primitive")};
    const json vj = field<json>(entries[i], "vae", p);
    const auto d_model = field<std::size_t>(vj, "d_model", p + ".vae");
    const auto d_latent = field<std::size_t>(vj, "d_latent", p + ".vae");
    e.vae.d_model = d_model;
    e.vae.d_latent = d_latent;
    e.vae.owner_task = field<int>(vj, "owner_task", p + ".vae");
    const Shape shapes[] = {{d_latent, d_model}, {d_latent}, {d_latent, d_model}, {d_latent},
                            {d_model, d_latent}, {d_model}, {d_model, d_latent}, {d_model}};
    Tensor* slots[] = {&e.vae.enc_mu_w, &e.vae.enc_mu_b, &e.vae.enc_sigma_w, &e.vae.enc_sigma_b,
                       &e.vae.dec_mu_w, &e.vae.dec_mu_b, &e.vae.dec_sigma_w, &e.vae.dec_sigma_b};
    for (std::size_t k = 0; k < 8; ++k) {
      *slots[k] = r.get(field<std::string>(vj, kVaeFields[k], p + ".vae"), shapes[k], false);
    }
    e.router = get_router_set(r, field<json>(entries[i], "router", p), p + ".router");
    try {
      bank.insert(std::move(e));
    } catch (const ContractError& err) {
      archive::throw_bad(p, err.what());
    }
  }
  return bank;
}

}  // namespace cmoe::serialize
