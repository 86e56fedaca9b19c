// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "cmoe/backbone.hpp"

#include <cmath>
#include <string>

#include "cmoe/error.hpp"
#include "cmoe/ops.hpp"

namespace cmoe::moe {

using ops::Transpose;

namespace {

Tensor frozen_normal(Shape shape, double stddev, Rng& rng, std::string name) {
  Tensor t = Tensor::normal(std::move(shape), stddev, rng);
  t.set_name(std::move(name));
  return t;
}

}  // namespace

Backbone::Backbone(const BackboneConfig& config, Rng& rng) : config_(config) {
  const std::size_t d = config.d_model;
  if (config.vocab == 0 || d == 0 || config.d_ff == 0 || config.n_blocks == 0 || config.max_seq == 0) {
    throw ConfigError("backbone: all extents must be positive");
  }
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  tok_emb_ = frozen_normal({config.vocab, d}, 1.0, rng, "tok_emb");
  pos_emb_ = frozen_normal({config.max_seq, d}, 0.5, rng, "pos_emb");
  for (std::size_t h = 0; h < config.n_blocks; ++h) {
    const std::string p = "block" + std::to_string(h);
    Tensor wq = frozen_normal({d, d}, sd, rng, p + ".wq");
    Tensor wk = frozen_normal({d, d}, sd, rng, p + ".wk");
    Tensor wv = frozen_normal({d, d}, sd, rng, p + ".wv");
    Tensor wo = frozen_normal({d, d}, 0.5 * sd, rng, p + ".wo");
    Tensor w0 = frozen_normal({config.d_ff, d}, std::sqrt(2.0) * sd, rng, p + ".w_up");
    Tensor wd = frozen_normal({d, config.d_ff}, 0.5 / std::sqrt(static_cast<double>(config.d_ff)), rng,
                              p + ".w_down");
    blocks_.push_back(Block{wq, wk, wv, wo, MoeLayer(w0, config.lora_rank, p), wd});
  }
  w_out_ = frozen_normal({config.vocab, d}, 0.25 * sd, rng, "w_out");
}

void Backbone::activate(const RouterSet& routers) {
  if (routers.size() != blocks_.size()) {
    throw StructuralError("activate: " + std::to_string(routers.size()) + " routers for " +
                          std::to_string(blocks_.size()) + " layers");
  }
  for (std::size_t h = 0; h < blocks_.size(); ++h) blocks_[h].ffn_up.activate(routers[h]);
}

RouterSet Backbone::active_routers() const {
  RouterSet out;
  for (const Block& b : blocks_) out.push_back(b.ffn_up.active_router());
  return out;
}

Tensor Backbone::embed(TokenView input) const {
  if (input.batch == 0 || input.seq == 0) throw ContractError("backbone: empty token batch");
  if (input.seq > config_.max_seq) {
    throw DimensionError("backbone: sequence length " + std::to_string(input.seq) + " exceeds " +
                         std::to_string(config_.max_seq));
  }
  if (input.tokens.size() != input.batch * input.seq) {
    throw DimensionError("backbone: token buffer does not match (batch, seq)");
  }
  for (std::size_t t : input.tokens) {
    if (t >= config_.vocab) throw IndexError("backbone: token id " + std::to_string(t) + " >= vocab");
  }
  std::vector<std::size_t> positions(input.tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i % input.seq;
  Tensor x = ops::add(ops::gather_rows(tok_emb_, input.tokens), ops::gather_rows(pos_emb_, positions));
  return ops::reshape(x, {input.batch, input.seq, config_.d_model});
}

Tensor Backbone::attention(const Block& block, const Tensor& x, std::size_t, std::size_t) const {
  Tensor q = ops::matmul(x, block.wq, Transpose::kYes);
  Tensor k = ops::matmul(x, block.wk, Transpose::kYes);
  Tensor v = ops::matmul(x, block.wv, Transpose::kYes);
  Tensor scores = ops::scale(ops::matmul(q, k, Transpose::kYes), 1.0 / std::sqrt(static_cast<double>(config_.d_model)));
  Tensor ctx = ops::matmul(ops::softmax(scores, true), v);
  return ops::matmul(ctx, block.wo, Transpose::kYes);
}

Tensor Backbone::forward(TokenView input, MoeTrace* trace) {
  Tensor x = embed(input);
  const std::size_t rows = input.batch * input.seq;
  for (std::size_t h = 0; h < blocks_.size(); ++h) {
    Block& b = blocks_[h];
    x = ops::add(x, attention(b, x, input.batch, input.seq));
    Tensor flat = ops::reshape(x, {rows, config_.d_model});
    Tensor up = ops::relu(b.ffn_up.forward(flat, trace, h));
    Tensor down = ops::matmul(up, b.w_down, Transpose::kYes);
    x = ops::add(x, ops::reshape(down, {input.batch, input.seq, config_.d_model}));
  }
  return ops::matmul(x, w_out_, Transpose::kYes);
}

std::vector<double> Backbone::last_token_features(TokenView input) const {
  Tensor x = embed(input);
  const std::size_t rows = input.batch * input.seq;
  for (const Block& b : blocks_) {
    x = ops::add(x, attention(b, x, input.batch, input.seq));
    Tensor flat = ops::reshape(x, {rows, config_.d_model});
    Tensor up = ops::relu(b.ffn_up.forward_base(flat));
    Tensor down = ops::matmul(up, b.w_down, Transpose::kYes);
    x = ops::add(x, ops::reshape(down, {input.batch, input.seq, config_.d_model}));
  }
  const std::size_t d = config_.d_model;
  auto xd = x.data();
  std::vector<double> out(input.batch * d);
  for (std::size_t i = 0; i < input.batch; ++i) {
    const std::size_t row = i * input.seq + (input.seq - 1);
    std::copy_n(xd.data() + row * d, d, out.data() + i * d);
  }
  return out;
}

std::vector<Tensor> Backbone::base_parameters() const {
  std::vector<Tensor> out{tok_emb_, pos_emb_};
  for (const Block& b : blocks_) {
    out.insert(out.end(), {b.wq, b.wk, b.wv, b.wo, b.ffn_up.base_weight(), b.w_down});
  }
  out.push_back(w_out_);
  return out;
}

std::uint64_t Backbone::base_hash() const {
  std::uint64_t h = 0;
  for (const Tensor& t : base_parameters()) h = h * 1099511628211ULL + content_hash(t.data());
  return h;
}

std::uint64_t Backbone::model_hash() const {
  std::uint64_t h = base_hash();
  for (const Block& b : blocks_) {
    for (const LoraExpert& e : b.ffn_up.experts()) h = h * 1099511628211ULL + e.weight_hash();
  }
  return h;
}

Backbone Backbone::clone() const {
  Backbone out;
  out.config_ = config_;
  out.tok_emb_ = tok_emb_.clone();
  out.pos_emb_ = pos_emb_.clone();
  out.w_out_ = w_out_.clone();
  for (const Block& b : blocks_) {
    MoeLayer layer(b.ffn_up.base_weight().clone(), b.ffn_up.lora_rank(), b.ffn_up.name());
    for (const LoraExpert& e : b.ffn_up.experts()) {
      LoraExpert copy = e;
      copy.A = e.A.clone();
      copy.B = e.B.clone();
      layer.experts().push_back(std::move(copy));
    }
    if (b.ffn_up.has_router()) layer.activate(b.ffn_up.active_router().clone());
    out.blocks_.push_back(Block{b.wq.clone(), b.wk.clone(), b.wv.clone(), b.wo.clone(), std::move(layer),
                                b.w_down.clone()});
  }
  return out;
}

std::size_t Backbone::expert_parameter_count() const {
  std::size_t total = 0;
  for (const Block& b : blocks_) total += b.ffn_up.expert_parameter_count();
  return total;
}

}  // namespace cmoe::moe
