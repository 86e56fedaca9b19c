// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "cmoe/tasks.hpp"

#include <algorithm>
#include <array>

#include <json.hpp>

#include "cmoe/error.hpp"

namespace cmoe::tasks {
namespace {

constexpr std::array<Family, 4> kFamilyCycle = {Family::kModularSum, Family::kSequenceReverseProbe, Family::kParity,
                                                Family::kPatternMatch};
constexpr std::size_t kNoiseTokens = 2;
constexpr std::uint64_t kEvalClasses = 5;

struct Local {
  std::size_t half;
  std::size_t sep;

  explicit Local(std::size_t width) : half(width / 2), sep(width - 1) {}
  std::size_t noise(Rng& rng) const { return half + rng.index(half - 1); }
};

// Prompt and answer in window-local ids.
std::vector<std::size_t> draw_local(const TaskSpec& spec, Rng& rng) {
  const Local l(spec.width());
  std::vector<std::size_t> seq;
  for (std::size_t i = 0; i < kNoiseTokens; ++i) seq.push_back(l.noise(rng));
  switch (spec.family) {
    case Family::kModularSum: {
      const std::size_t m = l.half;
      const std::size_t a = rng.index(m);
      const std::size_t b = rng.index(m);
      seq.insert(seq.end(), {a, b, l.sep, (a + b) % m});
      break;
    }
    case Family::kSequenceReverseProbe: {
      std::array<std::size_t, 4> x{};
      for (auto& v : x) v = rng.index(l.half);
      seq.insert(seq.end(), x.begin(), x.end());
      seq.push_back(l.sep);
      seq.push_back(x[2]);
      break;
    }
    case Family::kParity: {
      std::size_t ones = 0;
      for (int i = 0; i < 4; ++i) {
        const std::size_t bit = rng.index(2);
        ones += bit;
        seq.push_back(bit);
      }
      seq.push_back(l.sep);
      seq.push_back(ones % 2 == 0 ? 2 : 3);
      break;
    }
    case Family::kPatternMatch: {
      const std::size_t symbols = l.half - 2;
      const std::size_t x1 = rng.index(symbols);
      const std::size_t x2 = rng.index(symbols);
      std::size_t x3 = x1;
      if (rng.index(2) == 1) x3 = (x1 + 1 + rng.index(symbols - 1)) % symbols;
      const std::size_t yes = l.half - 2;
      const std::size_t no = l.half - 1;
      seq.insert(seq.end(), {x1, x2, x3, l.sep, x1 == x3 ? yes : no, x2});
      break;
    }
  }
  return seq;
}

std::uint64_t split_salt(Split split) { return split == Split::kTrain ? 0x7472616eULL : 0x6576616cULL; }

}  // namespace

std::string_view family_name(Family f) {
  switch (f) {
    case Family::kModularSum: return "modular-sum";
    case Family::kSequenceReverseProbe: return "sequence-reverse-probe";
    case Family::kParity: return "parity";
    case Family::kPatternMatch: return "pattern-match";
  }
  return "?";
}

Family parse_family(std::string_view name) {
  for (Family f : kFamilyCycle) {
    if (family_name(f) == name) return f;
  }
  throw ConfigError("unknown task family '" + std::string(name) + "'");
}

std::string_view similarity_name(Similarity s) {
  switch (s) {
    case Similarity::kDisjoint: return "disjoint";
    case Similarity::kOverlapping: return "overlapping";
    case Similarity::kDuplicate: return "duplicate";
  }
  return "?";
}

Similarity parse_similarity(std::string_view name) {
  for (Similarity s : {Similarity::kDisjoint, Similarity::kOverlapping, Similarity::kDuplicate}) {
    if (similarity_name(s) == name) return s;
  }
  throw ConfigError("unknown similarity profile '" + std::string(name) + "'");
}

std::size_t family_seq_len(Family f) {
  switch (f) {
    case Family::kModularSum: return kNoiseTokens + 4;
    case Family::kSequenceReverseProbe: return kNoiseTokens + 6;
    case Family::kParity: return kNoiseTokens + 6;
    case Family::kPatternMatch: return kNoiseTokens + 6;
  }
  return 0;
}

std::size_t family_answer_len(Family f) { return f == Family::kPatternMatch ? 2 : 1; }

std::size_t TaskSpec::prompt_len() const { return seq_len - answer_len(); }
std::size_t TaskSpec::answer_len() const { return family_answer_len(family); }

std::vector<TaskSpec> generate_stream(const StreamConfig& config) {
  if (config.n_tasks < 2) throw ConfigError("stream: n_tasks must be >= 2");
  if (config.train_size < 2 || config.eval_size < 1) throw ConfigError("stream: dataset sizes too small");
  std::vector<TaskSpec> specs;
  const Rng root(config.seed);
  for (std::size_t k = 0; k < config.n_tasks; ++k) {
    TaskSpec s;
    s.task_id = static_cast<int>(k);
    s.train_size = config.train_size;
    s.eval_size = config.eval_size;
    s.seed = root.fork(k).next_u64();
    switch (config.similarity) {
      case Similarity::kDisjoint: {
        const std::size_t w = config.vocab / config.n_tasks;
        if (w < kMinWindow) {
          throw ConfigError("stream: vocab " + std::to_string(config.vocab) + " too small for " +
                            std::to_string(config.n_tasks) + " disjoint windows of width >= " +
                            std::to_string(kMinWindow));
        }
        s.family = kFamilyCycle[k % kFamilyCycle.size()];
        s.vocab_lo = k * w;
        s.vocab_hi = s.vocab_lo + w;
        break;
      }
      case Similarity::kOverlapping: {
        std::size_t w = std::min<std::size_t>(16, 2 * config.vocab / (config.n_tasks + 1));
        w -= w % 2;
        if (w < kMinWindow) throw ConfigError("stream: vocab too small for overlapping windows");
        s.family = kFamilyCycle[k % kFamilyCycle.size()];
        s.vocab_lo = k * (w / 2);
        s.vocab_hi = s.vocab_lo + w;
        break;
      }
      case Similarity::kDuplicate: {
        const std::size_t w = std::min<std::size_t>(16, config.vocab);
        if (w < kMinWindow) throw ConfigError("stream: vocab too small");
        s.family = kFamilyCycle[0];
        s.vocab_lo = 0;
        s.vocab_hi = w;
        break;
      }
    }
    s.seq_len = family_seq_len(s.family);
    s.similarity_key = std::string(family_name(s.family)) + "@" + std::to_string(s.vocab_lo) + "-" +
                       std::to_string(s.vocab_hi);
    specs.push_back(std::move(s));
  }
  return specs;
}

std::string stream_to_json(std::span<const TaskSpec> specs) {
  nlohmann::json out = nlohmann::json::array();
  for (const TaskSpec& s : specs) {
    out.push_back({{"task_id", s.task_id},
                   {"family", family_name(s.family)},
                   {"vocab_lo", s.vocab_lo},
                   {"vocab_hi", s.vocab_hi},
                   {"seq_len", s.seq_len},
                   {"train_size", s.train_size},
                   {"eval_size", s.eval_size},
                   {"similarity_key", s.similarity_key},
                   {"seed", s.seed}});
  }
  return out.dump(1);
}

std::vector<TaskSpec> stream_from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("stream manifest: ") + e.what());
  }
  if (!j.is_array()) throw ConfigError("stream manifest: expected an array of task specs");
  std::vector<TaskSpec> specs;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string path = "stream[" + std::to_string(i) + "]";
    auto get = [&](const char* key) -> const nlohmann::json& {
      if (!j[i].contains(key)) throw ConfigError(path + "." + key + ": missing");
      return j[i][key];
    };
    TaskSpec s;
    try {
      s.task_id = get("task_id").get<int>();
      s.family = parse_family(get("family").get<std::string>());
      s.vocab_lo = get("vocab_lo").get<std::size_t>();
      s.vocab_hi = get("vocab_hi").get<std::size_t>();
      s.seq_len = get("seq_len").get<std::size_t>();
      s.train_size = get("train_size").get<std::size_t>();
      s.eval_size = get("eval_size").get<std::size_t>();
      s.similarity_key = get("similarity_key").get<std::string>();
      s.seed = get("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError(path + ": " + e.what());
    }
    if (s.vocab_hi <= s.vocab_lo || s.width() < kMinWindow) throw ConfigError(path + ": invalid vocab window");
    if (s.seq_len != family_seq_len(s.family)) throw ConfigError(path + ".seq_len: does not match the family");
    if (s.task_id != static_cast<int>(i)) throw ConfigError(path + ".task_id: tasks must be numbered in order");
    specs.push_back(std::move(s));
  }
  return specs;
}

bool is_eval_prompt(std::span<const std::size_t> prompt) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t t : prompt) {
    h ^= static_cast<std::uint64_t>(t) + 1;
    h *= 0x100000001b3ULL;
  }
  return mix64(h) % kEvalClasses == 0;
}

std::vector<std::size_t> make_example(const TaskSpec& spec, Split split, std::uint64_t index) {
  if (spec.width() < kMinWindow) throw ConfigError("task window narrower than " + std::to_string(kMinWindow));
  Rng rng(derive_seed(spec.seed ^ split_salt(split), index));
  const bool want_eval = split == Split::kEval;
  const std::size_t plen = spec.prompt_len();
  for (;;) {
    std::vector<std::size_t> seq = draw_local(spec, rng);
    for (std::size_t& t : seq) t += spec.vocab_lo;
    if (is_eval_prompt(std::span(seq).first(plen)) == want_eval) return seq;
  }
}

std::vector<std::size_t> Batch::prompt_tokens(std::size_t prompt_len) const {
  std::vector<std::size_t> out;
  out.reserve(batch * prompt_len);
  for (std::size_t b = 0; b < batch; ++b) {
    out.insert(out.end(), tokens.begin() + static_cast<std::ptrdiff_t>(b * seq),
               tokens.begin() + static_cast<std::ptrdiff_t>(b * seq + prompt_len));
  }
  return out;
}

Batch make_batch(const TaskSpec& spec, std::span<const std::vector<std::size_t>> examples) {
  Batch b;
  b.batch = examples.size();
  b.seq = spec.seq_len;
  b.task_id = spec.task_id;
  const std::size_t plen = spec.prompt_len();
  for (const auto& ex : examples) {
    if (ex.size() != spec.seq_len) throw DimensionError("make_batch: example length does not match task");
    b.tokens.insert(b.tokens.end(), ex.begin(), ex.end());
    for (std::size_t p = 0; p < spec.seq_len; ++p) b.loss_mask.push_back(p >= plen ? 1 : 0);
  }
  return b;
}

Batch sample_batch(const TaskSpec& spec, Split split, std::size_t batch_size, Rng& rng) {
  std::vector<std::vector<std::size_t>> examples;
  examples.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) examples.push_back(make_example(spec, split, rng.next_u64()));
  return make_batch(spec, examples);
}

double exact_match_accuracy(std::span<const std::size_t> predictions, const Batch& batch) {
  if (batch.batch == 0) throw ContractError("exact_match_accuracy: empty batch");
  if (predictions.size() != batch.tokens.size()) {
    throw DimensionError("exact_match_accuracy: prediction buffer does not match batch");
  }
  std::size_t correct = 0;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    bool ok = true;
    for (std::size_t p = 0; p < batch.seq; ++p) {
      const std::size_t i = b * batch.seq + p;
      if (batch.loss_mask[i] && predictions[i] != batch.tokens[i]) ok = false;
    }
    correct += ok ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(batch.batch);
}

std::vector<bool> exact_match(const Tensor& logits, const Batch& batch) {
  if (batch.batch == 0) throw ContractError("exact_match: empty batch");
  if (logits.rank() != 3 || logits.dim(0) != batch.batch || logits.dim(1) != batch.seq) {
    throw DimensionError("exact_match: logits " + shape_str(logits.shape()) + " do not match batch");
  }
  const std::size_t v = logits.dim(2);
  auto ld = logits.data();
  std::vector<bool> out(batch.batch, true);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    for (std::size_t p = 1; p < batch.seq; ++p) {
      const std::size_t i = b * batch.seq + p;
      if (!batch.loss_mask[i]) continue;
      const double* row = ld.data() + (i - 1) * v;
      const auto pred = static_cast<std::size_t>(std::max_element(row, row + v) - row);
      if (pred != batch.tokens[i]) out[b] = false;
    }
  }
  return out;
}

double exact_match_accuracy(const Tensor& logits, const Batch& batch) {
  auto ok = exact_match(logits, batch);
  return static_cast<double>(std::count(ok.begin(), ok.end(), true)) / static_cast<double>(ok.size());
}

TaskData::TaskData(TaskSpec spec, Split split) : spec_(std::move(spec)) {
  const std::size_t n = split == Split::kTrain ? spec_.train_size : spec_.eval_size;
  examples_.reserve(n);
  for (std::size_t i = 0; i < n; ++i) examples_.push_back(make_example(spec_, split, i));
}

const std::vector<std::vector<std::size_t>>& TaskData::examples() const {
  if (sealed_) {
    throw ContractError("task " + std::to_string(spec_.task_id) +
                        " data is sealed; previous-task data cannot be replayed");
  }
  return examples_;
}

std::size_t TaskData::size() const { return examples().size(); }

void TaskData::seal() {
  examples_.clear();
  examples_.shrink_to_fit();
  sealed_ = true;
}

}  // namespace cmoe::tasks
