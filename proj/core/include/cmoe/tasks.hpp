// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cmoe/backbone.hpp"
#include "cmoe/rng.hpp"
#include "cmoe/tensor.hpp"

/// Deterministic synthetic task streams.
///
/// Every task owns a contiguous vocabulary window [lo, hi) of width w. Local
/// ids inside the window are laid out as
///   [0, w/2)        content symbols
///   [w/2, w-1)      noise symbols (two leading distractors per prompt)
///   w-1             separator, always the last prompt token
/// Sequences are prompt followed by answer; only answer positions carry loss.
///
///   modular-sum            z z a b SEP | (a+b) mod (w/2)
///   sequence-reverse-probe z z x1 x2 x3 x4 SEP | x3   (element 1 of the reversed list)
///   parity                 z z b1 b2 b3 b4 SEP | EVEN(2) or ODD(3)
///   pattern-match          z z x1 x2 x3 SEP | (x1 == x3 ? YES : NO) x2
///                          with YES = w/2-2, NO = w/2-1, x in [0, w/2-2)
namespace cmoe::tasks {

enum class Family { kModularSum, kSequenceReverseProbe, kParity, kPatternMatch };
enum class Similarity { kDisjoint, kOverlapping, kDuplicate };
enum class Split { kTrain, kEval };

std::string_view family_name(Family f);
Family parse_family(std::string_view name);
std::string_view similarity_name(Similarity s);
Similarity parse_similarity(std::string_view name);

/// Smallest window width every family can be encoded in.
constexpr std::size_t kMinWindow = 8;

struct TaskSpec {
  int task_id = 0;
  Family family = Family::kModularSum;
  std::size_t vocab_lo = 0;
  std::size_t vocab_hi = 16;
  std::size_t seq_len = 0;
  std::size_t train_size = 2000;
  std::size_t eval_size = 200;
  std::string similarity_key;
  std::uint64_t seed = 0;

  std::size_t width() const { return vocab_hi - vocab_lo; }
  std::size_t prompt_len() const;
  std::size_t answer_len() const;
  bool operator==(const TaskSpec&) const = default;
};

/// Sequence length and answer length of a family's layout.
std::size_t family_seq_len(Family f);
std::size_t family_answer_len(Family f);

struct StreamConfig {
  std::size_t n_tasks = 4;
  Similarity similarity = Similarity::kDisjoint;
  std::size_t vocab = 64;
  std::size_t train_size = 2000;
  std::size_t eval_size = 200;
  std::uint64_t seed = 0;
};

std::vector<TaskSpec> generate_stream(const StreamConfig& config);

/// Stream manifest as JSON text; the stream can be rebuilt from it alone.
std::string stream_to_json(std::span<const TaskSpec> specs);
/// Inverse of stream_to_json. Throws ConfigError naming the offending field.
std::vector<TaskSpec> stream_from_json(std::string_view text);

/// Example index of a split; a pure function of (spec, split, index).
std::vector<std::size_t> make_example(const TaskSpec& spec, Split split, std::uint64_t index);

/// Train/eval partition of the prompt space: a prompt belongs to eval iff its
/// hash falls in the held-out class. The two splits therefore never share a sequence.
bool is_eval_prompt(std::span<const std::size_t> prompt);

struct Batch {
  std::vector<std::size_t> tokens;    // (batch, seq)
  std::vector<std::uint8_t> loss_mask;  // (batch, seq); 1 at answer positions
  std::size_t batch = 0;
  std::size_t seq = 0;
  int task_id = 0;

  moe::TokenView view() const { return {tokens, batch, seq}; }
  /// Prompt-only view tokens (answer positions stripped), for feature extraction.
  std::vector<std::size_t> prompt_tokens(std::size_t prompt_len) const;
};

Batch make_batch(const TaskSpec& spec, std::span<const std::vector<std::size_t>> examples);
Batch sample_batch(const TaskSpec& spec, Split split, std::size_t batch_size, Rng& rng);

/// Greedy argmax at every answer position; a sample counts only if all of its
/// answer tokens match. Returns per-sample correctness.
std::vector<bool> exact_match(const Tensor& logits, const Batch& batch);
double exact_match_accuracy(const Tensor& logits, const Batch& batch);
/// Same, from predicted tokens laid out like batch.tokens (entry p is the
/// prediction for position p).
double exact_match_accuracy(std::span<const std::size_t> predictions, const Batch& batch);

/// A task's training set. Once sealed, any access is a hard error: later
/// tasks can never replay it.
class TaskData {
 public:
  TaskData(TaskSpec spec, Split split);

  const TaskSpec& spec() const noexcept { return spec_; }
  const std::vector<std::vector<std::size_t>>& examples() const;
  std::size_t size() const;
  void seal();
  bool sealed() const noexcept { return sealed_; }

 private:
  TaskSpec spec_;
  std::vector<std::vector<std::size_t>> examples_;
  bool sealed_ = false;
};

}  // namespace cmoe::tasks
