// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <set>

#include "cmoe/error.hpp"
#include "cmoe/ops.hpp"
#include "cmoe/rng.hpp"
#include "cmoe/tasks.hpp"

using namespace cmoe;
using namespace cmoe::tasks;

namespace {

// Expected answer tokens (global ids) recomputed from the prompt alone.
std::vector<std::size_t> expected_answer(const TaskSpec& s, const std::vector<std::size_t>& seq) {
  const std::size_t lo = s.vocab_lo, half = s.width() / 2;
  auto local = [&](std::size_t i) { return seq[i] - lo; };
  switch (s.family) {
    case Family::kModularSum: return {lo + (local(2) + local(3)) % half};
    case Family::kSequenceReverseProbe: return {seq[4]};
    case Family::kParity: {
      const std::size_t ones = local(2) + local(3) + local(4) + local(5);
      return {lo + (ones % 2 == 0 ? 2 : 3)};
    }
    case Family::kPatternMatch: return {lo + (local(2) == local(4) ? half - 2 : half - 1), seq[3]};
  }
  return {};
}

}  // namespace

TEST_CASE("stream profiles") {
  StreamConfig cfg;
  const auto disjoint = generate_stream(cfg);
  REQUIRE(disjoint.size() == 4);
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(disjoint[k].vocab_lo == 16 * k);
    CHECK(disjoint[k].vocab_hi == 16 * k + 16);
  }
  CHECK(generate_stream(cfg) == disjoint);

  cfg.similarity = Similarity::kDuplicate;
  const auto dup = generate_stream(cfg);
  for (std::size_t k = 1; k < dup.size(); ++k) {
    TaskSpec a = dup[k], b = dup[0];
    CHECK(a.seed != b.seed);
    a.seed = b.seed;
    a.task_id = b.task_id;
    CHECK(a == b);
  }

  cfg.similarity = Similarity::kOverlapping;
  const auto over = generate_stream(cfg);
  for (std::size_t k = 1; k < over.size(); ++k) {
    CHECK(over[k].vocab_lo < over[k - 1].vocab_hi);
    CHECK(over[k].vocab_lo > over[k - 1].vocab_lo);
  }

  cfg.n_tasks = 1;
  CHECK_THROWS_AS(generate_stream(cfg), ConfigError);
  cfg.n_tasks = 9;
  cfg.similarity = Similarity::kDisjoint;
  CHECK_THROWS_AS(generate_stream(cfg), ConfigError);
}

TEST_CASE("examples follow their family's rule and stay in the window") {
  const auto stream = generate_stream({});
  for (const TaskSpec& s : stream) {
    for (Split split : {Split::kTrain, Split::kEval}) {
      for (std::uint64_t i = 0; i < 300; ++i) {
        const auto seq = make_example(s, split, i);
        REQUIRE(seq.size() == s.seq_len);
        for (std::size_t t : seq) CHECK((t >= s.vocab_lo && t < s.vocab_hi));
        CHECK(seq[s.prompt_len() - 1] == s.vocab_hi - 1);
        const auto want = expected_answer(s, seq);
        CHECK(std::vector<std::size_t>(seq.begin() + static_cast<std::ptrdiff_t>(s.prompt_len()), seq.end()) == want);
      }
    }
  }
}

TEST_CASE("answer rule examples") {
  // modular-sum with m = 8: 3 + 7 -> 2.
  TaskSpec s = generate_stream({})[0];
  CHECK(s.width() / 2 == 8);
  CHECK(expected_answer(s, {9, 9, 3, 7, 15, 0}) == std::vector<std::size_t>{2});
  TaskSpec p = generate_stream({})[2];
  CHECK(expected_answer(p, {40, 40, 32, 32, 32, 32, 47, 0})[0] == p.vocab_lo + 2);  // all zeros: even
}

TEST_CASE("train and eval prompts never coincide") {
  const TaskSpec s = generate_stream({})[1];
  std::set<std::vector<std::size_t>> train;
  for (std::uint64_t i = 0; i < 2000; ++i) {
    auto seq = make_example(s, Split::kTrain, i);
    seq.resize(s.prompt_len());
    train.insert(seq);
  }
  for (std::uint64_t i = 0; i < 500; ++i) {
    auto seq = make_example(s, Split::kEval, i);
    seq.resize(s.prompt_len());
    CHECK(train.count(seq) == 0);
  }
}

TEST_CASE("exact match") {
  const TaskSpec s = generate_stream({})[0];
  std::vector<std::vector<std::size_t>> ex;
  for (std::uint64_t i = 0; i < 8; ++i) ex.push_back(make_example(s, Split::kEval, i));
  const Batch b = make_batch(s, ex);
  CHECK(exact_match_accuracy(b.tokens, b) == 1.0);

  // Random predictions over 64 tokens hit a single answer token about 1/64 of the time.
  Rng rng(4);
  std::vector<std::vector<std::size_t>> many;
  for (std::uint64_t i = 0; i < 20000; ++i) many.push_back(make_example(s, Split::kEval, i));
  const Batch big = make_batch(s, many);
  std::vector<std::size_t> pred(big.tokens.size());
  for (auto& v : pred) v = rng.index(64);
  CHECK(exact_match_accuracy(pred, big) == doctest::Approx(1.0 / 64).epsilon(0.15));

  Batch empty;
  CHECK_THROWS_AS(exact_match_accuracy(std::vector<std::size_t>{}, empty), ContractError);

  // Logit form: one-hot logits at position p-1 predicting token p.
  std::vector<double> logits(b.batch * b.seq * 64, 0.0);
  for (std::size_t i = 0; i < b.batch; ++i) {
    for (std::size_t p = 1; p < b.seq; ++p) logits[(i * b.seq + p - 1) * 64 + b.tokens[i * b.seq + p]] = 1.0;
  }
  CHECK(exact_match_accuracy(Tensor::from({b.batch, b.seq, 64}, logits), b) == 1.0);
}

TEST_CASE("sealed task data refuses access") {
  TaskData data(generate_stream({})[0], Split::kTrain);
  CHECK(data.size() == 2000);
  data.seal();
  CHECK(data.sealed());
  CHECK_THROWS_AS(data.examples(), ContractError);
}

TEST_CASE("stream manifest round trip and errors") {
  const auto stream = generate_stream({});
  CHECK(stream_from_json(stream_to_json(stream)) == stream);
  CHECK_THROWS_AS(stream_from_json("{"), ConfigError);
  CHECK_THROWS_AS(stream_from_json("[{\"task_id\": 0}]"), ConfigError);
  try {
    stream_from_json(R"([{"task_id":0,"family":"nope","vocab_lo":0,"vocab_hi":16,"seq_len":6,"train_size":2,
                         "eval_size":1,"similarity_key":"x","seed":1}])");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("stream[0]") != std::string::npos);
  }
}
