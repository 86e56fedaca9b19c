// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <limits>

#include "cmoe/error.hpp"
#include "cmoe/ops.hpp"
#include "cmoe/optimizer.hpp"
#include "cmoe/rng.hpp"
#include "gradcheck.hpp"

using namespace cmoe;
using cmoe::testing::finite_diff_grad;
using cmoe::testing::gradcheck;

namespace {

Tensor rand_param(Shape shape, Rng& rng, double bound = 1.0) { return Tensor::uniform(std::move(shape), bound, rng, true); }

// Keeps values away from relu's kink so the central difference is clean.
Tensor off_kink(Shape shape, Rng& rng) {
  Tensor t = rand_param(std::move(shape), rng);
  for (double& v : t.mutable_data()) v = v >= 0 ? v + 0.1 : v - 0.1;
  return t;
}

// Random fixed weights turn any output into a scalar with a non-trivial gradient.
Tensor project(const Tensor& y, Rng& rng) {
  Tensor w = Tensor::uniform(y.shape(), 1.0, rng);
  return ops::sum(ops::mul(y, w));
}

}  // namespace

TEST_CASE("ops forward examples") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor m = ops::matmul(a, eye);
  CHECK(std::vector<double>(m.data().begin(), m.data().end()) == std::vector<double>{1, 2, 3, 4});

  const Tensor s = ops::softmax(Tensor::from({3}, {0, 0, 0}));
  for (double v : s.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  CHECK(ops::softplus(Tensor::scalar(0.0)).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  // Stable far from zero.
  CHECK(ops::softplus(Tensor::scalar(800.0)).item() == doctest::Approx(800.0));
  CHECK(ops::softplus(Tensor::scalar(-800.0)).item() >= 0.0);
}

TEST_CASE("matmul agrees with a naive triple loop in every layout") {
  Rng rng(7);
  const Tensor a = Tensor::uniform({3, 5, 7}, 1.0, rng);
  const Tensor w = Tensor::uniform({7, 4}, 1.0, rng);
  const Tensor wt = Tensor::uniform({4, 7}, 1.0, rng);
  const Tensor b = Tensor::uniform({3, 7, 4}, 1.0, rng);
  const Tensor y1 = ops::matmul(a, w);
  const Tensor y2 = ops::matmul(a, wt, ops::Transpose::kYes);
  const Tensor y3 = ops::matmul(a, b);
  for (std::size_t n = 0; n < 3; ++n) {
    for (std::size_t i = 0; i < 5; ++i) {
      for (std::size_t j = 0; j < 4; ++j) {
        double s1 = 0, s2 = 0, s3 = 0;
        for (std::size_t k = 0; k < 7; ++k) {
          const double x = a.at((n * 5 + i) * 7 + k);
          s1 += x * w.at(k * 4 + j);
          s2 += x * wt.at(j * 7 + k);
          s3 += x * b.at((n * 7 + k) * 4 + j);
        }
        const std::size_t o = (n * 5 + i) * 4 + j;
        CHECK(y1.at(o) == doctest::Approx(s1).epsilon(1e-13));
        CHECK(y2.at(o) == doctest::Approx(s2).epsilon(1e-13));
        CHECK(y3.at(o) == doctest::Approx(s3).epsilon(1e-13));
      }
    }
  }
}

TEST_CASE("shape errors name the op and both shapes") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({2, 3});
  try {
    ops::matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("(2,3)") != std::string::npos);
  }
  CHECK_THROWS_AS(ops::add(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);
}

TEST_CASE("non-finite inputs raise NumericError") {
  const double inf = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(ops::softmax(Tensor::from({2}, {0.0, inf})), NumericError);
  CHECK_THROWS_AS(ops::softplus(Tensor::from({1}, {std::nan("")})), NumericError);
  CHECK_THROWS_AS(ops::log(Tensor::from({1}, {0.0})), NumericError);
}

TEST_CASE("backward examples") {
  Tensor x = Tensor::from({3}, {0.3, -1, 2}, true);
  backward(ops::sum(x));
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{1, 1, 1});

  Tensor y = Tensor::from({2}, {1, 2}, true);
  backward(ops::sum(ops::mul(y, y)));
  CHECK(y.grad()[0] == 2.0);
  CHECK(y.grad()[1] == 4.0);

  Tensor frozen = Tensor::from({2}, {1, 2}, false);
  Tensor w = Tensor::from({2}, {3, 4}, true);
  backward(ops::sum(ops::mul(frozen, w)));
  CHECK_FALSE(frozen.has_grad());
  CHECK(w.has_grad());

  CHECK_THROWS_AS(backward(ops::mul(w, w)), ContractError);
}

TEST_CASE("a parameter used in two branches gets the sum of branch gradients") {
  Rng rng(3);
  Tensor x = rand_param({4}, rng);
  const Tensor c = Tensor::uniform({4}, 1.0, rng);
  backward(ops::sum(ops::mul(x, c)));
  std::vector<double> g1(x.grad().begin(), x.grad().end());
  x.clear_grad();
  backward(ops::sum(ops::exp(x)));
  std::vector<double> g2(x.grad().begin(), x.grad().end());
  x.clear_grad();
  backward(ops::add(ops::sum(ops::mul(x, c)), ops::sum(ops::exp(x))));
  for (std::size_t k = 0; k < 4; ++k) CHECK(x.grad()[k] == doctest::Approx(g1[k] + g2[k]).epsilon(1e-14));
}

TEST_CASE("finite_diff_grad examples") {
  Tensor x = Tensor::from({2}, {1, 2});
  auto g = finite_diff_grad([&] { return ops::sum(ops::mul(x, x)).item(); }, x);
  CHECK(g[0] == doctest::Approx(2.0).epsilon(1e-8));
  CHECK(g[1] == doctest::Approx(4.0).epsilon(1e-8));
  g = finite_diff_grad([] { return 5.0; }, x);
  CHECK(g == std::vector<double>{0.0, 0.0});
  Tensor r = Tensor::from({2}, {-1, 1});
  g = finite_diff_grad([&] { return ops::sum(ops::relu(r)).item(); }, r);
  CHECK(g[0] == doctest::Approx(0.0));
  CHECK(g[1] == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("every op matches finite differences") {
  Rng rng(11);
  constexpr double kTol = 1e-3;

  SUBCASE("matmul") {
    Tensor a = rand_param({2, 3, 4}, rng), w = rand_param({4, 5}, rng), wt = rand_param({5, 4}, rng);
    Tensor b = rand_param({2, 4, 3}, rng);
    Rng r1 = rng.fork(1), r2 = rng.fork(2), r3 = rng.fork(3);
    CHECK(gradcheck([&] { Rng r = r1; return project(ops::matmul(a, w), r); }, {a, w}) < kTol);
    CHECK(gradcheck([&] { Rng r = r2; return project(ops::matmul(a, wt, ops::Transpose::kYes), r); }, {a, wt}) < kTol);
    CHECK(gradcheck([&] { Rng r = r3; return project(ops::matmul(a, b), r); }, {a, b}) < kTol);
  }
  SUBCASE("elementwise and broadcast") {
    Tensor a = rand_param({3, 4}, rng), b = rand_param({3, 4}, rng), bias = rand_param({4}, rng);
    for (double& v : b.mutable_data()) v += v >= 0 ? 1.0 : -1.0;  // away from zero for div
    Rng r0 = rng.fork(0);
    CHECK(gradcheck([&] { Rng r = r0; return project(ops::add(a, bias), r); }, {a, bias}) < kTol);
    CHECK(gradcheck([&] { Rng r = r0; return project(ops::sub(a, b), r); }, {a, b}) < kTol);
    CHECK(gradcheck([&] { Rng r = r0; return project(ops::mul(a, b), r); }, {a, b}) < kTol);
    CHECK(gradcheck([&] { Rng r = r0; return project(ops::div(a, b), r); }, {a, b}) < kTol);
    CHECK(gradcheck([&] { Rng r = r0; return project(ops::scale(a, -2.5), r); }, {a}) < kTol);
    CHECK(gradcheck([&] { Rng r = r0; return project(ops::add_scalar(a, 0.7), r); }, {a}) < kTol);
  }
  SUBCASE("unary") {
    Tensor a = off_kink({3, 4}, rng);
    Tensor pos = rand_param({3, 4}, rng);
    for (double& v : pos.mutable_data()) v = std::abs(v) + 0.5;
    Rng r0 = rng.fork(0);
    CHECK(gradcheck([&] { Rng r = r0; return project(ops::relu(a), r); }, {a}) < kTol);
    CHECK(gradcheck([&] { Rng r = r0; return project(ops::exp(a), r); }, {a}) < kTol);
    CHECK(gradcheck([&] { Rng r = r0; return project(ops::log(pos), r); }, {pos}) < kTol);
    CHECK(gradcheck([&] { Rng r = r0; return project(ops::softplus(a), r); }, {a}) < kTol);
  }
  SUBCASE("softmax, causal softmax and top-k gating") {
    Tensor a = rand_param({2, 3, 5}, rng, 2.0);
    Tensor sq = rand_param({2, 4, 4}, rng, 2.0);
    Tensor g = rand_param({6, 5}, rng, 2.0);
    Rng r0 = rng.fork(0);
    CHECK(gradcheck([&] { Rng r = r0; return project(ops::softmax(a), r); }, {a}) < kTol);
    CHECK(gradcheck([&] { Rng r = r0; return project(ops::softmax(sq, true), r); }, {sq}) < kTol);
    CHECK(gradcheck([&] { Rng r = r0; return project(ops::topk_softmax(g, 2), r); }, {g}) < kTol);
  }
  SUBCASE("reductions, reshape, slice, concat, gather, cross-entropy") {
    Tensor a = rand_param({3, 4}, rng), b = rand_param({2, 4}, rng), table = rand_param({6, 3}, rng);
    Rng r0 = rng.fork(0);
    CHECK(gradcheck([&] { return ops::sum(ops::mul(a, a)); }, {a}) < kTol);
    CHECK(gradcheck([&] { return ops::mean(ops::exp(a)); }, {a}) < kTol);
    CHECK(gradcheck([&] { Rng r = r0; return project(ops::sum_last(a), r); }, {a}) < kTol);
    CHECK(gradcheck([&] { Rng r = r0; return project(ops::reshape(a, {2, 6}), r); }, {a}) < kTol);
    CHECK(gradcheck([&] { Rng r = r0; return project(ops::slice(a, 1, 1, 3), r); }, {a}) < kTol);
    const Tensor parts[] = {a, b};
    CHECK(gradcheck([&] { Rng r = r0; return project(ops::concat(parts, 0), r); }, {a, b}) < kTol);
    const std::size_t rows[] = {4, 0, 4, 2};
    CHECK(gradcheck([&] { Rng r = r0; return project(ops::gather_rows(table, rows), r); }, {table}) < kTol);
    const std::size_t targets[] = {1, 3, 0};
    CHECK(gradcheck([&] { return ops::cross_entropy(a, targets); }, {a}) < kTol);
  }
}

TEST_CASE("topk gating examples") {
  const Tensor g = ops::topk_softmax(Tensor::from({1, 3}, {2, 1, 0}), 2);
  const double e2 = std::exp(2.0), e1 = std::exp(1.0);
  CHECK(g.at(0) == doctest::Approx(e2 / (e2 + e1)).epsilon(1e-14));
  CHECK(g.at(1) == doctest::Approx(e1 / (e2 + e1)).epsilon(1e-14));
  CHECK(g.at(2) == 0.0);
  const Tensor tie = ops::topk_softmax(Tensor::from({1, 3}, {0.4, 0.4, 0.4}), 2);
  CHECK(tie.at(0) == 0.5);
  CHECK(tie.at(1) == 0.5);
  CHECK(tie.at(2) == 0.0);
  CHECK(ops::topk_softmax(Tensor::from({1, 1}, {-3}), 1).at(0) == 1.0);
  CHECK_THROWS_AS(ops::topk_softmax(Tensor::from({1, 2}, {0, 0}), 3), ContractError);
}

TEST_CASE("adamw") {
  SUBCASE("zero gradient, no decay leaves the parameter alone") {
    Tensor p = Tensor::from({2}, {0.5, -0.5}, true);
    AdamW opt({});
    opt.add(p);
    backward(ops::sum(ops::scale(p, 0.0)));
    opt.step();
    CHECK(p.at(0) == 0.5);
    CHECK(p.at(1) == -0.5);
    CHECK(opt.step_count() == 1);
  }
  SUBCASE("first step matches the hand-evaluated update") {
    AdamWConfig cfg;
    cfg.learning_rate = 0.01;
    Tensor p = Tensor::from({2}, {1.0, 1.0}, true);
    AdamW opt(cfg);
    opt.add(p);
    backward(ops::sum(ops::mul(p, Tensor::from({2}, {3.0, -0.2}))));
    opt.step();
    // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
    CHECK(p.at(0) == doctest::Approx(1.0 - 0.01 * 3.0 / (3.0 + 1e-8)).epsilon(1e-14));
    CHECK(p.at(1) == doctest::Approx(1.0 + 0.01 * 0.2 / (0.2 + 1e-8)).epsilon(1e-14));
    CHECK_FALSE(p.has_grad());
    backward(ops::sum(ops::mul(p, Tensor::from({2}, {3.0, -0.2}))));
    opt.step();
    CHECK(opt.step_count() == 2);
  }
  SUBCASE("frozen parameters never change and missing gradients are named") {
    Tensor a = Tensor::from({1}, {1.0}, true).set_name("a");
    Tensor b = Tensor::from({1}, {2.0}, true).set_name("b");
    AdamW opt({});
    opt.add(a);
    opt.add(b);
    CHECK(opt.slots().size() == 2);
    b.set_requires_grad(false);
    backward(ops::sum(ops::mul(a, b)));
    opt.step();
    CHECK(b.at(0) == 2.0);
    try {
      opt.step();
      FAIL("expected ContractError");
    } catch (const ContractError& e) {
      CHECK(std::string(e.what()).find("'a'") != std::string::npos);
    }
  }
}

TEST_CASE("rng forks are stable and independent of the parent's position") {
  Rng a(42);
  const Rng child = a.fork("x");
  a.next_u64();
  CHECK(a.fork("x").next_u64() == Rng(child).next_u64());
  CHECK(Rng(1).fork(0).next_u64() != Rng(1).fork(1).next_u64());
}
