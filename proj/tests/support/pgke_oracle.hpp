// Copyright 2026 The cmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

// Expansion decision recomputed by brute force: extended-precision mean and
// std from the raw-moment formula, then a plain scan over the probes.
namespace cmoe::oracle {

struct Decision {
  long double threshold = 0;
  std::size_t n_new = 0;
  std::size_t copy_source = 0;
};

inline Decision decide(const std::vector<double>& act, const std::vector<std::size_t>& probes, double alpha,
                       std::size_t cap) {
  long double s = 0, s2 = 0;
  for (double a : act) {
    s += a;
    s2 += static_cast<long double>(a) * a;
  }
  const long double n = static_cast<long double>(act.size());
  const long double mean = s / n;
  const long double var = std::max<long double>(0, s2 / n - mean * mean);
  Decision d;
  d.threshold = mean - alpha * std::sqrt(var);
  std::size_t above = 0;
  for (std::size_t p : probes) above += static_cast<long double>(act[p]) > d.threshold ? 1 : 0;
  d.n_new = std::min(above, cap);
  d.copy_source = probes.front();
  for (std::size_t p : probes) {
    if (act[p] > act[d.copy_source]) d.copy_source = p;
  }
  return d;
}

}  // namespace cmoe::oracle
