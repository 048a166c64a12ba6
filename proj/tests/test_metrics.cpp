// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "phibal/error.hpp"
#include "phibal/metrics.hpp"

using namespace phibal;
using V = std::vector<double>;

namespace {

double gini_pairwise(const V& x) {
  double diff = 0.0, sum = 0.0;
  for (double a : x) {
    sum += a;
    for (double b : x) diff += std::abs(a - b);
  }
  const double n = static_cast<double>(x.size());
  return diff / (2.0 * n * n * (sum / n));
}

}  // namespace

TEST_CASE("max_vio examples") {
  CHECK(max_vio(V{3, 1}) == 0.5);
  CHECK(max_vio(V{2, 2, 2, 2}) == 0.0);
  CHECK(max_vio(V{10, 0, 0, 0, 0}) == 4.0);
  CHECK_THROWS_AS(max_vio(V{0, 0}), DomainError);
}

TEST_CASE("gini examples") {
  CHECK(gini(V{5, 5, 5}) == 0.0);
  CHECK(gini(V{1, 0, 0, 0}) == 0.75);
  CHECK(gini(V{2, 1, 1}) == doctest::Approx(gini_pairwise({2, 1, 1})).epsilon(1e-15));
  CHECK(gini(V{2, 1, 1}) == doctest::Approx(1.0 / 6.0).epsilon(1e-15));
  CHECK_THROWS_AS(gini(V{0, 0, 0}), DomainError);
}

TEST_CASE("gini agrees with the pairwise definition and is positive off uniform") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 10.0);
  for (int trial = 0; trial < 100; ++trial) {
    V x(2 + trial % 9);
    for (auto& v : x) v = u(rng);
    CHECK(gini(x) == doctest::Approx(gini_pairwise(x)).epsilon(1e-12));
    CHECK(gini(x) > 0.0);
    CHECK(gini(x) < 1.0);
  }
}

TEST_CASE("metrics are scale and permutation invariant") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  for (int trial = 0; trial < 100; ++trial) {
    V x(8);
    for (auto& v : x) v = std::floor(u(rng));
    x[trial % 8] += 1.0;
    V scaled = x;
    for (auto& v : scaled) v *= 4.0;
    V shuffled = x;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    CHECK(max_vio(scaled) == max_vio(x));
    CHECK(gini(scaled) == gini(x));
    CHECK(max_vio(shuffled) == max_vio(x));
    CHECK(gini(shuffled) == gini(x));
  }
}

TEST_CASE("routed-token ratio examples") {
  // uniform: each domain sends one token to each expert
  std::vector<std::vector<std::size_t>> sel;
  std::vector<std::size_t> dom;
  for (std::size_t d = 0; d < 2; ++d)
    for (std::size_t e = 0; e < 8; ++e) {
      sel.push_back({e});
      dom.push_back(d);
    }
  const auto r = routed_token_ratio(sel, dom, 8, 2);
  for (double v : r.ratio.values()) CHECK(v == 0.125);

  const auto one = routed_token_ratio({{3}, {3}, {3}}, std::vector<std::size_t>{0, 0, 0}, 4, 2);
  CHECK(one.ratio.at(0, 3) == 1.0);
  CHECK(one.ratio.at(0, 0) == 0.0);
  CHECK(one.present == std::vector<bool>{true, false});
  CHECK(one.ratio.at(1, 3) == 0.0);

  const auto k2 = routed_token_ratio({{0, 1}, {1, 2}}, std::vector<std::size_t>{0, 0}, 3, 1);
  CHECK(k2.ratio.at(0, 0) == 0.25);
  CHECK(k2.ratio.at(0, 1) == 0.5);
}

TEST_CASE("random assignments concentrate near 1/E and rows are simplex vectors") {
  std::mt19937_64 rng(3);
  const std::size_t E = 8, D = 3, N = 10000;
  std::uniform_int_distribution<std::size_t> pick(0, E - 1), domain(0, D - 1);
  std::vector<std::vector<std::size_t>> sel(N);
  std::vector<std::size_t> dom(N);
  for (std::size_t i = 0; i < N; ++i) {
    sel[i] = {pick(rng)};
    dom[i] = domain(rng);
  }
  const auto r = routed_token_ratio(sel, dom, E, D);
  double worst = 0.0;
  for (std::size_t d = 0; d < D; ++d) {
    double row = 0.0;
    for (std::size_t e = 0; e < E; ++e) {
      row += r.ratio.at(d, e);
      worst = std::max(worst, std::abs(r.ratio.at(d, e) - 1.0 / E));
    }
    CHECK(std::abs(row - 1.0) < 1e-9);
  }
  CHECK(worst < 0.02);
}

TEST_CASE("accuracy") {
  const std::vector<std::size_t> labels{0, 1, 2, 3};
  CHECK(accuracy(labels, labels) == 1.0);
  CHECK(accuracy(std::vector<std::size_t>{1, 2, 3, 0}, labels) == 0.0);
  CHECK(accuracy(std::vector<std::size_t>{0, 1, 2, 0}, labels) == 0.75);
  CHECK_THROWS(accuracy(std::vector<std::size_t>{}, std::vector<std::size_t>{}));
  CHECK_THROWS(accuracy(std::vector<std::size_t>{1}, labels));
}

TEST_CASE("load window keeps a sliding sum") {
  LoadWindow w(2, 3);
  w.push(V{1, 0});
  w.push(V{0, 2});
  w.push(V{1, 1});
  CHECK(V(w.totals().begin(), w.totals().end()) == V{2, 3});
  w.push(V{5, 0});
  CHECK(V(w.totals().begin(), w.totals().end()) == V{6, 3});
  CHECK(w.size() == 3);
  CHECK_THROWS(w.push(V{1}));
}
