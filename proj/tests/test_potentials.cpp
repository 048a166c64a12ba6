// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "phibal/error.hpp"
#include "phibal/potentials.hpp"

using namespace phibal;
using V = std::vector<double>;

namespace {

V random_interior(std::mt19937_64& rng, std::size_t n) {
  std::gamma_distribution<double> g(2.0, 1.0);
  V m(n);
  for (auto& v : m) v = g(rng) + 0.05;
  const double s = std::accumulate(m.begin(), m.end(), 0.0);
  for (auto& v : m) v /= s;
  return m;
}

}  // namespace

TEST_CASE("values from the catalog") {
  CHECK(value(PotentialSpec::neg_shannon(), V{0.5, 0.5}) == doctest::Approx(-std::log(2.0)).epsilon(1e-15));
  CHECK(value(PotentialSpec::euclidean(), V{1.0, 0.0}) == 0.5);
  CHECK(value(PotentialSpec::lp(3), V{0.5, 0.5}) == doctest::Approx(0.25 / 3.0).epsilon(1e-15));
  CHECK(value(PotentialSpec::tsallis(2), V{0.5, 0.5}) == doctest::Approx(-0.5).epsilon(1e-15));
  // 0 log 0 := 0
  CHECK(value(PotentialSpec::neg_shannon(), V{1.0, 0.0}) == 0.0);
  CHECK_THROWS_AS(value(PotentialSpec::neg_shannon(), V{-0.1, 1.1}), DomainError);
  CHECK_THROWS_AS(value(PotentialSpec::tsallis(2), V{0.5, -0.5}), DomainError);
}

TEST_CASE("links from the catalog") {
  const auto q = link(PotentialSpec::neg_shannon(), V{0.25, 0.75});
  CHECK(q[0] == doctest::Approx(std::log(0.25) + 1).epsilon(1e-15));
  CHECK(q[1] == doctest::Approx(std::log(0.75) + 1).epsilon(1e-15));
  CHECK(q[0] == doctest::Approx(-0.386294).epsilon(1e-6));
  CHECK(link(PotentialSpec::euclidean(), V{0.3, 0.7}) == V{0.3, 0.7});
  CHECK(link(PotentialSpec::softplus(), V{0.0, 0.0}) == V{0.5, 0.5});
  CHECK(link(PotentialSpec::log_cosh(2), V{0.5})[0] == doctest::Approx(std::tanh(1.0)).epsilon(1e-15));

  try {
    (void)link(PotentialSpec::neg_shannon(), V{0.5, 0.0, 0.5});
    FAIL("expected DomainError");
  } catch (const DomainError& e) {
    CHECK(e.index() == 1);
  }
}

TEST_CASE("conjugate values and effective domains") {
  CHECK(conjugate_value(PotentialSpec::neg_shannon(), V{1.0, 1.0}) == 2.0);
  CHECK(conjugate_value(PotentialSpec::euclidean(), V{0.6, 0.8}) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(conjugate_value(PotentialSpec::soft_l1(0.1), V{1.5, 0.0}) == kInfinity);
  CHECK(conjugate_value(PotentialSpec::pseudo_huber(1.0), V{1.01}) == kInfinity);
  CHECK(conjugate_value(PotentialSpec::softplus(), V{1.2, 0.5}) == kInfinity);

  // Numeric conjugate against the Fenchel equality at a link point.
  const V m{0.5, 0.5};
  const auto spec = PotentialSpec::tsallis(2);
  const auto q = link(spec, m);
  const double fy = m[0] * q[0] + m[1] * q[1] - value(spec, m);
  CHECK(conjugate_value(spec, q) == doctest::Approx(fy).epsilon(1e-8));
}

TEST_CASE("inverse links") {
  CHECK(inverse_link(PotentialSpec::neg_shannon(), V{1.0})[0] == 1.0);
  CHECK(inverse_link(PotentialSpec::euclidean(), V{0.4, 0.6}) == V{0.4, 0.6});
  CHECK_THROWS_AS(inverse_link(PotentialSpec::soft_l1(0.1), V{2.0}), DomainError);
}

TEST_CASE("inverse_link undoes link for every family") {
  for (const auto& spec : default_catalog()) {
    double worst = 0.0;
    std::mt19937_64 rng(42);
    for (int trial = 0; trial < 50; ++trial) {
      const V m = random_interior(rng, 4);
      const V back = inverse_link(spec, link(spec, m));
      for (std::size_t i = 0; i < 4; ++i) worst = std::max(worst, std::abs(back[i] - m[i]));
    }
    INFO(spec.to_string() << " worst " << worst);
    CHECK(worst < 1e-8);
  }
}

TEST_CASE("aux weights follow the table column") {
  const double a = 0.95;
  const V m{0.5, 0.5};
  const auto w = aux_weight(PotentialSpec::renyi(a), m);
  CHECK(w[0] == w[1]);
  const double sum_pow = 2 * std::pow(0.5, a);
  const double formula = a * std::pow(0.5, a - 1) / ((a - 1) * sum_pow);
  CHECK(w[0] == doctest::Approx(formula).epsilon(1e-13));
  // finite-difference gradient of the value
  const double h = 1e-6;
  const double fd = (value(PotentialSpec::renyi(a), V{0.5 + h, 0.5}) - value(PotentialSpec::renyi(a), V{0.5 - h, 0.5})) /
                    (2 * h);
  CHECK(w[0] == doctest::Approx(fd).epsilon(1e-7));

  CHECK(aux_weight(PotentialSpec::soft_l1(0.1), V{0.2})[0] == doctest::Approx(0.2 / 0.3).epsilon(1e-15));
  CHECK(aux_weight(PotentialSpec::pseudo_huber(1.0), V{0.0})[0] == 0.0);

  std::mt19937_64 rng(3);
  for (const auto& spec : default_catalog()) {
    const V m = random_interior(rng, 5);
    const auto lw = link(spec, m);
    const auto aw = aux_weight(spec, m);
    for (std::size_t i = 0; i < m.size(); ++i) CHECK(aw[i] == doctest::Approx(lw[i]).epsilon(1e-12));
  }
}

TEST_CASE("max-norm link puts unit weight on the first maximal coordinate") {
  const auto spec = PotentialSpec::lp(kInfinity);
  CHECK(spec.is_max_norm());
  CHECK(link(spec, V{0.1, 0.4, 0.4, 0.1}) == V{0.0, 1.0, 0.0, 0.0});
  CHECK(value(spec, V{0.1, 0.4, 0.4, 0.1}) == 0.4);
}

TEST_CASE("lp link keeps the sign of signed inputs") {
  const auto q = link(PotentialSpec::lp(3), V{-0.5, 0.5});
  CHECK(q[0] == doctest::Approx(-0.25));
  CHECK(q[1] == doctest::Approx(0.25));
}

TEST_CASE("parameter ranges are enforced") {
  CHECK_THROWS_AS(PotentialSpec::lp(1.0), ConfigError);
  CHECK_THROWS_AS(PotentialSpec::tsallis(1.0), ConfigError);
  CHECK_THROWS_AS(PotentialSpec::tsallis(0.0), ConfigError);
  CHECK_THROWS_AS(PotentialSpec::renyi(1.0), ConfigError);
  CHECK_THROWS_AS(PotentialSpec::renyi(0.0), ConfigError);
  CHECK_THROWS_AS(PotentialSpec::soft_l1(0.0), ConfigError);
  CHECK_THROWS_AS(PotentialSpec::pseudo_huber(-1.0), ConfigError);
  CHECK_THROWS_AS(PotentialSpec::log_cosh(0.0), ConfigError);
}

TEST_CASE("token grammar") {
  for (const char* token : {"neg_shannon", "euclidean", "lp:p=3", "lp:p=inf", "soft_l1:delta=0.1", "tsallis:alpha=1.1",
                            "renyi:alpha=0.95", "pseudo_huber:delta=1", "log_cosh:beta=1", "softplus"}) {
    const auto spec = PotentialSpec::parse(token);
    CHECK(PotentialSpec::parse(spec.to_string()) == spec);
  }
  CHECK(PotentialSpec::parse("lp:p=inf").is_max_norm());
  CHECK(PotentialSpec::parse("renyi:alpha=0.95") == PotentialSpec::renyi(0.95));
  CHECK_THROWS_AS(PotentialSpec::parse("tsallis:alpha=1.0"), ConfigError);
  CHECK_THROWS_AS(PotentialSpec::parse("shannon"), ConfigError);
  CHECK_THROWS_AS(PotentialSpec::parse("lp:q=3"), ConfigError);
  CHECK_THROWS_AS(PotentialSpec::parse("lp:p=abc"), ConfigError);
}

TEST_CASE("simplex vectors") {
  CHECK_NOTHROW(ProbVector::simplex({0.25, 0.75}));
  CHECK_THROWS(ProbVector::simplex({0.25, 0.7}));
  CHECK_THROWS(ProbVector::nonnegative({0.25, -0.1}));
  CHECK(ProbVector::nonnegative({0.0, 0.0}).size() == 2);
  CHECK(ProbVector::uniform(4)[3] == 0.25);
}

TEST_CASE("uniform point minimizes every family") {
  std::mt19937_64 rng(7);
  for (const auto& spec : default_catalog()) {
    for (std::size_t e : {2u, 4u, 8u}) {
      const V u(e, 1.0 / static_cast<double>(e));
      const double vu = value(spec, u);
      for (int trial = 0; trial < 200; ++trial) {
        const V p = random_interior(rng, e);
        CHECK(value(spec, p) > vu);
      }
    }
  }
}

TEST_CASE("link matches central differences of the value") {
  std::mt19937_64 rng(9);
  const double h = 1e-5;
  for (const auto& spec : default_catalog()) {
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      V m = random_interior(rng, 4);
      const auto q = link(spec, m);
      for (std::size_t i = 0; i < m.size(); ++i) {
        // Fourth-order stencil keeps the truncation error far below 1e-6.
        auto f = [&](double d) {
          V x = m;
          x[i] += d;
          return value(spec, x);
        };
        const double fd = (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h);
        worst = std::max(worst, std::abs(fd - q[i]) / std::max({std::abs(fd), std::abs(q[i]), 1e-6}));
      }
    }
    INFO(spec.to_string() << " worst " << worst);
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("values are permutation invariant and midpoint convex") {
  std::mt19937_64 rng(13);
  for (const auto& spec : default_catalog()) {
    for (int trial = 0; trial < 20; ++trial) {
      V a = random_interior(rng, 5);
      V b = random_interior(rng, 5);
      V shuffled = a;
      std::shuffle(shuffled.begin(), shuffled.end(), rng);
      CHECK(value(spec, shuffled) == value(spec, a));

      V mid(5);
      for (std::size_t i = 0; i < 5; ++i) mid[i] = 0.5 * (a[i] + b[i]);
      CHECK(value(spec, mid) < 0.5 * value(spec, a) + 0.5 * value(spec, b));
    }
  }
}

TEST_CASE("price direction for coordinatewise families") {
  std::mt19937_64 rng(21);
  for (const auto& spec : default_catalog()) {
    if (!spec.is_coordinatewise()) continue;
    for (int trial = 0; trial < 20; ++trial) {
      const V m = random_interior(rng, 6);
      const auto w = aux_weight(spec, m);
      for (std::size_t a = 0; a < 6; ++a)
        for (std::size_t b = 0; b < 6; ++b)
          if (m[a] > m[b]) CHECK(w[a] > w[b]);
    }
  }
}

TEST_CASE("clamping only lifts entropic families") {
  const V zeros{0.0, 0.0};
  CHECK(clamp_for_link(PotentialSpec::neg_shannon(), zeros) == V{1e-12, 1e-12});
  CHECK(clamp_for_link(PotentialSpec::euclidean(), zeros) == zeros);
}
