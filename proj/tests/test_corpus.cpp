// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <vector>

#include "phibal/corpus.hpp"
#include "phibal/error.hpp"

using namespace phibal;
using V = std::vector<double>;

namespace {

CorpusSpec base_spec(std::uint64_t seed = 3) {
  return CorpusSpec::gaussian({0.4, 0.3, 0.2, 0.1}, 8, 0.75, 1.0, LabelRule::DomainId, seed);
}

V domain_counts(const Batch& b, std::size_t domains) {
  V c(domains, 0.0);
  for (auto d : b.domains) c[d] += 1.0;
  return c;
}

}  // namespace

TEST_CASE("same seed and step give bit-identical batches") {
  const auto spec = base_spec();
  const auto a = sample_batch(spec, 32, 17);
  const auto b = sample_batch(spec, 32, 17);
  CHECK(a.x == b.x);
  CHECK(a.domains == b.domains);
  CHECK(a.labels == b.labels);
  CHECK(sample_batch(spec, 32, 18).x != a.x);
  CHECK(sample_batch(base_spec(4), 32, 17).x != a.x);
  CHECK(a.x.shape() == Shape{32, 8});
}

TEST_CASE("zero cluster scale puts every token on its center") {
  auto spec = CorpusSpec::gaussian({0.5, 0.5}, 3, 1.0, 0.0, LabelRule::DomainId, 1);
  const auto b = sample_batch(spec, 20, 0);
  for (std::size_t i = 0; i < 20; ++i) {
    for (std::size_t c = 0; c < 3; ++c) CHECK(b.x.at(i, c) == spec.centers.at(b.domains[i], c));
    CHECK(b.labels[i] == b.domains[i]);
  }
}

TEST_CASE("one-hot mixture yields a single domain") {
  const auto spec = CorpusSpec::gaussian({1.0, 0.0, 0.0}, 4, 1.0, 1.0, LabelRule::DomainId, 2);
  const auto b = sample_batch(spec, 100, 5);
  for (auto d : b.domains) CHECK(d == 0);
}

TEST_CASE("spec validation") {
  CHECK_THROWS_AS(CorpusSpec::gaussian({0.5, 0.6}, 4, 1.0, 1.0, LabelRule::DomainId, 0), ConfigError);
  CHECK_THROWS_AS(CorpusSpec::gaussian({1.0}, 4, 1.0, 1.0, LabelRule::DomainId, 0), ConfigError);
  CHECK_THROWS_AS(CorpusSpec::gaussian({0.5, 0.5}, 4, 1.0, -1.0, LabelRule::DomainId, 0), ConfigError);
  CHECK(parse_label_rule("linear_teacher") == LabelRule::LinearTeacher);
  CHECK(parse_label_rule(label_rule_name(LabelRule::DomainId)) == LabelRule::DomainId);
  CHECK_THROWS_AS(parse_label_rule("teacher"), ConfigError);
}

TEST_CASE("empirical domain frequencies converge to the mixture") {
  const auto spec = base_spec();
  const std::size_t T = 256, steps = 200;
  V counts(4, 0.0);
  for (std::uint64_t s = 0; s < steps; ++s) {
    const auto c = domain_counts(sample_batch(spec, T, s), 4);
    for (std::size_t d = 0; d < 4; ++d) counts[d] += c[d];
  }
  const double n = static_cast<double>(T * steps);
  for (std::size_t d = 0; d < 4; ++d) CHECK(std::abs(counts[d] / n - spec.mixture[d]) < 2.0 / std::sqrt(n));
}

TEST_CASE("constant schedule matches the base spec") {
  const auto spec = base_spec();
  const auto drifted = drift_mixture(spec, schedule::Constant{});
  CHECK(sample_batch(drifted, 16, 9).x == sample_batch(spec, 16, 9).x);
}

TEST_CASE("alternating schedule skews batches but averages to uniform") {
  const auto spec = drift_mixture(base_spec(), schedule::Alternating{});
  V counts(4, 0.0);
  const std::size_t T = 32, steps = 1000;
  for (std::uint64_t s = 0; s < steps; ++s) {
    const auto b = sample_batch(spec, T, s);
    const auto c = domain_counts(b, 4);
    CHECK(c[s % 4] == static_cast<double>(T));
    for (std::size_t d = 0; d < 4; ++d) counts[d] += c[d];
  }
  for (std::size_t d = 0; d < 4; ++d) CHECK(counts[d] / static_cast<double>(T * steps) == 0.25);
}

TEST_CASE("linear schedule drifts domain frequencies monotonically") {
  const auto spec = drift_mixture(base_spec(), schedule::Linear{{0.9, 0.1, 0.0, 0.0}, {0.1, 0.9, 0.0, 0.0}, 1000});
  CHECK(spec.mixture_at(0) == V{0.9, 0.1, 0.0, 0.0});
  CHECK(spec.mixture_at(5000)[1] == doctest::Approx(0.9));
  double prev = -1.0;
  for (int block = 0; block < 5; ++block) {
    double share = 0.0;
    for (std::uint64_t s = block * 200; s < static_cast<std::uint64_t>(block * 200 + 200); ++s) {
      share += domain_counts(sample_batch(spec, 64, s), 4)[1];
    }
    share /= 200.0 * 64.0;
    CHECK(share > prev);
    prev = share;
  }
}

TEST_CASE("non-simplex schedule output is rejected") {
  const auto spec = drift_mixture(base_spec(), schedule::Custom([](std::uint64_t) { return V{0.5, 0.5, 0.5, 0.0}; }));
  CHECK_THROWS_AS(spec.mixture_at(0), ConfigError);
  CHECK_THROWS_AS(sample_batch(spec, 4, 0), ConfigError);
}

TEST_CASE("linear teacher targets are the teacher map of the inputs") {
  const auto spec = CorpusSpec::gaussian({0.5, 0.5}, 3, 1.0, 1.0, LabelRule::LinearTeacher, 5);
  const auto b = sample_batch(spec, 6, 2);
  CHECK(b.targets.shape() == Shape{6, 2});
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t k = 0; k < 2; ++k) {
      double dot = 0.0;
      for (std::size_t c = 0; c < 3; ++c) dot += spec.teacher.at(k, c) * b.x.at(i, c);
      CHECK(b.targets.at(i, k) == doctest::Approx(dot).epsilon(1e-14));
    }
  }
}

TEST_CASE("validation batch comes from its own stream") {
  const auto spec = base_spec();
  const auto v = sample_validation(spec, 64);
  CHECK(v.x == sample_validation(spec, 64).x);
  for (std::uint64_t s = 0; s < 50; ++s) CHECK(sample_batch(spec, 64, s).x != v.x);
}
