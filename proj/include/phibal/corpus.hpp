// SPDX-License-Identifier: Apache-2.0
//
// Domain-structured synthetic token streams. Each token comes from a domain
// drawn from the mixture and lands at that domain's cluster center plus
// isotropic Gaussian noise. Batches are a pure function of (seed, step).

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string_view>
#include <variant>
#include <vector>

#include "phibal/tensor.hpp"

namespace phibal {

enum class LabelRule {
  /// Class label = domain id.
  DomainId,
  /// Regression target W_t x with a seeded D × d teacher.
  LinearTeacher,
};

std::string_view label_rule_name(LabelRule rule) noexcept;
LabelRule parse_label_rule(std::string_view text);

namespace schedule {

struct Constant {};

/// Step s uses the one-hot mixture on domain s mod D.
struct Alternating {};

/// Mixture moves linearly from `from` to `to` over `steps` steps, then stays.
struct Linear {
  std::vector<double> from;
  std::vector<double> to;
  std::uint64_t steps = 1;
};

/// Arbitrary step → weights map; its output is validated at every call.
using Custom = std::function<std::vector<double>(std::uint64_t)>;

}  // namespace schedule

using MixtureSchedule = std::variant<schedule::Constant, schedule::Alternating, schedule::Linear, schedule::Custom>;

struct CorpusSpec {
  std::vector<double> mixture;  // length D, simplex
  Tensor centers;               // D × d
  double cluster_scale = 1.0;
  LabelRule label_rule = LabelRule::DomainId;
  Tensor teacher;  // D × d, only used by LinearTeacher
  std::uint64_t seed = 0;
  MixtureSchedule schedule = schedule::Constant{};

  /// Centers ~ N(0, center_std²), teacher ~ N(0, 1/d), both seeded by `seed`.
  static CorpusSpec gaussian(std::vector<double> mixture, std::size_t dim, double center_std, double cluster_scale,
                             LabelRule rule, std::uint64_t seed);

  std::size_t domains() const noexcept { return mixture.size(); }
  std::size_t dim() const { return centers.cols(); }

  /// Mixture in force at `step`. Throws ConfigError if the schedule yields a
  /// non-simplex vector.
  std::vector<double> mixture_at(std::uint64_t step) const;

  void validate() const;
};

struct Batch {
  Tensor x;                          // T × d
  std::vector<std::size_t> labels;   // DomainId labels
  Tensor targets;                    // T × D, LinearTeacher only
  std::vector<std::size_t> domains;  // T
};

Batch sample_batch(const CorpusSpec& spec, std::size_t tokens, std::uint64_t step);

/// Held-out batch drawn from the base mixture on a stream disjoint from every
/// training step.
Batch sample_validation(const CorpusSpec& spec, std::size_t tokens);

CorpusSpec drift_mixture(CorpusSpec spec, MixtureSchedule schedule);

}  // namespace phibal
