// SPDX-License-Identifier: Apache-2.0
//
// Property and identity suites behind the `check` verb. Each suite returns a
// CheckResult rather than throwing, so callers can report every failure.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace phibal {

struct CheckResult {
  std::string name;
  bool passed = false;
  /// Largest observed error (or violation count for the ordering suite).
  double worst = 0.0;
  double tolerance = 0.0;
  std::size_t cases = 0;
  double seconds = 0.0;
  std::string detail;
};

struct CheckTolerances {
  double duality_closed = 1e-8;
  double duality_numeric = 1e-5;
  double fenchel_young_closed = 1e-6;
  double fenchel_young_numeric = 1e-4;
  double mirror_step = 1e-6;
  double gradient = 1e-4;

  /// Every tolerance replaced by `tol`.
  static CheckTolerances uniform(double tol);
};

/// Relative error used by the gradient suite: |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// φ(u) ≤ φ(p) for random simplex p, strict when ‖p - u‖∞ > 1e-6; all nine
/// catalog families, E ∈ {2, 4, 8}, 200 points each.
CheckResult uniform_minimizer_suite(std::uint64_t seed = 1);

/// ∇φ*(∇φ(m)) = m and φ(m) + φ*(∇φ(m)) = ⟨m, ∇φ(m)⟩ on 50 random interior
/// points per family, E = 4.
CheckResult duality_suite(const CheckTolerances& tol = {}, std::uint64_t seed = 2);

/// EMA followed by pricing equals the numerically solved mirror-ascent step,
/// NegShannon and Euclidean, 20 random (m, p, η) each.
CheckResult mirror_step_suite(const CheckTolerances& tol = {}, std::uint64_t seed = 3);

/// Fourth-order central finite differences (step 1e-4) against the tape for the task loss,
/// the ST-MoE loss, every catalog aux loss and the full training objective,
/// with routing selections and balancer state held fixed.
CheckResult gradient_suite(const CheckTolerances& tol = {}, std::uint64_t seed = 4, std::size_t instances = 5);

/// Router gradients of the aux loss computed with m frozen to plain numbers
/// equal the production path bit for bit, for every catalog family.
CheckResult stop_gradient_check(std::uint64_t seed = 5);

std::vector<CheckResult> run_all_checks(const CheckTolerances& tol = {});

}  // namespace phibal
