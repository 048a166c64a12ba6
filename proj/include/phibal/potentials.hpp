// SPDX-License-Identifier: Apache-2.0
//
// Catalog of strictly convex, symmetric potentials used to price expert
// usage. For each family we provide the value φ(m), the link map ∇φ(m), the
// convex conjugate φ*(q), the inverse link ∇φ*(q) and the per-expert
// auxiliary-loss weight.
//
// Conjugates are closed form for every family except the Tsallis and Rényi
// entropies, which are solved numerically: Tsallis coordinatewise by
// bisection on the (monotone) link, Rényi along the ray fixed by its
// first-order conditions by bisection on the scale.

#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace phibal {

enum class Family {
  Euclidean,
  LpNorm,
  SoftL1,
  NegShannon,
  NegTsallis,
  NegRenyi,
  PseudoHuber,
  LogCosh,
  Softplus,
};

std::string_view family_name(Family family) noexcept;

/// A potential family plus its single scalar parameter (p, α, δ or β; unused
/// for parameter-free families). Ranges are enforced at construction.
class PotentialSpec {
 public:
  static PotentialSpec euclidean();
  /// p > 1; pass infinity for the max-norm variant.
  static PotentialSpec lp(double p);
  static PotentialSpec soft_l1(double delta);
  static PotentialSpec neg_shannon();
  /// α > 0, α ≠ 1.
  static PotentialSpec tsallis(double alpha);
  /// α ∈ (0, 1).
  static PotentialSpec renyi(double alpha);
  static PotentialSpec pseudo_huber(double delta);
  static PotentialSpec log_cosh(double beta);
  static PotentialSpec softplus();

  /// Parses the token grammar: `neg_shannon`, `euclidean`, `lp:p=3`,
  /// `lp:p=inf`, `soft_l1:delta=0.1`, `tsallis:alpha=1.1`,
  /// `renyi:alpha=0.95`, `pseudo_huber:delta=1.0`, `log_cosh:beta=1.0`,
  /// `softplus`. Throws ConfigError on anything else.
  static PotentialSpec parse(std::string_view token);
  std::string to_string() const;

  Family family() const noexcept { return family_; }
  double param() const noexcept { return param_; }

  bool is_entropic() const noexcept;
  bool is_max_norm() const noexcept;
  bool has_closed_form_conjugate() const noexcept;
  /// Separable families whose link is coordinatewise increasing.
  bool is_coordinatewise() const noexcept;

  friend bool operator==(const PotentialSpec&, const PotentialSpec&) = default;

 private:
  PotentialSpec(Family family, double param) : family_(family), param_(param) {}

  Family family_;
  double param_;
};

/// One representative of each of the nine families, in catalog order.
std::vector<PotentialSpec> default_catalog();

/// Nonnegative length-E vector. The simplex flavor additionally requires the
/// entries to sum to 1 within 1e-9.
class ProbVector {
 public:
  static ProbVector simplex(std::vector<double> values);
  static ProbVector nonnegative(std::vector<double> values);
  static ProbVector uniform(std::size_t experts);

  std::span<const double> values() const noexcept { return values_; }
  std::size_t size() const noexcept { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  bool on_simplex() const noexcept { return simplex_; }

 private:
  ProbVector(std::vector<double> values, bool simplex) : values_(std::move(values)), simplex_(simplex) {}

  std::vector<double> values_;
  bool simplex_;
};

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

double value(const PotentialSpec& spec, std::span<const double> m);
std::vector<double> link(const PotentialSpec& spec, std::span<const double> m);
/// φ*(q); +∞ outside the conjugate's effective domain.
double conjugate_value(const PotentialSpec& spec, std::span<const double> q);
/// ∇φ*(q). Throws DomainError outside the conjugate's interior.
std::vector<double> inverse_link(const PotentialSpec& spec, std::span<const double> q);
/// Per-expert weight of the auxiliary loss Σ p_e w_e, written column by
/// column from the catalog table. Agrees with link() for every family.
std::vector<double> aux_weight(const PotentialSpec& spec, std::span<const double> m);

/// Entropic families need m > 0; the training path lifts entries to
/// max(m_e, eps) before pricing. Other families are returned unchanged.
std::vector<double> clamp_for_link(const PotentialSpec& spec, std::span<const double> m, double eps = 1e-12);

}  // namespace phibal
