// SPDX-License-Identifier: Apache-2.0
//
// Online dual tracker and the competing load-balancing mechanisms.
//
// Per training step and per layer (φ-balancing):
//   m ← (1-η) m + η p̄          (EMA of the batch routing distribution)
//   q ← ∇φ(m)                  (expert prices)
//   L_aux = Σ_e p̄_e · sg(q_e)  (prices are constants to the router)
// The EMA is updated before pricing, so the loss uses the fresh m.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "phibal/autodiff.hpp"
#include "phibal/potentials.hpp"

namespace phibal {

enum class Statistic {
  /// EMA of mean pre-top-k routing probabilities.
  ProbabilityEma,
  /// EMA of realized top-k selection frequencies, normalized by T.
  FrequencyEma,
};

std::string_view statistic_name(Statistic s) noexcept;
Statistic parse_statistic(std::string_view text);

struct PhiBalancing {
  PotentialSpec phi = PotentialSpec::neg_shannon();
};

struct StMoe {};

/// Loss-free balancing: per-expert logit bias steering top-k selection only.
struct LossFree {
  std::vector<double> bias;
  double step = 1e-3;
};

using Mechanism = std::variant<PhiBalancing, StMoe, LossFree>;

/// "phi", "st_moe" or "loss_free".
std::string_view mechanism_name(const Mechanism& mechanism) noexcept;

inline constexpr double kEntropicClamp = 1e-12;

class BalancerState {
 public:
  /// eta ∈ (0, 1]; alpha ≥ 0 (0 disables the auxiliary term but keeps the
  /// tracker running). A LossFree mechanism with an empty bias gets zeros.
  BalancerState(std::size_t experts, double eta, double alpha, Statistic statistic, Mechanism mechanism);

  std::size_t experts() const noexcept { return m_.size(); }
  std::span<const double> m() const noexcept { return m_; }
  double eta() const noexcept { return eta_; }
  double alpha() const noexcept { return alpha_; }
  Statistic statistic() const noexcept { return statistic_; }
  const Mechanism& mechanism() const noexcept { return mechanism_; }
  std::uint64_t updates() const noexcept { return updates_; }

  /// Logit bias for top-k selection; empty unless the mechanism is LossFree.
  std::span<const double> bias() const noexcept;

  /// m ← (1-η) m + η stat. `stat` is p̄ under ProbabilityEma and the
  /// 1/T-normalized frequencies under FrequencyEma.
  void ema_update(std::span<const double> stat);

  /// b_e ← b_e + u · sign(1/E - f_e) with f normalized to sum to 1.
  void loss_free_step(std::span<const double> f);

  nlohmann::json to_json() const;
  static BalancerState from_json(const nlohmann::json& j);

  friend bool operator==(const BalancerState&, const BalancerState&);

 private:
  std::vector<double> m_;
  double eta_;
  double alpha_;
  Statistic statistic_;
  Mechanism mechanism_;
  std::uint64_t updates_ = 0;
};

/// Prices the φ-balancing loss uses this step: aux_weight(φ, m), with m lifted
/// to max(m_e, clamp) for entropic families unless `clamp` is empty.
std::vector<double> phi_prices(const PotentialSpec& phi, std::span<const double> m,
                               std::optional<double> clamp = kEntropicClamp);

/// Σ_e p_e · stop_gradient(q_e) with q = phi_prices(φ, state.m()). Requires a
/// PhiBalancing mechanism.
ad::Var phi_aux_loss(const BalancerState& state, ad::Var p_batch, std::optional<double> clamp = kEntropicClamp);

/// Σ_e f_e · p_e with the realized frequencies f held constant.
ad::Var stmoe_aux_loss(std::span<const double> f, ad::Var p_batch);

/// task + α·E·Σ_l aux_l.
ad::Var total_loss(ad::Var task, std::span<const ad::Var> aux, double alpha, std::size_t experts);

/// One mirror-ascent step on the dual objective solved numerically:
///   argmax_q ⟨p - m, q⟩ - (1/η) D_{φ*}(q, q_t),   q_t = ∇φ(m).
/// Beyond the starting point q_t the solve uses only φ* and ∇φ*, never the
/// EMA, and requires a separable conjugate (coordinatewise inner solve by bisection on a central
/// difference of the objective).
std::vector<double> mirror_ascent_step_numeric(const PotentialSpec& phi, std::span<const double> m_t,
                                               std::span<const double> p_t, double eta);

/// Jensen gap of batch estimation: E_B[φ(p̂_B)] - φ(p̄) for p̂_B the mean of B
/// rows drawn uniformly with replacement from `population` (rows are
/// per-token routing distributions).
struct JensenGap {
  std::size_t batch = 0;
  double gap = 0.0;
  double standard_error = 0.0;
};

JensenGap estimation_bias(const PotentialSpec& phi, const std::vector<std::vector<double>>& population,
                          std::size_t batch, std::size_t batches, std::uint64_t seed);

}  // namespace phibal
