// SPDX-License-Identifier: Apache-2.0
#include "phibal/balancer.hpp"

#include <algorithm>
#include <cmath>

#include "phibal/error.hpp"

namespace phibal {

std::string_view statistic_name(Statistic s) noexcept {
  return s == Statistic::ProbabilityEma ? "probability" : "frequency";
}

Statistic parse_statistic(std::string_view text) {
  if (text == "probability") return Statistic::ProbabilityEma;
  if (text == "frequency") return Statistic::FrequencyEma;
  throw ConfigError("unknown statistic '" + std::string(text) + "' (expected probability or frequency)");
}

std::string_view mechanism_name(const Mechanism& mechanism) noexcept {
  switch (mechanism.index()) {
    case 0: return "phi";
    case 1: return "st_moe";
    default: return "loss_free";
  }
}

BalancerState::BalancerState(std::size_t experts, double eta, double alpha, Statistic statistic, Mechanism mechanism)
    : m_(experts, 0.0), eta_(eta), alpha_(alpha), statistic_(statistic), mechanism_(std::move(mechanism)) {
  if (experts == 0) throw ConfigError("balancer: expert count must be positive");
  if (!(eta > 0.0 && eta <= 1.0)) throw ConfigError("balancer: eta must lie in (0, 1]");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("balancer: alpha must be nonnegative");
  if (auto* lf = std::get_if<LossFree>(&mechanism_)) {
    if (lf->bias.empty()) lf->bias.assign(experts, 0.0);
    if (lf->bias.size() != experts) throw ConfigError("balancer: loss-free bias length differs from expert count");
    if (!(lf->step > 0.0)) throw ConfigError("balancer: loss-free bias step must be positive");
  }
}

std::span<const double> BalancerState::bias() const noexcept {
  if (const auto* lf = std::get_if<LossFree>(&mechanism_)) return lf->bias;
  return {};
}

void BalancerState::ema_update(std::span<const double> stat) {
  if (stat.size() != m_.size()) {
    throw ShapeError("ema_update: statistic has length " + std::to_string(stat.size()) + ", expected " +
                     std::to_string(m_.size()));
  }
  for (std::size_t e = 0; e < m_.size(); ++e) m_[e] = (1.0 - eta_) * m_[e] + eta_ * stat[e];
  ++updates_;
}

void BalancerState::loss_free_step(std::span<const double> f) {
  auto* lf = std::get_if<LossFree>(&mechanism_);
  if (!lf) throw ConfigError("loss_free_step: mechanism is not loss-free");
  if (f.size() != m_.size()) throw ShapeError("loss_free_step: frequency length differs from expert count");
  const double target = 1.0 / static_cast<double>(m_.size());
  for (std::size_t e = 0; e < f.size(); ++e) {
    const double err = target - f[e];
    const double sign = (err > 0.0) - (err < 0.0);
    lf->bias[e] += lf->step * sign;
  }
}

nlohmann::json BalancerState::to_json() const {
  nlohmann::json j;
  j["m"] = m_;
  j["eta"] = eta_;
  j["alpha"] = alpha_;
  j["statistic"] = statistic_name(statistic_);
  j["mechanism"] = mechanism_name(mechanism_);
  j["updates"] = updates_;
  if (const auto* phi = std::get_if<PhiBalancing>(&mechanism_)) j["phi"] = phi->phi.to_string();
  if (const auto* lf = std::get_if<LossFree>(&mechanism_)) {
    j["b"] = lf->bias;
    j["bias_step"] = lf->step;
  }
  return j;
}

BalancerState BalancerState::from_json(const nlohmann::json& j) {
  try {
    const auto m = j.at("m").get<std::vector<double>>();
    const std::string mech = j.at("mechanism").get<std::string>();
    Mechanism mechanism;
    if (mech == "phi") {
      mechanism = PhiBalancing{PotentialSpec::parse(j.at("phi").get<std::string>())};
    } else if (mech == "st_moe") {
      mechanism = StMoe{};
    } else if (mech == "loss_free") {
      mechanism = LossFree{j.at("b").get<std::vector<double>>(), j.at("bias_step").get<double>()};
    } else {
      throw ConfigError("balancer snapshot: unknown mechanism '" + mech + "'");
    }
    BalancerState state(m.size(), j.at("eta").get<double>(), j.at("alpha").get<double>(),
                        parse_statistic(j.at("statistic").get<std::string>()), std::move(mechanism));
    state.m_ = m;
    state.updates_ = j.value("updates", std::uint64_t{0});
    return state;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("balancer snapshot: ") + e.what());
  }
}

bool operator==(const BalancerState& a, const BalancerState& b) {
  if (a.m_ != b.m_ || a.eta_ != b.eta_ || a.alpha_ != b.alpha_ || a.statistic_ != b.statistic_ ||
      a.updates_ != b.updates_ || a.mechanism_.index() != b.mechanism_.index()) {
    return false;
  }
  if (const auto* pa = std::get_if<PhiBalancing>(&a.mechanism_)) return pa->phi == std::get<PhiBalancing>(b.mechanism_).phi;
  if (const auto* la = std::get_if<LossFree>(&a.mechanism_)) {
    const auto& lb = std::get<LossFree>(b.mechanism_);
    return la->bias == lb.bias && la->step == lb.step;
  }
  return true;
}

std::vector<double> phi_prices(const PotentialSpec& phi, std::span<const double> m, std::optional<double> clamp) {
  if (clamp) return aux_weight(phi, clamp_for_link(phi, m, *clamp));
  return aux_weight(phi, m);
}

ad::Var phi_aux_loss(const BalancerState& state, ad::Var p_batch, std::optional<double> clamp) {
  const auto* mech = std::get_if<PhiBalancing>(&state.mechanism());
  if (!mech) throw ConfigError("phi_aux_loss: mechanism is not phi-balancing");
  if (p_batch.value().size() != state.experts()) throw ShapeError("phi_aux_loss: batch distribution length mismatch");
  ad::Var prices = p_batch.tape().constant(Tensor::vector(phi_prices(mech->phi, state.m(), clamp)));
  return ad::dot(p_batch, ad::stop_gradient(prices));
}

ad::Var stmoe_aux_loss(std::span<const double> f, ad::Var p_batch) {
  if (p_batch.value().size() != f.size()) {
    throw ShapeError("stmoe_aux_loss: frequency length " + std::to_string(f.size()) + " vs distribution " +
                     shape_string(p_batch.shape()));
  }
  ad::Var freq = p_batch.tape().constant(Tensor::vector(std::vector<double>(f.begin(), f.end())));
  return ad::dot(freq, p_batch);
}

ad::Var total_loss(ad::Var task, std::span<const ad::Var> aux, double alpha, std::size_t experts) {
  ad::Var total = task;
  const double coeff = alpha * static_cast<double>(experts);
  for (ad::Var a : aux) total = ad::add(total, ad::scale(a, coeff));
  return total;
}

std::vector<double> mirror_ascent_step_numeric(const PotentialSpec& phi, std::span<const double> m_t,
                                               std::span<const double> p_t, double eta) {
  if (m_t.size() != p_t.size()) throw ShapeError("mirror_ascent_step_numeric: length mismatch");
  if (!phi.is_coordinatewise() || !phi.has_closed_form_conjugate()) {
    throw ConfigError("mirror_ascent_step_numeric: needs a separable closed-form conjugate");
  }
  const std::vector<double> q_t = link(phi, m_t);
  // ∇_q F(q_t) = p - ∇φ*(q_t)
  const std::vector<double> grad_at_qt = [&] {
    std::vector<double> g = inverse_link(phi, q_t);
    for (std::size_t e = 0; e < g.size(); ++e) g[e] = p_t[e] - g[e];
    return g;
  }();
  const std::vector<double> dstar_qt = inverse_link(phi, q_t);

  std::vector<double> q_next(q_t.size());
  for (std::size_t e = 0; e < q_t.size(); ++e) {
    const double qt = q_t[e];
    auto conj = [&](double q) { return conjugate_value(phi, std::span<const double>(&q, 1)); };
    const double conj_qt = conj(qt);
    auto objective = [&](double q) {
      const double bregman = conj(q) - conj_qt - dstar_qt[e] * (q - qt);
      return grad_at_qt[e] * q - bregman / eta;
    };
    auto slope = [&](double q) {
      const double h = 1e-5 * std::max(1.0, std::abs(q));
      return (objective(q + h) - objective(q - h)) / (2.0 * h);
    };
    double lo = qt - 50.0, hi = qt + 50.0;
    for (int it = 0; it < 200 && hi - lo > 1e-13 * std::max(1.0, std::abs(lo)); ++it) {
      const double mid = 0.5 * (lo + hi);
      if (slope(mid) > 0.0) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    q_next[e] = 0.5 * (lo + hi);
  }
  return q_next;
}

JensenGap estimation_bias(const PotentialSpec& phi, const std::vector<std::vector<double>>& population,
                          std::size_t batch, std::size_t batches, std::uint64_t seed) {
  if (population.empty() || batch == 0 || batches < 2) throw ConfigError("estimation_bias: empty population or batch");
  const std::size_t experts = population.front().size();
  std::vector<double> p_bar(experts, 0.0);
  for (const auto& row : population) {
    if (row.size() != experts) throw ShapeError("estimation_bias: ragged population");
    for (std::size_t e = 0; e < experts; ++e) p_bar[e] += row[e];
  }
  for (double& v : p_bar) v /= static_cast<double>(population.size());
  const double phi_bar = value(phi, p_bar);

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, population.size() - 1);
  double sum = 0.0, sum_sq = 0.0;
  std::vector<double> p_hat(experts);
  for (std::size_t b = 0; b < batches; ++b) {
    std::fill(p_hat.begin(), p_hat.end(), 0.0);
    for (std::size_t i = 0; i < batch; ++i) {
      const auto& row = population[pick(rng)];
      for (std::size_t e = 0; e < experts; ++e) p_hat[e] += row[e];
    }
    for (double& v : p_hat) v /= static_cast<double>(batch);
    const double d = value(phi, p_hat) - phi_bar;
    sum += d;
    sum_sq += d * d;
  }
  const double n = static_cast<double>(batches);
  const double mean = sum / n;
  const double var = std::max(0.0, (sum_sq - n * mean * mean) / (n - 1.0));
  return {batch, mean, std::sqrt(var / n)};
}

}  // namespace phibal
