// SPDX-License-Identifier: Apache-2.0
#include "phibal/potentials.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

#include "phibal/error.hpp"

namespace phibal {

std::string_view family_name(Family family) noexcept {
  switch (family) {
    case Family::Euclidean: return "euclidean";
    case Family::LpNorm: return "lp";
    case Family::SoftL1: return "soft_l1";
    case Family::NegShannon: return "neg_shannon";
    case Family::NegTsallis: return "tsallis";
    case Family::NegRenyi: return "renyi";
    case Family::PseudoHuber: return "pseudo_huber";
    case Family::LogCosh: return "log_cosh";
    case Family::Softplus: return "softplus";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// PotentialSpec

namespace {

std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

}  // namespace

PotentialSpec PotentialSpec::euclidean() { return {Family::Euclidean, 0.0}; }

PotentialSpec PotentialSpec::lp(double p) {
  require(p > 1.0, "lp: p must exceed 1, got " + format_double(p));
  return {Family::LpNorm, p};
}

PotentialSpec PotentialSpec::soft_l1(double delta) {
  require(delta > 0.0 && std::isfinite(delta), "soft_l1: delta must be positive, got " + format_double(delta));
  return {Family::SoftL1, delta};
}

PotentialSpec PotentialSpec::neg_shannon() { return {Family::NegShannon, 0.0}; }

PotentialSpec PotentialSpec::tsallis(double alpha) {
  require(alpha > 0.0 && alpha != 1.0 && std::isfinite(alpha),
          "tsallis: alpha must be positive and different from 1, got " + format_double(alpha));
  return {Family::NegTsallis, alpha};
}

PotentialSpec PotentialSpec::renyi(double alpha) {
  require(alpha > 0.0 && alpha < 1.0, "renyi: alpha must lie in (0, 1), got " + format_double(alpha));
  return {Family::NegRenyi, alpha};
}

PotentialSpec PotentialSpec::pseudo_huber(double delta) {
  require(delta > 0.0 && std::isfinite(delta), "pseudo_huber: delta must be positive, got " + format_double(delta));
  return {Family::PseudoHuber, delta};
}

PotentialSpec PotentialSpec::log_cosh(double beta) {
  require(beta > 0.0 && std::isfinite(beta), "log_cosh: beta must be positive, got " + format_double(beta));
  return {Family::LogCosh, beta};
}

PotentialSpec PotentialSpec::softplus() { return {Family::Softplus, 0.0}; }

PotentialSpec PotentialSpec::parse(std::string_view token) {
  const auto colon = token.find(':');
  const std::string_view name = token.substr(0, colon);
  std::string_view key, text;
  if (colon != std::string_view::npos) {
    const std::string_view rest = token.substr(colon + 1);
    const auto eq = rest.find('=');
    require(eq != std::string_view::npos, "potential '" + std::string(token) + "': expected key=value after ':'");
    key = rest.substr(0, eq);
    text = rest.substr(eq + 1);
  }

  auto number = [&](std::string_view expected_key, bool allow_inf = false) {
    require(colon != std::string_view::npos,
            "potential '" + std::string(name) + "' requires parameter " + std::string(expected_key));
    require(key == expected_key, "potential '" + std::string(name) + "': unknown parameter '" + std::string(key) +
                                     "', expected '" + std::string(expected_key) + "'");
    if (allow_inf && (text == "inf" || text == "infinity")) return kInfinity;
    double v = 0.0;
    auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    require(res.ec == std::errc() && res.ptr == text.data() + text.size() && std::isfinite(v),
            "potential '" + std::string(token) + "': malformed number '" + std::string(text) + "'");
    return v;
  };
  auto no_params = [&] {
    require(colon == std::string_view::npos, "potential '" + std::string(name) + "' takes no parameters");
  };

  if (name == "euclidean") return no_params(), euclidean();
  if (name == "neg_shannon") return no_params(), neg_shannon();
  if (name == "softplus") return no_params(), softplus();
  if (name == "lp") return lp(number("p", true));
  if (name == "soft_l1") return soft_l1(number("delta"));
  if (name == "tsallis") return tsallis(number("alpha"));
  if (name == "renyi") return renyi(number("alpha"));
  if (name == "pseudo_huber") return pseudo_huber(number("delta"));
  if (name == "log_cosh") return log_cosh(number("beta"));
  throw ConfigError("unknown potential '" + std::string(token) + "'");
}

std::string PotentialSpec::to_string() const {
  const std::string name(family_name(family_));
  switch (family_) {
    case Family::Euclidean:
    case Family::NegShannon:
    case Family::Softplus: return name;
    case Family::LpNorm: return name + ":p=" + format_double(param_);
    case Family::SoftL1:
    case Family::PseudoHuber: return name + ":delta=" + format_double(param_);
    case Family::NegTsallis:
    case Family::NegRenyi: return name + ":alpha=" + format_double(param_);
    case Family::LogCosh: return name + ":beta=" + format_double(param_);
  }
  return name;
}

bool PotentialSpec::is_entropic() const noexcept {
  return family_ == Family::NegShannon || family_ == Family::NegTsallis || family_ == Family::NegRenyi;
}

bool PotentialSpec::is_max_norm() const noexcept { return family_ == Family::LpNorm && std::isinf(param_); }

bool PotentialSpec::has_closed_form_conjugate() const noexcept {
  return family_ != Family::NegTsallis && family_ != Family::NegRenyi;
}

bool PotentialSpec::is_coordinatewise() const noexcept { return family_ != Family::NegRenyi && !is_max_norm(); }

std::vector<PotentialSpec> default_catalog() {
  return {PotentialSpec::euclidean(),      PotentialSpec::lp(3.0),           PotentialSpec::soft_l1(0.1),
          PotentialSpec::neg_shannon(),    PotentialSpec::tsallis(1.1),      PotentialSpec::renyi(0.95),
          PotentialSpec::pseudo_huber(1.0), PotentialSpec::log_cosh(1.0),    PotentialSpec::softplus()};
}

// ---------------------------------------------------------------------------
// ProbVector

ProbVector ProbVector::simplex(std::vector<double> values) {
  double total = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!(values[i] >= 0.0)) throw DomainError("simplex vector: negative entry", i);
    total += values[i];
  }
  if (std::abs(total - 1.0) > 1e-9) throw DomainError("simplex vector: entries sum to " + format_double(total));
  return ProbVector(std::move(values), true);
}

ProbVector ProbVector::nonnegative(std::vector<double> values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!(values[i] >= 0.0)) throw DomainError("probability vector: negative entry", i);
  }
  return ProbVector(std::move(values), false);
}

ProbVector ProbVector::uniform(std::size_t experts) {
  return ProbVector(std::vector<double>(experts, 1.0 / static_cast<double>(experts)), true);
}

// ---------------------------------------------------------------------------
// Potentials

namespace {

double sgn(double x) { return (x > 0) - (x < 0); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_scalar(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double log_cosh_scalar(double x) {
  const double a = std::abs(x);
  return a + std::log1p(std::exp(-2.0 * a)) - std::log(2.0);
}

void require_nonnegative(const PotentialSpec& spec, std::span<const double> m) {
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!(m[i] >= 0.0)) {
      throw DomainError(std::string(family_name(spec.family())) + ": negative entry " + format_double(m[i]), i);
    }
  }
}

void require_positive(const PotentialSpec& spec, std::span<const double> m) {
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!(m[i] > 0.0)) {
      throw DomainError(std::string(family_name(spec.family())) + ": link needs a positive entry, got " +
                            format_double(m[i]),
                        i);
    }
  }
}

std::size_t first_argmax_abs(std::span<const double> m) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < m.size(); ++i) {
    if (std::abs(m[i]) > std::abs(m[best])) best = i;
  }
  return best;
}

// Sums per-entry terms in ascending order, so permuting m permutes nothing
// in the result.
template <class F>
double sorted_sum(std::span<const double> m, F term) {
  std::vector<double> t(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) t[i] = term(m[i]);
  std::sort(t.begin(), t.end());
  double s = 0.0;
  for (double v : t) s += v;
  return s;
}

double power_sum(std::span<const double> m, double alpha) {
  return sorted_sum(m, [alpha](double v) { return std::pow(v, alpha); });
}

// Tsallis coordinate: ψ(m) = (m^α - m)/(α-1), ψ'(m) = (α m^{α-1} - 1)/(α-1).
double tsallis_psi(double m, double alpha) { return (std::pow(m, alpha) - m) / (alpha - 1.0); }
double tsallis_dpsi(double m, double alpha) { return (alpha * std::pow(m, alpha - 1.0) - 1.0) / (alpha - 1.0); }

constexpr double kBracketLo = 1e-12;
constexpr double kBracketHi = 1e3;
constexpr int kMaxBisection = 200;

// Solves ψ'(m) = q over [kBracketLo, kBracketHi] by bisection in log m; the
// result is clamped to the bracket.
double tsallis_solve(double q, double alpha) {
  double lo = std::log(kBracketLo), hi = std::log(kBracketHi);
  if (q <= tsallis_dpsi(kBracketLo, alpha)) return kBracketLo;
  if (q >= tsallis_dpsi(kBracketHi, alpha)) return kBracketHi;
  for (int it = 0; it < kMaxBisection; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (tsallis_dpsi(std::exp(mid), alpha) < q) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return std::exp(0.5 * (lo + hi));
}

// Interior of the Tsallis conjugate domain: the range of ψ' over m > 0.
bool tsallis_q_interior(double q, double alpha) {
  return alpha > 1.0 ? q > -1.0 / (alpha - 1.0) : q < 1.0 / (1.0 - alpha);
}

// Rényi maximizer of ⟨m,q⟩ - φ(m) for q < 0: the first-order conditions fix
// the direction r_e ∝ (-q_e)^{1/(α-1)}; the total mass λ solves the monotone
// scalar equation h'(λ) = ⟨r,q⟩ + α/((1-α)λ) = 0, found by bisection on log λ.
std::vector<double> renyi_maximizer(std::span<const double> q, double alpha) {
  std::vector<double> r(q.size());
  for (std::size_t i = 0; i < q.size(); ++i) r[i] = std::pow(-q[i], 1.0 / (alpha - 1.0));
  const double total = std::accumulate(r.begin(), r.end(), 0.0);
  double c = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    r[i] /= total;
    c += r[i] * q[i];
  }
  auto dh = [&](double log_lambda) { return c + alpha / ((1.0 - alpha) * std::exp(log_lambda)); };
  double lo = std::log(1e-12), hi = std::log(1e12);
  while (dh(lo) < 0.0 && lo > -700.0) lo -= 20.0;
  while (dh(hi) > 0.0 && hi < 700.0) hi += 20.0;
  for (int it = 0; it < kMaxBisection; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (dh(mid) > 0.0) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  const double lambda = std::exp(0.5 * (lo + hi));
  for (double& v : r) v *= lambda;
  return r;
}

}  // namespace

double value(const PotentialSpec& spec, std::span<const double> m) {
  const double a = spec.param();
  switch (spec.family()) {
    case Family::Euclidean:
      return 0.5 * sorted_sum(m, [](double v) { return v * v; });
    case Family::LpNorm:
      if (spec.is_max_norm()) return m.empty() ? 0.0 : std::abs(m[first_argmax_abs(m)]);
      return sorted_sum(m, [a](double v) { return std::pow(std::abs(v), a); }) / a;
    case Family::SoftL1:
      return sorted_sum(m, [a](double v) { return std::abs(v) - a * std::log1p(std::abs(v) / a); });
    case Family::NegShannon:
      require_nonnegative(spec, m);
      return sorted_sum(m, [](double v) { return v > 0.0 ? v * std::log(v) : 0.0; });
    case Family::NegTsallis:
      require_nonnegative(spec, m);
      return sorted_sum(m, [a](double v) { return tsallis_psi(v, a); });
    case Family::NegRenyi: {
      require_nonnegative(spec, m);
      const double ps = power_sum(m, a);
      if (!(ps > 0.0)) throw DomainError("renyi: value undefined at the zero vector");
      return std::log(ps) / (a - 1.0);
    }
    case Family::PseudoHuber:
      return sorted_sum(m, [a](double v) { return std::hypot(v, a) - a; });
    case Family::LogCosh:
      return sorted_sum(m, [a](double v) { return log_cosh_scalar(a * v) / a; });
    case Family::Softplus:
      return sorted_sum(m, [](double v) { return softplus_scalar(v); });
  }
  return 0.0;
}

std::vector<double> link(const PotentialSpec& spec, std::span<const double> m) {
  const double a = spec.param();
  std::vector<double> q(m.size(), 0.0);
  switch (spec.family()) {
    case Family::Euclidean:
      q.assign(m.begin(), m.end());
      break;
    case Family::LpNorm:
      if (spec.is_max_norm()) {
        if (!m.empty()) {
          const std::size_t i = first_argmax_abs(m);
          q[i] = m[i] < 0.0 ? -1.0 : 1.0;
        }
        break;
      }
      for (std::size_t i = 0; i < m.size(); ++i) q[i] = sgn(m[i]) * std::pow(std::abs(m[i]), a - 1.0);
      break;
    case Family::SoftL1:
      for (std::size_t i = 0; i < m.size(); ++i) q[i] = m[i] / (std::abs(m[i]) + a);
      break;
    case Family::NegShannon:
      require_positive(spec, m);
      for (std::size_t i = 0; i < m.size(); ++i) q[i] = std::log(m[i]) + 1.0;
      break;
    case Family::NegTsallis:
      require_positive(spec, m);
      for (std::size_t i = 0; i < m.size(); ++i) q[i] = tsallis_dpsi(m[i], a);
      break;
    case Family::NegRenyi: {
      require_positive(spec, m);
      const double ps = power_sum(m, a);
      for (std::size_t i = 0; i < m.size(); ++i) q[i] = a * std::pow(m[i], a - 1.0) / ((a - 1.0) * ps);
      break;
    }
    case Family::PseudoHuber:
      for (std::size_t i = 0; i < m.size(); ++i) q[i] = m[i] / std::hypot(m[i], a);
      break;
    case Family::LogCosh:
      for (std::size_t i = 0; i < m.size(); ++i) q[i] = std::tanh(a * m[i]);
      break;
    case Family::Softplus:
      for (std::size_t i = 0; i < m.size(); ++i) q[i] = sigmoid(m[i]);
      break;
  }
  return q;
}

double conjugate_value(const PotentialSpec& spec, std::span<const double> q) {
  const double a = spec.param();
  double s = 0.0;
  switch (spec.family()) {
    case Family::Euclidean:
      for (double v : q) s += v * v;
      return 0.5 * s;
    case Family::LpNorm: {
      if (spec.is_max_norm()) {
        // Conjugate of the max-norm: indicator of the unit ℓ1 ball.
        for (double v : q) s += std::abs(v);
        return s <= 1.0 + 1e-12 ? 0.0 : kInfinity;
      }
      const double r = a / (a - 1.0);
      for (double v : q) s += std::pow(std::abs(v), r);
      return s / r;
    }
    case Family::SoftL1:
      for (double v : q) {
        if (!(std::abs(v) < 1.0)) return kInfinity;
        s += -a * (std::abs(v) + std::log1p(-std::abs(v)));
      }
      return s;
    case Family::NegShannon:
      for (double v : q) s += std::exp(v - 1.0);
      return s;
    case Family::NegTsallis:
      for (double v : q) {
        if (a < 1.0 && !tsallis_q_interior(v, a)) return kInfinity;
        const double m = tsallis_solve(v, a);
        s += m * v - tsallis_psi(m, a);
      }
      return s;
    case Family::NegRenyi: {
      for (double v : q) {
        if (!(v < 0.0)) return kInfinity;
      }
      const std::vector<double> m = renyi_maximizer(q, a);
      double inner = 0.0;
      for (std::size_t i = 0; i < q.size(); ++i) inner += m[i] * q[i];
      return inner - value(spec, m);
    }
    case Family::PseudoHuber:
      for (double v : q) {
        if (!(std::abs(v) <= 1.0)) return kInfinity;
        s += a - a * std::sqrt(1.0 - v * v);
      }
      return s;
    case Family::LogCosh:
      for (double v : q) {
        const double av = std::abs(v);
        if (!(av <= 1.0)) return kInfinity;
        // At |q| = 1 the closed form has the finite limit log(2)/β.
        if (av == 1.0) {
          s += std::log(2.0) / a;
          continue;
        }
        s += ((1.0 + v) * std::log1p(v) + (1.0 - v) * std::log1p(-v)) / (2.0 * a);
      }
      return s;
    case Family::Softplus:
      for (double v : q) {
        if (!(v >= 0.0 && v <= 1.0)) return kInfinity;
        if (v > 0.0) s += v * std::log(v);
        if (v < 1.0) s += (1.0 - v) * std::log1p(-v);
      }
      return s;
  }
  return s;
}

std::vector<double> inverse_link(const PotentialSpec& spec, std::span<const double> q) {
  const double a = spec.param();
  const std::string name(family_name(spec.family()));
  std::vector<double> m(q.size(), 0.0);
  auto outside = [&](std::size_t i) {
    return DomainError(name + ": q=" + format_double(q[i]) + " outside the conjugate interior", i);
  };
  switch (spec.family()) {
    case Family::Euclidean:
      m.assign(q.begin(), q.end());
      break;
    case Family::LpNorm:
      if (spec.is_max_norm()) throw DomainError("lp:p=inf: the max-norm link is not invertible");
      for (std::size_t i = 0; i < q.size(); ++i) m[i] = sgn(q[i]) * std::pow(std::abs(q[i]), 1.0 / (a - 1.0));
      break;
    case Family::SoftL1:
      for (std::size_t i = 0; i < q.size(); ++i) {
        if (!(std::abs(q[i]) < 1.0)) throw outside(i);
        m[i] = a * q[i] / (1.0 - std::abs(q[i]));
      }
      break;
    case Family::NegShannon:
      for (std::size_t i = 0; i < q.size(); ++i) m[i] = std::exp(q[i] - 1.0);
      break;
    case Family::NegTsallis:
      for (std::size_t i = 0; i < q.size(); ++i) {
        if (!tsallis_q_interior(q[i], a) || q[i] > tsallis_dpsi(kBracketHi, a)) throw outside(i);
        m[i] = tsallis_solve(q[i], a);
      }
      break;
    case Family::NegRenyi:
      for (std::size_t i = 0; i < q.size(); ++i) {
        if (!(q[i] < 0.0)) throw outside(i);
      }
      m = renyi_maximizer(q, a);
      break;
    case Family::PseudoHuber:
      for (std::size_t i = 0; i < q.size(); ++i) {
        if (!(std::abs(q[i]) < 1.0)) throw outside(i);
        m[i] = a * q[i] / std::sqrt(1.0 - q[i] * q[i]);
      }
      break;
    case Family::LogCosh:
      for (std::size_t i = 0; i < q.size(); ++i) {
        if (!(std::abs(q[i]) < 1.0)) throw outside(i);
        m[i] = std::atanh(q[i]) / a;
      }
      break;
    case Family::Softplus:
      for (std::size_t i = 0; i < q.size(); ++i) {
        if (!(q[i] > 0.0 && q[i] < 1.0)) throw outside(i);
        m[i] = std::log(q[i]) - std::log1p(-q[i]);
      }
      break;
  }
  return m;
}

std::vector<double> aux_weight(const PotentialSpec& spec, std::span<const double> m) {
  const double a = spec.param();
  std::vector<double> w(m.size(), 0.0);
  switch (spec.family()) {
    case Family::Euclidean:
      // Σ p · m
      for (std::size_t i = 0; i < m.size(); ++i) w[i] = m[i];
      break;
    case Family::LpNorm:
      // Σ p · sgn(m)|m|^{p-1}
      if (spec.is_max_norm()) {
        if (!m.empty()) {
          const std::size_t i = first_argmax_abs(m);
          w[i] = m[i] < 0.0 ? -1.0 : 1.0;
        }
        break;
      }
      for (std::size_t i = 0; i < m.size(); ++i) w[i] = sgn(m[i]) * std::pow(std::abs(m[i]), a - 1.0);
      break;
    case Family::SoftL1:
      // Σ p · m(|m|+δ)^{-1}
      for (std::size_t i = 0; i < m.size(); ++i) w[i] = m[i] * std::pow(std::abs(m[i]) + a, -1.0);
      break;
    case Family::NegShannon:
      // Σ p · (log m + 1)
      require_positive(spec, m);
      for (std::size_t i = 0; i < m.size(); ++i) w[i] = std::log(m[i]) + 1.0;
      break;
    case Family::NegTsallis:
      // Σ p · (α m^{α-1} - 1)(α-1)^{-1}
      require_positive(spec, m);
      for (std::size_t i = 0; i < m.size(); ++i) w[i] = (a * std::pow(m[i], a - 1.0) - 1.0) * std::pow(a - 1.0, -1.0);
      break;
    case Family::NegRenyi: {
      // Σ p · (α m^{α-1})((α-1) Σ_j m_j^α)^{-1}
      require_positive(spec, m);
      double ps = 0.0;
      for (double v : m) ps += std::pow(v, a);
      for (std::size_t i = 0; i < m.size(); ++i) w[i] = (a * std::pow(m[i], a - 1.0)) * std::pow((a - 1.0) * ps, -1.0);
      break;
    }
    case Family::PseudoHuber:
      // Σ p · m(m²+δ²)^{-1/2}
      for (std::size_t i = 0; i < m.size(); ++i) w[i] = m[i] * std::pow(m[i] * m[i] + a * a, -0.5);
      break;
    case Family::LogCosh:
      // Σ p · tanh(βm)
      for (std::size_t i = 0; i < m.size(); ++i) w[i] = std::tanh(a * m[i]);
      break;
    case Family::Softplus:
      // Σ p · (exp(-m)+1)^{-1}
      for (std::size_t i = 0; i < m.size(); ++i) w[i] = std::pow(std::exp(-m[i]) + 1.0, -1.0);
      break;
  }
  return w;
}

std::vector<double> clamp_for_link(const PotentialSpec& spec, std::span<const double> m, double eps) {
  std::vector<double> out(m.begin(), m.end());
  if (spec.is_entropic()) {
    for (double& v : out) v = std::max(v, eps);
  }
  return out;
}

}  // namespace phibal
