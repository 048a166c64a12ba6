// SPDX-License-Identifier: Apache-2.0
#include "phibal/checks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <memory>
#include <random>
#include <sstream>

#include "phibal/balancer.hpp"
#include "phibal/corpus.hpp"
#include "phibal/potentials.hpp"
#include "phibal/trainer.hpp"

namespace phibal {

namespace {

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::vector<double> random_simplex(std::size_t n, std::mt19937_64& rng) {
  std::exponential_distribution<double> expo(1.0);
  std::vector<double> p(n);
  double total = 0.0;
  for (double& v : p) total += (v = expo(rng));
  for (double& v : p) v /= total;
  return p;
}

double inf_distance(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

bool numeric_conjugate(const PotentialSpec& phi) { return !phi.has_closed_form_conjugate(); }

TrainConfig tiny_config(std::uint64_t seed) {
  TrainConfig c;
  c.model = {2, 4, 2, 4, 3};
  c.corpus.mixture = {0.5, 0.3, 0.2};
  c.corpus.center_std = 1.0;
  c.batch = 8;
  c.steps = 1;
  c.eval_every = 1;
  c.seed = seed;
  return c;
}

struct Instance {
  TrainConfig config;
  ModelParams params;
  Batch batch;
  std::vector<Selections> forced;
  std::vector<std::vector<double>> p_bar;
  std::vector<std::vector<double>> f;
};

Instance make_instance(std::uint64_t seed) {
  Instance in;
  in.config = tiny_config(seed);
  in.params = ModelParams::init(in.config);
  in.batch = sample_batch(in.config.corpus_spec(), in.config.batch, seed);
  ad::Tape tape;
  ForwardPass fp = forward(tape, in.params, in.batch, in.config.corpus.label_rule, {}, nullptr, false);
  for (const auto& r : fp.routing) {
    in.forced.push_back(r.batch.selections);
    in.p_bar.push_back(r.batch.p_bar);
    in.f.push_back(r.batch.f);
  }
  return in;
}

using LossBuilder = std::function<ad::Var(ad::Tape&, const ForwardPass&)>;

double loss_value(const Instance& in, const ModelParams& params, const LossBuilder& build) {
  ad::Tape tape;
  ForwardPass fp = forward(tape, params, in.batch, in.config.corpus.label_rule, {}, &in.forced, false);
  return build(tape, fp).value().item();
}

/// Worst relative error over every parameter coordinate.
double finite_difference_error(const Instance& in, const LossBuilder& build, std::size_t& coords) {
  ad::Tape tape;
  ForwardPass fp = forward(tape, in.params, in.batch, in.config.corpus.label_rule, {}, &in.forced, true);
  const ad::Gradients grads = tape.backward(build(tape, fp));
  const auto leaves = fp.leaves();

  ModelParams probe = in.params;
  auto tensors = probe.tensors();
  constexpr double h = 1e-4;
  double worst = 0.0;
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    const Tensor analytic = grads.contains(leaves[t]) ? grads[leaves[t]] : Tensor::zeros(tensors[t]->shape());
    for (std::size_t j = 0; j < tensors[t]->size(); ++j) {
      const double orig = (*tensors[t])[j];
      auto at = [&](double offset) {
        (*tensors[t])[j] = orig + offset;
        return loss_value(in, probe, build);
      };
      // Fourth-order central stencil.
      const double numeric = (-at(2 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2 * h)) / (12.0 * h);
      (*tensors[t])[j] = orig;
      worst = std::max(worst, relative_error(analytic[j], numeric));
      ++coords;
    }
  }
  return worst;
}

std::vector<BalancerState> primed_balancers(const Instance& in, const PotentialSpec& phi, std::mt19937_64& rng) {
  std::vector<BalancerState> out;
  for (std::size_t l = 0; l < in.forced.size(); ++l) {
    BalancerState s(in.config.model.experts, 0.7, in.config.balance.alpha, Statistic::ProbabilityEma,
                    PhiBalancing{phi});
    s.ema_update(random_simplex(in.config.model.experts, rng));
    s.ema_update(in.p_bar[l]);
    out.push_back(std::move(s));
  }
  return out;
}

/// φ-balancing state whose tracker currently holds `m`.
BalancerState tracker_at(const PotentialSpec& phi, const std::vector<double>& m, double eta, double alpha) {
  auto j = BalancerState(m.size(), eta, alpha, Statistic::ProbabilityEma, PhiBalancing{phi}).to_json();
  j["m"] = m;
  return BalancerState::from_json(j);
}

}  // namespace

CheckTolerances CheckTolerances::uniform(double tol) {
  return {tol, tol, tol, tol, tol, tol};
}

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

CheckResult uniform_minimizer_suite(std::uint64_t seed) {
  const auto start = Clock::now();
  CheckResult r;
  r.name = "uniform minimizer";
  std::mt19937_64 rng(seed);
  std::size_t violations = 0;
  std::ostringstream detail;
  for (const auto& phi : default_catalog()) {
    for (std::size_t experts : {2u, 4u, 8u}) {
      const ProbVector u = ProbVector::uniform(experts);
      const double at_u = value(phi, u.values());
      for (int i = 0; i < 200; ++i) {
        const auto p = random_simplex(experts, rng);
        const double at_p = value(phi, p);
        const bool strict = inf_distance(p, u.values()) > 1e-6;
        const bool bad = strict ? !(at_u < at_p) : !(at_u <= at_p);
        ++r.cases;
        if (bad) {
          if (violations < 5) detail << phi.to_string() << " E=" << experts << " φ(u)=" << at_u << " φ(p)=" << at_p << "; ";
          ++violations;
        }
      }
    }
  }
  r.worst = static_cast<double>(violations);
  r.passed = violations == 0;
  r.seconds = seconds_since(start);
  r.detail = violations == 0 ? "no violations" : detail.str();
  return r;
}

CheckResult duality_suite(const CheckTolerances& tol, std::uint64_t seed) {
  const auto start = Clock::now();
  CheckResult r;
  r.name = "duality";
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> interior(0.02, 1.0);
  double worst_ratio = 0.0;
  std::ostringstream detail;
  bool ok = true;
  for (const auto& phi : default_catalog()) {
    const bool numeric = numeric_conjugate(phi);
    const double t_inv = numeric ? tol.duality_numeric : tol.duality_closed;
    const double t_fy = numeric ? tol.fenchel_young_numeric : tol.fenchel_young_closed;
    double worst_inv = 0.0, worst_fy = 0.0;
    for (int i = 0; i < 50; ++i) {
      std::vector<double> m(4);
      for (double& v : m) v = interior(rng);
      const auto q = link(phi, m);
      const auto back = inverse_link(phi, q);
      worst_inv = std::max(worst_inv, inf_distance(back, m));
      double inner = 0.0;
      for (std::size_t e = 0; e < m.size(); ++e) inner += m[e] * q[e];
      worst_fy = std::max(worst_fy, std::abs(value(phi, m) + conjugate_value(phi, q) - inner));
      ++r.cases;
    }
    worst_ratio = std::max({worst_ratio, worst_inv / t_inv, worst_fy / t_fy});
    if (worst_inv > t_inv || worst_fy > t_fy || !std::isfinite(worst_inv) || !std::isfinite(worst_fy)) {
      ok = false;
      detail << phi.to_string() << ": inverse " << worst_inv << " (tol " << t_inv << "), Fenchel-Young " << worst_fy
             << " (tol " << t_fy << "); ";
    }
  }
  r.passed = ok;
  r.worst = worst_ratio;
  r.tolerance = 1.0;
  r.seconds = seconds_since(start);
  r.detail = ok ? "worst error / tolerance = " + sci(worst_ratio) : detail.str();
  return r;
}

CheckResult mirror_step_suite(const CheckTolerances& tol, std::uint64_t seed) {
  const auto start = Clock::now();
  CheckResult r;
  r.name = "mirror step";
  r.tolerance = tol.mirror_step;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> eta_dist(0.05, 1.0);
  std::uniform_int_distribution<std::size_t> size_dist(2, 8);
  for (const auto& phi : {PotentialSpec::neg_shannon(), PotentialSpec::euclidean()}) {
    for (int i = 0; i < 20; ++i) {
      const std::size_t experts = size_dist(rng);
      const auto m = random_simplex(experts, rng);
      const auto p = random_simplex(experts, rng);
      const double eta = eta_dist(rng);
      const std::vector<double>& m_t = m;
      std::vector<double> m_next(experts);
      for (std::size_t e = 0; e < experts; ++e) m_next[e] = (1.0 - eta) * m_t[e] + eta * p[e];
      const auto closed = link(phi, m_next);
      const auto numeric = mirror_ascent_step_numeric(phi, m_t, p, eta);
      r.worst = std::max(r.worst, inf_distance(closed, numeric));
      ++r.cases;
    }
  }
  r.passed = r.worst <= r.tolerance;
  r.seconds = seconds_since(start);
  r.detail = "max |q_closed - q_numeric| = " + sci(r.worst);
  return r;
}

CheckResult gradient_suite(const CheckTolerances& tol, std::uint64_t seed, std::size_t instances) {
  const auto start = Clock::now();
  CheckResult r;
  r.name = "gradients";
  r.tolerance = tol.gradient;
  std::mt19937_64 rng(seed);
  std::ostringstream detail;

  for (std::size_t n = 0; n < instances; ++n) {
    const Instance in = make_instance(seed * 1000 + n);
    const std::size_t experts = in.config.model.experts;
    std::vector<std::pair<std::string, LossBuilder>> losses;

    losses.emplace_back("task", [](ad::Tape&, const ForwardPass& fp) { return fp.task_loss; });
    losses.emplace_back("st_moe", [&in](ad::Tape&, const ForwardPass& fp) {
      ad::Var total = stmoe_aux_loss(in.f[0], fp.routing[0].p_bar);
      for (std::size_t l = 1; l < fp.routing.size(); ++l) total = ad::add(total, stmoe_aux_loss(in.f[l], fp.routing[l].p_bar));
      return total;
    });
    for (const auto& phi : default_catalog()) {
      auto states = std::make_shared<std::vector<BalancerState>>(primed_balancers(in, phi, rng));
      losses.emplace_back("aux " + phi.to_string(), [states](ad::Tape&, const ForwardPass& fp) {
        ad::Var total = phi_aux_loss((*states)[0], fp.routing[0].p_bar);
        for (std::size_t l = 1; l < fp.routing.size(); ++l) total = ad::add(total, phi_aux_loss((*states)[l], fp.routing[l].p_bar));
        return total;
      });
    }
    auto states = std::make_shared<std::vector<BalancerState>>(primed_balancers(in, PotentialSpec::neg_shannon(), rng));
    losses.emplace_back("total", [states, experts](ad::Tape&, const ForwardPass& fp) {
      std::vector<ad::Var> aux;
      for (std::size_t l = 0; l < fp.routing.size(); ++l) aux.push_back(phi_aux_loss((*states)[l], fp.routing[l].p_bar));
      return total_loss(fp.task_loss, aux, 0.1, experts);
    });

    for (const auto& [name, build] : losses) {
      std::size_t coords = 0;
      const double err = finite_difference_error(in, build, coords);
      r.cases += coords;
      if (err > r.worst) r.worst = err;
      if (err >= r.tolerance) detail << "instance " << n << " " << name << ": " << err << "; ";
    }
  }
  r.passed = r.worst < r.tolerance;
  r.seconds = seconds_since(start);
  r.detail = r.passed ? "max relative error " + sci(r.worst) : detail.str();
  return r;
}

CheckResult stop_gradient_check(std::uint64_t seed) {
  const auto start = Clock::now();
  CheckResult r;
  r.name = "stop gradient";
  std::mt19937_64 rng(seed);
  std::ostringstream detail;
  bool ok = true;
  const double alpha = 0.1;

  auto gradient_vector = [](ad::Tape& tape, ad::Var loss, const ForwardPass& fp) {
    const ad::Gradients g = tape.backward(loss);
    std::vector<double> out;
    for (ad::Var leaf : fp.leaves()) {
      const Tensor t = g.contains(leaf) ? g[leaf] : Tensor::zeros(leaf.shape());
      out.insert(out.end(), t.values().begin(), t.values().end());
    }
    return out;
  };

  for (const auto& phi : default_catalog()) {
    const Instance in = make_instance(seed * 100 + r.cases);
    const std::size_t experts = in.config.model.experts;
    const double eta = 0.7;
    std::vector<std::vector<double>> m_old;
    for (std::size_t l = 0; l < in.forced.size(); ++l) m_old.push_back(random_simplex(experts, rng));

    // Production path: EMA update on the state, then the aux loss.
    std::vector<double> production;
    {
      ad::Tape tape;
      ForwardPass fp = forward(tape, in.params, in.batch, in.config.corpus.label_rule);
      std::vector<ad::Var> aux;
      for (std::size_t l = 0; l < fp.routing.size(); ++l) {
        BalancerState tracker = tracker_at(phi, m_old[l], eta, alpha);
        tracker.ema_update(fp.routing[l].batch.p_bar);
        aux.push_back(phi_aux_loss(tracker, fp.routing[l].p_bar));
      }
      production = gradient_vector(tape, total_loss(fp.task_loss, aux, alpha, experts), fp);
    }

    // Frozen path: m computed outside the tape and priced as a plain constant.
    std::vector<double> frozen;
    {
      ad::Tape tape;
      ForwardPass fp = forward(tape, in.params, in.batch, in.config.corpus.label_rule);
      std::vector<ad::Var> aux;
      for (std::size_t l = 0; l < fp.routing.size(); ++l) {
        const auto& p_bar = fp.routing[l].batch.p_bar;
        std::vector<double> m(experts);
        for (std::size_t e = 0; e < experts; ++e) m[e] = (1.0 - eta) * m_old[l][e] + eta * p_bar[e];
        const ad::Var prices = tape.constant(Tensor::vector(phi_prices(phi, m)));
        aux.push_back(ad::dot(fp.routing[l].p_bar, prices));
      }
      frozen = gradient_vector(tape, total_loss(fp.task_loss, aux, alpha, experts), fp);
    }

    ++r.cases;
    std::size_t mismatches = 0;
    for (std::size_t i = 0; i < production.size(); ++i) mismatches += production[i] != frozen[i];
    if (production.size() != frozen.size() || mismatches != 0) {
      ok = false;
      detail << phi.to_string() << ": " << mismatches << " differing gradient entries; ";
    }
  }

  // On-tape tracker for NegShannon: m is a differentiable function of p̄ and
  // the prices pass through stop_gradient. Without the stop the gradient must
  // change, which shows the comparison can detect leakage.
  {
    const Instance in = make_instance(seed * 100 + 99);
    const std::size_t experts = in.config.model.experts;
    const double eta = 0.7;
    const auto m_old = random_simplex(experts, rng);
    auto run = [&](int mode) {
      ad::Tape tape;
      ForwardPass fp = forward(tape, in.params, in.batch, in.config.corpus.label_rule);
      std::vector<ad::Var> aux;
      for (std::size_t l = 0; l < fp.routing.size(); ++l) {
        ad::Var p_bar = fp.routing[l].p_bar;
        if (mode == 0) {
          BalancerState s = tracker_at(PotentialSpec::neg_shannon(), m_old, eta, alpha);
          s.ema_update(p_bar.value().values());
          aux.push_back(phi_aux_loss(s, p_bar));
          continue;
        }
        ad::Var m = ad::add(ad::scale(tape.constant(Tensor::vector(m_old)), 1.0 - eta), ad::scale(p_bar, eta));
        ad::Var prices = ad::add_scalar(ad::log(m), 1.0);
        if (mode == 1) prices = ad::stop_gradient(prices);
        aux.push_back(ad::dot(p_bar, prices));
      }
      return gradient_vector(tape, total_loss(fp.task_loss, aux, alpha, experts), fp);
    };
    const auto production = run(0);
    const auto stopped = run(1);
    const auto leaking = run(2);
    ++r.cases;
    if (production != stopped) {
      ok = false;
      detail << "on-tape tracker with stop_gradient differs from production; ";
    }
    if (production == leaking) {
      ok = false;
      detail << "removing stop_gradient left the gradient unchanged; ";
    }
  }

  r.passed = ok;
  r.worst = ok ? 0.0 : 1.0;
  r.seconds = seconds_since(start);
  r.detail = ok ? "bitwise equal for all families; leakage control differs" : detail.str();
  return r;
}

std::vector<CheckResult> run_all_checks(const CheckTolerances& tol) {
  return {uniform_minimizer_suite(), duality_suite(tol), mirror_step_suite(tol), gradient_suite(tol),
          stop_gradient_check()};
}

}  // namespace phibal
