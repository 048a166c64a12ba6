// SPDX-License-Identifier: Apache-2.0
#include "phibal/corpus.hpp"

#include <cmath>
#include <random>
#include <string>

#include "phibal/error.hpp"

namespace phibal {

namespace {

constexpr std::uint64_t kValidationStream = 0x9e3779b97f4a7c15ULL;

void check_simplex(const std::vector<double>& w, std::size_t domains, std::string_view what) {
  if (w.size() != domains) {
    throw ConfigError(std::string(what) + ": expected " + std::to_string(domains) + " weights, got " +
                      std::to_string(w.size()));
  }
  double total = 0.0;
  for (double v : w) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(std::string(what) + ": weights must be nonnegative");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError(std::string(what) + ": weights must sum to 1");
}

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t step, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32),
                    static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(tag >> 32)};
  return std::mt19937_64(seq);
}

Batch draw(const CorpusSpec& spec, std::size_t tokens, const std::vector<double>& mixture, std::mt19937_64 rng) {
  if (tokens == 0) throw ConfigError("sample_batch: need at least one token");
  const std::size_t d = spec.dim(), domains = spec.domains();
  std::discrete_distribution<std::size_t> pick(mixture.begin(), mixture.end());
  std::normal_distribution<double> noise(0.0, 1.0);

  Batch b;
  b.x = Tensor::zeros({tokens, d});
  b.domains.resize(tokens);
  for (std::size_t i = 0; i < tokens; ++i) {
    const std::size_t dom = pick(rng);
    b.domains[i] = dom;
    for (std::size_t j = 0; j < d; ++j) b.x.at(i, j) = spec.centers.at(dom, j) + spec.cluster_scale * noise(rng);
  }
  b.labels = b.domains;
  if (spec.label_rule == LabelRule::LinearTeacher) {
    b.targets = Tensor::zeros({tokens, domains});
    for (std::size_t i = 0; i < tokens; ++i)
      for (std::size_t c = 0; c < domains; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += spec.teacher.at(c, j) * b.x.at(i, j);
        b.targets.at(i, c) = acc;
      }
  }
  return b;
}

}  // namespace

std::string_view label_rule_name(LabelRule rule) noexcept {
  return rule == LabelRule::DomainId ? "domain_id" : "linear_teacher";
}

LabelRule parse_label_rule(std::string_view text) {
  if (text == "domain_id") return LabelRule::DomainId;
  if (text == "linear_teacher") return LabelRule::LinearTeacher;
  throw ConfigError("unknown label rule '" + std::string(text) + "' (expected domain_id or linear_teacher)");
}

CorpusSpec CorpusSpec::gaussian(std::vector<double> mixture, std::size_t dim, double center_std,
                                double cluster_scale, LabelRule rule, std::uint64_t seed) {
  if (dim == 0) throw ConfigError("corpus: dimension must be positive");
  if (!(center_std >= 0.0)) throw ConfigError("corpus: center spread must be nonnegative");
  CorpusSpec spec;
  spec.mixture = std::move(mixture);
  spec.cluster_scale = cluster_scale;
  spec.label_rule = rule;
  spec.seed = seed;
  const std::size_t domains = spec.mixture.size();
  std::mt19937_64 rng = stream(seed, 0, 0);
  std::normal_distribution<double> centers(0.0, 1.0);
  spec.centers = Tensor::zeros({domains, dim});
  for (double& v : spec.centers.data()) v = center_std * centers(rng);
  std::normal_distribution<double> teacher(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
  spec.teacher = Tensor::zeros({domains, dim});
  for (double& v : spec.teacher.data()) v = teacher(rng);
  spec.validate();
  return spec;
}

void CorpusSpec::validate() const {
  if (mixture.size() < 2) throw ConfigError("corpus: need at least 2 domains");
  check_simplex(mixture, mixture.size(), "corpus mixture");
  if (!(cluster_scale >= 0.0) || !std::isfinite(cluster_scale)) {
    throw ConfigError("corpus: cluster scale must be finite and nonnegative");
  }
  if (centers.rank() != 2 || centers.rows() != mixture.size()) throw ShapeError("corpus: centers must be D × d");
  if (label_rule == LabelRule::LinearTeacher && teacher.shape() != centers.shape()) {
    throw ShapeError("corpus: teacher must be D × d");
  }
}

std::vector<double> CorpusSpec::mixture_at(std::uint64_t step) const {
  const std::size_t domains = mixture.size();
  std::vector<double> w = std::visit(
      [&](const auto& s) -> std::vector<double> {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, schedule::Constant>) {
          return mixture;
        } else if constexpr (std::is_same_v<S, schedule::Alternating>) {
          std::vector<double> out(domains, 0.0);
          out[step % domains] = 1.0;
          return out;
        } else if constexpr (std::is_same_v<S, schedule::Linear>) {
          if (s.from.size() != s.to.size()) throw ConfigError("linear schedule: endpoint lengths differ");
          const double t = s.steps == 0 ? 1.0 : std::min(1.0, static_cast<double>(step) / static_cast<double>(s.steps));
          std::vector<double> out(s.from.size());
          for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - t) * s.from[i] + t * s.to[i];
          return out;
        } else {
          if (!s) throw ConfigError("custom schedule is empty");
          return s(step);
        }
      },
      schedule);
  check_simplex(w, domains, "mixture schedule at step " + std::to_string(step));
  return w;
}

Batch sample_batch(const CorpusSpec& spec, std::size_t tokens, std::uint64_t step) {
  return draw(spec, tokens, spec.mixture_at(step), stream(spec.seed, step, 1));
}

Batch sample_validation(const CorpusSpec& spec, std::size_t tokens) {
  return draw(spec, tokens, spec.mixture, stream(spec.seed, 0, kValidationStream));
}

CorpusSpec drift_mixture(CorpusSpec spec, MixtureSchedule schedule) {
  if (const auto* lin = std::get_if<schedule::Linear>(&schedule)) {
    check_simplex(lin->from, spec.domains(), "linear schedule start");
    check_simplex(lin->to, spec.domains(), "linear schedule end");
  }
  spec.schedule = std::move(schedule);
  return spec;
}

}  // namespace phibal
