// SPDX-License-Identifier: Apache-2.0
#include "phibal/optimizer.hpp"

#include <cmath>
#include <numbers>

#include "phibal/error.hpp"
#include "phibal/serialize.hpp"

namespace phibal {

void validate(const OptimizerConfig& config) {
  if (const auto* s = std::get_if<Sgd>(&config)) {
    if (!(s->lr > 0.0)) throw ConfigError("optimizer: lr must be positive");
    return;
  }
  const auto& a = std::get<AdamW>(config);
  if (!(a.lr > 0.0)) throw ConfigError("optimizer: lr must be positive");
  if (!(a.beta1 >= 0.0 && a.beta1 < 1.0) || !(a.beta2 >= 0.0 && a.beta2 < 1.0)) {
    throw ConfigError("optimizer: betas must lie in [0, 1)");
  }
  if (!(a.eps > 0.0)) throw ConfigError("optimizer: eps must be positive");
  if (!(a.weight_decay >= 0.0)) throw ConfigError("optimizer: weight decay must be nonnegative");
}

double scheduled_lr(const OptimizerConfig& config, std::uint64_t t) {
  if (const auto* s = std::get_if<Sgd>(&config)) return s->lr;
  const auto& a = std::get<AdamW>(config);
  if (a.warmup_steps > 0 && t < a.warmup_steps) {
    return a.lr * static_cast<double>(t) / static_cast<double>(a.warmup_steps);
  }
  if (a.cosine_total_steps > a.warmup_steps) {
    const double span = static_cast<double>(a.cosine_total_steps - a.warmup_steps);
    const double progress = std::min(1.0, static_cast<double>(t - a.warmup_steps) / span);
    return a.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  }
  return a.lr;
}

Optimizer::Optimizer(OptimizerConfig config) : config_(std::move(config)) { validate(config_); }

void Optimizer::step(std::span<Tensor* const> params, std::span<const Tensor> grads) {
  if (params.size() != grads.size()) throw ShapeError("optimizer: parameter and gradient counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape()) {
      throw ShapeError("optimizer: gradient " + std::to_string(i) + " has shape " + shape_string(grads[i].shape()) +
                       ", parameter has " + shape_string(params[i]->shape()));
    }
  }
  ++t_;
  const double lr = scheduled_lr(config_, t_);

  if (std::holds_alternative<Sgd>(config_)) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto p = params[i]->data();
      auto g = grads[i].data();
      for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * g[j];
    }
    return;
  }

  const auto& a = std::get<AdamW>(config_);
  if (m_.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_.push_back(Tensor::zeros(params[i]->shape()));
      v_.push_back(Tensor::zeros(params[i]->shape()));
    }
  }
  if (m_.size() != params.size()) throw ShapeError("optimizer: parameter count changed between steps");
  const double c1 = 1.0 - std::pow(a.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(a.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto g = grads[i].data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = a.beta1 * m[j] + (1.0 - a.beta1) * g[j];
      v[j] = a.beta2 * v[j] + (1.0 - a.beta2) * g[j] * g[j];
      const double m_hat = m[j] / c1;
      const double v_hat = v[j] / c2;
      p[j] -= lr * (m_hat / (std::sqrt(v_hat) + a.eps) + a.weight_decay * p[j]);
    }
  }
}

nlohmann::json Optimizer::to_json() const {
  nlohmann::json j;
  j["t"] = t_;
  j["m"] = nlohmann::json::array();
  j["v"] = nlohmann::json::array();
  for (const auto& m : m_) j["m"].push_back(tensor_to_json(m));
  for (const auto& v : v_) j["v"].push_back(tensor_to_json(v));
  return j;
}

void Optimizer::load_json(const nlohmann::json& j) {
  t_ = j.at("t").get<std::uint64_t>();
  m_.clear();
  v_.clear();
  for (const auto& m : j.at("m")) m_.push_back(tensor_from_json(m));
  for (const auto& v : j.at("v")) v_.push_back(tensor_from_json(v));
}

}  // namespace phibal
