// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include <json.hpp>

#include "phibal/tensor.hpp"

namespace phibal {

struct Sgd {
  double lr = 0.1;
};

struct AdamW {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::uint64_t warmup_steps = 0;
  /// Cosine decay to zero over `total_steps` after warmup; 0 keeps lr constant.
  std::uint64_t cosine_total_steps = 0;
};

using OptimizerConfig = std::variant<Sgd, AdamW>;

void validate(const OptimizerConfig& config);

/// Learning rate for 1-based step t: linear warmup t/warmup, then constant or
/// cosine-decayed. SGD always uses its base lr.
double scheduled_lr(const OptimizerConfig& config, std::uint64_t t);

class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config);

  const OptimizerConfig& config() const noexcept { return config_; }
  std::uint64_t steps() const noexcept { return t_; }

  /// In-place update; `grads[i]` must match `params[i]` in shape. Moment
  /// buffers are created on the first call.
  void step(std::span<Tensor* const> params, std::span<const Tensor> grads);

  nlohmann::json to_json() const;
  void load_json(const nlohmann::json& j);

 private:
  OptimizerConfig config_;
  std::uint64_t t_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

}  // namespace phibal
