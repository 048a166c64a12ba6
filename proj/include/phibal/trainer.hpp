// SPDX-License-Identifier: Apache-2.0
//
// End-to-end training of the toy model
//
//   h_0 = x,   h_{l+1} = h_l + MoE_l(h_l),   logits = h_L W_hᵀ
//
// with one balancer state per MoE layer. Each step:
//   sample batch → forward (p̄ per layer) → EMA update per layer →
//   aux loss per layer → task + α·E·Σ aux → backward → optimizer step
// and, for loss-free balancing, a bias update from the realized frequencies.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "phibal/autodiff.hpp"
#include "phibal/balancer.hpp"
#include "phibal/corpus.hpp"
#include "phibal/error.hpp"
#include "phibal/metrics.hpp"
#include "phibal/moe_layer.hpp"
#include "phibal/optimizer.hpp"
#include "phibal/potentials.hpp"

namespace phibal {

/// None trains without any balancing term but still tracks m.
enum class MechanismKind { Phi, StMoe, LossFree, None };

std::string_view mechanism_kind_name(MechanismKind kind) noexcept;
MechanismKind parse_mechanism_kind(std::string_view text);

struct ModelConfig {
  std::size_t layers = 2;  // 0 gives a dense linear classifier
  std::size_t experts = 8;
  std::size_t top_k = 2;
  std::size_t dim = 16;
  std::size_t ffn_dim = 32;
};

struct BalanceConfig {
  MechanismKind mechanism = MechanismKind::Phi;
  PotentialSpec phi = PotentialSpec::neg_shannon();
  double eta = 0.7;
  double alpha = 0.01;
  Statistic statistic = Statistic::ProbabilityEma;
  double bias_step = 1e-3;
};

enum class DriftKind { Constant, Alternating, Linear };

std::string_view drift_kind_name(DriftKind kind) noexcept;
DriftKind parse_drift_kind(std::string_view text);

struct CorpusConfig {
  std::vector<double> mixture{0.4, 0.3, 0.2, 0.1};
  double center_std = 0.75;
  double cluster_scale = 1.0;
  LabelRule label_rule = LabelRule::DomainId;
  DriftKind drift = DriftKind::Constant;
  std::vector<double> drift_to;  // Linear only
  std::uint64_t drift_steps = 1000;
};

struct TrainConfig {
  ModelConfig model;
  BalanceConfig balance;
  OptimizerConfig optimizer = AdamW{3e-3, 0.9, 0.999, 1e-8, 0.01, 100, 0};
  CorpusConfig corpus;
  std::size_t batch = 64;
  std::uint64_t steps = 2000;
  std::uint64_t eval_every = 100;
  std::uint64_t seed = 0;
  std::size_t load_window = 200;
  std::size_t validation_tokens = 1024;
  /// Reject non-finite values inside every primitive (slower).
  bool checked = false;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  CorpusSpec corpus_spec() const;
  BalancerState make_balancer() const;

  nlohmann::json to_json() const;
  /// 16 hex digits of FNV-1a over the canonical JSON.
  std::string hash() const;
};

struct ModelParams {
  std::vector<MoeLayerParams> layers;
  Tensor head;  // classes × d

  static ModelParams init(const TrainConfig& config);

  /// Every trainable tensor in a fixed order: per layer the router then each
  /// expert's W1, W2; the head last.
  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
};

struct ForwardPass {
  std::vector<LayerVars> layers;
  ad::Var head;
  std::vector<RouterOutput> routing;
  ad::Var output;  // T × classes
  ad::Var task_loss;

  /// Leaf handles in ModelParams::tensors() order.
  std::vector<ad::Var> leaves() const;
};

/// Builds the forward graph on `tape`. `biases` holds one selection bias per
/// layer (empty spans allowed); `forced` fixes the selections per layer.
ForwardPass forward(ad::Tape& tape, const ModelParams& params, const Batch& batch, LabelRule rule,
                    std::span<const std::vector<double>> biases = {}, const std::vector<Selections>* forced = nullptr,
                    bool requires_grad = true);

/// Cross-entropy for DomainId, 0.5·mean squared error for LinearTeacher.
ad::Var task_loss(ad::Var output, const Batch& batch, LabelRule rule);

struct RunRow {
  std::uint64_t step = 0;
  std::size_t layer = 0;
  double task_loss = 0.0;
  double accuracy = 0.0;  // NaN for regression targets
  double max_vio = 0.0;
  double gini = 0.0;
  std::string m_hash;

  friend bool operator==(const RunRow&, const RunRow&) = default;
};

struct RunRecord {
  std::vector<RunRow> rows;

  /// Mean over layers of the last logged step's max_vio / gini.
  double terminal_max_vio() const;
  double terminal_gini() const;
  double terminal_task_loss() const;
  double terminal_accuracy() const;
  std::string hash() const;

  friend bool operator==(const RunRecord&, const RunRecord&) = default;
};

nlohmann::json to_json(const RunRow& row);
RunRow run_row_from_json(const nlohmann::json& j);

/// FNV-1a over the exact bytes of a double vector, 16 hex digits.
std::string hash_doubles(std::span<const double> values);

class TrainingDiverged : public NumericalError {
 public:
  TrainingDiverged(std::uint64_t step, nlohmann::json snapshot);
  std::uint64_t step() const noexcept { return step_; }
  const nlohmann::json& snapshot() const noexcept { return snapshot_; }

 private:
  std::uint64_t step_;
  nlohmann::json snapshot_;
};

struct Evaluation {
  double task_loss = 0.0;
  double accuracy = 0.0;
  std::vector<RoutingBatch> routing;
};

class Trainer {
 public:
  explicit Trainer(TrainConfig config);

  const TrainConfig& config() const noexcept { return config_; }
  const ModelParams& params() const noexcept { return params_; }
  const std::vector<BalancerState>& balancers() const noexcept { return balancers_; }
  const std::vector<LoadWindow>& windows() const noexcept { return windows_; }
  const RunRecord& record() const noexcept { return record_; }
  std::uint64_t steps_done() const noexcept { return step_; }

  /// One training iteration; logs rows on evaluation steps. Returns the
  /// training-batch task loss. Throws TrainingDiverged on a non-finite loss.
  double step();

  /// Steps until config().steps and returns the record.
  const RunRecord& run();

  Evaluation evaluate() const;

  nlohmann::json snapshot() const;
  /// Restores a snapshot taken from a trainer with the same config.
  static Trainer resume(TrainConfig config, const nlohmann::json& snapshot);

 private:
  void log_rows();

  TrainConfig config_;
  CorpusSpec corpus_;
  Batch validation_;
  ModelParams params_;
  Optimizer optimizer_;
  std::vector<BalancerState> balancers_;
  std::vector<LoadWindow> windows_;
  RunRecord record_;
  std::uint64_t step_ = 0;
};

RunRecord train(const TrainConfig& config);

struct TokenBudget {
  double params = 0.0;  // M_opt
  double tokens = 0.0;  // D_opt
  double tokens_per_param = 0.0;
};

/// M = 0.1915·C^0.5095, D = 5.2232·C^0.4905.
TokenBudget compute_token_budget(double compute);

}  // namespace phibal
