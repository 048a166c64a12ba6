// SPDX-License-Identifier: Apache-2.0
//
// Toy sparse MoE layer: softmax router, top-k selection, SwiGLU experts.
//
//   p_i      = softmax(W_r x_i)                         pre-top-k probabilities
//   S_i      = top-k of (W_r x_i + b)                   b: loss-free bias, selection only
//   R_i,e    = softmax over S_i of unbiased logits      (k ≥ 2)
//            = p_i,e                                    (k = 1)
//   FFN_e(u) = W2_e (silu(a) ⊙ v),  [a; v] = W1_e u     W1_e has 2·d_ffn rows
//   y_i      = Σ_{e ∈ S_i} R_i,e FFN_e(x_i)
//
// Ties in top-k break toward the lower expert index.

#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "phibal/autodiff.hpp"
#include "phibal/tensor.hpp"

namespace phibal {

struct ExpertParams {
  Tensor w1;  // (2·d_ffn) × d: gate rows first, value rows second
  Tensor w2;  // d × d_ffn
};

struct MoeLayerParams {
  Tensor router;  // E × d
  std::vector<ExpertParams> experts;
  std::size_t top_k = 1;

  /// Zero-mean Gaussian init: router std 1/√d, experts std 1/√fan_in.
  static MoeLayerParams init(std::size_t experts, std::size_t top_k, std::size_t d, std::size_t d_ffn,
                             std::mt19937_64& rng);

  std::size_t num_experts() const noexcept { return experts.size(); }
  std::size_t dim() const { return router.cols(); }
  std::size_t ffn_dim() const { return experts.empty() ? 0 : experts.front().w2.cols(); }

  /// Throws ConfigError / ShapeError on inconsistent dimensions or k ∉ [1, E].
  void validate() const;
};

using Selections = std::vector<std::vector<std::size_t>>;

struct RoutingBatch {
  Tensor probs;                              // T × E pre-top-k softmax
  Selections selections;                     // per token, best first
  std::vector<std::vector<double>> weights;  // aligned with selections
  std::vector<double> p_bar;                 // column mean of probs
  std::vector<double> f;                     // selection counts / (k·T)

  std::size_t tokens() const noexcept { return selections.size(); }
  /// Token counts per expert.
  std::vector<double> loads(std::size_t experts) const;
  /// Selection counts / T (frequency-EMA normalization).
  std::vector<double> frequency_per_token(std::size_t experts) const;
};

/// Indices of the k largest entries of scores (+ bias when non-empty),
/// largest first, ties toward lower index.
std::vector<std::size_t> select_top_k(std::span<const double> scores, std::span<const double> bias, std::size_t k);

// ---------------------------------------------------------------------------
// Differentiable path

struct LayerVars {
  ad::Var router;
  std::vector<ad::Var> w1;
  std::vector<ad::Var> w2;
  std::size_t top_k = 1;
};

LayerVars bind(ad::Tape& tape, const MoeLayerParams& params, bool requires_grad = true);

struct RouterOutput {
  ad::Var logits;   // T × E, unbiased
  ad::Var probs;    // T × E
  ad::Var p_bar;    // E
  ad::Var weights;  // T × E, zero off the selected set
  RoutingBatch batch;
};

/// Routes the rows of x. With `forced`, the given selections replace the
/// top-k search (used to differentiate a fixed routing pattern).
RouterOutput route(const LayerVars& layer, ad::Var x, std::span<const double> bias = {},
                   const Selections* forced = nullptr);

/// FFN_e applied to each row of u (n × d).
ad::Var expert_forward(ad::Var w1, ad::Var w2, ad::Var u);

/// Router-weighted sum over the selected experts; non-selected experts are not
/// evaluated. Contributions are accumulated in ascending expert order.
ad::Var moe_forward(const LayerVars& layer, ad::Var x, const RouterOutput& routing);

// ---------------------------------------------------------------------------
// Value-only conveniences

RoutingBatch route(const MoeLayerParams& params, const Tensor& x, std::span<const double> bias = {});
Tensor expert_forward(const MoeLayerParams& params, std::size_t expert, const Tensor& u);
/// Uses the routing weights stored in `routing` as constants.
Tensor moe_forward(const MoeLayerParams& params, const Tensor& x, const RoutingBatch& routing);

}  // namespace phibal
