// SPDX-License-Identifier: Apache-2.0
#include "phibal/moe_layer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "phibal/error.hpp"

namespace phibal {

namespace {

Tensor gaussian(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> data(rows * cols);
  for (double& v : data) v = dist(rng);
  return Tensor::matrix(rows, cols, std::move(data));
}

}  // namespace

MoeLayerParams MoeLayerParams::init(std::size_t experts, std::size_t top_k, std::size_t d, std::size_t d_ffn,
                                    std::mt19937_64& rng) {
  if (experts < 1) throw ConfigError("moe layer: need at least one expert");
  if (top_k < 1 || top_k > experts) throw ConfigError("moe layer: k must lie in [1, E]");
  if (d == 0 || d_ffn == 0) throw ConfigError("moe layer: dimensions must be positive");
  MoeLayerParams p;
  p.top_k = top_k;
  p.router = gaussian(experts, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  p.experts.reserve(experts);
  for (std::size_t e = 0; e < experts; ++e) {
    ExpertParams ex;
    ex.w1 = gaussian(2 * d_ffn, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    ex.w2 = gaussian(d, d_ffn, 1.0 / std::sqrt(static_cast<double>(d_ffn)), rng);
    p.experts.push_back(std::move(ex));
  }
  return p;
}

void MoeLayerParams::validate() const {
  if (router.rank() != 2) throw ShapeError("moe layer: router must be a matrix");
  const std::size_t e = router.rows(), d = router.cols();
  if (experts.size() != e) throw ShapeError("moe layer: router rows differ from expert count");
  if (top_k < 1 || top_k > e) {
    throw ConfigError("moe layer: k=" + std::to_string(top_k) + " outside [1, E=" + std::to_string(e) + "]");
  }
  if (!router.all_finite()) throw NumericalError("moe layer: non-finite router weight");
  for (const auto& ex : experts) {
    if (ex.w1.rank() != 2 || ex.w2.rank() != 2 || ex.w1.cols() != d || ex.w2.rows() != d ||
        ex.w1.rows() != 2 * ex.w2.cols()) {
      throw ShapeError("moe layer: expert weights " + shape_string(ex.w1.shape()) + ", " +
                       shape_string(ex.w2.shape()) + " do not match d=" + std::to_string(d));
    }
    if (!ex.w1.all_finite() || !ex.w2.all_finite()) throw NumericalError("moe layer: non-finite expert weight");
  }
}

std::vector<double> RoutingBatch::loads(std::size_t experts) const {
  std::vector<double> out(experts, 0.0);
  for (const auto& sel : selections)
    for (std::size_t e : sel) out[e] += 1.0;
  return out;
}

std::vector<double> RoutingBatch::frequency_per_token(std::size_t experts) const {
  std::vector<double> out = loads(experts);
  for (double& v : out) v /= static_cast<double>(tokens());
  return out;
}

std::vector<std::size_t> select_top_k(std::span<const double> scores, std::span<const double> bias, std::size_t k) {
  if (k > scores.size()) throw ConfigError("select_top_k: k exceeds the number of experts");
  if (!bias.empty() && bias.size() != scores.size()) throw ShapeError("select_top_k: bias length mismatch");
  std::vector<double> s(scores.begin(), scores.end());
  if (!bias.empty())
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += bias[i];
  std::vector<std::size_t> idx(s.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return s[a] > s[b] || (s[a] == s[b] && a < b); });
  idx.resize(k);
  return idx;
}

LayerVars bind(ad::Tape& tape, const MoeLayerParams& params, bool requires_grad) {
  params.validate();
  LayerVars v;
  v.top_k = params.top_k;
  v.router = tape.leaf(params.router, requires_grad);
  for (const auto& ex : params.experts) {
    v.w1.push_back(tape.leaf(ex.w1, requires_grad));
    v.w2.push_back(tape.leaf(ex.w2, requires_grad));
  }
  return v;
}

RouterOutput route(const LayerVars& layer, ad::Var x, std::span<const double> bias, const Selections* forced) {
  const std::size_t experts = layer.w1.size();
  const std::size_t k = layer.top_k;
  if (k < 1 || k > experts) throw ConfigError("route: k outside [1, E]");
  if (!bias.empty() && bias.size() != experts) throw ShapeError("route: bias length differs from expert count");

  RouterOutput out;
  out.logits = ad::linear(x, layer.router);
  out.probs = ad::softmax_rows(out.logits);
  out.p_bar = ad::mean_rows(out.probs);

  const Tensor& logits = out.logits.value();
  const std::size_t tokens = logits.rows();
  if (forced && forced->size() != tokens) throw ShapeError("route: forced selections cover the wrong token count");

  RoutingBatch& batch = out.batch;
  batch.selections.resize(tokens);
  Tensor mask = Tensor::zeros({tokens, experts});
  for (std::size_t i = 0; i < tokens; ++i) {
    auto row = logits.data().subspan(i * experts, experts);
    batch.selections[i] = forced ? (*forced)[i] : select_top_k(row, bias, k);
    if (batch.selections[i].size() != k) throw ShapeError("route: forced selection has the wrong size");
    for (std::size_t e : batch.selections[i]) mask.at(i, e) = 1.0;
  }

  out.weights = k == 1 ? ad::mul(out.probs, x.tape().constant(mask)) : ad::masked_softmax_rows(out.logits, mask);

  const Tensor& w = out.weights.value();
  batch.weights.resize(tokens);
  std::vector<double> counts(experts, 0.0);
  for (std::size_t i = 0; i < tokens; ++i) {
    for (std::size_t e : batch.selections[i]) {
      batch.weights[i].push_back(w.at(i, e));
      counts[e] += 1.0;
    }
  }
  batch.probs = out.probs.value();
  batch.p_bar = out.p_bar.value().values();
  batch.f = counts;
  for (double& v : batch.f) v /= static_cast<double>(k * tokens);
  return out;
}

ad::Var expert_forward(ad::Var w1, ad::Var w2, ad::Var u) {
  const std::size_t hidden = w1.value().rows();
  if (hidden % 2 != 0) throw ShapeError("expert_forward: W1 must have an even number of rows");
  const std::size_t d_ffn = hidden / 2;
  ad::Var h = ad::linear(u, w1);
  ad::Var gate = ad::slice_cols(h, 0, d_ffn);
  ad::Var val = ad::slice_cols(h, d_ffn, hidden);
  return ad::linear(ad::mul(ad::silu(gate), val), w2);
}

ad::Var moe_forward(const LayerVars& layer, ad::Var x, const RouterOutput& routing) {
  const std::size_t experts = layer.w1.size();
  const std::size_t tokens = x.value().rows();
  const Selections& sel = routing.batch.selections;
  if (sel.size() != tokens) throw ShapeError("moe_forward: routing covers a different token count");

  std::vector<std::vector<std::size_t>> members(experts);
  for (std::size_t i = 0; i < tokens; ++i)
    for (std::size_t e : sel[i]) members[e].push_back(i);

  ad::Var y = x.tape().constant(Tensor::zeros(x.value().shape()));
  for (std::size_t e = 0; e < experts; ++e) {
    const auto& rows = members[e];
    if (rows.empty()) continue;
    const std::vector<std::size_t> cols(rows.size(), e);
    ad::Var xe = ad::index_select_rows(x, rows);
    ad::Var we = ad::gather(routing.weights, rows, cols);
    ad::Var ye = ad::mul_rows(expert_forward(layer.w1[e], layer.w2[e], xe), we);
    y = ad::index_add_rows(y, ye, rows);
  }
  return y;
}

RoutingBatch route(const MoeLayerParams& params, const Tensor& x, std::span<const double> bias) {
  ad::Tape tape;
  LayerVars vars = bind(tape, params, false);
  return route(vars, tape.constant(x), bias).batch;
}

Tensor expert_forward(const MoeLayerParams& params, std::size_t expert, const Tensor& u) {
  if (expert >= params.num_experts()) throw ShapeError("expert_forward: expert index out of range");
  ad::Tape tape;
  const Tensor input = u.rank() == 1 ? Tensor::matrix(1, u.size(), u.values()) : u;
  return expert_forward(tape.constant(params.experts[expert].w1), tape.constant(params.experts[expert].w2),
                        tape.constant(input))
      .value();
}

Tensor moe_forward(const MoeLayerParams& params, const Tensor& x, const RoutingBatch& routing) {
  ad::Tape tape;
  LayerVars vars = bind(tape, params, false);
  const std::size_t tokens = x.rows(), experts = params.num_experts();
  if (routing.selections.size() != tokens) throw ShapeError("moe_forward: routing covers a different token count");
  Tensor w = Tensor::zeros({tokens, experts});
  for (std::size_t i = 0; i < tokens; ++i)
    for (std::size_t j = 0; j < routing.selections[i].size(); ++j) w.at(i, routing.selections[i][j]) = routing.weights[i][j];
  RouterOutput r;
  r.weights = tape.constant(std::move(w));
  r.batch = routing;
  return moe_forward(vars, tape.constant(x), r).value();
}

}  // namespace phibal
