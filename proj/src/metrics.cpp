// SPDX-License-Identifier: Apache-2.0
#include "phibal/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "phibal/error.hpp"

namespace phibal {

namespace {

double checked_mean(std::span<const double> loads, const char* who) {
  if (loads.empty()) throw DomainError(std::string(who) + ": empty load vector");
  double total = 0.0;
  for (std::size_t e = 0; e < loads.size(); ++e) {
    if (!(loads[e] >= 0.0) || !std::isfinite(loads[e])) {
      throw DomainError(std::string(who) + ": loads must be finite and nonnegative", e);
    }
    total += loads[e];
  }
  if (total <= 0.0) throw DomainError(std::string(who) + ": all loads are zero");
  return total / static_cast<double>(loads.size());
}

}  // namespace

double max_vio(std::span<const double> loads) {
  const double mean = checked_mean(loads, "max_vio");
  return (*std::max_element(loads.begin(), loads.end()) - mean) / mean;
}

double gini(std::span<const double> loads) {
  const double mean = checked_mean(loads, "gini");
  // Σ_i Σ_j |x_i - x_j| = 2 Σ_i (2i - n + 1) x_(i) over the sorted values.
  std::vector<double> x(loads.begin(), loads.end());
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double pair_sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) pair_sum += (2.0 * static_cast<double>(i) - n + 1.0) * x[i];
  return 2.0 * pair_sum / (2.0 * n * n * mean);
}

RoutedTokenRatio routed_token_ratio(const std::vector<std::vector<std::size_t>>& selections,
                                    std::span<const std::size_t> domains, std::size_t experts,
                                    std::size_t num_domains) {
  if (selections.size() != domains.size()) throw ShapeError("routed_token_ratio: selections and domains differ in length");
  RoutedTokenRatio out{Tensor::zeros({num_domains, experts}), std::vector<bool>(num_domains, false)};
  std::vector<double> picks(num_domains, 0.0);
  for (std::size_t i = 0; i < selections.size(); ++i) {
    const std::size_t dom = domains[i];
    if (dom >= num_domains) throw ShapeError("routed_token_ratio: domain id " + std::to_string(dom) + " out of range");
    if (selections[i].empty()) throw ShapeError("routed_token_ratio: token " + std::to_string(i) + " has no selection");
    for (std::size_t e : selections[i]) {
      if (e >= experts) throw ShapeError("routed_token_ratio: expert index out of range");
      out.ratio.at(dom, e) += 1.0;
    }
    picks[dom] += static_cast<double>(selections[i].size());
    out.present[dom] = true;
  }
  for (std::size_t d = 0; d < num_domains; ++d) {
    if (!out.present[d]) continue;
    for (std::size_t e = 0; e < experts; ++e) out.ratio.at(d, e) /= picks[d];
  }
  return out;
}

double accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> labels) {
  if (predictions.size() != labels.size()) throw ShapeError("accuracy: predictions and labels differ in length");
  if (predictions.empty()) throw DomainError("accuracy: empty input");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

LoadWindow::LoadWindow(std::size_t experts, std::size_t window) : window_(window), totals_(experts, 0.0) {
  if (window == 0) throw ConfigError("load window must hold at least one step");
}

void LoadWindow::push(std::span<const double> loads) {
  if (loads.size() != totals_.size()) throw ShapeError("load window: wrong expert count");
  history_.emplace_back(loads.begin(), loads.end());
  if (history_.size() > window_) history_.pop_front();
  std::fill(totals_.begin(), totals_.end(), 0.0);
  for (const auto& h : history_)
    for (std::size_t e = 0; e < h.size(); ++e) totals_[e] += h[e];
}

}  // namespace phibal
