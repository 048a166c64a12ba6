// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <span>
#include <vector>

#include "phibal/tensor.hpp"

namespace phibal {

struct LoadRecord {
  std::vector<double> loads;
  std::uint64_t step = 0;
  std::size_t layer = 0;
};

/// (max - mean) / mean. Throws DomainError when the loads sum to zero.
double max_vio(std::span<const double> loads);

/// Unadjusted pairwise Gini: Σ_i Σ_j |x_i - x_j| / (2 E² μ).
double gini(std::span<const double> loads);

struct RoutedTokenRatio {
  Tensor ratio;               // D × E; rows of absent domains are zero
  std::vector<bool> present;  // false for domains with no tokens
};

/// R[d][e] = (selections of e by domain-d tokens) / (k · |T_d|).
RoutedTokenRatio routed_token_ratio(const std::vector<std::vector<std::size_t>>& selections,
                                    std::span<const std::size_t> domains, std::size_t experts,
                                    std::size_t num_domains);

double accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> labels);

/// Sliding sum of the most recent `window` load vectors.
class LoadWindow {
 public:
  LoadWindow(std::size_t experts, std::size_t window);

  void push(std::span<const double> loads);
  std::span<const double> totals() const noexcept { return totals_; }
  std::size_t size() const noexcept { return history_.size(); }
  std::size_t window() const noexcept { return window_; }
  const std::deque<std::vector<double>>& history() const noexcept { return history_; }

 private:
  std::size_t window_;
  std::vector<double> totals_;
  std::deque<std::vector<double>> history_;
};

}  // namespace phibal
