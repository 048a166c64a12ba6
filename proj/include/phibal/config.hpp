// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration files. The dialect is a strict subset of TOML:
//
//   # comment
//   [section]
//   key = "string" | 1.5 | 42 | true | ["a", "b"] | [0.4, 0.6]
//
// Sections: model, balance, optim, corpus, train, and optionally sweep. A file
// with a [sweep] section describes an ExperimentPlan; otherwise a single
// TrainConfig. Unknown sections and keys are rejected with their line number.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "phibal/trainer.hpp"

namespace phibal {

enum class SweepAxis { Phi, Eta, BatchSize, Mechanism, Statistic };

std::string_view sweep_axis_name(SweepAxis axis) noexcept;
SweepAxis parse_sweep_axis(std::string_view text);

struct ExperimentPlan {
  TrainConfig base;
  SweepAxis axis = SweepAxis::Phi;
  /// Axis values as config tokens: potential tokens, numbers, mechanism or
  /// statistic names.
  std::vector<std::string> values;
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path out_dir = "results";

  /// Throws ConfigError for empty lists or values the axis cannot parse.
  void validate() const;
  /// base with the axis set to values[value_index] and the seed replaced.
  TrainConfig config_for(std::size_t value_index, std::uint64_t seed) const;
};

using ParsedConfig = std::variant<TrainConfig, ExperimentPlan>;

ParsedConfig parse_config_text(std::string_view text, std::string_view origin = "<config>");
ParsedConfig parse_config(const std::filesystem::path& path);

/// Canonical text; parse_config_text(write_config(c)) reproduces c exactly.
std::string write_config(const TrainConfig& config);
std::string write_config(const ExperimentPlan& plan);

/// Shortest decimal text that reads back to the same double.
std::string format_double(double v);

}  // namespace phibal
