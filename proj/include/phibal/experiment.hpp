// SPDX-License-Identifier: Apache-2.0
//
// Plan runner. Every (value, seed) pair of a sweep becomes one training run
// writing `<config-hash>.csv` into the output directory; a Markdown summary
// is then rebuilt from those CSV files alone.
//
// CSV layout (schema_version=1):
//   # schema_version=1
//   # config_hash=<hex>
//   # axis=<axis> value=<token>
//   step,layer,task_loss,accuracy,max_vio,gini,mech,phi,eta,batch,seed
// A failed run keeps the header and adds a single `# error=<message>` line.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "phibal/config.hpp"
#include "phibal/trainer.hpp"

namespace phibal {

inline constexpr int kCsvSchemaVersion = 1;

struct PlannedRun {
  std::size_t index = 0;
  std::size_t value_index = 0;
  std::string value;
  std::uint64_t seed = 0;
  TrainConfig config;
};

/// Runs in config-index order: values outermost, seeds innermost.
std::vector<PlannedRun> expand(const ExperimentPlan& plan);

struct RunOutcome {
  PlannedRun run;
  std::optional<RunRecord> record;
  std::string error;
  bool diverged = false;
  std::filesystem::path csv;
};

struct PlanResult {
  std::vector<RunOutcome> outcomes;  // ordered by PlannedRun::index
  std::filesystem::path summary;

  bool all_succeeded() const;
  bool any_diverged() const;
};

/// Worker count actually used: 1 when PHIBAL_DETERMINISTIC=1, otherwise
/// `requested` clamped to [1, runs].
unsigned effective_jobs(unsigned requested, std::size_t runs);

/// Executes every run with `jobs` workers. Throws before any run starts if
/// the output directory cannot be created or written.
PlanResult run_plan(const ExperimentPlan& plan, unsigned jobs,
                    const std::function<void(const RunOutcome&)>& on_done = {});

std::string csv_text(const PlannedRun& run, SweepAxis axis, const RunRecord& record);
std::string csv_error_text(const PlannedRun& run, SweepAxis axis, const std::string& error);

struct CsvRun {
  std::string config_hash;
  std::string axis;
  std::string value;
  std::string error;
  std::uint64_t seed = 0;
  RunRecord record;
};

CsvRun read_csv(const std::filesystem::path& path);

/// Table per sweep axis: mean ± half-width ((max - min) / 2) over seeds of
/// terminal MaxVio, Gini, task loss and accuracy, ranked by MaxVio.
std::string summary_markdown(const std::vector<CsvRun>& runs);

}  // namespace phibal
