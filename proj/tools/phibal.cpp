// SPDX-License-Identifier: Apache-2.0
//
// phibal: command-line front end.
//
//   phibal run    --config FILE [--out DIR] [--seed N]
//   phibal sweep  --config FILE [--out DIR] [--seed N] [--jobs N]
//   phibal check  [--check-tolerance F]
//   phibal budget --compute C
//
// Exit codes: 0 success, 1 configuration or I/O error, 2 numerical failure,
// 3 failed check.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "phibal/checks.hpp"
#include "phibal/config.hpp"
#include "phibal/error.hpp"
#include "phibal/experiment.hpp"
#include "phibal/trainer.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kNumericalError = 2;
constexpr int kCheckFailed = 3;

phibal::ExperimentPlan as_plan(const phibal::ParsedConfig& parsed) {
  if (const auto* plan = std::get_if<phibal::ExperimentPlan>(&parsed)) return *plan;
  phibal::ExperimentPlan plan;
  plan.base = std::get<phibal::TrainConfig>(parsed);
  plan.axis = phibal::SweepAxis::Phi;
  plan.values = {plan.base.balance.phi.to_string()};
  plan.seeds = {plan.base.seed};
  return plan;
}

void apply_seed(phibal::ExperimentPlan& plan, std::optional<std::uint64_t> seed) {
  if (!seed) return;
  plan.base.seed = *seed;
  for (std::size_t i = 0; i < plan.seeds.size(); ++i) plan.seeds[i] = *seed + i;
}

int run_single(const std::string& config_path, const std::string& out, std::optional<std::uint64_t> seed) {
  phibal::ExperimentPlan plan = as_plan(phibal::parse_config(config_path));
  phibal::TrainConfig config = plan.base;
  if (seed) config.seed = *seed;
  if (!out.empty()) plan.out_dir = out;

  std::filesystem::create_directories(plan.out_dir);
  phibal::PlannedRun run{0, 0, config.balance.phi.to_string(), config.seed, config};
  const auto csv = plan.out_dir / (config.hash() + ".csv");
  try {
    phibal::Trainer trainer(config);
    const phibal::RunRecord& record = trainer.run();
    std::ofstream(csv, std::ios::binary) << phibal::csv_text(run, phibal::SweepAxis::Phi, record);
    std::printf("run %s: steps=%llu task_loss=%.6f accuracy=%.4f max_vio=%.4f gini=%.4f\n", config.hash().c_str(),
                static_cast<unsigned long long>(config.steps), record.terminal_task_loss(),
                record.terminal_accuracy(), record.terminal_max_vio(), record.terminal_gini());
    std::printf("csv: %s\n", csv.string().c_str());
  } catch (const phibal::TrainingDiverged& e) {
    const auto snap = plan.out_dir / (config.hash() + ".diverged.json");
    std::ofstream(snap) << e.snapshot().dump();
    std::ofstream(csv, std::ios::binary) << phibal::csv_error_text(run, phibal::SweepAxis::Phi, e.what());
    std::fprintf(stderr, "error: %s (snapshot: %s)\n", e.what(), snap.string().c_str());
    return kNumericalError;
  }
  return kOk;
}

int run_sweep(const std::string& config_path, const std::string& out, std::optional<std::uint64_t> seed,
              unsigned jobs) {
  phibal::ExperimentPlan plan = as_plan(phibal::parse_config(config_path));
  apply_seed(plan, seed);
  if (!out.empty()) plan.out_dir = out;
  const auto result = phibal::run_plan(plan, jobs, [](const phibal::RunOutcome& o) {
    if (o.record) {
      std::printf("[%zu] %s seed=%llu max_vio=%.4f task_loss=%.6f\n", o.run.index, o.run.value.c_str(),
                  static_cast<unsigned long long>(o.run.seed), o.record->terminal_max_vio(),
                  o.record->terminal_task_loss());
    } else {
      std::printf("[%zu] %s seed=%llu FAILED: %s\n", o.run.index, o.run.value.c_str(),
                  static_cast<unsigned long long>(o.run.seed), o.error.c_str());
    }
    std::fflush(stdout);
  });
  std::printf("summary: %s\n", result.summary.string().c_str());
  if (result.any_diverged()) return kNumericalError;
  return result.all_succeeded() ? kOk : kConfigError;
}

int run_checks(std::optional<double> tolerance) {
  const phibal::CheckTolerances tol = tolerance ? phibal::CheckTolerances::uniform(*tolerance) : phibal::CheckTolerances{};
  bool ok = true;
  for (const auto& r : phibal::run_all_checks(tol)) {
    std::printf("%s %-18s cases=%zu time=%.2fs  %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.cases, r.seconds,
                r.detail.c_str());
    ok = ok && r.passed;
  }
  return ok ? kOk : kCheckFailed;
}

int run_budget(double compute) {
  const auto b = phibal::compute_token_budget(compute);
  std::printf("compute          %.6e\n", compute);
  std::printf("params  (M_opt)  %.6e\n", b.params);
  std::printf("tokens  (D_opt)  %.6e\n", b.tokens);
  std::printf("tokens/param     %.4f\n", b.tokens_per_param);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"phi-balancing experiments for toy mixture-of-experts models"};
  app.require_subcommand(1);

  std::string config_path, out;
  std::optional<std::uint64_t> seed;
  unsigned jobs = 1;
  std::optional<double> tolerance;
  double compute = 0.0;

  auto* run = app.add_subcommand("run", "train one configuration");
  run->add_option("--config", config_path, "config file")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out, "output directory");
  run->add_option("--seed", seed, "override the seed");

  auto* sweep = app.add_subcommand("sweep", "run an ablation plan");
  sweep->add_option("--config", config_path, "config file with a [sweep] section")->required()->check(CLI::ExistingFile);
  sweep->add_option("--out", out, "output directory");
  sweep->add_option("--seed", seed, "first seed; later repeats use seed+1, seed+2, ...");
  sweep->add_option("--jobs", jobs, "parallel runs (PHIBAL_DETERMINISTIC=1 forces 1)")->check(CLI::PositiveNumber);

  auto* check = app.add_subcommand("check", "run the identity and gradient suites");
  check->add_option("--check-tolerance", tolerance, "replace every suite tolerance")->check(CLI::PositiveNumber);

  auto* budget = app.add_subcommand("budget", "compute-optimal parameter and token counts");
  budget->add_option("--compute", compute, "training compute C")->required()->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) return run_single(config_path, out, seed);
    if (*sweep) return run_sweep(config_path, out, seed, jobs);
    if (*check) return run_checks(tolerance);
    if (*budget) return run_budget(compute);
  } catch (const phibal::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigError;
  } catch (const phibal::NumericalError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return kNumericalError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kConfigError;
  }
  return kOk;
}
