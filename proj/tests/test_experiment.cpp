// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "phibal/config.hpp"
#include "phibal/error.hpp"
#include "phibal/experiment.hpp"

using namespace phibal;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("phibal_test_" + name);
  fs::remove_all(dir);
  return dir;
}

ExperimentPlan tiny_plan(const fs::path& out) {
  ExperimentPlan plan;
  plan.base.model = {1, 4, 2, 6, 6};
  plan.base.batch = 16;
  plan.base.steps = 30;
  plan.base.eval_every = 10;
  plan.base.validation_tokens = 64;
  plan.axis = SweepAxis::Phi;
  plan.values = {"neg_shannon", "euclidean"};
  plan.seeds = {0, 1};
  plan.out_dir = out;
  return plan;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<fs::path> csv_files(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".csv") out.push_back(e.path());
  return out;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PHIBAL_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("plans expand values outermost and seeds innermost") {
  const auto runs = expand(tiny_plan("unused"));
  REQUIRE(runs.size() == 4);
  CHECK(runs[0].value == "neg_shannon");
  CHECK(runs[0].seed == 0);
  CHECK(runs[1].seed == 1);
  CHECK(runs[2].value == "euclidean");
  CHECK(runs[3].index == 3);
  CHECK(runs[3].config.balance.phi == PotentialSpec::euclidean());
  CHECK(runs[3].config.seed == 1);
}

TEST_CASE("deterministic mode forces one worker") {
  ::unsetenv("PHIBAL_DETERMINISTIC");
  CHECK(effective_jobs(4, 10) == 4);
  CHECK(effective_jobs(4, 2) == 2);
  CHECK(effective_jobs(0, 2) == 1);
  ::setenv("PHIBAL_DETERMINISTIC", "1", 1);
  CHECK(effective_jobs(4, 10) == 1);
  ::unsetenv("PHIBAL_DETERMINISTIC");
}

TEST_CASE("one csv per run plus a summary rebuilt from the csvs") {
  const auto dir = fresh_dir("plan");
  const auto result = run_plan(tiny_plan(dir), 2);
  CHECK(result.all_succeeded());
  CHECK(result.outcomes.size() == 4);
  for (std::size_t i = 0; i < result.outcomes.size(); ++i) CHECK(result.outcomes[i].run.index == i);
  const auto files = csv_files(dir);
  CHECK(files.size() == 4);

  std::vector<CsvRun> runs;
  for (const auto& o : result.outcomes) {
    CHECK(o.csv.filename().string() == o.run.config.hash() + ".csv");
    const std::string text = slurp(o.csv);
    CHECK(text.rfind("# schema_version=1\n# config_hash=" + o.run.config.hash() + "\n# axis=phi value=", 0) == 0);
    CHECK(text.find("\nstep,layer,task_loss,accuracy,max_vio,gini,mech,phi,eta,batch,seed\n") != std::string::npos);
    const auto parsed = read_csv(o.csv);
    CHECK(parsed.config_hash == o.run.config.hash());
    CHECK(parsed.seed == o.run.seed);
    CHECK(parsed.error.empty());
    CHECK(parsed.record.rows.size() == o.record->rows.size());
    CHECK(parsed.record.terminal_max_vio() == o.record->terminal_max_vio());
    CHECK(parsed.record.terminal_task_loss() == o.record->terminal_task_loss());
    runs.push_back(parsed);
  }
  const std::string summary = slurp(result.summary);
  CHECK(summary == summary_markdown(runs));
  CHECK(summary.find("neg_shannon") != std::string::npos);
  CHECK(summary.find("±") != std::string::npos);
}

TEST_CASE("a single configuration writes exactly one csv") {
  const auto dir = fresh_dir("single");
  auto plan = tiny_plan(dir);
  plan.values = {"neg_shannon"};
  plan.seeds = {7};
  CHECK(run_plan(plan, 1).all_succeeded());
  CHECK(csv_files(dir).size() == 1);
}

TEST_CASE("an unwritable output directory fails before any run") {
  const auto dir = fresh_dir("blocked");
  fs::create_directories(dir);
  std::ofstream(dir / "file") << "x";
  auto plan = tiny_plan(dir / "file" / "sub");
  int started = 0;
  CHECK_THROWS_AS(run_plan(plan, 1, [&](const RunOutcome&) { ++started; }), Error);
  CHECK(started == 0);
}

TEST_CASE("a failed run records its error and siblings still finish") {
  const auto dir = fresh_dir("failing");
  auto plan = tiny_plan(dir);
  plan.axis = SweepAxis::Mechanism;
  plan.values = {"none", "phi", "st_moe"};
  plan.seeds = {0};
  plan.base.balance.alpha = 1e308;  // α·E overflows for any mechanism with an aux term
  const auto result = run_plan(plan, 1);
  REQUIRE(result.outcomes.size() == 3);
  CHECK(result.outcomes[0].record.has_value());
  CHECK(result.outcomes[1].diverged);
  CHECK(result.outcomes[2].diverged);
  CHECK(result.any_diverged());
  CHECK_FALSE(result.all_succeeded());
  const auto failed = read_csv(result.outcomes[1].csv);
  CHECK_FALSE(failed.error.empty());
  CHECK(slurp(result.outcomes[1].csv).find("# error=") != std::string::npos);
  CHECK(slurp(result.summary).find("Failed runs") != std::string::npos);
}

TEST_CASE("cli exit codes") {
  const auto dir = fresh_dir("cli");
  fs::create_directories(dir);
  const auto good = dir / "good.toml";
  std::ofstream(good) << "[model]\nlayers = 1\nexperts = 4\ntop_k = 2\ndim = 6\nffn_dim = 6\n"
                         "[train]\nbatch = 16\nsteps = 20\neval_every = 10\nvalidation_tokens = 64\n";
  const auto bad = dir / "bad.toml";
  std::ofstream(bad) << "[model]\nlayerz = 1\n";
  const auto nan = dir / "nan.toml";
  std::ofstream(nan) << "[model]\nlayers = 1\nexperts = 4\n[balance]\nalpha = 1e308\n"
                        "[train]\nbatch = 16\nsteps = 20\neval_every = 10\n";

  CHECK(run_cli("run --config " + good.string() + " --out " + (dir / "out").string()) == 0);
  CHECK(csv_files(dir / "out").size() == 1);
  CHECK(run_cli("run --config " + bad.string() + " --out " + (dir / "out").string()) == 1);
  CHECK(run_cli("run --config " + (dir / "missing.toml").string()) == 1);
  CHECK(run_cli("frobnicate") == 1);
  CHECK(run_cli("run --config " + nan.string() + " --out " + (dir / "nan").string()) == 2);
  bool snapshot = false;
  for (const auto& e : fs::directory_iterator(dir / "nan"))
    snapshot = snapshot || e.path().string().ends_with(".diverged.json");
  CHECK(snapshot);
  CHECK(run_cli("budget --compute 1e18") == 0);
  CHECK(run_cli("check --check-tolerance 1e-300") == 3);
}
