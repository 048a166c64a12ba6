// SPDX-License-Identifier: Apache-2.0
#include "phibal/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "phibal/error.hpp"

namespace phibal {

namespace {

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

std::string header(const PlannedRun& run, SweepAxis axis) {
  std::ostringstream os;
  os << "# schema_version=" << kCsvSchemaVersion << "\n";
  os << "# config_hash=" << run.config.hash() << "\n";
  os << "# axis=" << sweep_axis_name(axis) << " value=" << run.value << "\n";
  os << "step,layer,task_loss,accuracy,max_vio,gini,mech,phi,eta,batch,seed\n";
  return os.str();
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  return s;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw Error("csv: malformed number '" + s + "'");
  return v;
}

std::uint64_t parse_uint(const std::string& s) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw Error("csv: malformed integer '" + s + "'");
  return v;
}

struct Spread {
  double mean = 0.0;
  double half_width = 0.0;
};

Spread spread(const std::vector<double>& v) {
  Spread s;
  if (v.empty()) return s;
  double lo = v.front(), hi = v.front(), sum = 0.0;
  for (double x : v) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
    sum += x;
  }
  s.mean = sum / static_cast<double>(v.size());
  s.half_width = (hi - lo) / 2.0;
  return s;
}

std::string fixed(double v, int digits) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

}  // namespace

std::vector<PlannedRun> expand(const ExperimentPlan& plan) {
  plan.validate();
  std::vector<PlannedRun> runs;
  for (std::size_t v = 0; v < plan.values.size(); ++v) {
    for (std::uint64_t seed : plan.seeds) {
      PlannedRun r;
      r.index = runs.size();
      r.value_index = v;
      r.value = plan.values[v];
      r.seed = seed;
      r.config = plan.config_for(v, seed);
      runs.push_back(std::move(r));
    }
  }
  return runs;
}

bool PlanResult::all_succeeded() const {
  return std::all_of(outcomes.begin(), outcomes.end(), [](const RunOutcome& o) { return o.record.has_value(); });
}

bool PlanResult::any_diverged() const {
  return std::any_of(outcomes.begin(), outcomes.end(), [](const RunOutcome& o) { return o.diverged; });
}

unsigned effective_jobs(unsigned requested, std::size_t runs) {
  if (const char* env = std::getenv("PHIBAL_DETERMINISTIC"); env && std::string(env) == "1") return 1;
  const unsigned cap = static_cast<unsigned>(std::max<std::size_t>(1, runs));
  return std::clamp(requested, 1u, cap);
}

std::string csv_text(const PlannedRun& run, SweepAxis axis, const RunRecord& record) {
  std::ostringstream os;
  os << header(run, axis);
  const auto& c = run.config;
  for (const auto& r : record.rows) {
    os << r.step << ',' << r.layer << ',' << format_double(r.task_loss) << ',' << format_double(r.accuracy) << ','
       << format_double(r.max_vio) << ',' << format_double(r.gini) << ',' << mechanism_kind_name(c.balance.mechanism)
       << ',' << c.balance.phi.to_string() << ',' << format_double(c.balance.eta) << ',' << c.batch << ',' << c.seed
       << '\n';
  }
  return os.str();
}

std::string csv_error_text(const PlannedRun& run, SweepAxis axis, const std::string& error) {
  return header(run, axis) + "# error=" + one_line(error) + "\n";
}

PlanResult run_plan(const ExperimentPlan& plan, unsigned jobs, const std::function<void(const RunOutcome&)>& on_done) {
  std::vector<PlannedRun> runs = expand(plan);
  std::error_code ec;
  std::filesystem::create_directories(plan.out_dir, ec);
  if (ec) throw Error("cannot create output directory '" + plan.out_dir.string() + "': " + ec.message());
  {
    const auto probe = plan.out_dir / ".phibal-write-probe";
    std::ofstream out(probe);
    if (!out) throw Error("output directory '" + plan.out_dir.string() + "' is not writable");
    out.close();
    std::filesystem::remove(probe, ec);
  }

  PlanResult result;
  result.outcomes.resize(runs.size());
  std::atomic<std::size_t> next{0};
  std::mutex callback_mutex;

  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= runs.size()) return;
      RunOutcome out;
      out.run = runs[i];
      out.csv = plan.out_dir / (runs[i].config.hash() + ".csv");
      std::string text;
      try {
        out.record = train(runs[i].config);
        text = csv_text(runs[i], plan.axis, *out.record);
      } catch (const TrainingDiverged& e) {
        out.error = e.what();
        out.diverged = true;
      } catch (const std::exception& e) {
        out.error = e.what();
      }
      if (!out.record) text = csv_error_text(runs[i], plan.axis, out.error);
      try {
        write_file(out.csv, text);
      } catch (const std::exception& e) {
        out.record.reset();
        out.error = e.what();
      }
      if (on_done) {
        std::lock_guard lock(callback_mutex);
        on_done(out);
      }
      result.outcomes[i] = std::move(out);
    }
  };

  const unsigned n = effective_jobs(jobs, runs.size());
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::vector<CsvRun> parsed;
  for (const auto& o : result.outcomes) {
    try {
      parsed.push_back(read_csv(o.csv));
    } catch (const Error&) {
      CsvRun missing;
      missing.config_hash = o.run.config.hash();
      missing.axis = sweep_axis_name(plan.axis);
      missing.value = o.run.value;
      missing.error = o.error.empty() ? "csv unreadable" : o.error;
      parsed.push_back(std::move(missing));
    }
  }
  result.summary = plan.out_dir / "summary.md";
  write_file(result.summary, summary_markdown(parsed));
  return result;
}

CsvRun read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read '" + path.string() + "'");
  CsvRun run;
  std::string line;
  bool seen_columns = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("# ", 0) == 0) {
      const std::string body = line.substr(2);
      if (body.rfind("schema_version=", 0) == 0) {
        if (parse_uint(body.substr(15)) != static_cast<std::uint64_t>(kCsvSchemaVersion)) {
          throw Error("csv '" + path.string() + "': unsupported schema version");
        }
      } else if (body.rfind("config_hash=", 0) == 0) {
        run.config_hash = body.substr(12);
      } else if (body.rfind("axis=", 0) == 0) {
        const auto sp = body.find(" value=");
        run.axis = body.substr(5, sp - 5);
        if (sp != std::string::npos) run.value = body.substr(sp + 7);
      } else if (body.rfind("error=", 0) == 0) {
        run.error = body.substr(6);
      }
      continue;
    }
    if (!seen_columns) {
      if (line != "step,layer,task_loss,accuracy,max_vio,gini,mech,phi,eta,batch,seed") {
        throw Error("csv '" + path.string() + "': unexpected column header");
      }
      seen_columns = true;
      continue;
    }
    const auto f = split(line, ',');
    if (f.size() != 11) throw Error("csv '" + path.string() + "': expected 11 columns");
    RunRow r;
    r.step = parse_uint(f[0]);
    r.layer = static_cast<std::size_t>(parse_uint(f[1]));
    r.task_loss = parse_double(f[2]);
    r.accuracy = parse_double(f[3]);
    r.max_vio = parse_double(f[4]);
    r.gini = parse_double(f[5]);
    run.seed = parse_uint(f[10]);
    run.record.rows.push_back(r);
  }
  return run;
}

std::string summary_markdown(const std::vector<CsvRun>& runs) {
  struct Group {
    std::string axis;
    std::string value;
    std::vector<double> max_vio, gini, loss, acc;
    std::vector<std::string> errors;
  };
  std::vector<Group> groups;
  std::map<std::pair<std::string, std::string>, std::size_t> index;
  for (const auto& r : runs) {
    const auto key = std::make_pair(r.axis, r.value);
    auto it = index.find(key);
    if (it == index.end()) {
      it = index.emplace(key, groups.size()).first;
      groups.push_back({r.axis, r.value, {}, {}, {}, {}, {}});
    }
    Group& g = groups[it->second];
    if (!r.error.empty() || r.record.rows.empty()) {
      g.errors.push_back("run " + r.config_hash + ": " + (r.error.empty() ? "no rows" : r.error));
      continue;
    }
    g.max_vio.push_back(r.record.terminal_max_vio());
    g.gini.push_back(r.record.terminal_gini());
    g.loss.push_back(r.record.terminal_task_loss());
    g.acc.push_back(r.record.terminal_accuracy());
  }

  std::ostringstream os;
  os << "# Sweep summary\n";
  std::vector<std::string> axes;
  for (const auto& g : groups)
    if (std::find(axes.begin(), axes.end(), g.axis) == axes.end()) axes.push_back(g.axis);

  for (const auto& axis : axes) {
    std::vector<const Group*> rows;
    for (const auto& g : groups)
      if (g.axis == axis) rows.push_back(&g);
    std::stable_sort(rows.begin(), rows.end(), [](const Group* a, const Group* b) {
      const bool ea = a->max_vio.empty(), eb = b->max_vio.empty();
      if (ea != eb) return eb;
      if (ea) return false;
      return spread(a->max_vio).mean < spread(b->max_vio).mean;
    });
    os << "\n## Axis: " << axis << "\n\n";
    os << "| rank | " << axis << " | runs | MaxVio | Gini | task loss | accuracy |\n";
    os << "|---:|---|---:|---|---|---|---|\n";
    std::size_t rank = 0;
    for (const Group* g : rows) {
      ++rank;
      auto cell = [](const std::vector<double>& v) {
        if (v.empty()) return std::string("n/a");
        const Spread s = spread(v);
        return fixed(s.mean, 4) + " ± " + fixed(s.half_width, 4);
      };
      os << "| " << rank << " | " << g->value << " | " << g->max_vio.size() << " | " << cell(g->max_vio) << " | "
         << cell(g->gini) << " | " << cell(g->loss) << " | " << cell(g->acc) << " |\n";
    }
    bool any_error = false;
    for (const Group* g : rows) {
      for (const auto& e : g->errors) {
        if (!any_error) os << "\nFailed runs:\n\n";
        any_error = true;
        os << "- " << g->value << ", " << e << "\n";
      }
    }
  }
  return os.str();
}

}  // namespace phibal
