// SPDX-License-Identifier: Apache-2.0
#include "phibal/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "phibal/error.hpp"

namespace phibal {

namespace {

struct Value {
  enum class Kind { String, Number, Bool, Array } kind = Kind::String;
  std::string text;  // string contents, or the raw number token
  double number = 0.0;
  bool boolean = false;
  std::vector<Value> items;
  std::size_t line = 0;
};

using Section = std::map<std::string, Value>;

const std::set<std::string> kKnownSections{"model", "balance", "optim", "corpus", "train", "sweep"};

class Parser {
 public:
  Parser(std::string_view text, std::string_view origin) : text_(text), origin_(origin) {}

  std::map<std::string, Section> parse() {
    std::map<std::string, Section> out;
    std::string current;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text_.size()) {
      const std::size_t end = std::min(text_.find('\n', pos), text_.size());
      line_ = std::string(text_.substr(pos, end - pos));
      ++line_no;
      line_number_ = line_no;
      col_ = 0;
      skip_ws();
      if (!at_end() && peek() != '#') {
        if (peek() == '[') {
          ++col_;
          current = read_bare("section name");
          skip_ws();
          expect(']');
          if (!kKnownSections.count(current)) fail("unknown section [" + current + "]");
          if (out.count(current)) fail("duplicate section [" + current + "]");
          out[current];
        } else {
          if (current.empty()) fail("key outside any section");
          const std::string key = read_bare("key");
          skip_ws();
          expect('=');
          skip_ws();
          Value v = read_value();
          auto& sec = out[current];
          if (sec.count(key)) fail("duplicate key '" + current + "." + key + "'");
          sec.emplace(key, std::move(v));
        }
        skip_ws();
        if (!at_end() && peek() != '#') fail("unexpected trailing text");
      }
      if (end == text_.size()) break;
      pos = end + 1;
    }
    return out;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError(std::string(origin_) + ":" + std::to_string(line_number_) + ": " + what);
  }
  bool at_end() const { return col_ >= line_.size(); }
  char peek() const { return line_[col_]; }
  void skip_ws() {
    while (!at_end() && (peek() == ' ' || peek() == '\t' || peek() == '\r')) ++col_;
  }
  void expect(char c) {
    if (at_end() || peek() != c) fail(std::string("expected '") + c + "'");
    ++col_;
  }
  std::string read_bare(const char* what) {
    std::string out;
    while (!at_end() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' || peek() == '-')) {
      out += peek();
      ++col_;
    }
    if (out.empty()) fail(std::string("expected ") + what);
    return out;
  }

  Value read_value() {
    if (at_end()) fail("missing value");
    Value v;
    v.line = line_number_;
    const char c = peek();
    if (c == '"') {
      ++col_;
      v.kind = Value::Kind::String;
      while (true) {
        if (at_end()) fail("unterminated string");
        char ch = peek();
        ++col_;
        if (ch == '"') break;
        if (ch == '\\') {
          if (at_end()) fail("unterminated escape");
          ch = peek();
          ++col_;
          if (ch == 'n') ch = '\n';
          else if (ch == 't') ch = '\t';
          else if (ch != '"' && ch != '\\') fail("unsupported escape");
        }
        v.text += ch;
      }
      return v;
    }
    if (c == '[') {
      ++col_;
      v.kind = Value::Kind::Array;
      skip_ws();
      if (!at_end() && peek() == ']') {
        ++col_;
        return v;
      }
      while (true) {
        skip_ws();
        v.items.push_back(read_value());
        skip_ws();
        if (at_end()) fail("unterminated array");
        if (peek() == ',') {
          ++col_;
          skip_ws();
          if (!at_end() && peek() == ']') {
            ++col_;
            return v;
          }
          continue;
        }
        expect(']');
        return v;
      }
    }
    std::string token;
    while (!at_end() && peek() != ',' && peek() != ']' && peek() != ' ' && peek() != '\t' && peek() != '#' &&
           peek() != '\r') {
      token += peek();
      ++col_;
    }
    if (token == "true" || token == "false") {
      v.kind = Value::Kind::Bool;
      v.boolean = token == "true";
      return v;
    }
    v.kind = Value::Kind::Number;
    v.text = token;
    if (token == "inf" || token == "+inf") {
      v.number = std::numeric_limits<double>::infinity();
    } else if (token == "-inf") {
      v.number = -std::numeric_limits<double>::infinity();
    } else {
      const char* first = token.data();
      if (!token.empty() && token.front() == '+') ++first;
      const auto [ptr, ec] = std::from_chars(first, token.data() + token.size(), v.number);
      if (ec != std::errc() || ptr != token.data() + token.size() || token.empty()) {
        fail("malformed value '" + token + "'");
      }
    }
    return v;
  }

  std::string_view text_;
  std::string_view origin_;
  std::string line_;
  std::size_t line_number_ = 0;
  std::size_t col_ = 0;
};

// Typed accessors over one section; remembers which keys were read.
class Reader {
 public:
  Reader(const Section* section, std::string name, std::string_view origin)
      : section_(section), name_(std::move(name)), origin_(origin) {}

  void finish() const {
    if (!section_) return;
    for (const auto& [key, v] : *section_) {
      if (!used_.count(key)) fail(v, "unknown key '" + name_ + "." + key + "'");
    }
  }

  template <class F>
  void with(const std::string& key, F&& f) {
    if (!section_) return;
    auto it = section_->find(key);
    if (it == section_->end()) return;
    used_.insert(key);
    try {
      f(it->second);
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      if (msg.rfind(std::string(origin_) + ":", 0) == 0) throw;
      fail(it->second, name_ + "." + key + ": " + msg);
    }
  }

  void string(const std::string& key, std::string& out) {
    with(key, [&](const Value& v) { out = as_string(v); });
  }
  void number(const std::string& key, double& out) {
    with(key, [&](const Value& v) { out = as_number(v); });
  }
  template <class Int>
  void integer(const std::string& key, Int& out) {
    with(key, [&](const Value& v) { out = static_cast<Int>(as_uint(v)); });
  }
  void boolean(const std::string& key, bool& out) {
    with(key, [&](const Value& v) {
      if (v.kind != Value::Kind::Bool) throw ConfigError("expected true or false");
      out = v.boolean;
    });
  }
  void numbers(const std::string& key, std::vector<double>& out) {
    with(key, [&](const Value& v) {
      if (v.kind != Value::Kind::Array) throw ConfigError("expected an array of numbers");
      out.clear();
      for (const auto& item : v.items) out.push_back(as_number(item));
    });
  }

  static std::string as_string(const Value& v) {
    if (v.kind != Value::Kind::String) throw ConfigError("expected a quoted string");
    return v.text;
  }
  static double as_number(const Value& v) {
    if (v.kind != Value::Kind::Number) throw ConfigError("expected a number");
    return v.number;
  }
  static std::uint64_t as_uint(const Value& v) {
    if (v.kind != Value::Kind::Number) throw ConfigError("expected a nonnegative integer");
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.text.data(), v.text.data() + v.text.size(), out);
    if (ec != std::errc() || ptr != v.text.data() + v.text.size()) {
      throw ConfigError("expected a nonnegative integer, got '" + v.text + "'");
    }
    return out;
  }

 private:
  [[noreturn]] void fail(const Value& v, const std::string& what) const {
    throw ConfigError(std::string(origin_) + ":" + std::to_string(v.line) + ": " + what);
  }

  const Section* section_;
  std::string name_;
  std::string_view origin_;
  std::set<std::string> used_;
};

const Section* find_section(const std::map<std::string, Section>& doc, const std::string& name) {
  auto it = doc.find(name);
  return it == doc.end() ? nullptr : &it->second;
}

TrainConfig read_train_config(const std::map<std::string, Section>& doc, std::string_view origin) {
  TrainConfig c;

  Reader model(find_section(doc, "model"), "model", origin);
  model.integer("layers", c.model.layers);
  model.integer("experts", c.model.experts);
  model.integer("top_k", c.model.top_k);
  model.integer("dim", c.model.dim);
  model.integer("ffn_dim", c.model.ffn_dim);
  model.finish();

  Reader balance(find_section(doc, "balance"), "balance", origin);
  balance.with("mechanism", [&](const Value& v) { c.balance.mechanism = parse_mechanism_kind(Reader::as_string(v)); });
  balance.with("phi", [&](const Value& v) { c.balance.phi = PotentialSpec::parse(Reader::as_string(v)); });
  balance.number("eta", c.balance.eta);
  balance.number("alpha", c.balance.alpha);
  balance.with("statistic", [&](const Value& v) { c.balance.statistic = parse_statistic(Reader::as_string(v)); });
  balance.number("bias_step", c.balance.bias_step);
  balance.finish();

  Reader optim(find_section(doc, "optim"), "optim", origin);
  std::string kind = "adamw";
  optim.string("kind", kind);
  if (kind == "sgd") {
    Sgd s;
    optim.number("lr", s.lr);
    c.optimizer = s;
  } else if (kind == "adamw") {
    AdamW a = std::get<AdamW>(c.optimizer);
    optim.number("lr", a.lr);
    optim.number("beta1", a.beta1);
    optim.number("beta2", a.beta2);
    optim.number("eps", a.eps);
    optim.number("weight_decay", a.weight_decay);
    optim.integer("warmup_steps", a.warmup_steps);
    optim.integer("cosine_total_steps", a.cosine_total_steps);
    c.optimizer = a;
  } else {
    throw ConfigError(std::string(origin) + ": optim.kind: expected sgd or adamw, got '" + kind + "'");
  }
  optim.finish();

  Reader corpus(find_section(doc, "corpus"), "corpus", origin);
  corpus.numbers("mixture", c.corpus.mixture);
  corpus.number("center_std", c.corpus.center_std);
  corpus.number("cluster_scale", c.corpus.cluster_scale);
  corpus.with("label_rule", [&](const Value& v) { c.corpus.label_rule = parse_label_rule(Reader::as_string(v)); });
  corpus.with("drift", [&](const Value& v) { c.corpus.drift = parse_drift_kind(Reader::as_string(v)); });
  corpus.numbers("drift_to", c.corpus.drift_to);
  corpus.integer("drift_steps", c.corpus.drift_steps);
  corpus.finish();

  Reader train(find_section(doc, "train"), "train", origin);
  train.integer("batch", c.batch);
  train.integer("steps", c.steps);
  train.integer("eval_every", c.eval_every);
  train.integer("seed", c.seed);
  train.integer("load_window", c.load_window);
  train.integer("validation_tokens", c.validation_tokens);
  train.boolean("checked", c.checked);
  train.finish();

  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(origin) + ": " + e.what());
  }
  return c;
}

void append(std::ostringstream& os, const std::string& key, const std::string& text) {
  os << key << " = " << text << "\n";
}

std::string toml_string(std::string_view s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out += c;
  }
  return out + "\"";
}

std::string number_list(const std::vector<double>& v) {
  std::string out = "[";
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + format_double(v[i]);
  return out + "]";
}

}  // namespace

std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  std::string out(buf, ptr);
  return out;
}

std::string_view sweep_axis_name(SweepAxis axis) noexcept {
  switch (axis) {
    case SweepAxis::Phi: return "phi";
    case SweepAxis::Eta: return "eta";
    case SweepAxis::BatchSize: return "batch";
    case SweepAxis::Mechanism: return "mechanism";
    default: return "statistic";
  }
}

SweepAxis parse_sweep_axis(std::string_view text) {
  if (text == "phi") return SweepAxis::Phi;
  if (text == "eta") return SweepAxis::Eta;
  if (text == "batch") return SweepAxis::BatchSize;
  if (text == "mechanism") return SweepAxis::Mechanism;
  if (text == "statistic") return SweepAxis::Statistic;
  throw ConfigError("unknown sweep axis '" + std::string(text) + "' (expected phi, eta, batch, mechanism or statistic)");
}

void ExperimentPlan::validate() const {
  if (values.empty()) throw ConfigError("sweep.values: must not be empty");
  if (seeds.empty()) throw ConfigError("sweep: need at least one seed");
  for (std::size_t i = 0; i < values.size(); ++i) config_for(i, seeds.front()).validate();
}

TrainConfig ExperimentPlan::config_for(std::size_t value_index, std::uint64_t seed) const {
  TrainConfig c = base;
  c.seed = seed;
  const std::string& v = values.at(value_index);
  auto number = [&](const char* what) {
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
      throw ConfigError(std::string("sweep value '") + v + "' is not a valid " + what);
    }
    return out;
  };
  switch (axis) {
    case SweepAxis::Phi:
      c.balance.mechanism = MechanismKind::Phi;
      c.balance.phi = PotentialSpec::parse(v);
      break;
    case SweepAxis::Eta: c.balance.eta = number("eta"); break;
    case SweepAxis::BatchSize: {
      const double b = number("batch size");
      if (!(b >= 1.0) || b != std::floor(b)) throw ConfigError("sweep value '" + v + "' is not a valid batch size");
      c.batch = static_cast<std::size_t>(b);
      break;
    }
    case SweepAxis::Mechanism: c.balance.mechanism = parse_mechanism_kind(v); break;
    case SweepAxis::Statistic: c.balance.statistic = parse_statistic(v); break;
  }
  return c;
}

ParsedConfig parse_config_text(std::string_view text, std::string_view origin) {
  const auto doc = Parser(text, origin).parse();
  TrainConfig base = read_train_config(doc, origin);
  const Section* sweep_section = find_section(doc, "sweep");
  if (!sweep_section) return base;

  ExperimentPlan plan;
  plan.base = base;
  Reader sweep(sweep_section, "sweep", origin);
  bool has_axis = false, has_values = false, has_seeds = false;
  sweep.with("axis", [&](const Value& v) {
    plan.axis = parse_sweep_axis(Reader::as_string(v));
    has_axis = true;
  });
  sweep.with("values", [&](const Value& v) {
    if (v.kind != Value::Kind::Array) throw ConfigError("expected an array");
    plan.values.clear();
    for (const auto& item : v.items) {
      if (item.kind != Value::Kind::String && item.kind != Value::Kind::Number) {
        throw ConfigError("sweep values must be strings or numbers");
      }
      plan.values.push_back(item.text);
    }
    has_values = true;
  });
  sweep.with("seeds", [&](const Value& v) {
    if (v.kind != Value::Kind::Array) throw ConfigError("expected an array of seeds");
    plan.seeds.clear();
    for (const auto& item : v.items) plan.seeds.push_back(Reader::as_uint(item));
    has_seeds = true;
  });
  std::size_t repeats = 0;
  bool has_repeats = false;
  sweep.with("repeats", [&](const Value& v) {
    repeats = Reader::as_uint(v);
    if (repeats == 0) throw ConfigError("sweep.repeats must be at least 1");
    has_repeats = true;
  });
  std::string out;
  sweep.string("out", out);
  sweep.finish();

  if (!has_axis) throw ConfigError(std::string(origin) + ": sweep.axis is required");
  if (!has_values) throw ConfigError(std::string(origin) + ": sweep.values is required");
  if (has_repeats) {
    if (has_seeds) throw ConfigError(std::string(origin) + ": give either sweep.seeds or sweep.repeats, not both");
    plan.seeds.clear();
    for (std::size_t r = 0; r < repeats; ++r) plan.seeds.push_back(base.seed + r);
  } else if (!has_seeds) {
    plan.seeds = {base.seed};
  }
  if (!out.empty()) plan.out_dir = out;
  try {
    plan.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(origin) + ": " + e.what());
  }
  return plan;
}

ParsedConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), path.string());
}

std::string write_config(const TrainConfig& c) {
  std::ostringstream os;
  os << "[model]\n";
  append(os, "layers", std::to_string(c.model.layers));
  append(os, "experts", std::to_string(c.model.experts));
  append(os, "top_k", std::to_string(c.model.top_k));
  append(os, "dim", std::to_string(c.model.dim));
  append(os, "ffn_dim", std::to_string(c.model.ffn_dim));

  os << "\n[balance]\n";
  append(os, "mechanism", toml_string(mechanism_kind_name(c.balance.mechanism)));
  append(os, "phi", toml_string(c.balance.phi.to_string()));
  append(os, "eta", format_double(c.balance.eta));
  append(os, "alpha", format_double(c.balance.alpha));
  append(os, "statistic", toml_string(statistic_name(c.balance.statistic)));
  append(os, "bias_step", format_double(c.balance.bias_step));

  os << "\n[optim]\n";
  if (const auto* s = std::get_if<Sgd>(&c.optimizer)) {
    append(os, "kind", toml_string("sgd"));
    append(os, "lr", format_double(s->lr));
  } else {
    const auto& a = std::get<AdamW>(c.optimizer);
    append(os, "kind", toml_string("adamw"));
    append(os, "lr", format_double(a.lr));
    append(os, "beta1", format_double(a.beta1));
    append(os, "beta2", format_double(a.beta2));
    append(os, "eps", format_double(a.eps));
    append(os, "weight_decay", format_double(a.weight_decay));
    append(os, "warmup_steps", std::to_string(a.warmup_steps));
    append(os, "cosine_total_steps", std::to_string(a.cosine_total_steps));
  }

  os << "\n[corpus]\n";
  append(os, "mixture", number_list(c.corpus.mixture));
  append(os, "center_std", format_double(c.corpus.center_std));
  append(os, "cluster_scale", format_double(c.corpus.cluster_scale));
  append(os, "label_rule", toml_string(label_rule_name(c.corpus.label_rule)));
  append(os, "drift", toml_string(drift_kind_name(c.corpus.drift)));
  append(os, "drift_to", number_list(c.corpus.drift_to));
  append(os, "drift_steps", std::to_string(c.corpus.drift_steps));

  os << "\n[train]\n";
  append(os, "batch", std::to_string(c.batch));
  append(os, "steps", std::to_string(c.steps));
  append(os, "eval_every", std::to_string(c.eval_every));
  append(os, "seed", std::to_string(c.seed));
  append(os, "load_window", std::to_string(c.load_window));
  append(os, "validation_tokens", std::to_string(c.validation_tokens));
  append(os, "checked", c.checked ? "true" : "false");
  return os.str();
}

std::string write_config(const ExperimentPlan& plan) {
  std::ostringstream os;
  os << write_config(plan.base) << "\n[sweep]\n";
  append(os, "axis", toml_string(sweep_axis_name(plan.axis)));
  std::string values = "[";
  for (std::size_t i = 0; i < plan.values.size(); ++i) values += (i ? ", " : "") + toml_string(plan.values[i]);
  append(os, "values", values + "]");
  std::string seeds = "[";
  for (std::size_t i = 0; i < plan.seeds.size(); ++i) seeds += (i ? ", " : "") + std::to_string(plan.seeds[i]);
  append(os, "seeds", seeds + "]");
  append(os, "out", toml_string(plan.out_dir.generic_string()));
  return os.str();
}

}  // namespace phibal
