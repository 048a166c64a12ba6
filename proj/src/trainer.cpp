// SPDX-License-Identifier: Apache-2.0
#include "phibal/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <random>

#include "phibal/serialize.hpp"

namespace phibal {

namespace {

constexpr int kSnapshotVersion = 1;

std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex16(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

nlohmann::json optimizer_json(const OptimizerConfig& opt) {
  if (const auto* s = std::get_if<Sgd>(&opt)) return {{"kind", "sgd"}, {"lr", s->lr}};
  const auto& a = std::get<AdamW>(opt);
  return {{"kind", "adamw"},          {"lr", a.lr},
          {"beta1", a.beta1},         {"beta2", a.beta2},
          {"eps", a.eps},             {"weight_decay", a.weight_decay},
          {"warmup_steps", a.warmup_steps}, {"cosine_total_steps", a.cosine_total_steps}};
}

std::size_t argmax_row(const Tensor& t, std::size_t r) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < t.cols(); ++c)
    if (t.at(r, c) > t.at(r, best)) best = c;
  return best;
}

}  // namespace

std::string_view mechanism_kind_name(MechanismKind kind) noexcept {
  switch (kind) {
    case MechanismKind::Phi: return "phi";
    case MechanismKind::StMoe: return "st_moe";
    case MechanismKind::LossFree: return "loss_free";
    default: return "none";
  }
}

MechanismKind parse_mechanism_kind(std::string_view text) {
  if (text == "phi") return MechanismKind::Phi;
  if (text == "st_moe") return MechanismKind::StMoe;
  if (text == "loss_free") return MechanismKind::LossFree;
  if (text == "none") return MechanismKind::None;
  throw ConfigError("unknown mechanism '" + std::string(text) + "' (expected phi, st_moe, loss_free or none)");
}

std::string_view drift_kind_name(DriftKind kind) noexcept {
  switch (kind) {
    case DriftKind::Constant: return "constant";
    case DriftKind::Alternating: return "alternating";
    default: return "linear";
  }
}

DriftKind parse_drift_kind(std::string_view text) {
  if (text == "constant") return DriftKind::Constant;
  if (text == "alternating") return DriftKind::Alternating;
  if (text == "linear") return DriftKind::Linear;
  throw ConfigError("unknown drift '" + std::string(text) + "' (expected constant, alternating or linear)");
}

void TrainConfig::validate() const {
  if (model.layers > 0) {
    if (model.experts < 2) throw ConfigError("model.experts: need at least 2 experts");
    if (model.top_k < 1 || model.top_k > model.experts) {
      throw ConfigError("model.top_k: k=" + std::to_string(model.top_k) + " must lie in [1, E=" +
                        std::to_string(model.experts) + "]");
    }
  }
  if (model.dim == 0 || model.ffn_dim == 0) throw ConfigError("model: dimensions must be positive");
  if (steps == 0) throw ConfigError("train.steps: must be positive");
  if (batch == 0) throw ConfigError("train.batch: must be positive");
  if (eval_every == 0 || eval_every > steps) throw ConfigError("train.eval_every: must lie in [1, steps]");
  if (load_window == 0) throw ConfigError("train.load_window: must be positive");
  if (validation_tokens == 0) throw ConfigError("train.validation_tokens: must be positive");
  if (!(balance.eta > 0.0 && balance.eta <= 1.0)) throw ConfigError("balance.eta: must lie in (0, 1]");
  if (!(balance.alpha >= 0.0) || !std::isfinite(balance.alpha)) throw ConfigError("balance.alpha: must be nonnegative");
  if (!(balance.bias_step > 0.0)) throw ConfigError("balance.bias_step: must be positive");
  phibal::validate(optimizer);
  corpus_spec();
}

CorpusSpec TrainConfig::corpus_spec() const {
  CorpusSpec spec =
      CorpusSpec::gaussian(corpus.mixture, model.dim, corpus.center_std, corpus.cluster_scale, corpus.label_rule, seed);
  switch (corpus.drift) {
    case DriftKind::Constant: return spec;
    case DriftKind::Alternating: return drift_mixture(std::move(spec), schedule::Alternating{});
    default:
      return drift_mixture(std::move(spec), schedule::Linear{corpus.mixture, corpus.drift_to, corpus.drift_steps});
  }
}

BalancerState TrainConfig::make_balancer() const {
  Mechanism mech;
  switch (balance.mechanism) {
    case MechanismKind::Phi:
    case MechanismKind::None: mech = PhiBalancing{balance.phi}; break;
    case MechanismKind::StMoe: mech = StMoe{}; break;
    case MechanismKind::LossFree: mech = LossFree{{}, balance.bias_step}; break;
  }
  return BalancerState(model.experts, balance.eta, balance.alpha, balance.statistic, std::move(mech));
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j;
  j["model"] = {{"layers", model.layers}, {"experts", model.experts}, {"top_k", model.top_k},
                {"dim", model.dim},       {"ffn_dim", model.ffn_dim}};
  j["balance"] = {{"mechanism", mechanism_kind_name(balance.mechanism)},
                  {"phi", balance.phi.to_string()},
                  {"eta", balance.eta},
                  {"alpha", balance.alpha},
                  {"statistic", statistic_name(balance.statistic)},
                  {"bias_step", balance.bias_step}};
  j["optim"] = optimizer_json(optimizer);
  j["corpus"] = {{"mixture", corpus.mixture},
                 {"center_std", corpus.center_std},
                 {"cluster_scale", corpus.cluster_scale},
                 {"label_rule", label_rule_name(corpus.label_rule)},
                 {"drift", drift_kind_name(corpus.drift)},
                 {"drift_to", corpus.drift_to},
                 {"drift_steps", corpus.drift_steps}};
  j["train"] = {{"batch", batch},
                {"steps", steps},
                {"eval_every", eval_every},
                {"seed", seed},
                {"load_window", load_window},
                {"validation_tokens", validation_tokens},
                {"checked", checked}};
  return j;
}

std::string TrainConfig::hash() const {
  const std::string text = to_json().dump();
  return hex16(fnv1a(text.data(), text.size()));
}

ModelParams ModelParams::init(const TrainConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed ^ 0x5851f42d4c957f2dULL);
  ModelParams p;
  for (std::size_t l = 0; l < config.model.layers; ++l) {
    p.layers.push_back(MoeLayerParams::init(config.model.experts, config.model.top_k, config.model.dim,
                                            config.model.ffn_dim, rng));
  }
  const std::size_t classes = config.corpus.mixture.size();
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(config.model.dim)));
  std::vector<double> head(classes * config.model.dim);
  for (double& v : head) v = dist(rng);
  p.head = Tensor::matrix(classes, config.model.dim, std::move(head));
  return p;
}

std::vector<Tensor*> ModelParams::tensors() {
  std::vector<Tensor*> out;
  for (auto& layer : layers) {
    out.push_back(&layer.router);
    for (auto& ex : layer.experts) {
      out.push_back(&ex.w1);
      out.push_back(&ex.w2);
    }
  }
  out.push_back(&head);
  return out;
}

std::vector<const Tensor*> ModelParams::tensors() const {
  std::vector<const Tensor*> out;
  for (Tensor* t : const_cast<ModelParams*>(this)->tensors()) out.push_back(t);
  return out;
}

std::vector<ad::Var> ForwardPass::leaves() const {
  std::vector<ad::Var> out;
  for (const auto& layer : layers) {
    out.push_back(layer.router);
    for (std::size_t e = 0; e < layer.w1.size(); ++e) {
      out.push_back(layer.w1[e]);
      out.push_back(layer.w2[e]);
    }
  }
  out.push_back(head);
  return out;
}

ad::Var task_loss(ad::Var output, const Batch& batch, LabelRule rule) {
  if (rule == LabelRule::DomainId) return ad::cross_entropy(output, batch.labels);
  if (batch.targets.shape() != output.value().shape()) {
    throw ShapeError("task_loss: regression targets " + shape_string(batch.targets.shape()) + " vs output " +
                     shape_string(output.value().shape()));
  }
  ad::Var diff = ad::sub(output, output.tape().constant(batch.targets));
  return ad::scale(ad::mean(ad::mul(diff, diff)), 0.5);
}

ForwardPass forward(ad::Tape& tape, const ModelParams& params, const Batch& batch, LabelRule rule,
                    std::span<const std::vector<double>> biases, const std::vector<Selections>* forced,
                    bool requires_grad) {
  const std::size_t layers = params.layers.size();
  if (!biases.empty() && biases.size() != layers) throw ShapeError("forward: need one bias entry per layer");
  if (forced && forced->size() != layers) throw ShapeError("forward: need forced selections for every layer");

  ForwardPass fp;
  ad::Var h = tape.constant(batch.x);
  for (std::size_t l = 0; l < layers; ++l) {
    fp.layers.push_back(bind(tape, params.layers[l], requires_grad));
    std::span<const double> bias = biases.empty() ? std::span<const double>{} : std::span<const double>(biases[l]);
    fp.routing.push_back(route(fp.layers.back(), h, bias, forced ? &(*forced)[l] : nullptr));
    h = ad::add(h, moe_forward(fp.layers.back(), h, fp.routing.back()));
  }
  fp.head = tape.leaf(params.head, requires_grad);
  fp.output = ad::linear(h, fp.head);
  fp.task_loss = task_loss(fp.output, batch, rule);
  return fp;
}

double RunRecord::terminal_max_vio() const {
  if (rows.empty()) throw DomainError("run record is empty");
  const std::uint64_t last = rows.back().step;
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows)
    if (r.step == last) {
      sum += r.max_vio;
      ++n;
    }
  return sum / static_cast<double>(n);
}

double RunRecord::terminal_gini() const {
  if (rows.empty()) throw DomainError("run record is empty");
  const std::uint64_t last = rows.back().step;
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows)
    if (r.step == last) {
      sum += r.gini;
      ++n;
    }
  return sum / static_cast<double>(n);
}

double RunRecord::terminal_task_loss() const {
  if (rows.empty()) throw DomainError("run record is empty");
  return rows.back().task_loss;
}

double RunRecord::terminal_accuracy() const {
  if (rows.empty()) throw DomainError("run record is empty");
  return rows.back().accuracy;
}

std::string RunRecord::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& r : rows) {
    h = fnv1a(&r.step, sizeof r.step, h);
    h = fnv1a(&r.layer, sizeof r.layer, h);
    for (double v : {r.task_loss, r.accuracy, r.max_vio, r.gini}) h = fnv1a(&v, sizeof v, h);
    h = fnv1a(r.m_hash.data(), r.m_hash.size(), h);
  }
  return hex16(h);
}

std::string hash_doubles(std::span<const double> values) {
  return hex16(fnv1a(values.data(), values.size() * sizeof(double)));
}

nlohmann::json to_json(const RunRow& row) {
  // Non-finite doubles have no JSON literal; the bit pattern is stored instead.
  auto bits = [](double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, sizeof u);
    return u;
  };
  return {{"step", row.step},         {"layer", row.layer}, {"task_loss", bits(row.task_loss)},
          {"accuracy", bits(row.accuracy)}, {"max_vio", bits(row.max_vio)}, {"gini", bits(row.gini)},
          {"m_hash", row.m_hash}};
}

RunRow run_row_from_json(const nlohmann::json& j) {
  auto real = [&](const char* key) {
    const std::uint64_t u = j.at(key).get<std::uint64_t>();
    double v;
    std::memcpy(&v, &u, sizeof v);
    return v;
  };
  return {j.at("step").get<std::uint64_t>(), j.at("layer").get<std::size_t>(), real("task_loss"), real("accuracy"),
          real("max_vio"), real("gini"), j.at("m_hash").get<std::string>()};
}

TrainingDiverged::TrainingDiverged(std::uint64_t step, nlohmann::json snapshot)
    : NumericalError("non-finite loss at step " + std::to_string(step)), step_(step), snapshot_(std::move(snapshot)) {}

Trainer::Trainer(TrainConfig config)
    : config_((config.validate(), std::move(config))),
      corpus_(config_.corpus_spec()),
      validation_(sample_validation(corpus_, config_.validation_tokens)),
      params_(ModelParams::init(config_)),
      optimizer_(config_.optimizer) {
  for (std::size_t l = 0; l < config_.model.layers; ++l) {
    balancers_.push_back(config_.make_balancer());
    windows_.emplace_back(config_.model.experts, config_.load_window);
  }
}

double Trainer::step() {
  const Batch batch = sample_batch(corpus_, config_.batch, step_);
  const std::size_t layers = balancers_.size();
  std::vector<std::vector<double>> biases;
  for (const auto& b : balancers_) biases.emplace_back(b.bias().begin(), b.bias().end());

  ad::Tape tape(config_.checked);
  ForwardPass fp = forward(tape, params_, batch, config_.corpus.label_rule, biases);

  std::vector<ad::Var> aux;
  for (std::size_t l = 0; l < layers; ++l) {
    const RoutingBatch& rb = fp.routing[l].batch;
    if (config_.balance.statistic == Statistic::ProbabilityEma) {
      balancers_[l].ema_update(rb.p_bar);
    } else {
      balancers_[l].ema_update(rb.frequency_per_token(config_.model.experts));
    }
    switch (config_.balance.mechanism) {
      case MechanismKind::Phi: aux.push_back(phi_aux_loss(balancers_[l], fp.routing[l].p_bar)); break;
      case MechanismKind::StMoe: aux.push_back(stmoe_aux_loss(rb.f, fp.routing[l].p_bar)); break;
      case MechanismKind::LossFree:
      case MechanismKind::None: break;
    }
  }
  ad::Var total = total_loss(fp.task_loss, aux, config_.balance.alpha, config_.model.experts);
  const double task = fp.task_loss.value().item();
  if (!std::isfinite(total.value().item())) throw TrainingDiverged(step_, snapshot());

  const ad::Gradients grads = tape.backward(total);
  std::vector<Tensor> g;
  for (ad::Var leaf : fp.leaves()) g.push_back(grads.contains(leaf) ? grads[leaf] : Tensor::zeros(leaf.shape()));
  const auto tensors = params_.tensors();
  optimizer_.step(tensors, g);

  for (std::size_t l = 0; l < layers; ++l) {
    const RoutingBatch& rb = fp.routing[l].batch;
    if (config_.balance.mechanism == MechanismKind::LossFree) balancers_[l].loss_free_step(rb.f);
    windows_[l].push(rb.loads(config_.model.experts));
  }
  ++step_;
  if (step_ % config_.eval_every == 0 || step_ == config_.steps) log_rows();
  return task;
}

const RunRecord& Trainer::run() {
  while (step_ < config_.steps) step();
  return record_;
}

Evaluation Trainer::evaluate() const {
  std::vector<std::vector<double>> biases;
  for (const auto& b : balancers_) biases.emplace_back(b.bias().begin(), b.bias().end());
  ad::Tape tape;
  ForwardPass fp = forward(tape, params_, validation_, config_.corpus.label_rule, biases, nullptr, false);
  Evaluation ev;
  ev.task_loss = fp.task_loss.value().item();
  if (config_.corpus.label_rule == LabelRule::DomainId) {
    const Tensor& out = fp.output.value();
    std::vector<std::size_t> pred(out.rows());
    for (std::size_t i = 0; i < out.rows(); ++i) pred[i] = argmax_row(out, i);
    ev.accuracy = accuracy(pred, validation_.labels);
  } else {
    ev.accuracy = std::numeric_limits<double>::quiet_NaN();
  }
  for (auto& r : fp.routing) ev.routing.push_back(std::move(r.batch));
  return ev;
}

void Trainer::log_rows() {
  const Evaluation ev = evaluate();
  if (balancers_.empty()) {
    record_.rows.push_back({step_, 0, ev.task_loss, ev.accuracy, 0.0, 0.0, ""});
    return;
  }
  for (std::size_t l = 0; l < balancers_.size(); ++l) {
    const auto totals = windows_[l].totals();
    record_.rows.push_back(
        {step_, l, ev.task_loss, ev.accuracy, max_vio(totals), gini(totals), hash_doubles(balancers_[l].m())});
  }
}

nlohmann::json Trainer::snapshot() const {
  nlohmann::json j;
  j["version"] = kSnapshotVersion;
  j["config_hash"] = config_.hash();
  j["step"] = step_;
  j["rng"] = {{"seed", config_.seed}, {"next_step", step_}};
  j["params"] = nlohmann::json::array();
  for (const Tensor* t : params_.tensors()) j["params"].push_back(tensor_to_json(*t));
  j["optimizer"] = optimizer_.to_json();
  j["balancers"] = nlohmann::json::array();
  for (const auto& b : balancers_) j["balancers"].push_back(b.to_json());
  j["windows"] = nlohmann::json::array();
  for (const auto& w : windows_) {
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& h : w.history()) hist.push_back(h);
    j["windows"].push_back(hist);
  }
  j["rows"] = nlohmann::json::array();
  for (const auto& r : record_.rows) j["rows"].push_back(to_json(r));
  return j;
}

Trainer Trainer::resume(TrainConfig config, const nlohmann::json& snap) {
  Trainer t(std::move(config));
  try {
    if (snap.at("version").get<int>() != kSnapshotVersion) throw ConfigError("snapshot: unsupported version");
    if (snap.at("config_hash").get<std::string>() != t.config_.hash()) {
      throw ConfigError("snapshot: taken under a different config");
    }
    t.step_ = snap.at("step").get<std::uint64_t>();
    auto tensors = t.params_.tensors();
    const auto& params = snap.at("params");
    if (params.size() != tensors.size()) throw ConfigError("snapshot: parameter count differs");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      Tensor loaded = tensor_from_json(params[i]);
      if (loaded.shape() != tensors[i]->shape()) throw ConfigError("snapshot: parameter shape differs");
      *tensors[i] = std::move(loaded);
    }
    t.optimizer_.load_json(snap.at("optimizer"));
    t.balancers_.clear();
    for (const auto& b : snap.at("balancers")) t.balancers_.push_back(BalancerState::from_json(b));
    const auto& windows = snap.at("windows");
    if (windows.size() != t.windows_.size()) throw ConfigError("snapshot: layer count differs");
    for (std::size_t l = 0; l < t.windows_.size(); ++l) {
      LoadWindow w(t.config_.model.experts, t.config_.load_window);
      for (const auto& h : windows[l]) w.push(h.get<std::vector<double>>());
      t.windows_[l] = std::move(w);
    }
    for (const auto& r : snap.at("rows")) t.record_.rows.push_back(run_row_from_json(r));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("snapshot: ") + e.what());
  }
  return t;
}

RunRecord train(const TrainConfig& config) {
  Trainer t(config);
  return t.run();
}

TokenBudget compute_token_budget(double compute) {
  if (!(compute > 0.0) || !std::isfinite(compute)) throw DomainError("compute_token_budget: C must be positive");
  TokenBudget b;
  b.params = 0.1915 * std::pow(compute, 0.5095);
  b.tokens = 5.2232 * std::pow(compute, 0.4905);
  b.tokens_per_param = b.tokens / b.params;
  return b;
}

}  // namespace phibal
