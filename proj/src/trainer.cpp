#include "sharelora/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <map>

#include "sharelora/errors.hpp"

namespace sharelora {

nlohmann::json to_json(const TrainHyper& h) {
  return {{"lr", h.adam.lr},
          {"beta1", h.adam.beta1},
          {"beta2", h.adam.beta2},
          {"eps", h.adam.eps},
          {"weight_decay", h.adam.weight_decay},
          {"steps", h.steps},
          {"warmup_ratio", h.warmup_ratio},
          {"eval_interval", h.eval_interval},
          {"divergence_threshold", h.divergence_threshold}};
}

void MetricsLog::write_csv(std::ostream& os) const {
  os << "step,split,metric,value\n";
  char buf[64];
  for (const MetricRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g", r.value);
    os << r.step << ',' << r.split << ',' << r.metric << ',' << buf << '\n';
  }
}

ParameterSnapshot::ParameterSnapshot(const std::vector<NamedTensor>& params) {
  for (const NamedTensor& p : params) values_.emplace_back(p.name, std::vector<double>(p.tensor.data().begin(), p.tensor.data().end()));
}

void ParameterSnapshot::restore(std::vector<NamedTensor>& params) const {
  if (params.size() != values_.size()) throw ContractError("snapshot does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].tensor.mutable_data();
    const auto& [name, src] = values_[i];
    if (name != params[i].name || src.size() != dst.size()) {
      throw ContractError("snapshot entry '" + name + "' does not match parameter '" + params[i].name + "'");
    }
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

TrainResult run_training(TinyTransformer& model, const Task& task, const TrainHyper& hyper, std::uint64_t seed) {
  std::vector<NamedTensor> params = model.trainable_parameters();
  if (params.empty()) throw ContractError("run_training: model has no trainable parameters");
  if (hyper.steps == 0 || hyper.eval_interval == 0) throw ConfigError("steps and eval_interval must be >= 1");
  AdamW opt(params, hyper.adam);
  std::seed_seq seq{seed, task.spec().train_seed};
  std::mt19937_64 rng(seq);

  TrainResult result;
  MetricsLog& log = result.log;
  auto record_eval = [&](std::size_t step) {
    const EvalResult ev = evaluate(model, task);
    log.rows.push_back({step, "eval", "loss", ev.loss});
    log.rows.push_back({step, "eval", "accuracy", ev.accuracy});
    log.eval_losses.push_back(ev.loss);
    log.final_eval_loss = ev.loss;
    log.final_eval_accuracy = ev.accuracy;
    if (step == 0 || ev.loss < log.best_eval_loss) {
      log.best_eval_loss = ev.loss;
      log.best_step = step;
      result.best = ParameterSnapshot(params);
    }
  };

  record_eval(0);
  double window_loss = 0.0;
  std::size_t window = 0;
  for (std::size_t step = 1; step <= hyper.steps; ++step) {
    const Batch batch = task.sample_train(rng);
    const Tensor loss = model.loss(batch.tokens, batch.targets);
    const double value = loss.item();
    if (!std::isfinite(value) || value > hyper.divergence_threshold) {
      throw DivergenceError("training diverged at step " + std::to_string(step) + ": loss " + std::to_string(value));
    }
    loss.backward();
    const double lr = linear_warmup_schedule(step, hyper.warmup_ratio, hyper.steps, hyper.adam.lr);
    opt.step(lr);
    opt.zero_grad();
    window_loss += value;
    ++window;
    if (step % hyper.eval_interval == 0 || step == hyper.steps) {
      log.rows.push_back({step, "train", "loss", window_loss / static_cast<double>(window)});
      log.rows.push_back({step, "train", "lr", lr});
      window_loss = 0.0;
      window = 0;
      record_eval(step);
    }
  }
  result.best.restore(params);
  return result;
}

nlohmann::json RetentionMatrix::to_json() const {
  auto opt_map = [this](const std::vector<std::optional<double>>& values) {
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t t = 0; t < tasks.size(); ++t) j[tasks[t]] = values[t] ? nlohmann::json(*values[t]) : nlohmann::json();
    return j;
  };
  return {{"schema_version", 1},
          {"metric", "accuracy"},
          {"phases", phases},
          {"tasks", tasks},
          {"accuracy", accuracy},
          {"loss", loss},
          {"backward_transfer", opt_map(backward_transfer)},
          {"backward_transfer_loss", opt_map(backward_transfer_loss)}};
}

RetentionDelta retention_delta(const RetentionMatrix& baseline, const RetentionMatrix& candidate,
                               std::string baseline_label, std::string candidate_label) {
  if (baseline.tasks != candidate.tasks || baseline.phases != candidate.phases) {
    throw ContractError("retention_delta: matrices come from different phase plans");
  }
  RetentionDelta d;
  d.baseline = std::move(baseline_label);
  d.candidate = std::move(candidate_label);
  d.tasks = baseline.tasks;
  for (std::size_t t = 0; t < d.tasks.size(); ++t) {
    auto diff = [t](const auto& a, const auto& b) -> std::optional<double> {
      if (!a[t] || !b[t]) return std::nullopt;
      return *b[t] - *a[t];
    };
    d.accuracy.push_back(diff(baseline.backward_transfer, candidate.backward_transfer));
    d.loss.push_back(diff(baseline.backward_transfer_loss, candidate.backward_transfer_loss));
  }
  return d;
}

nlohmann::json RetentionDelta::to_json() const {
  nlohmann::json acc = nlohmann::json::object(), los = nlohmann::json::object();
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    acc[tasks[t]] = accuracy[t] ? nlohmann::json(*accuracy[t]) : nlohmann::json();
    los[tasks[t]] = loss[t] ? nlohmann::json(*loss[t]) : nlohmann::json();
  }
  return {{"schema_version", 1},
          {"baseline", baseline},
          {"candidate", candidate},
          {"backward_transfer_accuracy_delta", acc},
          {"backward_transfer_loss_delta", los}};
}

RetentionMatrix run_continual(TinyTransformer& model, const PhasePlan& plan, const TrainHyper& hyper,
                              std::uint64_t seed, std::vector<MetricsLog>* phase_logs) {
  if (plan.phases.size() < 2) throw ConfigError("continual plan needs at least 2 phases");
  std::map<std::string, Task> tasks;
  std::vector<std::string> order;
  for (const TaskSpec& spec : plan.tasks) {
    if (!tasks.try_emplace(spec.name, spec, model.spec()).second) throw ConfigError("duplicate task name '" + spec.name + "'");
    order.push_back(spec.name);
  }
  RetentionMatrix m;
  m.tasks = plan.eval_tasks.empty() ? order : plan.eval_tasks;
  for (const std::string& t : m.tasks) {
    if (!tasks.contains(t)) throw ConfigError("eval task '" + t + "' is not defined");
  }
  std::map<std::string, std::size_t> first_trained;
  for (std::size_t p = 0; p < plan.phases.size(); ++p) {
    const Phase& phase = plan.phases[p];
    auto it = tasks.find(phase.task);
    if (it == tasks.end()) throw ConfigError("phase " + std::to_string(p + 1) + " uses undefined task '" + phase.task + "'");
    TrainHyper h = hyper;
    h.steps = phase.steps;
    TrainResult r = run_training(model, it->second, h, seed * 1000003ull + p);
    if (phase_logs) phase_logs->push_back(r.log);
    first_trained.try_emplace(phase.task, p);
    m.phases.push_back(std::to_string(p + 1) + ":" + phase.task);
    std::vector<double> acc, loss;
    for (const std::string& t : m.tasks) {
      const EvalResult ev = evaluate(model, tasks.at(t));
      acc.push_back(ev.accuracy);
      loss.push_back(ev.loss);
    }
    m.accuracy.push_back(std::move(acc));
    m.loss.push_back(std::move(loss));
  }
  const std::size_t last = m.phases.size() - 1;
  for (std::size_t t = 0; t < m.tasks.size(); ++t) {
    auto it = first_trained.find(m.tasks[t]);
    if (it == first_trained.end()) {
      m.backward_transfer.emplace_back();
      m.backward_transfer_loss.emplace_back();
    } else {
      m.backward_transfer.emplace_back(m.accuracy[last][t] - m.accuracy[it->second][t]);
      m.backward_transfer_loss.emplace_back(m.loss[last][t] - m.loss[it->second][t]);
    }
  }
  return m;
}

}  // namespace sharelora
