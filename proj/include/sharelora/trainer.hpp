#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "sharelora/model.hpp"
#include "sharelora/optimizer.hpp"
#include "sharelora/tasks.hpp"

namespace sharelora {

struct TrainHyper {
  AdamWHyper adam;
  std::size_t steps = 500;
  double warmup_ratio = 0.06;
  std::size_t eval_interval = 50;
  double divergence_threshold = 1e4;
};

nlohmann::json to_json(const TrainHyper& hyper);

struct MetricRow {
  std::size_t step;
  std::string split;   // train | eval
  std::string metric;  // loss | accuracy | lr
  double value;
};

struct MetricsLog {
  std::vector<MetricRow> rows;
  std::size_t best_step = 0;
  double best_eval_loss = 0.0;
  double final_eval_loss = 0.0;
  double final_eval_accuracy = 0.0;
  // Eval loss at every eval point, in step order.
  std::vector<double> eval_losses;

  // Header `step,split,metric,value`; values printed with 17 significant digits.
  void write_csv(std::ostream& os) const;
};

// Value copy of a model's trainable tensors, restorable in place.
class ParameterSnapshot {
 public:
  ParameterSnapshot() = default;
  explicit ParameterSnapshot(const std::vector<NamedTensor>& params);
  void restore(std::vector<NamedTensor>& params) const;
  const std::vector<std::pair<std::string, std::vector<double>>>& values() const { return values_; }
  bool empty() const { return values_.empty(); }

 private:
  std::vector<std::pair<std::string, std::vector<double>>> values_;
};

struct TrainResult {
  MetricsLog log;
  ParameterSnapshot best;
};

/// Trains the model's trainable parameters on `task` and leaves the model at
/// its best checkpoint (lowest eval loss; evals at step 0, every
/// eval_interval steps and the last step). Data order depends only on the
/// task seeds and `seed`, never on the scheme.
TrainResult run_training(TinyTransformer& model, const Task& task, const TrainHyper& hyper, std::uint64_t seed);

struct Phase {
  std::string task;  // key into PhasePlan::tasks
  std::size_t steps = 0;
};

struct PhasePlan {
  std::vector<TaskSpec> tasks;
  std::vector<Phase> phases;
  // Task names evaluated after every phase; empty means all tasks in declaration order.
  std::vector<std::string> eval_tasks;
};

struct RetentionMatrix {
  std::vector<std::string> phases;  // phase labels "1:copy", ...
  std::vector<std::string> tasks;   // evaluated task names
  std::vector<std::vector<double>> accuracy;  // [phase][task]
  std::vector<std::vector<double>> loss;      // [phase][task]
  // accuracy[last][t] - accuracy[first phase that trained t][t]; empty when t was never trained.
  std::vector<std::optional<double>> backward_transfer;
  std::vector<std::optional<double>> backward_transfer_loss;

  nlohmann::json to_json() const;
};

// Signed per-task difference candidate - baseline of backward transfer (accuracy and loss).
struct RetentionDelta {
  std::string baseline;
  std::string candidate;
  std::vector<std::string> tasks;
  std::vector<std::optional<double>> accuracy;
  std::vector<std::optional<double>> loss;

  nlohmann::json to_json() const;
};

RetentionDelta retention_delta(const RetentionMatrix& baseline, const RetentionMatrix& candidate,
                               std::string baseline_label, std::string candidate_label);

// Each phase warm-starts from the previous phase's best checkpoint with a fresh optimizer.
RetentionMatrix run_continual(TinyTransformer& model, const PhasePlan& plan, const TrainHyper& hyper,
                              std::uint64_t seed, std::vector<MetricsLog>* phase_logs = nullptr);

}  // namespace sharelora
