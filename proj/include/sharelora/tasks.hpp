#pragma once

#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "sharelora/model.hpp"

namespace sharelora {

enum class TaskKind { kCopyLm, kModularArithmeticLm, kSyntheticClassification };

std::string_view task_kind_name(TaskKind kind);
TaskKind parse_task_kind(std::string_view name);

/// Desk-scale task description.
///
/// copy_lm:                   x1..xL SEP x1..xL, loss on the copied half.
/// modular_arithmetic_lm:     `length` problems a b c with c = (a + b) mod modulus,
///                            loss on each c.
/// synthetic_classification:  x1..xL SEP -> class (x1 + xL) mod n_classes at SEP.
///
/// Eval examples are drawn from eval_seed and never appear in training batches.
struct TaskSpec {
  std::string name;
  TaskKind kind = TaskKind::kCopyLm;
  std::size_t alphabet = 16;
  std::size_t length = 6;
  std::size_t modulus = 11;
  std::size_t n_classes = 4;
  std::size_t batch_size = 16;
  std::size_t eval_size = 128;
  std::uint64_t train_seed = 1;
  std::uint64_t eval_seed = 2;
};

nlohmann::json to_json(const TaskSpec& task);

struct Batch {
  TokenBatch tokens;
  std::vector<int> targets;  // kIgnoreIndex where no prediction is scored
};

class Task {
 public:
  // Validates the task against the model's vocabulary and context length.
  Task(TaskSpec spec, const ModelSpec& model);

  const TaskSpec& spec() const { return spec_; }
  std::size_t seq_len() const { return seq_len_; }

  // Fresh training batch; never contains an eval example.
  Batch sample_train(std::mt19937_64& rng) const;
  // The fixed eval set split into batches of batch_size.
  const std::vector<Batch>& eval_batches() const { return eval_batches_; }
  bool is_eval_example(const std::vector<int>& sequence) const { return eval_keys_.contains(sequence); }

  // Full token sequence of one example (inputs plus final target).
  std::vector<int> draw_sequence(std::mt19937_64& rng) const;

 private:
  void split(const std::vector<int>& sequence, std::vector<int>& inputs, std::vector<int>& targets) const;
  Batch make_batch(const std::vector<std::vector<int>>& sequences) const;

  TaskSpec spec_;
  std::size_t seq_len_ = 0;
  int sep_token_ = 0;
  std::set<std::vector<int>> eval_keys_;
  std::vector<Batch> eval_batches_;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::size_t scored = 0;
};

// Read-only: no graph is recorded and the model is not modified.
EvalResult evaluate(const TinyTransformer& model, const Task& task);

}  // namespace sharelora
