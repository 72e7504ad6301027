#include "sharelora/tasks.hpp"

#include <algorithm>
#include <cmath>

#include "sharelora/errors.hpp"

namespace sharelora {

std::string_view task_kind_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::kCopyLm: return "copy_lm";
    case TaskKind::kModularArithmeticLm: return "modular_arithmetic_lm";
    case TaskKind::kSyntheticClassification: return "synthetic_classification";
  }
  return "?";
}

TaskKind parse_task_kind(std::string_view name) {
  for (TaskKind k : {TaskKind::kCopyLm, TaskKind::kModularArithmeticLm, TaskKind::kSyntheticClassification}) {
    if (task_kind_name(k) == name) return k;
  }
  throw ConfigError("unknown task kind '" + std::string(name) +
                    "' (expected copy_lm, modular_arithmetic_lm, synthetic_classification)");
}

nlohmann::json to_json(const TaskSpec& t) {
  return {{"name", t.name},           {"kind", std::string(task_kind_name(t.kind))},
          {"alphabet", t.alphabet},   {"length", t.length},
          {"modulus", t.modulus},     {"n_classes", t.n_classes},
          {"batch_size", t.batch_size}, {"eval_size", t.eval_size},
          {"train_seed", t.train_seed}, {"eval_seed", t.eval_seed}};
}

Task::Task(TaskSpec spec, const ModelSpec& model) : spec_(std::move(spec)) {
  const std::size_t symbols = model.vocab_size - 1;  // last id is the separator
  sep_token_ = static_cast<int>(model.vocab_size - 1);
  double space = 0.0;  // number of distinct examples
  switch (spec_.kind) {
    case TaskKind::kCopyLm:
      if (spec_.alphabet < 2 || spec_.alphabet > symbols) throw ConfigError("copy_lm: alphabet must be in [2, vocab-1]");
      if (spec_.length < 1) throw ConfigError("copy_lm: length must be >= 1");
      seq_len_ = 2 * spec_.length;
      space = std::pow(static_cast<double>(spec_.alphabet), static_cast<double>(spec_.length));
      break;
    case TaskKind::kModularArithmeticLm:
      if (spec_.modulus < 2 || spec_.modulus > symbols) {
        throw ConfigError("modular_arithmetic_lm: modulus must be in [2, vocab-1]");
      }
      if (spec_.length < 1) throw ConfigError("modular_arithmetic_lm: length (problems per sequence) must be >= 1");
      seq_len_ = 3 * spec_.length - 1;
      space = std::pow(static_cast<double>(spec_.modulus), 2.0 * static_cast<double>(spec_.length));
      break;
    case TaskKind::kSyntheticClassification:
      if (spec_.alphabet < 2 || spec_.alphabet > symbols) {
        throw ConfigError("synthetic_classification: alphabet must be in [2, vocab-1]");
      }
      if (spec_.n_classes < 2 || spec_.n_classes > symbols) {
        throw ConfigError("synthetic_classification: n_classes must be in [2, vocab-1]");
      }
      if (spec_.length < 2) throw ConfigError("synthetic_classification: length must be >= 2");
      seq_len_ = spec_.length + 1;
      space = std::pow(static_cast<double>(spec_.alphabet), static_cast<double>(spec_.length));
      break;
  }
  if (seq_len_ > model.max_seq_len) {
    throw ConfigError("task '" + spec_.name + "': sequence length " + std::to_string(seq_len_) +
                      " exceeds model max_seq_len " + std::to_string(model.max_seq_len));
  }
  if (spec_.batch_size < 1 || spec_.eval_size < 1) throw ConfigError("task '" + spec_.name + "': empty batch or eval set");
  // Training must keep most of the example space.
  if (static_cast<double>(spec_.eval_size) * 2.0 > space) {
    throw ConfigError("task '" + spec_.name + "': eval_size " + std::to_string(spec_.eval_size) +
                      " exceeds half of the " + std::to_string(static_cast<long long>(space)) + " distinct examples");
  }

  std::mt19937_64 rng(spec_.eval_seed);
  std::vector<std::vector<int>> eval;
  while (eval.size() < spec_.eval_size) {
    std::vector<int> s = draw_sequence(rng);
    if (eval_keys_.insert(s).second) eval.push_back(std::move(s));
  }
  for (std::size_t start = 0; start < eval.size(); start += spec_.batch_size) {
    const std::size_t end = std::min(eval.size(), start + spec_.batch_size);
    const std::vector<std::vector<int>> chunk(eval.begin() + static_cast<std::ptrdiff_t>(start),
                                              eval.begin() + static_cast<std::ptrdiff_t>(end));
    eval_batches_.push_back(make_batch(chunk));
  }
}

std::vector<int> Task::draw_sequence(std::mt19937_64& rng) const {
  std::vector<int> s;
  switch (spec_.kind) {
    case TaskKind::kCopyLm: {
      std::uniform_int_distribution<int> sym(0, static_cast<int>(spec_.alphabet) - 1);
      for (std::size_t i = 0; i < spec_.length; ++i) s.push_back(sym(rng));
      s.push_back(sep_token_);
      for (std::size_t i = 0; i < spec_.length; ++i) s.push_back(s[i]);
      break;
    }
    case TaskKind::kModularArithmeticLm: {
      const int p = static_cast<int>(spec_.modulus);
      std::uniform_int_distribution<int> val(0, p - 1);
      for (std::size_t k = 0; k < spec_.length; ++k) {
        const int a = val(rng), b = val(rng);
        s.insert(s.end(), {a, b, (a + b) % p});
      }
      break;
    }
    case TaskKind::kSyntheticClassification: {
      std::uniform_int_distribution<int> sym(0, static_cast<int>(spec_.alphabet) - 1);
      for (std::size_t i = 0; i < spec_.length; ++i) s.push_back(sym(rng));
      s.push_back(sep_token_);
      s.push_back((s.front() + s[spec_.length - 1]) % static_cast<int>(spec_.n_classes));
      break;
    }
  }
  return s;
}

void Task::split(const std::vector<int>& sequence, std::vector<int>& inputs, std::vector<int>& targets) const {
  for (std::size_t t = 0; t < seq_len_; ++t) {
    inputs.push_back(sequence[t]);
    bool scored = false;
    switch (spec_.kind) {
      case TaskKind::kCopyLm: scored = t >= spec_.length; break;
      case TaskKind::kModularArithmeticLm: scored = t % 3 == 1; break;
      case TaskKind::kSyntheticClassification: scored = t == seq_len_ - 1; break;
    }
    targets.push_back(scored ? sequence[t + 1] : kIgnoreIndex);
  }
}

Batch Task::make_batch(const std::vector<std::vector<int>>& sequences) const {
  Batch b;
  b.tokens.batch = sequences.size();
  b.tokens.seq = seq_len_;
  for (const auto& s : sequences) split(s, b.tokens.ids, b.targets);
  return b;
}

Batch Task::sample_train(std::mt19937_64& rng) const {
  std::vector<std::vector<int>> seqs;
  while (seqs.size() < spec_.batch_size) {
    std::vector<int> s = draw_sequence(rng);
    if (!eval_keys_.contains(s)) seqs.push_back(std::move(s));
  }
  return make_batch(seqs);
}

EvalResult evaluate(const TinyTransformer& model, const Task& task) {
  NoGradGuard no_grad;
  double loss_sum = 0.0;
  std::size_t scored = 0, correct = 0;
  for (const Batch& b : task.eval_batches()) {
    const Tensor logits = model.logits(b.tokens);
    const std::size_t vocab = logits.dim(1);
    const auto ld = logits.data();
    std::size_t n = 0;
    for (std::size_t r = 0; r < b.targets.size(); ++r) {
      if (b.targets[r] == kIgnoreIndex) continue;
      const double* row = ld.data() + r * vocab;
      const auto best = static_cast<int>(std::max_element(row, row + vocab) - row);
      if (best == b.targets[r]) ++correct;
      ++n;
    }
    loss_sum += cross_entropy(logits, b.targets).item() * static_cast<double>(n);
    scored += n;
  }
  EvalResult r;
  r.scored = scored;
  if (scored) {
    r.loss = loss_sum / static_cast<double>(scored);
    r.accuracy = static_cast<double>(correct) / static_cast<double>(scored);
  }
  return r;
}

}  // namespace sharelora
