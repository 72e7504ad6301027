#include <doctest.h>

#include <algorithm>
#include <sstream>

#include "sharelora/audit.hpp"
#include "sharelora/errors.hpp"
#include "sharelora/trainer.hpp"
#include "test_util.hpp"

using namespace sharelora;
using testutil::bit_equal;

namespace {

TaskSpec copy_task(std::size_t eval_size = 64) {
  TaskSpec t;
  t.name = "copy";
  t.kind = TaskKind::kCopyLm;
  t.alphabet = 8;
  t.length = 4;
  t.batch_size = 32;
  t.eval_size = eval_size;
  return t;
}

TaskSpec mod_task() {
  TaskSpec t;
  t.name = "mod";
  t.kind = TaskKind::kModularArithmeticLm;
  t.modulus = 7;
  t.length = 3;
  t.batch_size = 32;
  t.eval_size = 64;
  return t;
}

TrainHyper hyper(std::size_t steps) {
  TrainHyper h;
  h.adam.lr = 1e-2;
  h.steps = steps;
  h.eval_interval = 20;
  return h;
}

TinyTransformer make(const std::string& scheme, std::uint64_t seed = 1) {
  const ModelSpec tiny = preset_spec("tiny");
  return TinyTransformer(tiny, AdapterScheme::named(scheme, 8, 16, all_targets(tiny)), 1000 + seed, 2000 + seed);
}

std::string csv(const MetricsLog& log) {
  std::ostringstream os;
  log.write_csv(os);
  return os.str();
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[1];
}

}  // namespace

TEST_CASE("training is deterministic down to the CSV bytes") {
  const Task task(copy_task(), preset_spec("tiny"));
  TinyTransformer a = make("sharea"), b = make("sharea");
  const TrainResult ra = run_training(a, task, hyper(60), 5);
  const TrainResult rb = run_training(b, task, hyper(60), 5);
  CHECK(csv(ra.log) == csv(rb.log));
  CHECK(csv(ra.log).starts_with("step,split,metric,value\n"));
  // evals at 0, 20, 40, 60
  CHECK(ra.log.eval_losses.size() == 4);
  TinyTransformer c = make("sharea");
  CHECK(csv(run_training(c, task, hyper(60), 6).log) != csv(ra.log));
}

TEST_CASE("the model is left at its best eval checkpoint") {
  const Task task(copy_task(), preset_spec("tiny"));
  TinyTransformer m = make("lora");
  const TrainResult r = run_training(m, task, hyper(80), 3);
  const double best = *std::min_element(r.log.eval_losses.begin(), r.log.eval_losses.end());
  CHECK(r.log.best_eval_loss == best);
  CHECK(evaluate(m, task).loss == best);
  CHECK(r.log.eval_losses.back() == r.log.final_eval_loss);
  CHECK(best < r.log.eval_losses.front());
}

TEST_CASE("adapter training leaves the frozen base untouched") {
  const Task task(copy_task(), preset_spec("tiny"));
  for (const char* scheme : {"lora", "lora_fa", "sharea", "shareb", "shareab", "sharea_qkv"}) {
    CAPTURE(scheme);
    TinyTransformer m = make(scheme);
    const ParameterSnapshot base(m.base_parameters());
    std::vector<std::vector<double>> frozen_a;
    for (const LayerAdapter& la : m.adapter_set().adapters)
      if (la.frozen_a) frozen_a.emplace_back(la.a.data().begin(), la.a.data().end());
    const ParameterSnapshot trainable(m.trainable_parameters());
    run_training(m, task, hyper(20), 1);

    const auto after = m.base_parameters();
    for (std::size_t i = 0; i < after.size(); ++i) CHECK(bit_equal(after[i].tensor.data(), base.values()[i].second));
    std::size_t k = 0;
    for (const LayerAdapter& la : m.adapter_set().adapters)
      if (la.frozen_a) CHECK(bit_equal(la.a.data(), frozen_a[k++]));
    if (std::string(scheme) == "lora_fa") CHECK(k == 14);
    const auto moved = m.trainable_parameters();
    bool changed = false;
    for (std::size_t i = 0; i < moved.size(); ++i)
      changed = changed || !bit_equal(moved[i].tensor.data(), trainable.values()[i].second);
    CHECK(changed);
  }
}

TEST_CASE("full fine-tune moves the base weights") {
  const Task task(copy_task(), preset_spec("tiny"));
  TinyTransformer m = make("fullft");
  const ParameterSnapshot base(m.base_parameters());
  run_training(m, task, hyper(20), 1);
  CHECK_FALSE(bit_equal(m.base_parameters()[0].tensor.data(), base.values()[0].second));
}

TEST_CASE("divergence stops the run") {
  const Task task(copy_task(), preset_spec("tiny"));
  TinyTransformer m = make("lora");
  TrainHyper h = hyper(20);
  h.divergence_threshold = 1e-3;
  try {
    run_training(m, task, h, 1);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
  TrainHyper zero = hyper(0);
  CHECK_THROWS_AS(run_training(m, task, zero, 1), ConfigError);
  TinyTransformer base = TinyTransformer::base_model(preset_spec("tiny"), 1);
  CHECK_THROWS_AS(run_training(base, task, hyper(5), 1), ContractError);
}

TEST_CASE("continual retention matrix is well formed") {
  const PhasePlan plan{{copy_task(), mod_task()}, {{"copy", 40}, {"mod", 40}}, {}};
  TinyTransformer m = make("sharea");
  std::vector<MetricsLog> logs;
  const RetentionMatrix r = run_continual(m, plan, hyper(0), 1, &logs);
  CHECK(r.phases == std::vector<std::string>{"1:copy", "2:mod"});
  CHECK(r.tasks == std::vector<std::string>{"copy", "mod"});
  REQUIRE(r.accuracy.size() == 2);
  for (const auto& row : r.accuracy) CHECK(row.size() == 2);
  CHECK(logs.size() == 2);
  REQUIRE(r.backward_transfer[0].has_value());
  CHECK(*r.backward_transfer[0] == r.accuracy[1][0] - r.accuracy[0][0]);
  CHECK(*r.backward_transfer_loss[0] == r.loss[1][0] - r.loss[0][0]);
  CHECK(*r.backward_transfer[1] == 0.0);

  const nlohmann::json j = r.to_json();
  CHECK(j["schema_version"] == 1);
  CHECK(j["backward_transfer"].contains("copy"));

  TinyTransformer again = make("sharea");
  CHECK(run_continual(again, plan, hyper(0), 1).to_json() == j);

  // a task that is evaluated but never trained has no backward transfer
  const PhasePlan unseen{{copy_task(), mod_task()}, {{"copy", 20}, {"copy", 20}}, {"mod", "copy"}};
  TinyTransformer u = make("lora");
  const RetentionMatrix ru = run_continual(u, unseen, hyper(0), 1);
  CHECK_FALSE(ru.backward_transfer[0].has_value());
  CHECK(ru.backward_transfer[1].has_value());
}

TEST_CASE("continual plan errors") {
  TinyTransformer m = make("lora");
  CHECK_THROWS_AS(run_continual(m, {{copy_task()}, {{"copy", 10}}, {}}, hyper(0), 1), ConfigError);
  CHECK_THROWS_AS(run_continual(m, {{copy_task()}, {{"copy", 10}, {"mod", 10}}, {}}, hyper(0), 1), ConfigError);
  CHECK_THROWS_AS(run_continual(m, {{copy_task()}, {{"copy", 10}, {"copy", 10}}, {"mod"}}, hyper(0), 1), ConfigError);
  CHECK_THROWS_AS(run_continual(m, {{copy_task(), copy_task()}, {{"copy", 10}, {"copy", 10}}, {}}, hyper(0), 1),
                  ConfigError);
}

TEST_CASE("repeating a task does not hurt it") {
  // accuracy noise band over the 3-seed median
  constexpr double kNoiseBand = 0.02;
  const PhasePlan plan{{copy_task(128)}, {{"copy", 200}, {"copy", 200}}, {}};
  std::vector<double> bwt;
  for (std::uint64_t seed : {1, 2, 3}) {
    TinyTransformer m = make("sharea", seed);
    const RetentionMatrix r = run_continual(m, plan, hyper(0), seed);
    bwt.push_back(*r.backward_transfer[0]);
    // best-checkpoint selection starts phase 2 from phase 1's best, so loss cannot rise
    CHECK(*r.backward_transfer_loss[0] <= 0.0);
  }
  CHECK(median3(bwt) >= -kNoiseBand);
}

TEST_CASE("retention delta is candidate minus baseline") {
  RetentionMatrix base, cand;
  base.phases = cand.phases = {"1:a", "2:b"};
  base.tasks = cand.tasks = {"a", "b"};
  base.backward_transfer = {-0.5, 0.0};
  cand.backward_transfer = {-0.25, 0.0};
  base.backward_transfer_loss = {1.0, std::nullopt};
  cand.backward_transfer_loss = {0.5, 0.1};
  const RetentionDelta d = retention_delta(base, cand, "lora", "sharea");
  CHECK(*d.accuracy[0] == 0.25);
  CHECK(*d.loss[0] == -0.5);
  CHECK_FALSE(d.loss[1].has_value());
  CHECK(d.to_json()["baseline"] == "lora");
  cand.tasks = {"b", "a"};
  CHECK_THROWS_AS(retention_delta(base, cand, "lora", "sharea"), ContractError);
}

TEST_CASE("parameter snapshots restore exactly") {
  TinyTransformer m = make("lora");
  randomize_adapter_b(m, 4);
  auto params = m.trainable_parameters();
  const ParameterSnapshot snap(params);
  for (NamedTensor& p : params) p.tensor.mutable_data()[0] += 1.0;
  snap.restore(params);
  for (std::size_t i = 0; i < params.size(); ++i) CHECK(bit_equal(params[i].tensor.data(), snap.values()[i].second));
}
