// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Tolerances and run sizes are pinned here and nowhere else.

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sharelora/audit.hpp"
#include "sharelora/config.hpp"
#include "sharelora/errors.hpp"
#include "sharelora/trainer.hpp"

using namespace sharelora;

namespace {

// ---- pinned tolerances ----
constexpr double kCountTolerance = 0.1e6;        // printed one-decimal millions
constexpr double kCountSeconds = 1.0;
constexpr double kRatioPoints = 0.5;             // percentage points
constexpr double kGradRelErr = 1e-4;
constexpr double kGradSeconds = 300.0;
constexpr int kZeroDeltaBatches = 100;
constexpr double kMergeRelErr = 1e-10;
constexpr double kTailSingular = 1e-8;
constexpr std::size_t kRankSteps = 500;
constexpr double kShareGradRelErr = 1e-10;
constexpr double kParityRel = 0.10;
constexpr std::size_t kParitySteps = 1000;
constexpr std::size_t kShareABWindow = 5;        // eval points per window
constexpr double kParitySeconds = 900.0;
constexpr std::size_t kContinualSteps = 300;     // per phase
constexpr double kMemoryTargetGB = 3.8;
constexpr double kMemoryBand = 0.5;
constexpr double kSvdRelErr = 1e-10;

const std::vector<std::string> kAdapterSchemes{"lora", "lora_fa", "sharea", "shareb", "shareab", "sharea_qkv"};
const std::vector<std::uint64_t> kSeeds{1, 2, 3};

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---- shared setup ----

const ModelSpec& tiny() {
  static const ModelSpec s = preset_spec("tiny");
  return s;
}

AdapterScheme scheme(const ModelSpec& spec, const std::string& label, int rank = 8) {
  return AdapterScheme::named(label, rank, 2.0 * rank, all_targets(spec));
}

TinyTransformer make(const std::string& label, std::uint64_t seed) {
  return TinyTransformer(tiny(), scheme(tiny(), label), 1000 + seed, 2000 + seed);
}

TaskSpec copy_task() {
  TaskSpec t;
  t.name = "copy";
  t.kind = TaskKind::kCopyLm;
  t.alphabet = 8;
  t.length = 4;
  t.batch_size = 32;
  t.eval_size = 128;
  return t;
}

TaskSpec mod_task() {
  TaskSpec t;
  t.name = "mod";
  t.kind = TaskKind::kModularArithmeticLm;
  t.modulus = 7;
  t.length = 3;
  t.batch_size = 32;
  t.eval_size = 128;
  return t;
}

TrainHyper hyper(std::size_t steps) {
  TrainHyper h;
  h.adam.lr = 1e-2;
  h.steps = steps;
  h.warmup_ratio = 0.06;
  h.eval_interval = 50;
  return h;
}

TokenBatch random_tokens(std::mt19937_64& rng, std::size_t batch, std::size_t seq) {
  TokenBatch t{batch, seq, {}};
  std::uniform_int_distribution<int> id(0, static_cast<int>(tiny().vocab_size) - 1);
  for (std::size_t i = 0; i < batch * seq; ++i) t.ids.push_back(id(rng));
  return t;
}

double rel_err(std::span<const double> got, std::span<const double> ref) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    num = std::max(num, std::abs(got[i] - ref[i]));
    den = std::max(den, std::abs(ref[i]));
  }
  return den == 0.0 ? num : num / den;
}

bool bit_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Models trained for kRankSteps on copy, shared by criteria 6, 7c and 11.
struct RankRun {
  TinyTransformer model;
  std::vector<std::vector<double>> frozen_a_before;
};

std::map<std::string, RankRun>& rank_runs() {
  static std::map<std::string, RankRun> runs = [] {
    std::map<std::string, RankRun> out;
    const Task task(copy_task(), tiny());
    for (const std::string& label : kAdapterSchemes) {
      RankRun r{make(label, 1), {}};
      for (const LayerAdapter& la : r.model.adapter_set().adapters)
        if (la.frozen_a) r.frozen_a_before.emplace_back(la.a.data().begin(), la.a.data().end());
      run_training(r.model, task, hyper(kRankSteps), 1);
      out.emplace(label, std::move(r));
    }
    return out;
  }();
  return runs;
}

// ---- criteria ----

Outcome c1_counts() {
  const auto t0 = std::chrono::steady_clock::now();
  struct Row {
    const char* preset;
    const char* scheme;
    int rank;
    const char* targets;
    double printed;
  };
  const Row rows[] = {
      {"llama7b", "lora", 64, "all", 159.9},        {"llama7b", "sharea_qkv", 64, "all", 135.5},
      {"llama7b", "sharea", 64, "all", 89.3},       {"llama13b", "lora", 64, "all", 250.3},
      {"llama13b", "sharea_qkv", 64, "all", 212.0}, {"llama13b", "sharea", 64, "all", 139.1},
      {"roberta_base", "lora", 8, "q,v", 0.3},      {"roberta_base", "sharea", 8, "q,v", 0.16},
      {"roberta_large", "lora", 8, "q,v", 0.8},     {"roberta_large", "sharea", 8, "q,v", 0.4},
      {"roberta_large", "shareb", 8, "q,v", 0.4},   {"roberta_large", "shareab", 8, "q,v", 0.03},
      {"gpt2_medium", "sharea", 4, "q,v", 0.20},    {"gpt2_medium", "shareb", 4, "q,v", 0.20},
      {"gpt2_large", "sharea", 4, "q,v", 0.39},     {"gpt2_large", "shareb", 4, "q,v", 0.39},
  };
  std::size_t matched = 0;
  std::string misses;
  double worst = 0.0;
  for (const Row& r : rows) {
    const ModelSpec spec = preset_spec(r.preset);
    const auto targets = std::string(r.targets) == "all" ? all_targets(spec) : parse_targets(r.targets);
    const std::size_t n = count_params(spec, AdapterScheme::named(r.scheme, r.rank, 2.0 * r.rank, targets)).total;
    const double diff = std::abs(static_cast<double>(n) - r.printed * 1e6);
    worst = std::max(worst, diff);
    if (diff < kCountTolerance) ++matched;
    else misses += fmt(" %s/%s=%zu", r.preset, r.scheme, n);
  }
  const double secs = seconds_since(t0);
  const std::size_t total = std::size(rows);
  return {matched == total && secs < kCountSeconds,
          fmt("%zu/%zu within 0.1M, worst |diff| %.4fM, %.3f s%s", matched, total, worst / 1e6, secs, misses.c_str())};
}

Outcome c2_ratios() {
  auto ratio = [](const char* preset, const char* cand, const char* base, int rank, const char* targets) {
    const ModelSpec spec = preset_spec(preset);
    const auto t = std::string(targets) == "all" ? all_targets(spec) : parse_targets(targets);
    const auto r = count_params(spec, AdapterScheme::named(cand, rank, 2.0 * rank, t),
                                AdapterScheme::named(base, rank, 2.0 * rank, t));
    return 100.0 * *r.reduction;
  };
  const double llama = ratio("llama7b", "sharea", "lora", 64, "all");
  const double roberta = ratio("roberta_large", "shareab", "lora", 8, "q,v");
  const bool pass = std::abs(llama - 44.2) <= kRatioPoints && std::abs(roberta - 95.9) <= kRatioPoints;
  return {pass, fmt("llama7b ShareA vs LoRA %.2f%% (44.2 +- 0.5), roberta_large ShareAB vs LoRA %.2f%% (95.9 +- 0.5)",
                    llama, roberta)};
}

Outcome c3_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  TaskSpec ts;
  ts.name = "gradcheck";
  ts.alphabet = 8;
  ts.length = 3;
  ts.batch_size = 2;
  ts.eval_size = 2;
  GradcheckOptions opt;
  opt.tolerance = kGradRelErr;
  bool pass = true;
  std::string detail;
  for (const char* label : {"fullft", "lora", "lora_fa", "sharea", "shareb", "shareab", "sharea_qkv"}) {
    const AdapterScheme s = scheme(tiny(), label, 4);
    TinyTransformer m(tiny(), s, 7, 8);
    if (s.is_adapter_mode()) randomize_adapter_b(m, 9);
    const Task task(ts, tiny());
    std::mt19937_64 rng(7);
    const GradcheckReport r = gradcheck(m, task.sample_train(rng), opt);
    pass = pass && r.passed && r.max_rel_err < kGradRelErr;
    detail += fmt(" %s=%.1e", label, r.max_rel_err);
  }
  const double secs = seconds_since(t0);
  return {pass && secs < kGradSeconds, "max rel err" + detail + fmt(", %.1f s", secs)};
}

Outcome c4_zero_delta() {
  const TinyTransformer base = TinyTransformer::base_model(tiny(), 1001);
  std::size_t identical = 0, total = 0;
  for (const std::string& label : kAdapterSchemes) {
    const TinyTransformer m = make(label, 1);
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<std::size_t> len(1, tiny().max_seq_len);
    for (int b = 0; b < kZeroDeltaBatches; ++b) {
      const TokenBatch t = random_tokens(rng, 4, len(rng));
      identical += bit_equal(m.logits(t).data(), base.logits(t).data()) ? 1 : 0;
      ++total;
    }
  }
  return {identical == total, fmt("%zu/%zu batches bit-identical to the frozen base over %zu schemes", identical,
                                  total, kAdapterSchemes.size())};
}

Outcome c5_merge() {
  double worst = 0.0;
  for (const char* label : {"fullft", "lora", "lora_fa", "sharea", "shareb", "shareab", "sharea_qkv"}) {
    TinyTransformer m = make(label, 1);
    if (m.scheme().is_adapter_mode()) randomize_adapter_b(m, 5);
    const TinyTransformer merged = m.merged();
    std::mt19937_64 rng(6);
    for (int b = 0; b < 20; ++b) {
      const TokenBatch t = random_tokens(rng, 4, 16);
      worst = std::max(worst, rel_err(merged.logits(t).data(), m.logits(t).data()));
    }
  }
  return {worst < kMergeRelErr, fmt("max rel err %.2e over 7 schemes x 20 batches (bound %.0e)", worst, kMergeRelErr)};
}

Outcome c6_rank_bound() {
  double worst_tail = 0.0, smallest_kept = 1e300;
  std::size_t layers = 0;
  for (auto& [label, run] : rank_runs()) {
    const std::size_t r = static_cast<std::size_t>(run.model.scheme().rank);
    for (const AdaptedLinear* l : run.model.adapted_layers()) {
      const Tensor d = delta_weight(*l);
      const auto sv = jacobi_singular_values({d.data().begin(), d.data().end()}, l->in_dim(), l->out_dim(), label);
      for (std::size_t k = r; k < sv.size(); ++k) worst_tail = std::max(worst_tail, sv[k]);
      smallest_kept = std::min(smallest_kept, sv[r - 1]);
      ++layers;
    }
  }
  return {worst_tail < kTailSingular,
          fmt("max sigma_k for k >= r: %.2e over %zu layers after %zu steps (sigma_r-1 min %.2e)", worst_tail, layers,
              kRankSteps, smallest_kept)};
}

Outcome c7_sharing() {
  // (a) one object per shared key at every site, distinct objects otherwise
  ModelSpec deep = tiny();
  deep.n_layers = 4;
  bool identity = true;
  for (const std::string& label : kAdapterSchemes) {
    const AdapterScheme s = scheme(deep, label);
    TinyTransformer m(deep, s, 1, 2);
    for (ModuleType t : kAllModuleTypes) {
      const LayerAdapter& first = *m.linear(0, t).adapter;
      for (std::size_t l = 1; l < deep.n_layers; ++l) {
        const LayerAdapter& other = *m.linear(l, t).adapter;
        identity = identity && first.a.same_object(other.a) == s.shares(t, MatrixRole::kA);
        identity = identity && first.b.same_object(other.b) == s.shares(t, MatrixRole::kB);
      }
    }
    for (const auto& [key, entry] : m.adapter_set().store.entries())
      identity = identity && entry.sites.size() == deep.n_layers;
  }

  // (b) shared gradient = sum of per-layer gradients of a tied unshared clone
  const Task task(copy_task(), tiny());
  std::mt19937_64 rng(11);
  const Batch batch = task.sample_train(rng);
  double worst = 0.0;
  for (const char* label : {"sharea", "shareb", "shareab"}) {
    TinyTransformer shared = make(label, 1);
    randomize_adapter_b(shared, 12);
    TinyTransformer clone = make("lora", 1);
    for (std::size_t layer = 0; layer < tiny().n_layers; ++layer) {
      for (ModuleType t : kAllModuleTypes) {
        const LayerAdapter& src = *shared.linear(layer, t).adapter;
        LayerAdapter& dst = *clone.linear(layer, t).adapter;
        std::copy(src.a.data().begin(), src.a.data().end(), dst.a.mutable_data().begin());
        std::copy(src.b.data().begin(), src.b.data().end(), dst.b.mutable_data().begin());
      }
    }
    shared.loss(batch.tokens, batch.targets).backward();
    clone.loss(batch.tokens, batch.targets).backward();
    for (ModuleType t : kAllModuleTypes) {
      for (MatrixRole role : {MatrixRole::kA, MatrixRole::kB}) {
        if (!shared.scheme().shares(t, role)) continue;
        const LayerAdapter& s0 = *shared.linear(0, t).adapter;
        const Tensor& sm = role == MatrixRole::kA ? s0.a : s0.b;
        std::vector<double> summed(sm.numel(), 0.0);
        for (std::size_t layer = 0; layer < tiny().n_layers; ++layer) {
          const LayerAdapter& c = *clone.linear(layer, t).adapter;
          const auto g = (role == MatrixRole::kA ? c.a : c.b).grad();
          for (std::size_t i = 0; i < summed.size(); ++i) summed[i] += g[i];
        }
        worst = std::max(worst, rel_err(sm.grad(), summed));
      }
    }
  }

  // (c) LoRA-FA keeps A bit for bit
  const RankRun& fa = rank_runs().at("lora_fa");
  bool frozen = !fa.frozen_a_before.empty();
  std::size_t k = 0;
  for (const LayerAdapter& la : fa.model.adapter_set().adapters)
    if (la.frozen_a) frozen = frozen && bit_equal(la.a.data(), fa.frozen_a_before[k++]);
  frozen = frozen && k == fa.frozen_a_before.size();

  return {identity && worst < kShareGradRelErr && frozen,
          fmt("(a) identity %s, (b) shared-grad rel err %.2e (bound %.0e), (c) LoRA-FA A unchanged after %zu steps: %s",
              identity ? "ok" : "BROKEN", worst, kShareGradRelErr, kRankSteps, frozen ? "yes" : "NO")};
}

// Eval windows after step 0: window means strictly decrease and the first is below the start.
bool windowed_decrease(const std::vector<double>& evals) {
  if (evals.size() < 1 + 2 * kShareABWindow) return false;
  double prev = evals.front();
  for (std::size_t start = 1; start + kShareABWindow <= evals.size(); start += kShareABWindow) {
    double mean = 0.0;
    for (std::size_t i = start; i < start + kShareABWindow; ++i) mean += evals[i];
    mean /= static_cast<double>(kShareABWindow);
    if (!(mean < prev)) return false;
    prev = mean;
  }
  return true;
}

Outcome c8_parity() {
  const auto t0 = std::chrono::steady_clock::now();
  bool pass = true;
  std::string detail;
  for (const TaskSpec& ts : {copy_task(), mod_task()}) {
    const Task task(ts, tiny());
    std::map<std::string, std::vector<double>> finals;
    bool shareab_converges = true;
    for (const char* label : {"lora", "sharea", "shareab"}) {
      for (std::uint64_t seed : kSeeds) {
        TinyTransformer m = make(label, seed);
        const TrainResult r = run_training(m, task, hyper(kParitySteps), seed);
        finals[label].push_back(r.log.final_eval_loss);
        if (std::string(label) == "shareab") shareab_converges = shareab_converges && windowed_decrease(r.log.eval_losses);
      }
    }
    const double lora = median(finals["lora"]), share = median(finals["sharea"]), ab = median(finals["shareab"]);
    const double rel = std::abs(share - lora) / lora;
    const bool fewer = count_params(tiny(), scheme(tiny(), "sharea")).total < count_params(tiny(), scheme(tiny(), "lora")).total;
    pass = pass && rel <= kParityRel && fewer && shareab_converges;
    detail += fmt(" %s: LoRA %.4f ShareA %.4f (rel %.1f%%) ShareAB %.4f converges %s;", ts.name.c_str(), lora, share,
                  100 * rel, ab, shareab_converges ? "yes" : "no");
  }
  const double secs = seconds_since(t0);
  return {pass && secs < kParitySeconds, "median final eval loss," + detail + fmt(" %.0f s", secs)};
}

Outcome c9_continual() {
  const PhasePlan plan{{copy_task(), mod_task()}, {{"copy", kContinualSteps}, {"mod", kContinualSteps}}, {}};
  bool well_formed = true, deterministic = true;
  std::vector<double> deltas;
  for (std::uint64_t seed : kSeeds) {
    std::map<std::string, RetentionMatrix> by_scheme;
    for (const char* label : {"lora", "sharea"}) {
      TinyTransformer m = make(label, seed);
      RetentionMatrix r = run_continual(m, plan, hyper(0), seed);
      well_formed = well_formed && r.phases.size() == 2 && r.tasks.size() == 2 && r.accuracy.size() == 2 &&
                    r.loss.size() == 2 && r.backward_transfer.size() == 2 && r.backward_transfer[0].has_value();
      for (std::size_t p = 0; p < r.accuracy.size(); ++p)
        for (std::size_t t = 0; t < r.accuracy[p].size(); ++t)
          well_formed = well_formed && r.accuracy[p][t] >= 0.0 && r.accuracy[p][t] <= 1.0 && std::isfinite(r.loss[p][t]);
      if (seed == kSeeds.front()) {
        TinyTransformer again = make(label, seed);
        deterministic = deterministic && run_continual(again, plan, hyper(0), seed).to_json().dump() == r.to_json().dump();
      }
      by_scheme.emplace(label, std::move(r));
    }
    const RetentionDelta d = retention_delta(by_scheme.at("lora"), by_scheme.at("sharea"), "lora", "sharea");
    well_formed = well_formed && d.accuracy[0].has_value();
    if (d.accuracy[0]) deltas.push_back(*d.accuracy[0]);
  }
  const double med = deltas.empty() ? 0.0 : median(deltas);
  return {well_formed && deterministic,
          fmt("matrix well-formed %s, rerun identical %s; observed copy retention delta ShareA - LoRA, median over %zu "
              "seeds: %+.4f (%s)",
              well_formed ? "yes" : "no", deterministic ? "yes" : "no", deltas.size(), med,
              med > 0 ? "ShareA retains more" : "ShareA does not retain more")};
}

Outcome c10_memory() {
  const ModelSpec spec = preset_spec("llama13b");
  const PrecisionConfig p;
  auto est = [&](const ModelSpec& s, const std::string& label, int rank, const PrecisionConfig& pc, std::size_t batch,
                 std::size_t seq) { return memory_estimate(s, scheme(s, label, rank), pc, batch, seq); };
  const double delta = est(spec, "lora", 64, p, 1, 512).trainable_state() - est(spec, "sharea", 64, p, 1, 512).trainable_state();
  const double lo = kMemoryTargetGB * (1 - kMemoryBand), hi = kMemoryTargetGB * (1 + kMemoryBand);
  const bool in_band = delta / 1e9 >= lo && delta / 1e9 <= hi;

  // monotone (non-decreasing) in every input
  bool monotone = true;
  for (const char* label : {"lora", "sharea"}) {
    auto check = [&](auto make_model) {
      double prev = -1.0;
      for (int step = 1; step <= 4; ++step) {
        const double t = make_model(step).total();
        monotone = monotone && t >= prev;
        prev = t;
      }
    };
    check([&](int k) { return est(spec, label, 8 << k, p, 1, 512); });
    check([&](int k) { return est(spec, label, 64, p, static_cast<std::size_t>(k), 512); });
    check([&](int k) { return est(spec, label, 64, p, 1, 128u << k); });
    check([&](int k) {
      ModelSpec s = spec;
      s.n_layers = 10 * static_cast<std::size_t>(k);
      return est(s, label, 64, p, 1, 512);
    });
    check([&](int k) {
      ModelSpec s = spec;
      s.intermediate_dim = 4096u * static_cast<std::size_t>(k);
      return est(s, label, 64, p, 1, 512);
    });
    for (double PrecisionConfig::*field : {&PrecisionConfig::param_bytes, &PrecisionConfig::grad_bytes,
                                           &PrecisionConfig::moment_bytes, &PrecisionConfig::frozen_bytes,
                                           &PrecisionConfig::activation_bytes}) {
      check([&](int k) {
        PrecisionConfig q = p;
        q.*field = static_cast<double>(k);
        return est(spec, label, 64, q, 1, 512);
      });
    }
  }
  return {in_band && monotone,
          fmt("llama13b LoRA - ShareA trainable state %.3f GB at %.0f bytes/param (band %.2f..%.2f GB): %s; monotone: %s",
              delta / 1e9, p.param_bytes + p.grad_bytes + p.moments * p.moment_bytes, lo, hi,
              in_band ? "in band" : "OUT OF BAND", monotone ? "yes" : "no")};
}

Outcome c11_svd() {
  double worst = 0.0;
  std::mt19937_64 rng(21);
  std::normal_distribution<double> nd;
  struct Shape3 {
    std::size_t in, r, out;
  };
  for (const Shape3 s : {Shape3{64, 8, 48}, Shape3{16, 4, 32}, Shape3{100, 2, 30}, Shape3{33, 16, 40}}) {
    for (int trial = 0; trial < 5; ++trial) {
      std::vector<double> a(s.in * s.r), b(s.r * s.out);
      for (double& v : a) v = nd(rng);
      for (double& v : b) v = nd(rng);
      const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> ea(a.data(), s.in, s.r);
      const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> eb(b.data(), s.r, s.out);
      const Eigen::MatrixXd dense = 0.75 * ea * eb;
      const Eigen::VectorXd ref = Eigen::JacobiSVD<Eigen::MatrixXd>(dense).singularValues();
      const auto ours = lowrank_singular_values(a, b, s.in, s.r, s.out, 0.75);
      for (std::size_t k = 0; k < s.r; ++k) worst = std::max(worst, std::abs(ours[k] - ref(k)) / ref(k));
    }
  }
  bool emitted = true;
  std::size_t rows = 0;
  for (auto& [label, run] : rank_runs()) {
    for (const LayerSpectrum& l : svd_spectrum(run.model).layers) {
      emitted = emitted && l.values.size() == static_cast<std::size_t>(run.model.scheme().rank) &&
                std::is_sorted(l.values.rbegin(), l.values.rend());
      ++rows;
    }
  }
  return {worst < kSvdRelErr && emitted,
          fmt("max per-value rel err vs dense SVD %.2e (bound %.0e); %zu emitted spectra sorted with length r: %s", worst,
              kSvdRelErr, rows, emitted ? "yes" : "no")};
}

Outcome c12_determinism() {
  const ExperimentConfig cfg = load_config(std::filesystem::path(SHARELORA_SOURCE_DIR) / "configs" / "tiny_sharea.toml");
  bool same = true;
  std::size_t bytes = 0;
  for (std::uint64_t seed : {cfg.seeds.front(), cfg.seeds.back()}) {
    std::string first;
    for (int run = 0; run < 2; ++run) {
      TinyTransformer m = cfg.make_model(seed);
      const Task task(cfg.tasks.front(), m.spec());
      std::ostringstream os;
      run_training(m, task, cfg.train, seed).log.write_csv(os);
      if (run == 0) first = os.str();
      else same = same && os.str() == first;
      bytes = os.str().size();
    }
  }
  return {same, fmt("tiny_sharea.toml, seeds %llu and %llu run twice: CSV byte-identical %s (%zu bytes each)",
                    static_cast<unsigned long long>(cfg.seeds.front()), static_cast<unsigned long long>(cfg.seeds.back()),
                    same ? "yes" : "no", bytes)};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"parameter counts", c1_counts},     {"reduction ratios", c2_ratios},   {"gradient check", c3_gradients},
      {"zero-delta start", c4_zero_delta}, {"merge equivalence", c5_merge},    {"rank bound", c6_rank_bound},
      {"sharing semantics", c7_sharing},   {"training parity", c8_parity},     {"continual retention", c9_continual},
      {"memory model", c10_memory},        {"svd oracle", c11_svd},            {"determinism", c12_determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::printf("%s %2zu %-20s %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", criteria.size() - failed, criteria.size());
  return failed ? 1 : 0;
}
