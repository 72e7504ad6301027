// sharelora: train / continual / audit / svd / gradcheck.
//
// Exit codes: 0 ok, 1 check failed, 2 invalid config or arguments,
// 3 training diverged, 4 --assert-paper mismatch, 5 unreadable checkpoint.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>

#include "CLI11.hpp"
#include "json.hpp"
#include "sharelora/audit.hpp"
#include "sharelora/checkpoint.hpp"
#include "sharelora/config.hpp"
#include "sharelora/errors.hpp"
#include "sharelora/paper_values.hpp"
#include "sharelora/trainer.hpp"

namespace fs = std::filesystem;
using namespace sharelora;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kBadConfig = 2, kDiverged = 3, kPaperMismatch = 4, kBadCheckpoint = 5 };

// --out beats SHARELORA_OUT_DIR beats the config's run.output_dir.
fs::path output_dir(const std::string& flag, const std::string& configured) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("SHARELORA_OUT_DIR"); env && *env) return env;
  return configured;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

std::string targets_key(const ModelSpec& spec, const AdapterScheme& scheme) {
  return scheme.targets == all_targets(spec) ? "all" : targets_str(scheme.targets);
}

struct TrainArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
};

int cmd_train(const TrainArgs& a) {
  const ExperimentConfig cfg = load_config(a.config, a.overrides);
  const fs::path out = output_dir(a.out, cfg.output_dir);
  fs::create_directories(out);
  write_text(out / "resolved_config.toml", to_toml(cfg));
  const Task task(cfg.tasks.front(), cfg.model);
  for (std::uint64_t seed : cfg.seeds) {
    TinyTransformer model = cfg.make_model(seed);
    const TrainResult r = run_training(model, task, cfg.train, seed);
    const std::string tag = "seed" + std::to_string(seed);
    std::ofstream csv(out / ("metrics_" + tag + ".csv"), std::ios::binary);
    r.log.write_csv(csv);
    write_checkpoint(out / ("checkpoint_" + tag + ".bin"),
                     make_checkpoint(model, cfg.base_seed(seed), cfg.adapter_seed(seed)));
    std::cout << cfg.scheme.label() << " " << task.spec().name << " seed " << seed << ": final eval loss "
              << r.log.final_eval_loss << ", accuracy " << r.log.final_eval_accuracy << ", best step "
              << r.log.best_step << "\n";
  }
  std::cout << "wrote " << out.string() << "\n";
  return kOk;
}

struct ContinualArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  std::string compare;  // "lora,sharea": baseline then candidate
};

int cmd_continual(const ContinualArgs& a) {
  const ExperimentConfig base_cfg = load_config(a.config, a.overrides);
  if (base_cfg.phases.empty()) throw ConfigError(a.config + ":0: continual needs a [continual] section");
  const fs::path out = output_dir(a.out, base_cfg.output_dir);
  fs::create_directories(out);
  write_text(out / "resolved_config.toml", to_toml(base_cfg));

  std::vector<std::string> labels;
  if (a.compare.empty()) {
    labels.push_back(base_cfg.scheme.label());
  } else {
    std::stringstream ss(a.compare);
    for (std::string l; std::getline(ss, l, ',');) labels.push_back(l);
    if (labels.size() != 2) throw ConfigError("--compare expects two schemes, e.g. lora,sharea");
  }
  nlohmann::json deltas = nlohmann::json::array();
  for (std::uint64_t seed : base_cfg.seeds) {
    std::vector<RetentionMatrix> matrices;
    for (const std::string& label : labels) {
      ExperimentConfig cfg = base_cfg;
      cfg.scheme = AdapterScheme::named(label, base_cfg.scheme.rank, base_cfg.scheme.alpha, base_cfg.scheme.targets);
      cfg.scheme.scaling = base_cfg.scheme.scaling;
      cfg.scheme.validate(cfg.model);
      TinyTransformer model = cfg.make_model(seed);
      std::vector<MetricsLog> logs;
      matrices.push_back(run_continual(model, cfg.phase_plan(), cfg.train, seed, &logs));
      const std::string tag = label + "_seed" + std::to_string(seed);
      write_text(out / ("retention_" + tag + ".json"), matrices.back().to_json().dump(2) + "\n");
      for (std::size_t p = 0; p < logs.size(); ++p) {
        std::ofstream csv(out / ("metrics_" + tag + "_phase" + std::to_string(p + 1) + ".csv"), std::ios::binary);
        logs[p].write_csv(csv);
      }
      std::cout << label << " seed " << seed << ": " << matrices.back().to_json()["backward_transfer"].dump() << "\n";
    }
    if (matrices.size() == 2) {
      nlohmann::json d = retention_delta(matrices[0], matrices[1], labels[0], labels[1]).to_json();
      d["seed"] = seed;
      deltas.push_back(d);
    }
  }
  if (!deltas.empty()) {
    write_text(out / "retention_delta.json", nlohmann::json{{"schema_version", 1}, {"runs", deltas}}.dump(2) + "\n");
    std::cout << "retention delta (" << labels[1] << " - " << labels[0] << "): " << deltas.dump() << "\n";
  }
  return kOk;
}

struct AuditArgs {
  std::string preset;
  std::string scheme;
  int rank = 8;
  double alpha = 16.0;
  std::string targets = "all";
  std::string baseline;
  bool assert_paper = false;
  bool memory = false;
  bool table = false;
  std::size_t batch = 1;
  std::size_t seq = 512;
};

AdapterScheme audit_scheme(const ModelSpec& spec, const std::string& label, const AuditArgs& a) {
  const std::set<ModuleType> targets = a.targets == "all" ? all_targets(spec) : parse_targets(a.targets);
  AdapterScheme s = AdapterScheme::named(label, a.rank, a.alpha, targets);
  s.validate(spec);
  return s;
}

int paper_table() {
  bool ok = true;
  nlohmann::json rows = nlohmann::json::array();
  for (const PaperValue& v : paper_values()) {
    const ModelSpec spec = preset_spec(v.preset);
    AuditArgs a;
    a.rank = v.rank > 0 ? v.rank : 8;
    a.targets = v.targets;
    const AuditReport r = count_params(spec, audit_scheme(spec, v.scheme, a));
    const bool match = matches_printed(r.total, v.printed_millions);
    if (v.asserted && !match) ok = false;
    rows.push_back({{"preset", v.preset}, {"scheme", v.scheme}, {"rank", v.rank}, {"targets", v.targets},
                    {"ours", r.total}, {"ours_rounded", r.rounded()}, {"printed_millions", v.printed_millions},
                    {"match", match}, {"asserted", v.asserted}, {"source", v.source}});
  }
  std::cout << nlohmann::json{{"schema_version", kAuditSchemaVersion}, {"rows", rows}, {"passed", ok}}.dump(2) << "\n";
  return ok ? kOk : kPaperMismatch;
}

int cmd_audit(const AuditArgs& a) {
  if (a.table) return paper_table();
  if (a.preset.empty() || a.scheme.empty()) throw ConfigError("audit needs --preset and --scheme (or --paper-table)");
  const ModelSpec spec = preset_spec(a.preset);
  const AdapterScheme scheme = audit_scheme(spec, a.scheme, a);
  AuditReport report;
  std::optional<AdapterScheme> baseline;
  if (!a.baseline.empty()) {
    baseline = audit_scheme(spec, a.baseline, a);
    report = count_params(spec, scheme, *baseline);
  } else {
    report = count_params(spec, scheme);
  }
  nlohmann::json j = report.to_json();
  if (!scheme.is_adapter_mode()) {
    j["total_without_embeddings_and_head"] = full_model_params(spec, false);
    j["inclusion_rule"] = "total counts token embeddings, learned positions and an untied LM head";
  }
  if (a.memory) {
    const PrecisionConfig precision;
    const MemoryModel m = memory_estimate(spec, scheme, precision, a.batch, a.seq);
    j["memory"] = m.to_json();
    if (baseline) {
      const MemoryModel mb = memory_estimate(spec, *baseline, precision, a.batch, a.seq);
      j["memory_baseline"] = mb.to_json();
      j["trainable_state_delta_bytes"] = mb.trainable_state() - m.trainable_state();
    }
  }
  const std::string tkey = targets_key(spec, scheme);
  const auto paper = find_paper_value(a.preset, scheme.label(), scheme.rank, tkey);
  int code = kOk;
  if (paper) {
    const bool match = matches_printed(report.total, paper->printed_millions);
    j["paper"] = {{"printed_millions", paper->printed_millions}, {"source", paper->source},
                  {"match", match}, {"asserted", paper->asserted}};
    if (a.assert_paper && paper->asserted && !match) {
      std::cerr << "recorded value mismatch: expected " << paper->printed_millions << "M (" << paper->source << "), actual "
                << report.total << " (" << report.rounded() << ")\n";
      code = kPaperMismatch;
    }
  } else if (a.assert_paper) {
    std::cerr << "recorded value mismatch: no recorded value for preset " << a.preset << ", scheme " << scheme.label()
              << ", rank " << scheme.rank << ", targets " << tkey << "\n";
    code = kPaperMismatch;
  }
  std::cout << j.dump(2) << "\n";
  if (code == kOk) std::cerr << report.scheme << " on " << report.model << ": " << report.rounded() << "\n";
  return code;
}

struct SvdArgs {
  std::string checkpoint;
  std::string config;
  std::vector<std::string> overrides;
  std::uint64_t seed = 1;
  std::string out;
};

int cmd_svd(const SvdArgs& a) {
  std::optional<TinyTransformer> model;
  fs::path out;
  if (!a.checkpoint.empty()) {
    model.emplace(restore_model(read_checkpoint(a.checkpoint)));
    out = output_dir(a.out, fs::path(a.checkpoint).parent_path().string());
  } else if (!a.config.empty()) {
    const ExperimentConfig cfg = load_config(a.config, a.overrides);
    model.emplace(cfg.make_model(a.seed));
    out = output_dir(a.out, cfg.output_dir);
  } else {
    throw ConfigError("svd needs --checkpoint or --config");
  }
  if (out.empty()) out = ".";
  const SpectrumReport report = svd_spectrum(*model);
  fs::create_directories(out);
  std::ofstream csv(out / "spectrum.csv", std::ios::binary);
  report.write_csv(csv);
  write_text(out / "spectrum.json", report.to_json().dump(2) + "\n");
  report.write_csv(std::cout);
  return kOk;
}

struct GradcheckArgs {
  std::string scheme = "all";
  std::string checkpoint;
  int rank = 4;
  std::uint64_t seed = 7;
  double tolerance = 1e-4;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  std::vector<std::pair<TinyTransformer, std::string>> models;
  const ModelSpec tiny = preset_spec("tiny");
  if (!a.checkpoint.empty()) {
    TinyTransformer m = restore_model(read_checkpoint(a.checkpoint));
    const std::string label = m.scheme().label();
    models.emplace_back(std::move(m), label);
  } else {
    std::vector<std::string> labels = {"fullft", "lora", "lora_fa", "sharea", "shareb", "shareab", "sharea_qkv"};
    if (a.scheme != "all") labels = {a.scheme};
    for (const std::string& l : labels) {
      const AdapterScheme s = AdapterScheme::named(l, a.rank, 2.0 * a.rank, all_targets(tiny));
      TinyTransformer m(tiny, s, a.seed, a.seed + 1);
      if (s.is_adapter_mode()) randomize_adapter_b(m, a.seed + 2);
      models.emplace_back(std::move(m), l);
    }
  }
  bool ok = true;
  GradcheckOptions opt;
  opt.tolerance = a.tolerance;
  for (auto& [model, label] : models) {
    TaskSpec ts;
    ts.name = "gradcheck";
    ts.alphabet = 8;
    ts.length = 3;
    ts.batch_size = 2;
    ts.eval_size = 2;
    const Task task(ts, model.spec());
    std::mt19937_64 rng(a.seed);
    const GradcheckReport r = gradcheck(model, task.sample_train(rng), opt);
    ok = ok && r.passed;
    std::cout << (r.passed ? "PASS " : "FAIL ") << label << " max_rel_err " << r.max_rel_err << " over "
              << r.params.size() << " tensors\n";
  }
  return ok ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Shared low-rank adapter lab"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train one scheme on the configured task for every seed");
  t->add_option("config", train.config, "Config file")->required();
  t->add_option("--set", train.overrides, "Override section.key=value");
  t->add_option("--out", train.out, "Output directory");

  ContinualArgs cont;
  auto* c = app.add_subcommand("continual", "Run the configured phase plan and report retention");
  c->add_option("config", cont.config, "Config file")->required();
  c->add_option("--set", cont.overrides, "Override section.key=value");
  c->add_option("--out", cont.out, "Output directory");
  c->add_option("--compare", cont.compare, "Two schemes, baseline first (e.g. lora,sharea)");

  AuditArgs audit;
  auto* au = app.add_subcommand("audit", "Closed-form parameter counts and memory estimate");
  au->add_option("--preset", audit.preset, "Model preset");
  au->add_option("--scheme", audit.scheme, "fullft, lora, lora_fa, sharea, shareb, shareab, sharea_qkv");
  au->add_option("--rank", audit.rank, "Adapter rank")->check(CLI::PositiveNumber);
  au->add_option("--alpha", audit.alpha, "Adapter alpha");
  au->add_option("--targets", audit.targets, "all, or a comma list of q,k,v,o,gate,up,down");
  au->add_option("--baseline", audit.baseline, "Scheme for the reduction ratio");
  au->add_flag("--assert-paper", audit.assert_paper, "Fail unless the count matches the recorded printed value");
  au->add_flag("--memory", audit.memory, "Add the memory model");
  au->add_flag("--paper-table", audit.table, "Compare every recorded printed value");
  au->add_option("--batch", audit.batch, "Batch size for the activation term");
  au->add_option("--seq", audit.seq, "Sequence length for the activation term");

  SvdArgs svd;
  auto* s = app.add_subcommand("svd", "Singular value spectra of every adapter update");
  s->add_option("--checkpoint", svd.checkpoint, "Checkpoint file");
  s->add_option("--config", svd.config, "Config file (fresh adapters)");
  s->add_option("--set", svd.overrides, "Override section.key=value");
  s->add_option("--seed", svd.seed, "Seed used with --config");
  s->add_option("--out", svd.out, "Output directory");

  GradcheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "Autodiff against central differences on the tiny preset");
  g->add_option("--scheme", gc.scheme, "Scheme label or all");
  g->add_option("--checkpoint", gc.checkpoint, "Check at a checkpoint's parameters instead");
  g->add_option("--rank", gc.rank, "Adapter rank")->check(CLI::PositiveNumber);
  g->add_option("--seed", gc.seed, "Seed");
  g->add_option("--tolerance", gc.tolerance, "Relative error bound");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kBadConfig;
  }

  try {
    if (t->parsed()) return cmd_train(train);
    if (c->parsed()) return cmd_continual(cont);
    if (au->parsed()) return cmd_audit(audit);
    if (s->parsed()) return cmd_svd(svd);
    if (g->parsed()) return cmd_gradcheck(gc);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kBadConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return kDiverged;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kBadCheckpoint;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCheckFailed;
  }
  return kBadConfig;
}
