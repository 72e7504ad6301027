#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "sharelora/adapters.hpp"
#include "sharelora/model_spec.hpp"
#include "sharelora/tasks.hpp"
#include "sharelora/trainer.hpp"

namespace sharelora {

/// Minimal TOML subset: `[section]` or `[section.name]` headers, `key = value`
/// with strings, integers, floats, booleans and flat arrays, `#` comments.
struct ConfigValue {
  using Scalar = std::variant<std::string, std::int64_t, double, bool>;
  std::variant<Scalar, std::vector<Scalar>> value;
  int line = 0;
};

struct ConfigDocument {
  std::string source;
  // section -> key -> value
  std::map<std::string, std::map<std::string, ConfigValue>> sections;
  std::map<std::string, int> section_lines;
};

ConfigDocument parse_config_text(const std::string& text, const std::string& source);

// `section.key=value` with the value in config syntax; unquoted text is taken as a string.
void apply_override(ConfigDocument& doc, const std::string& assignment);

struct ExperimentConfig {
  std::string preset = "tiny";
  ModelSpec model;
  AdapterScheme scheme;
  std::vector<TaskSpec> tasks;  // [task] alone, or one per [task.<name>]
  std::vector<Phase> phases;    // [continual] phases = ["name:steps", ...]
  std::vector<std::string> eval_tasks;
  TrainHyper train;
  std::vector<std::uint64_t> seeds{1};
  std::uint64_t base_seed_offset = 1000;   // base weights come from offset + seed
  std::uint64_t adapter_seed_offset = 2000;
  std::string output_dir = "out";

  std::uint64_t base_seed(std::uint64_t seed) const { return base_seed_offset + seed; }
  std::uint64_t adapter_seed(std::uint64_t seed) const { return adapter_seed_offset + seed; }
  PhasePlan phase_plan() const;
  // Model for one seed of this experiment.
  TinyTransformer make_model(std::uint64_t seed) const;
};

// Validates everything; ConfigError messages start with "<source>:<line>:".
ExperimentConfig build_config(const ConfigDocument& doc);
ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

// Fully resolved config in the same syntax; parsing it back yields an identical config.
std::string to_toml(const ExperimentConfig& config);

}  // namespace sharelora
