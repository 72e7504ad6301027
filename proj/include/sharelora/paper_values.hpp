#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace sharelora {

struct PaperValue {
  std::string preset;
  std::string scheme;
  int rank = 0;
  std::string targets;  // "all" or a comma list
  double printed_millions = 0.0;
  bool asserted = true;  // false: reported next to our count, never enforced
  std::string source;
};

// The table compiled in from data/paper_values.json.
const nlohmann::json& paper_values_json();
const std::vector<PaperValue>& paper_values();

std::optional<PaperValue> find_paper_value(const std::string& preset, const std::string& scheme, int rank,
                                           const std::string& targets);

}  // namespace sharelora
