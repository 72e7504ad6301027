#include "sharelora/paper_values.hpp"

#include "paper_values.json.hpp"

namespace sharelora {

const nlohmann::json& paper_values_json() {
  static const nlohmann::json j = nlohmann::json::parse(kEmbeddedPaperValues);
  return j;
}

const std::vector<PaperValue>& paper_values() {
  static const std::vector<PaperValue> values = [] {
    std::vector<PaperValue> out;
    for (const auto& e : paper_values_json().at("entries")) {
      out.push_back({e.at("preset").get<std::string>(), e.at("scheme").get<std::string>(), e.at("rank").get<int>(),
                     e.at("targets").get<std::string>(), e.at("printed_millions").get<double>(),
                     e.value("asserted", true), e.at("source").get<std::string>()});
    }
    return out;
  }();
  return values;
}

std::optional<PaperValue> find_paper_value(const std::string& preset, const std::string& scheme, int rank,
                                           const std::string& targets) {
  for (const PaperValue& v : paper_values()) {
    if (v.preset == preset && v.scheme == scheme && (v.scheme == "fullft" || v.rank == rank) && v.targets == targets) {
      return v;
    }
  }
  return std::nullopt;
}

}  // namespace sharelora
