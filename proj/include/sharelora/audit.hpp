#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sharelora/adapters.hpp"
#include "sharelora/model.hpp"
#include "sharelora/model_spec.hpp"
#include "sharelora/tasks.hpp"

namespace sharelora {

inline constexpr int kAuditSchemaVersion = 1;

// ---- parameter counts ----

struct BreakdownEntry {
  std::string component;  // "q.A", "down.B", or for full fine-tune "q", "embeddings", "norms", "head"
  std::size_t count = 0;
};

struct AuditReport {
  std::string model;
  std::string scheme;
  int rank = 0;
  std::string targets;
  std::size_t total = 0;
  std::vector<BreakdownEntry> breakdown;  // sums to total
  std::optional<std::string> baseline;
  std::optional<std::size_t> baseline_total;
  std::optional<double> reduction;  // 1 - total / baseline_total

  double millions() const { return static_cast<double>(total) / 1e6; }
  // One decimal for counts >= 1M, two below.
  std::string rounded() const;
  nlohmann::json to_json() const;
};

// Closed form from projection shapes; nothing is allocated.
AuditReport count_params(const ModelSpec& spec, const AdapterScheme& scheme);
AuditReport count_params(const ModelSpec& spec, const AdapterScheme& scheme, const AdapterScheme& baseline);

// Every base parameter. Without embeddings and head: projections, biases and norms only.
std::size_t full_model_params(const ModelSpec& spec, bool include_embeddings_and_head = true);

std::string format_millions(std::size_t count);

// A printed value with one decimal in millions covers +-0.1M.
inline constexpr double kPaperMatchTolerance = 0.1e6;
bool matches_printed(std::size_t count, double printed_millions);

// ---- memory ----

struct PrecisionConfig {
  double param_bytes = 2.0;   // trainable weights (bf16)
  double grad_bytes = 2.0;    // one gradient per trainable weight
  double moment_bytes = 4.0;  // each Adam moment (f32)
  int moments = 2;
  double frozen_bytes = 2.0;  // frozen base weights
  double activation_bytes = 2.0;

  nlohmann::json to_json() const;
};

struct MemoryModel {
  std::size_t trainable_params = 0;
  std::size_t frozen_params = 0;
  double params = 0.0;
  double gradients = 0.0;
  double moments = 0.0;
  double frozen = 0.0;
  double activations = 0.0;
  std::size_t batch = 0;
  std::size_t seq = 0;
  PrecisionConfig precision;

  double trainable_state() const { return params + gradients + moments; }
  double total() const { return trainable_state() + frozen + activations; }
  nlohmann::json to_json() const;
};

// Bytes. Activations count the stored forward values of every block
// (10h + 4i per token, two seq-long attention rows per head, r per adapted projection).
MemoryModel memory_estimate(const ModelSpec& spec, const AdapterScheme& scheme, const PrecisionConfig& precision,
                            std::size_t batch, std::size_t seq);

// ---- singular value spectra ----

// Singular values of a row-major rows x cols matrix by one-sided Jacobi, descending.
std::vector<double> jacobi_singular_values(std::vector<double> m, std::size_t rows, std::size_t cols,
                                           const std::string& label = "matrix", int max_sweeps = 100);

// Singular values of s A B (A: in x r, B: r x out) from the r x r core R_A R_B^T.
std::vector<double> lowrank_singular_values(std::span<const double> a, std::span<const double> b, std::size_t in,
                                            std::size_t r, std::size_t out, double s,
                                            const std::string& label = "adapter");

struct LayerSpectrum {
  std::size_t layer = 0;
  ModuleType module = ModuleType::kQ;
  std::vector<double> values;  // descending, length r
  std::size_t eff_rank_90 = 0;
  std::size_t eff_rank_99 = 0;
  double decay_slope = 0.0;  // least-squares slope of log10(sigma_k) over k
};

// Smallest k whose leading k values hold `energy` of the squared sum; 0 for an all-zero spectrum.
std::size_t effective_rank(const std::vector<double>& values, double energy);
double decay_slope(const std::vector<double>& values);

struct SpectrumReport {
  std::string scheme;
  std::size_t rank = 0;
  std::vector<LayerSpectrum> layers;

  // One row per adapted (layer, module).
  void write_csv(std::ostream& os) const;
  nlohmann::json to_json() const;
};

SpectrumReport svd_spectrum(const TinyTransformer& model);

// ---- gradient check ----

struct GradcheckOptions {
  double step = 1e-5;
  double floor = 1e-2;  // denominator floor for near-zero gradients
  double tolerance = 1e-4;
};

struct ParamCheck {
  std::string name;
  std::size_t size = 0;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
};

struct GradcheckReport {
  std::string scheme;
  std::vector<ParamCheck> params;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool passed = false;

  nlohmann::json to_json() const;
};

// Autodiff against central differences of the batch loss over every trainable scalar.
// Parameter values are restored afterwards.
GradcheckReport gradcheck(TinyTransformer& model, const Batch& sample, const GradcheckOptions& options = {});

// Fills every B with N(0, stddev^2) so gradients through A are non-trivial.
void randomize_adapter_b(TinyTransformer& model, std::uint64_t seed, double stddev = 0.5);

}  // namespace sharelora
