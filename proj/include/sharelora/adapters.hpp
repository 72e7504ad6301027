#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "sharelora/model_spec.hpp"
#include "sharelora/tensor.hpp"

namespace sharelora {

enum class AdapterMode { kFullFT, kLoRA, kLoRA_FA, kShareA, kShareB, kShareAB };
enum class ShareScope { kPerModuleTypeAcrossLayers, kQkvOnly };
// kAlphaOverR resolves s = alpha / r; kAlpha uses alpha as the bare multiplier.
enum class ScalingConvention { kAlpha, kAlphaOverR };
enum class MatrixRole { kA, kB };

std::string_view mode_name(AdapterMode mode);

struct AdapterScheme {
  AdapterMode mode = AdapterMode::kLoRA;
  int rank = 8;
  double alpha = 16.0;
  std::set<ModuleType> targets;
  ShareScope share_scope = ShareScope::kPerModuleTypeAcrossLayers;
  ScalingConvention scaling = ScalingConvention::kAlphaOverR;

  double scale() const;
  // Hyphen-free label used on the command line: fullft, lora, lora_fa, sharea, shareb, shareab, sharea_qkv.
  std::string label() const;
  bool is_adapter_mode() const { return mode != AdapterMode::kFullFT; }
  bool shares(ModuleType type, MatrixRole role) const;

  // Throws ConfigError naming the offending module or field.
  void validate(const ModelSpec& spec) const;

  // label as produced by label(); targets default to every projection the spec has.
  static AdapterScheme named(std::string_view label, int rank, double alpha, std::set<ModuleType> targets);
};

std::set<ModuleType> all_targets(const ModelSpec& spec);
std::set<ModuleType> parse_targets(std::string_view comma_list);
std::string targets_str(const std::set<ModuleType>& targets);

nlohmann::json to_json(const AdapterScheme& scheme);
AdapterScheme scheme_from_json(const nlohmann::json& j);

struct SharedKey {
  ModuleType type;
  MatrixRole role;
  auto operator<=>(const SharedKey&) const = default;
};

std::string shared_param_name(SharedKey key);

/// One matrix instance per (module type, role); every attachment site holds
/// a handle to the same storage, so their gradients sum into it.
class SharedParamStore {
 public:
  struct Entry {
    Tensor matrix;
    std::vector<std::size_t> sites;  // layer indices
  };

  Tensor& insert(SharedKey key, Tensor matrix);
  void attach(SharedKey key, std::size_t layer);
  const Entry* find(SharedKey key) const;
  const std::map<SharedKey, Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::map<SharedKey, Entry> entries_;
};

struct LayerAdapter {
  std::size_t layer_index = 0;
  ModuleType module_type = ModuleType::kQ;
  Tensor a;  // in_dim x r
  Tensor b;  // r x out_dim
  bool a_shared = false;
  bool b_shared = false;
  bool frozen_a = false;
};

// Shape-level description of one adapter site, used for counting without allocation.
struct AdapterSlot {
  std::size_t layer_index;
  ModuleType module_type;
  std::size_t in_dim;
  std::size_t out_dim;
  bool a_shared;
  bool b_shared;
  bool frozen_a;
};

struct AdapterPlan {
  std::vector<AdapterSlot> slots;
  std::set<SharedKey> shared_keys;
  std::size_t rank = 0;

  std::size_t owned_a_count() const;
  std::size_t owned_b_count() const;
  // Trainable scalars: shared matrices once, frozen A excluded.
  std::size_t trainable_count() const;
};

AdapterPlan plan_adapters(const ModelSpec& spec, const AdapterScheme& scheme);

struct AdapterSet {
  SharedParamStore store;
  std::vector<LayerAdapter> adapters;  // layer-major, module order q,k,v,o,gate,up,down
};

// A ~ N(0, 1/in_dim), B = 0. FullFT yields an empty set.
AdapterSet build_adapters(const ModelSpec& spec, const AdapterScheme& scheme, std::uint64_t seed);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

std::string owned_param_name(std::size_t layer, ModuleType type, MatrixRole role);

// Shared matrices appear once; frozen A is excluded. Base weights are the model's job.
std::vector<NamedTensor> trainable_parameters(const AdapterSet& set);

/// Linear map x -> x W + b with an optional low-rank update s A B.
struct AdaptedLinear {
  Tensor weight;  // in_dim x out_dim
  Tensor bias;    // out_dim, may be undefined
  std::optional<LayerAdapter> adapter;
  double scale = 1.0;

  std::size_t in_dim() const { return weight.dim(0); }
  std::size_t out_dim() const { return weight.dim(1); }
};

// x W + s (x A) B (+ bias); A B is never formed.
Tensor adapted_forward(const Tensor& x, const AdaptedLinear& layer);

// s A B as one product. Throws ContractError when no adapter is attached.
Tensor delta_weight(const AdaptedLinear& layer);
// s sum_k A[:,k] B[k,:], the same quantity accumulated one rank-1 term at a time.
Tensor delta_weight_rank1(const AdaptedLinear& layer);

// Plain frozen linear with weight W + delta_weight.
AdaptedLinear merge(const AdaptedLinear& layer);

}  // namespace sharelora
