#include "sharelora/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sharelora/errors.hpp"

namespace sharelora {

std::string_view mode_name(AdapterMode mode) {
  switch (mode) {
    case AdapterMode::kFullFT: return "fullft";
    case AdapterMode::kLoRA: return "lora";
    case AdapterMode::kLoRA_FA: return "lora_fa";
    case AdapterMode::kShareA: return "sharea";
    case AdapterMode::kShareB: return "shareb";
    case AdapterMode::kShareAB: return "shareab";
  }
  return "?";
}

double AdapterScheme::scale() const {
  return scaling == ScalingConvention::kAlphaOverR ? alpha / static_cast<double>(rank) : alpha;
}

std::string AdapterScheme::label() const {
  std::string s(mode_name(mode));
  if (share_scope == ShareScope::kQkvOnly) s += "_qkv";
  return s;
}

bool AdapterScheme::shares(ModuleType type, MatrixRole role) const {
  switch (mode) {
    case AdapterMode::kShareA:
      return role == MatrixRole::kA && (share_scope == ShareScope::kPerModuleTypeAcrossLayers || is_attention_qkv(type));
    case AdapterMode::kShareB: return role == MatrixRole::kB;
    case AdapterMode::kShareAB: return true;
    default: return false;
  }
}

void AdapterScheme::validate(const ModelSpec& spec) const {
  spec.validate();
  if (share_scope == ShareScope::kQkvOnly) {
    if (mode != AdapterMode::kShareA) throw ConfigError("share_scope qkv_only requires mode sharea");
    for (ModuleType t : {ModuleType::kQ, ModuleType::kK, ModuleType::kV}) {
      if (!targets.contains(t)) throw ConfigError("share_scope qkv_only requires q, k and v in target_modules");
    }
  }
  if (mode == AdapterMode::kFullFT) return;
  if (rank < 1) throw ConfigError("adapter rank must be >= 1, got " + std::to_string(rank));
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("adapter alpha must be a positive finite number");
  if (targets.empty()) throw ConfigError("adapter scheme has no target modules");
  for (ModuleType t : targets) {
    const auto [in, out] = module_dims(spec, t);
    if (static_cast<std::size_t>(rank) > std::min(in, out)) {
      throw ConfigError("rank " + std::to_string(rank) + " exceeds dimension of module '" +
                        std::string(module_name(t)) + "' (" + std::to_string(in) + "x" + std::to_string(out) + ")");
    }
  }
}

AdapterScheme AdapterScheme::named(std::string_view label, int rank, double alpha, std::set<ModuleType> targets) {
  AdapterScheme s;
  s.rank = rank;
  s.alpha = alpha;
  s.targets = std::move(targets);
  if (label == "fullft") {
    s.mode = AdapterMode::kFullFT;
  } else if (label == "lora") {
    s.mode = AdapterMode::kLoRA;
  } else if (label == "lora_fa") {
    s.mode = AdapterMode::kLoRA_FA;
  } else if (label == "sharea") {
    s.mode = AdapterMode::kShareA;
  } else if (label == "shareb") {
    s.mode = AdapterMode::kShareB;
  } else if (label == "shareab") {
    s.mode = AdapterMode::kShareAB;
  } else if (label == "sharea_qkv") {
    s.mode = AdapterMode::kShareA;
    s.share_scope = ShareScope::kQkvOnly;
  } else {
    throw ConfigError("unknown scheme '" + std::string(label) +
                      "' (expected fullft, lora, lora_fa, sharea, shareb, shareab, sharea_qkv)");
  }
  return s;
}

std::set<ModuleType> all_targets(const ModelSpec& spec) {
  std::set<ModuleType> out;
  for (ModuleType t : kAllModuleTypes) {
    if (spec.has_module(t)) out.insert(t);
  }
  return out;
}

std::set<ModuleType> parse_targets(std::string_view comma_list) {
  std::set<ModuleType> out;
  std::size_t start = 0;
  while (start <= comma_list.size()) {
    const std::size_t end = std::min(comma_list.find(',', start), comma_list.size());
    std::string_view item = comma_list.substr(start, end - start);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    if (!item.empty()) out.insert(parse_module(item));
    start = end + 1;
  }
  return out;
}

std::string targets_str(const std::set<ModuleType>& targets) {
  std::string s;
  for (ModuleType t : targets) {
    if (!s.empty()) s += ',';
    s += module_name(t);
  }
  return s;
}

nlohmann::json to_json(const AdapterScheme& s) {
  nlohmann::json targets = nlohmann::json::array();
  for (ModuleType t : s.targets) targets.push_back(std::string(module_name(t)));
  return {{"scheme", s.label()},
          {"rank", s.rank},
          {"alpha", s.alpha},
          {"target_modules", targets},
          {"scaling_convention", s.scaling == ScalingConvention::kAlphaOverR ? "alpha_over_r" : "alpha"}};
}

AdapterScheme scheme_from_json(const nlohmann::json& j) {
  try {
    std::set<ModuleType> targets;
    for (const auto& t : j.at("target_modules")) targets.insert(parse_module(t.get<std::string>()));
    AdapterScheme s = AdapterScheme::named(j.at("scheme").get<std::string>(), j.at("rank").get<int>(),
                                           j.at("alpha").get<double>(), std::move(targets));
    const std::string conv = j.at("scaling_convention").get<std::string>();
    if (conv == "alpha") {
      s.scaling = ScalingConvention::kAlpha;
    } else if (conv != "alpha_over_r") {
      throw ConfigError("unknown scaling_convention '" + conv + "'");
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed adapter scheme: ") + e.what());
  }
}

std::string shared_param_name(SharedKey key) {
  return "shared." + std::string(module_name(key.type)) + (key.role == MatrixRole::kA ? ".A" : ".B");
}

std::string owned_param_name(std::size_t layer, ModuleType type, MatrixRole role) {
  return "layers." + std::to_string(layer) + "." + std::string(module_name(type)) +
         (role == MatrixRole::kA ? ".A" : ".B");
}

Tensor& SharedParamStore::insert(SharedKey key, Tensor matrix) {
  auto [it, inserted] = entries_.try_emplace(key, Entry{std::move(matrix), {}});
  if (!inserted) throw ContractError("shared matrix " + shared_param_name(key) + " already exists");
  return it->second.matrix;
}

void SharedParamStore::attach(SharedKey key, std::size_t layer) {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw ContractError("no shared matrix " + shared_param_name(key));
  it->second.sites.push_back(layer);
}

const SharedParamStore::Entry* SharedParamStore::find(SharedKey key) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? nullptr : &it->second;
}

std::size_t AdapterPlan::owned_a_count() const {
  return static_cast<std::size_t>(std::count_if(slots.begin(), slots.end(), [](const AdapterSlot& s) { return !s.a_shared; }));
}

std::size_t AdapterPlan::owned_b_count() const {
  return static_cast<std::size_t>(std::count_if(slots.begin(), slots.end(), [](const AdapterSlot& s) { return !s.b_shared; }));
}

std::size_t AdapterPlan::trainable_count() const {
  std::size_t total = 0;
  std::set<SharedKey> counted;
  for (const AdapterSlot& s : slots) {
    const SharedKey ka{s.module_type, MatrixRole::kA};
    const SharedKey kb{s.module_type, MatrixRole::kB};
    if (!s.frozen_a && (!s.a_shared || counted.insert(ka).second)) total += s.in_dim * rank;
    if (!s.b_shared || counted.insert(kb).second) total += rank * s.out_dim;
  }
  return total;
}

AdapterPlan plan_adapters(const ModelSpec& spec, const AdapterScheme& scheme) {
  scheme.validate(spec);
  AdapterPlan plan;
  if (!scheme.is_adapter_mode()) return plan;
  plan.rank = static_cast<std::size_t>(scheme.rank);
  for (std::size_t layer = 0; layer < spec.n_layers; ++layer) {
    for (ModuleType t : kAllModuleTypes) {
      if (!scheme.targets.contains(t)) continue;
      const auto [in, out] = module_dims(spec, t);
      AdapterSlot slot{layer, t, in, out, scheme.shares(t, MatrixRole::kA), scheme.shares(t, MatrixRole::kB),
                       scheme.mode == AdapterMode::kLoRA_FA};
      if (slot.a_shared) plan.shared_keys.insert({t, MatrixRole::kA});
      if (slot.b_shared) plan.shared_keys.insert({t, MatrixRole::kB});
      plan.slots.push_back(slot);
    }
  }
  return plan;
}

AdapterSet build_adapters(const ModelSpec& spec, const AdapterScheme& scheme, std::uint64_t seed) {
  const AdapterPlan plan = plan_adapters(spec, scheme);
  AdapterSet set;
  if (plan.slots.empty()) return set;
  const std::size_t r = plan.rank;
  std::mt19937_64 rng(seed);

  auto make_a = [&](std::size_t in, bool trainable, std::string name) {
    Tensor a = Tensor::randn({in, r}, 1.0 / std::sqrt(static_cast<double>(in)), rng, trainable);
    a.set_name(std::move(name));
    return a;
  };
  auto make_b = [&](std::size_t out, std::string name) {
    Tensor b = Tensor::zeros({r, out}, true);
    b.set_name(std::move(name));
    return b;
  };

  // Shared matrices first so owned initialization does not depend on how many layers attach to them.
  for (SharedKey key : plan.shared_keys) {
    const auto [in, out] = module_dims(spec, key.type);
    set.store.insert(key, key.role == MatrixRole::kA ? make_a(in, true, shared_param_name(key))
                                                     : make_b(out, shared_param_name(key)));
  }
  for (const AdapterSlot& slot : plan.slots) {
    LayerAdapter la;
    la.layer_index = slot.layer_index;
    la.module_type = slot.module_type;
    la.a_shared = slot.a_shared;
    la.b_shared = slot.b_shared;
    la.frozen_a = slot.frozen_a;
    const SharedKey ka{slot.module_type, MatrixRole::kA};
    const SharedKey kb{slot.module_type, MatrixRole::kB};
    if (slot.a_shared) {
      la.a = set.store.find(ka)->matrix;
      set.store.attach(ka, slot.layer_index);
    } else {
      la.a = make_a(slot.in_dim, !slot.frozen_a, owned_param_name(slot.layer_index, slot.module_type, MatrixRole::kA));
    }
    if (slot.b_shared) {
      la.b = set.store.find(kb)->matrix;
      set.store.attach(kb, slot.layer_index);
    } else {
      la.b = make_b(slot.out_dim, owned_param_name(slot.layer_index, slot.module_type, MatrixRole::kB));
    }
    set.adapters.push_back(std::move(la));
  }
  return set;
}

std::vector<NamedTensor> trainable_parameters(const AdapterSet& set) {
  std::vector<NamedTensor> out;
  for (const auto& [key, entry] : set.store.entries()) out.push_back({shared_param_name(key), entry.matrix});
  for (const LayerAdapter& la : set.adapters) {
    if (!la.a_shared && !la.frozen_a) out.push_back({la.a.name(), la.a});
    if (!la.b_shared) out.push_back({la.b.name(), la.b});
  }
  return out;
}

Tensor adapted_forward(const Tensor& x, const AdaptedLinear& layer) {
  if (x.ndim() != 2 || x.dim(1) != layer.in_dim()) {
    throw DimensionError("adapted_forward: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(layer.weight.shape()));
  }
  Tensor out = matmul(x, layer.weight);
  if (layer.adapter) {
    const Tensor low = matmul(matmul(x, layer.adapter->a), layer.adapter->b);
    out = add(out, scale(low, layer.scale));
  }
  if (layer.bias.defined()) out = add(out, layer.bias);
  return out;
}

Tensor delta_weight(const AdaptedLinear& layer) {
  if (!layer.adapter) throw ContractError("delta_weight: layer has no adapter (full fine-tune has no low-rank update)");
  return scale(matmul(layer.adapter->a, layer.adapter->b), layer.scale);
}

Tensor delta_weight_rank1(const AdaptedLinear& layer) {
  if (!layer.adapter) throw ContractError("delta_weight_rank1: layer has no adapter");
  const Tensor& a = layer.adapter->a;
  const Tensor& b = layer.adapter->b;
  const std::size_t in = a.dim(0), r = a.dim(1), out = b.dim(1);
  std::vector<double> dw(in * out, 0.0);
  for (std::size_t k = 0; k < r; ++k) {
    for (std::size_t i = 0; i < in; ++i) {
      const double aik = a.data()[i * r + k];
      for (std::size_t j = 0; j < out; ++j) dw[i * out + j] += aik * b.data()[k * out + j];
    }
  }
  for (double& v : dw) v *= layer.scale;
  return Tensor::from({in, out}, std::move(dw));
}

AdaptedLinear merge(const AdaptedLinear& layer) {
  AdaptedLinear merged;
  {
    NoGradGuard no_grad;
    merged.weight = add(layer.weight, delta_weight(layer)).detach();
  }
  merged.weight.set_name(layer.weight.name());
  if (layer.bias.defined()) merged.bias = layer.bias.detach();
  return merged;
}

}  // namespace sharelora
