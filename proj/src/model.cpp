#include "sharelora/model.hpp"

#include <cmath>

#include "sharelora/errors.hpp"

namespace sharelora {

AdaptedLinear& TransformerBlock::linear(ModuleType type) {
  return const_cast<AdaptedLinear&>(static_cast<const TransformerBlock&>(*this).linear(type));
}

const AdaptedLinear& TransformerBlock::linear(ModuleType type) const {
  switch (type) {
    case ModuleType::kQ: return q;
    case ModuleType::kK: return k;
    case ModuleType::kV: return v;
    case ModuleType::kO: return o;
    case ModuleType::kGate: return gate;
    case ModuleType::kUp: return up;
    case ModuleType::kDown: return down;
  }
  throw ContractError("unknown module type");
}

TinyTransformer::TinyTransformer(ModelSpec spec, AdapterScheme scheme, std::uint64_t base_seed,
                                 std::uint64_t adapter_seed)
    : spec_(std::move(spec)), scheme_(std::move(scheme)) {
  scheme_.validate(spec_);
  build_base(base_seed);
  set_base_trainable(scheme_.mode == AdapterMode::kFullFT);
  if (scheme_.is_adapter_mode()) attach_adapters(adapter_seed);
}

TinyTransformer TinyTransformer::base_model(const ModelSpec& spec, std::uint64_t base_seed) {
  AdapterScheme full;
  full.mode = AdapterMode::kFullFT;
  TinyTransformer m(spec, full, base_seed, 0);
  m.set_base_trainable(false);
  return m;
}

void TinyTransformer::build_base(std::uint64_t base_seed) {
  std::mt19937_64 rng(base_seed);
  const std::size_t h = spec_.hidden_dim;
  auto named = [](Tensor t, std::string name) {
    t.set_name(std::move(name));
    return t;
  };
  auto make_linear = [&](std::size_t in, std::size_t out, const std::string& prefix) {
    AdaptedLinear lin;
    lin.weight = named(Tensor::randn({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng), prefix + ".weight");
    if (spec_.linear_bias) lin.bias = named(Tensor::zeros({out}), prefix + ".bias");
    return lin;
  };
  auto make_norm = [&](Tensor& gain, Tensor& bias, const std::string& prefix) {
    gain = named(Tensor::full({h}, 1.0), prefix + ".gain");
    if (spec_.norm_bias) bias = named(Tensor::zeros({h}), prefix + ".bias");
  };

  token_embedding_ = named(Tensor::randn({spec_.vocab_size, h}, 1.0, rng), "embed.token");
  if (spec_.learned_positions) {
    position_embedding_ = named(Tensor::randn({spec_.max_seq_len, h}, 1.0, rng), "embed.position");
  } else {
    std::vector<double> table(spec_.max_seq_len * h);
    for (std::size_t t = 0; t < spec_.max_seq_len; ++t) {
      for (std::size_t i = 0; i < h; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(h));
        table[t * h + i] = (i % 2 == 0) ? std::sin(static_cast<double>(t) * freq) : std::cos(static_cast<double>(t) * freq);
      }
    }
    position_embedding_ = Tensor::from({spec_.max_seq_len, h}, std::move(table));
  }

  blocks_.clear();
  for (std::size_t layer = 0; layer < spec_.n_layers; ++layer) {
    const std::string p = "layers." + std::to_string(layer);
    TransformerBlock b;
    make_norm(b.attn_norm_gain, b.attn_norm_bias, p + ".attn_norm");
    b.q = make_linear(h, h, p + ".q");
    b.k = make_linear(h, h, p + ".k");
    b.v = make_linear(h, h, p + ".v");
    b.o = make_linear(h, h, p + ".o");
    make_norm(b.mlp_norm_gain, b.mlp_norm_bias, p + ".mlp_norm");
    if (spec_.has_gated_mlp) b.gate = make_linear(h, spec_.intermediate_dim, p + ".gate");
    b.up = make_linear(h, spec_.intermediate_dim, p + ".up");
    b.down = make_linear(spec_.intermediate_dim, h, p + ".down");
    blocks_.push_back(std::move(b));
  }
  make_norm(final_norm_gain_, final_norm_bias_, "final_norm");
  // Unit scale: a 1/sqrt(h) head caps the logit margin of the frozen base after the final norm.
  if (!spec_.tied_head) head_ = named(Tensor::randn({h, spec_.vocab_size}, 1.0, rng), "head");
}

std::vector<NamedTensor> TinyTransformer::base_parameters() const {
  std::vector<NamedTensor> out;
  auto push = [&out](const Tensor& t) {
    if (t.defined()) out.push_back({t.name(), t});
  };
  push(token_embedding_);
  if (spec_.learned_positions) push(position_embedding_);
  for (const TransformerBlock& b : blocks_) {
    push(b.attn_norm_gain);
    push(b.attn_norm_bias);
    for (ModuleType t : kAllModuleTypes) {
      if (!spec_.has_module(t)) continue;
      push(b.linear(t).weight);
      push(b.linear(t).bias);
    }
    push(b.mlp_norm_gain);
    push(b.mlp_norm_bias);
  }
  push(final_norm_gain_);
  push(final_norm_bias_);
  push(head_);
  return out;
}

void TinyTransformer::load_base_weights(const TinyTransformer& source) {
  if (!(source.spec_ == spec_)) throw ConfigError("load_base_weights: model specs differ");
  const std::vector<NamedTensor> src = source.base_parameters();
  std::vector<NamedTensor> dst = base_parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (src[i].name != dst[i].name) throw ContractError("load_base_weights: parameter order mismatch at " + dst[i].name);
    auto out = dst[i].tensor.mutable_data();
    std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), out.begin());
  }
}

void TinyTransformer::set_base_trainable(bool trainable) {
  for (NamedTensor& p : base_parameters()) p.tensor.set_requires_grad(trainable);
}

void TinyTransformer::attach_adapters(std::uint64_t adapter_seed) {
  adapters_ = build_adapters(spec_, scheme_, adapter_seed);
  for (const LayerAdapter& la : adapters_.adapters) {
    AdaptedLinear& lin = linear(la.layer_index, la.module_type);
    lin.adapter = la;
    lin.scale = scheme_.scale();
  }
}

std::vector<NamedTensor> TinyTransformer::trainable_parameters() const {
  if (scheme_.mode == AdapterMode::kFullFT) {
    std::vector<NamedTensor> out;
    for (NamedTensor& p : base_parameters()) {
      if (p.tensor.requires_grad()) out.push_back(std::move(p));
    }
    return out;
  }
  return sharelora::trainable_parameters(adapters_);
}

std::vector<const AdaptedLinear*> TinyTransformer::adapted_layers() const {
  std::vector<const AdaptedLinear*> out;
  for (const TransformerBlock& b : blocks_) {
    for (ModuleType t : kAllModuleTypes) {
      if (spec_.has_module(t) && b.linear(t).adapter) out.push_back(&b.linear(t));
    }
  }
  return out;
}

TinyTransformer TinyTransformer::merged() const {
  TinyTransformer m = *this;
  for (TransformerBlock& b : m.blocks_) {
    for (ModuleType t : kAllModuleTypes) {
      AdaptedLinear& lin = b.linear(t);
      if (lin.adapter) lin = merge(lin);
    }
  }
  m.adapters_ = AdapterSet{};
  return m;
}

Tensor TinyTransformer::attention(const AdaptedLinear& q, const AdaptedLinear& k, const AdaptedLinear& v,
                                  const Tensor& h, std::size_t batch, std::size_t seq,
                                  std::vector<Tensor>* probs) const {
  const std::size_t heads = spec_.n_heads;
  const std::size_t hd = spec_.head_dim();
  auto split = [&](const Tensor& t) {
    return reshape(permute(reshape(t, {batch, seq, heads, hd}), {0, 2, 1, 3}), {batch * heads, seq, hd});
  };
  const Tensor qh = split(adapted_forward(h, q));
  const Tensor kh = split(adapted_forward(h, k));
  const Tensor vh = split(adapted_forward(h, v));
  const Tensor scores = causal_mask(scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(hd))));
  const Tensor p = softmax_lastdim(scores);
  if (probs) probs->push_back(p);
  const Tensor ctx = matmul(p, vh);
  return reshape(permute(reshape(ctx, {batch, heads, seq, hd}), {0, 2, 1, 3}), {batch * seq, spec_.hidden_dim});
}

ForwardResult TinyTransformer::forward(const TokenBatch& tokens, bool keep_attention) const {
  if (tokens.seq == 0 || tokens.batch == 0) throw ContractError("forward: empty token batch");
  if (tokens.seq > spec_.max_seq_len) {
    throw ContractError("forward: sequence length " + std::to_string(tokens.seq) + " exceeds max_seq_len " +
                        std::to_string(spec_.max_seq_len));
  }
  if (tokens.ids.size() != tokens.batch * tokens.seq) {
    throw DimensionError("forward: " + std::to_string(tokens.ids.size()) + " ids for batch " +
                         std::to_string(tokens.batch) + "x" + std::to_string(tokens.seq));
  }
  std::vector<int> positions(tokens.ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % tokens.seq);

  ForwardResult result;
  Tensor x = add(embedding_lookup(token_embedding_, tokens.ids), embedding_lookup(position_embedding_, positions));
  for (const TransformerBlock& b : blocks_) {
    const Tensor h = layernorm(x, b.attn_norm_gain, b.attn_norm_bias);
    const Tensor attn = attention(b.q, b.k, b.v, h, tokens.batch, tokens.seq,
                                  keep_attention ? &result.attention_probs : nullptr);
    x = add(x, adapted_forward(attn, b.o));
    const Tensor h2 = layernorm(x, b.mlp_norm_gain, b.mlp_norm_bias);
    const Tensor inner = spec_.has_gated_mlp ? mul(gelu(adapted_forward(h2, b.gate)), adapted_forward(h2, b.up))
                                             : gelu(adapted_forward(h2, b.up));
    x = add(x, adapted_forward(inner, b.down));
  }
  x = layernorm(x, final_norm_gain_, final_norm_bias_);
  result.logits = head_.defined() ? matmul(x, head_) : matmul(x, transpose(token_embedding_));
  return result;
}

Tensor TinyTransformer::loss(const TokenBatch& tokens, std::span<const int> targets) const {
  return cross_entropy(forward(tokens).logits, targets);
}

}  // namespace sharelora
