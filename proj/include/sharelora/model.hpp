#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sharelora/adapters.hpp"
#include "sharelora/model_spec.hpp"
#include "sharelora/tensor.hpp"

namespace sharelora {

// Row-major [batch, seq] token ids.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> ids;
};

struct ForwardResult {
  Tensor logits;                       // [batch*seq, vocab]
  std::vector<Tensor> attention_probs; // per layer [batch*heads, seq, seq], only when requested
};

struct TransformerBlock {
  Tensor attn_norm_gain, attn_norm_bias;
  AdaptedLinear q, k, v, o;
  Tensor mlp_norm_gain, mlp_norm_bias;
  AdaptedLinear gate, up, down;  // gate unused when the spec has no gated MLP

  AdaptedLinear& linear(ModuleType type);
  const AdaptedLinear& linear(ModuleType type) const;
};

/// Pre-norm decoder with causal attention and a GELU-gated MLP.
///
/// Base weights come from base_seed alone, so models built with different
/// schemes but the same base_seed share an identical frozen base.
class TinyTransformer {
 public:
  TinyTransformer(ModelSpec spec, AdapterScheme scheme, std::uint64_t base_seed, std::uint64_t adapter_seed);

  // The frozen base: same weights, no adapters, nothing trainable.
  static TinyTransformer base_model(const ModelSpec& spec, std::uint64_t base_seed);

  ForwardResult forward(const TokenBatch& tokens, bool keep_attention = false) const;
  Tensor logits(const TokenBatch& tokens) const { return forward(tokens).logits; }
  Tensor loss(const TokenBatch& tokens, std::span<const int> targets) const;

  // FullFT: every base tensor. Adapter modes: adapter matrices only.
  std::vector<NamedTensor> trainable_parameters() const;
  std::vector<NamedTensor> base_parameters() const;

  // Copies base weight values (matched by name) from a model with the same spec.
  void load_base_weights(const TinyTransformer& source);

  // Folds every adapter into its base weight.
  TinyTransformer merged() const;

  const ModelSpec& spec() const { return spec_; }
  const AdapterScheme& scheme() const { return scheme_; }
  const AdapterSet& adapter_set() const { return adapters_; }
  std::size_t n_layers() const { return blocks_.size(); }
  TransformerBlock& block(std::size_t layer) { return blocks_.at(layer); }
  const TransformerBlock& block(std::size_t layer) const { return blocks_.at(layer); }
  AdaptedLinear& linear(std::size_t layer, ModuleType type) { return blocks_.at(layer).linear(type); }
  const AdaptedLinear& linear(std::size_t layer, ModuleType type) const { return blocks_.at(layer).linear(type); }
  // Adapted linears in layer-major order.
  std::vector<const AdaptedLinear*> adapted_layers() const;

 private:
  TinyTransformer() = default;
  void build_base(std::uint64_t base_seed);
  void attach_adapters(std::uint64_t adapter_seed);
  void set_base_trainable(bool trainable);
  Tensor attention(const AdaptedLinear& q, const AdaptedLinear& k, const AdaptedLinear& v, const Tensor& h,
                   std::size_t batch, std::size_t seq, std::vector<Tensor>* probs) const;

  ModelSpec spec_;
  AdapterScheme scheme_;
  AdapterSet adapters_;
  Tensor token_embedding_;     // [vocab, hidden]
  Tensor position_embedding_;  // [max_seq, hidden]; learned, or a constant sinusoid table
  std::vector<TransformerBlock> blocks_;
  Tensor final_norm_gain_, final_norm_bias_;
  Tensor head_;  // [hidden, vocab], undefined when tied
};

}  // namespace sharelora
