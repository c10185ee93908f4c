#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stagformer/attention.hpp"
#include "stagformer/tensor.hpp"

namespace stagformer {

using TokenId = std::uint32_t;

// 256 byte values followed by three specials.
inline constexpr TokenId kBosToken = 256;
inline constexpr TokenId kEosToken = 257;
inline constexpr TokenId kPadToken = 258;
inline constexpr std::size_t kByteVocabSize = 259;

// Architectural description of a baseline Transformer or a StagFormer.
//
// Separate weights: total_layers is split into `stacks` stacks of
// total_layers / stacks layers each. Shared weights: every pass runs the
// same total_layers layers, so a pass has total_layers layers and the model
// applies stacks * total_layers layers in total.
struct ModelConfig {
  std::size_t vocab_size = kByteVocabSize;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t d_ff = 512;
  std::size_t total_layers = 8;
  std::size_t stacks = 1;
  bool weight_sharing = false;
  std::optional<std::size_t> cross_window;
  std::size_t max_seq_len = 256;
  double rope_base = 10000.0;
  std::uint64_t seed = 0;
  double init_std = 0.02;

  std::size_t head_dim() const { return d_model / n_heads; }
  // Layers run by each stack (pass).
  std::size_t layers_per_stack() const { return weight_sharing ? total_layers : total_layers / stacks; }
  // Layers that carry a cross-attention sublayer.
  std::size_t cross_layers() const { return (stacks - 1) * layers_per_stack(); }
  // Total layer applications in one forward pass.
  std::size_t layer_applications() const { return stacks * layers_per_stack(); }
  bool alpha_trainable() const { return stacks > 2; }

  bool operator==(const ModelConfig&) const = default;
};

// Throws ConfigError naming every violated field.
const ModelConfig& validate_config(const ModelConfig& cfg);

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
};

struct FeedForwardParams {
  Tensor w_in;   // [d x d_ff]
  Tensor b_in;   // [d_ff]
  Tensor w_out;  // [d_ff x d]
  Tensor b_out;  // [d]
};

struct TransformerLayerParams {
  LayerNormParams attn_norm;
  AttentionProjections attn;
  LayerNormParams ffn_norm;
  FeedForwardParams ffn;
};

struct CrossAttentionParams {
  LayerNormParams query_norm;
  LayerNormParams source_norm;
  AttentionProjections attn;
};

struct NamedParameter {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

struct ModelWeights {
  ModelConfig config;
  Tensor token_embedding;     // [vocab x d]
  Tensor position_embedding;  // [max_seq_len x d]
  // Separate weights: one entry per layer (stack-major). Shared: one set.
  std::vector<TransformerLayerParams> layers;
  // cross[k - 1][j]: cross-attention of layer j in stack k, k = 1..stacks-1.
  std::vector<std::vector<CrossAttentionParams>> cross;
  LayerNormParams final_norm;
  Tensor unembedding;  // [d x vocab]
  Tensor alpha;        // [stacks]

  const TransformerLayerParams& layer(std::size_t stack, std::size_t index) const;
  const CrossAttentionParams& cross_params(std::size_t stack, std::size_t index) const;
  // Stable, checkpoint order.
  std::vector<NamedParameter> parameters() const;
  std::vector<Tensor> trainable_tensors() const;
};

// Truncated normal (2 sigma) with std cfg.init_std for matrices and
// embeddings, unit gains, zero biases, alpha = (0, ..., 0, 1).
ModelWeights init_weights(const ModelConfig& cfg, std::uint64_t seed);

// Number of trainable scalars; shared layers counted once.
std::size_t count_params(const ModelConfig& cfg);

// Sum_k alpha_k * outputs[k], differentiable in both.
Tensor combine_stack_outputs(std::span<const Tensor> outputs, const Tensor& alpha);

// Which stack caches to fill during a forward pass of a batch-1 sequence.
struct CaptureTarget {
  KVCacheSet* caches = nullptr;
  bool self = true;
  bool cross = true;
};

struct ForwardOptions {
  // Number of sequences packed in `tokens`; each has tokens.size() / batch.
  std::size_t batch = 1;
  // Replaces stack k's final activations before any consumer reads them.
  std::function<Tensor(std::size_t stack, const Tensor& output)> edit_stack_output;
  bool keep_layer_activations = false;
  // One entry per stack, or empty.
  std::vector<CaptureTarget> capture;
};

struct ForwardTrace {
  // t_{h*k} for k = 1..stacks, each [batch*n x d].
  std::vector<Tensor> stack_outputs;
  std::vector<std::vector<Tensor>> layer_activations;
  Tensor logits;  // [batch*n x vocab]
  // Cross-attention pairs whose key is at or after the query position.
  std::size_t cross_mask_violations = 0;
};

ForwardTrace forward_teacher_forced(const ModelWeights& weights, std::span<const TokenId> tokens,
                                    const ForwardOptions& options = {});

// ---- single-position building blocks (no autograd) -----------------------------

BlockGeometry block_geometry(const ModelConfig& cfg, std::size_t batch = 1);
std::vector<double> layer_norm_row(std::span<const double> x, const LayerNormParams& params);
std::vector<double> embed_token(const ModelWeights& weights, TokenId token, std::size_t position);
// Final norm + unembedding of one combined row.
std::vector<double> logits_row(const ModelWeights& weights, std::span<const double> combined);
std::vector<double> feed_forward_row(std::span<const double> x, const FeedForwardParams& params);

}  // namespace stagformer
