#include "stagformer/model.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "stagformer/errors.hpp"

namespace stagformer {

const ModelConfig& validate_config(const ModelConfig& cfg) {
  std::vector<std::string> problems;
  auto fail = [&](const std::string& field, const std::string& why) { problems.push_back(field + ": " + why); };

  if (cfg.vocab_size == 0) fail("vocab_size", "must be >= 1");
  if (cfg.d_model == 0) fail("d_model", "must be >= 1");
  if (cfg.n_heads == 0) {
    fail("n_heads", "must be >= 1");
  } else if (cfg.d_model % cfg.n_heads != 0) {
    fail("n_heads", "d_model " + std::to_string(cfg.d_model) + " not divisible by " + std::to_string(cfg.n_heads));
  } else if (cfg.head_dim() % 2 != 0) {
    fail("n_heads", "head dimension " + std::to_string(cfg.head_dim()) + " must be even for RoPE");
  }
  if (cfg.d_ff == 0) fail("d_ff", "must be >= 1");
  if (cfg.total_layers == 0) fail("total_layers", "must be >= 1");
  if (cfg.stacks == 0) {
    fail("stacks", "must be >= 1");
  } else {
    if (!cfg.weight_sharing && cfg.total_layers % cfg.stacks != 0) {
      fail("total_layers", std::to_string(cfg.total_layers) + " not divisible by stacks " +
                               std::to_string(cfg.stacks));
    }
    if (cfg.stacks == 1 && cfg.cross_window) fail("cross_window", "a single-stack model has no cross-attention");
    if (cfg.stacks == 1 && cfg.weight_sharing) fail("weight_sharing", "requires stacks >= 2");
  }
  if (cfg.cross_window && *cfg.cross_window == 0) fail("cross_window", "must be >= 1");
  if (cfg.max_seq_len == 0) fail("max_seq_len", "must be >= 1");
  if (!(cfg.rope_base > 0.0)) fail("rope_base", "must be positive");
  if (!(cfg.init_std > 0.0)) fail("init_std", "must be positive");

  if (!problems.empty()) {
    std::ostringstream os;
    os << "invalid model config";
    for (const auto& p : problems) os << "; " << p;
    throw ConfigError(os.str());
  }
  return cfg;
}

// ---- weights --------------------------------------------------------------------

const TransformerLayerParams& ModelWeights::layer(std::size_t stack, std::size_t index) const {
  const std::size_t h = config.layers_per_stack();
  return config.weight_sharing ? layers.at(index) : layers.at(stack * h + index);
}

const CrossAttentionParams& ModelWeights::cross_params(std::size_t stack, std::size_t index) const {
  if (stack == 0) throw IndexError("the first stack has no cross-attention");
  return cross.at(stack - 1).at(index);
}

namespace {

void add_norm(std::vector<NamedParameter>& out, const std::string& prefix, const LayerNormParams& p) {
  out.push_back({prefix + ".gain", p.gain});
  out.push_back({prefix + ".bias", p.bias});
}

void add_projections(std::vector<NamedParameter>& out, const std::string& prefix, const AttentionProjections& p) {
  out.push_back({prefix + ".query", p.query});
  out.push_back({prefix + ".key", p.key});
  out.push_back({prefix + ".value", p.value});
  out.push_back({prefix + ".output", p.output});
}

}  // namespace

std::vector<NamedParameter> ModelWeights::parameters() const {
  std::vector<NamedParameter> out;
  out.push_back({"token_embedding", token_embedding});
  out.push_back({"position_embedding", position_embedding});
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string prefix = "layers." + std::to_string(i);
    add_norm(out, prefix + ".attn_norm", layers[i].attn_norm);
    add_projections(out, prefix + ".attn", layers[i].attn);
    add_norm(out, prefix + ".ffn_norm", layers[i].ffn_norm);
    out.push_back({prefix + ".ffn.w_in", layers[i].ffn.w_in});
    out.push_back({prefix + ".ffn.b_in", layers[i].ffn.b_in});
    out.push_back({prefix + ".ffn.w_out", layers[i].ffn.w_out});
    out.push_back({prefix + ".ffn.b_out", layers[i].ffn.b_out});
  }
  for (std::size_t k = 0; k < cross.size(); ++k) {
    for (std::size_t j = 0; j < cross[k].size(); ++j) {
      const std::string prefix = "cross." + std::to_string(k + 1) + "." + std::to_string(j);
      add_norm(out, prefix + ".query_norm", cross[k][j].query_norm);
      add_norm(out, prefix + ".source_norm", cross[k][j].source_norm);
      add_projections(out, prefix + ".attn", cross[k][j].attn);
    }
  }
  add_norm(out, "final_norm", final_norm);
  out.push_back({"unembedding", unembedding});
  out.push_back({"alpha", alpha, config.alpha_trainable()});
  return out;
}

std::vector<Tensor> ModelWeights::trainable_tensors() const {
  std::vector<Tensor> out;
  for (auto& p : parameters()) {
    if (p.trainable) out.push_back(p.tensor);
  }
  return out;
}

namespace {

class Initializer {
 public:
  Initializer(std::uint64_t seed, double std) : rng_(seed), normal_(0.0, std), limit_(2.0 * std) {}

  Tensor matrix(std::size_t rows, std::size_t cols) {
    std::vector<double> values(rows * cols);
    for (double& v : values) {
      do {
        v = normal_(rng_);
      } while (std::abs(v) > limit_);
    }
    return Tensor({rows, cols}, std::move(values), true);
  }

  static Tensor constant(std::size_t n, double value) { return Tensor({n}, std::vector<double>(n, value), true); }

  LayerNormParams norm(std::size_t d) { return {constant(d, 1.0), constant(d, 0.0)}; }

  AttentionProjections projections(std::size_t d) { return {matrix(d, d), matrix(d, d), matrix(d, d), matrix(d, d)}; }

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_;
  double limit_;
};

}  // namespace

ModelWeights init_weights(const ModelConfig& cfg, std::uint64_t seed) {
  validate_config(cfg);
  Initializer init(seed, cfg.init_std);
  const std::size_t d = cfg.d_model;
  ModelWeights w;
  w.config = cfg;
  w.token_embedding = init.matrix(cfg.vocab_size, d);
  w.position_embedding = init.matrix(cfg.max_seq_len, d);
  w.layers.reserve(cfg.total_layers);
  for (std::size_t i = 0; i < cfg.total_layers; ++i) {
    TransformerLayerParams layer;
    layer.attn_norm = init.norm(d);
    layer.attn = init.projections(d);
    layer.ffn_norm = init.norm(d);
    layer.ffn.w_in = init.matrix(d, cfg.d_ff);
    layer.ffn.b_in = Initializer::constant(cfg.d_ff, 0.0);
    layer.ffn.w_out = init.matrix(cfg.d_ff, d);
    layer.ffn.b_out = Initializer::constant(d, 0.0);
    w.layers.push_back(std::move(layer));
  }
  for (std::size_t k = 1; k < cfg.stacks; ++k) {
    std::vector<CrossAttentionParams> stack;
    for (std::size_t j = 0; j < cfg.layers_per_stack(); ++j) {
      CrossAttentionParams c;
      c.query_norm = init.norm(d);
      c.source_norm = init.norm(d);
      c.attn = init.projections(d);
      stack.push_back(std::move(c));
    }
    w.cross.push_back(std::move(stack));
  }
  w.final_norm = init.norm(d);
  w.unembedding = init.matrix(d, cfg.vocab_size);
  std::vector<double> alpha(cfg.stacks, 0.0);
  alpha.back() = 1.0;
  w.alpha = Tensor({cfg.stacks}, std::move(alpha), cfg.alpha_trainable());
  return w;
}

std::size_t count_params(const ModelConfig& cfg) {
  validate_config(cfg);
  const std::size_t d = cfg.d_model, f = cfg.d_ff, v = cfg.vocab_size;
  const std::size_t embeddings = v * d + cfg.max_seq_len * d;
  const std::size_t per_layer = 2 * d + 4 * d * d + 2 * d + d * f + f + f * d + d;
  const std::size_t per_cross = 4 * d + 4 * d * d;
  const std::size_t head = 2 * d + d * v;
  const std::size_t alpha = cfg.alpha_trainable() ? cfg.stacks : 0;
  return embeddings + cfg.total_layers * per_layer + cfg.cross_layers() * per_cross + head + alpha;
}

Tensor combine_stack_outputs(std::span<const Tensor> outputs, const Tensor& alpha) {
  if (outputs.empty() || outputs.size() != alpha.numel()) {
    throw DimensionError("combine_stack_outputs: " + std::to_string(outputs.size()) + " outputs for " +
                         std::to_string(alpha.numel()) + " coefficients");
  }
  Tensor combined = scale_by(outputs[0], alpha, 0);
  for (std::size_t k = 1; k < outputs.size(); ++k) combined = add(combined, scale_by(outputs[k], alpha, k));
  return combined;
}

BlockGeometry block_geometry(const ModelConfig& cfg, std::size_t batch) {
  return BlockGeometry{cfg.n_heads, batch, RopeParams{cfg.head_dim(), cfg.rope_base}};
}

// ---- teacher-forced forward ------------------------------------------------------

namespace {

Tensor feed_forward(const Tensor& x, const FeedForwardParams& p) {
  Tensor hidden = gelu(add_bias(matmul(x, p.w_in), p.b_in));
  return add_bias(matmul(hidden, p.w_out), p.b_out);
}

KVCacheSet* prepare_capture(const ForwardOptions& options, std::size_t stack, const ModelConfig& cfg) {
  if (options.capture.empty()) return nullptr;
  const CaptureTarget& target = options.capture.at(stack);
  if (target.caches == nullptr) return nullptr;
  if (options.batch != 1) throw StateError("cache capture requires batch 1");
  KVCacheSet& set = *target.caches;
  if (!set.self.empty() || !set.cross.empty()) throw StateError("capture target must start empty");
  const std::size_t h = cfg.layers_per_stack();
  if (target.self) set.self.assign(h, KVCache(CacheKind::kSelf, cfg.d_model));
  if (target.cross && stack > 0) set.cross.assign(h, KVCache(CacheKind::kCross, cfg.d_model));
  return &set;
}

KVCache* cache_at(KVCacheSet* set, bool cross, std::size_t layer) {
  if (set == nullptr) return nullptr;
  auto& caches = cross ? set->cross : set->self;
  return caches.empty() ? nullptr : &caches[layer];
}

}  // namespace

ForwardTrace forward_teacher_forced(const ModelWeights& weights, std::span<const TokenId> tokens,
                                    const ForwardOptions& options) {
  const ModelConfig& cfg = weights.config;
  if (options.batch == 0 || tokens.empty() || tokens.size() % options.batch != 0) {
    throw DimensionError("forward: " + std::to_string(tokens.size()) + " tokens cannot form " +
                         std::to_string(options.batch) + " sequences");
  }
  const std::size_t n = tokens.size() / options.batch;
  if (n > cfg.max_seq_len) {
    throw IndexError("forward: sequence length " + std::to_string(n) + " exceeds max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  }
  for (TokenId t : tokens) {
    if (t >= cfg.vocab_size) {
      throw IndexError("forward: token id " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(cfg.vocab_size));
    }
  }
  if (!options.capture.empty() && options.capture.size() != cfg.stacks) {
    throw DimensionError("forward: capture must list one target per stack");
  }

  std::vector<std::size_t> positions(tokens.size());
  std::vector<TokenId> position_ids(tokens.size());
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    positions[r] = r % n;
    position_ids[r] = static_cast<TokenId>(r % n);
  }
  const BlockGeometry geometry = block_geometry(cfg, options.batch);
  const AttentionMask causal = build_causal_mask(n);
  const AttentionMask staggered = build_staggered_mask(n, n, cfg.cross_window);
  const std::size_t staggered_violations = staggered.count_non_strict();

  ForwardTrace trace;
  Tensor embedded;
  {
    FlopPartitionScope scope(FlopPartition::kEmbed);
    embedded = add(gather_rows(weights.token_embedding, tokens), gather_rows(weights.position_embedding, position_ids));
  }

  const std::size_t h = cfg.layers_per_stack();
  Tensor source;
  for (std::size_t k = 0; k < cfg.stacks; ++k) {
    KVCacheSet* capture = prepare_capture(options, k, cfg);
    std::vector<Tensor> activations;
    Tensor x = embedded;
    for (std::size_t j = 0; j < h; ++j) {
      const TransformerLayerParams& layer = weights.layer(k, j);
      {
        FlopPartitionScope scope(FlopPartition::kSelfAttention);
        Tensor normed = layer_norm(x, layer.attn_norm.gain, layer.attn_norm.bias);
        x = add(x, self_attention_block(normed, layer.attn, causal, geometry, positions, cache_at(capture, false, j)));
      }
      if (k > 0) {
        FlopPartitionScope scope(FlopPartition::kCrossAttention);
        const CrossAttentionParams& c = weights.cross_params(k, j);
        Tensor src = layer_norm(source, c.source_norm.gain, c.source_norm.bias);
        Tensor query = layer_norm(x, c.query_norm.gain, c.query_norm.bias);
        x = add(x, cross_attention_block(query, src, c.attn, staggered, geometry, positions, positions,
                                         cache_at(capture, true, j)));
        trace.cross_mask_violations += staggered_violations;
      }
      {
        FlopPartitionScope scope(FlopPartition::kFfn);
        Tensor normed = layer_norm(x, layer.ffn_norm.gain, layer.ffn_norm.bias);
        x = add(x, feed_forward(normed, layer.ffn));
      }
      if (options.keep_layer_activations) activations.push_back(x);
    }
    if (options.edit_stack_output) x = options.edit_stack_output(k, x);
    trace.stack_outputs.push_back(x);
    if (options.keep_layer_activations) trace.layer_activations.push_back(std::move(activations));
    source = x;
  }

  const Tensor combined = combine_stack_outputs(trace.stack_outputs, weights.alpha);
  FlopPartitionScope scope(FlopPartition::kUnembed);
  trace.logits = matmul(layer_norm(combined, weights.final_norm.gain, weights.final_norm.bias), weights.unembedding);
  return trace;
}

// ---- single-position helpers -------------------------------------------------------

namespace {

Tensor as_row(std::span<const double> x) { return Tensor({1, x.size()}, std::vector<double>(x.begin(), x.end())); }

std::vector<double> to_vector(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

std::vector<double> layer_norm_row(std::span<const double> x, const LayerNormParams& params) {
  NoGradGuard no_grad;
  return to_vector(layer_norm(as_row(x), params.gain, params.bias));
}

std::vector<double> embed_token(const ModelWeights& weights, TokenId token, std::size_t position) {
  const ModelConfig& cfg = weights.config;
  if (token >= cfg.vocab_size) throw IndexError("token id " + std::to_string(token) + " outside vocabulary");
  if (position >= cfg.max_seq_len) {
    throw IndexError("position " + std::to_string(position) + " exceeds max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  }
  auto tok = weights.token_embedding.row(token);
  auto pos = weights.position_embedding.row(position);
  std::vector<double> out(cfg.d_model);
  for (std::size_t c = 0; c < out.size(); ++c) out[c] = tok[c] + pos[c];
  return out;
}

std::vector<double> logits_row(const ModelWeights& weights, std::span<const double> combined) {
  NoGradGuard no_grad;
  Tensor normed = layer_norm(as_row(combined), weights.final_norm.gain, weights.final_norm.bias);
  return to_vector(matmul(normed, weights.unembedding));
}

std::vector<double> feed_forward_row(std::span<const double> x, const FeedForwardParams& params) {
  NoGradGuard no_grad;
  return to_vector(feed_forward(as_row(x), params));
}

}  // namespace stagformer
