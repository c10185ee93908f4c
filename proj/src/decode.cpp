#include "stagformer/decode.hpp"

#include <algorithm>
#include <atomic>
#include <barrier>
#include <chrono>
#include <cmath>
#include <exception>
#include <thread>

#include "stagformer/errors.hpp"

namespace stagformer {

DecodeMode parse_decode_mode(std::string_view name) {
  if (name == "parallel") return DecodeMode::kParallel;
  if (name == "oracle") return DecodeMode::kOracle;
  if (name == "recurrent") return DecodeMode::kRecurrent;
  throw ConfigError("unknown decode mode '" + std::string(name) + "' (expected parallel, oracle or recurrent)");
}

std::string_view decode_mode_name(DecodeMode mode) {
  switch (mode) {
    case DecodeMode::kParallel: return "parallel";
    case DecodeMode::kOracle: return "oracle";
    case DecodeMode::kRecurrent: return "recurrent";
  }
  return "?";
}

TokenId sample_token(std::span<const double> logits, const SamplerSpec& spec, std::mt19937_64& rng) {
  if (logits.empty()) throw StateError("no logits to sample from");
  if (spec.temperature < 0.0 || !std::isfinite(spec.temperature)) {
    throw ConfigError("temperature must be finite and >= 0");
  }
  if (spec.temperature == 0.0) {
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  const double peak = *std::max_element(logits.begin(), logits.end());
  std::vector<double> cumulative(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    total += std::exp((logits[i] - peak) / spec.temperature);
    cumulative[i] = total;
  }
  const double u = std::uniform_real_distribution<double>(0.0, total)(rng);
  const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
  return static_cast<TokenId>(std::min<std::size_t>(it - cumulative.begin(), logits.size() - 1));
}

namespace {

void add_into(std::vector<double>& x, const std::vector<double>& delta) {
  for (std::size_t c = 0; c < x.size(); ++c) x[c] += delta[c];
}

// One position through the layers of `layer_stack`, cross-attending with
// the parameters of `cross_stack` unless it is 0 (the first stack has none).
std::vector<double> run_position(const ModelWeights& w, std::size_t layer_stack, std::size_t cross_stack,
                                 TokenId token, std::size_t position, KVCacheSet& caches,
                                 std::vector<CrossRead>* log, std::size_t log_stack) {
  const ModelConfig& cfg = w.config;
  const BlockGeometry geometry = block_geometry(cfg);
  std::vector<double> x = embed_token(w, token, position);
  for (std::size_t j = 0; j < cfg.layers_per_stack(); ++j) {
    const TransformerLayerParams& layer = w.layer(layer_stack, j);
    add_into(x, self_attention_step(layer_norm_row(x, layer.attn_norm), layer.attn, caches.self.at(j), position,
                                    geometry));
    if (cross_stack > 0) {
      const CrossAttentionParams& c = w.cross_params(cross_stack, j);
      const KVCache& cache = caches.cross.at(j);
      if (log != nullptr) log->push_back({log_stack, j, position, cache.length()});
      add_into(x, cross_attention_step(layer_norm_row(x, c.query_norm), c.attn, cache, position, cfg.cross_window,
                                       geometry));
    }
    add_into(x, feed_forward_row(layer_norm_row(x, layer.ffn_norm), layer.ffn));
  }
  return x;
}

void publish_source(const ModelWeights& w, std::size_t consumer_stack, std::span<const double> output,
                    std::size_t position, KVCacheSet& consumer) {
  const BlockGeometry geometry = block_geometry(w.config);
  for (std::size_t j = 0; j < w.config.layers_per_stack(); ++j) {
    const CrossAttentionParams& c = w.cross_params(consumer_stack, j);
    append_cross_source(layer_norm_row(output, c.source_norm), c.attn, consumer.cross.at(j), position, geometry);
  }
}

std::vector<double> combine_rows(const ModelWeights& w, const std::vector<std::vector<double>>& outputs) {
  auto alpha = w.alpha.data();
  std::vector<double> combined(outputs[0].size());
  for (std::size_t c = 0; c < combined.size(); ++c) combined[c] = outputs[0][c] * alpha[0];
  for (std::size_t k = 1; k < outputs.size(); ++k) {
    for (std::size_t c = 0; c < combined.size(); ++c) combined[c] = combined[c] + outputs[k][c] * alpha[k];
  }
  return combined;
}

std::vector<double> last_row(const Tensor& t) {
  auto row = t.row(t.rows() - 1);
  return {row.begin(), row.end()};
}

void check_step(const DecodeState& s, DecodeMode expected) {
  if (s.mode() != expected) {
    throw ModeError("decode step for mode '" + std::string(decode_mode_name(expected)) + "' called on a '" +
                    std::string(decode_mode_name(s.mode())) + "' state");
  }
  if (s.tokens().size() <= s.processed()) throw StateError("no pending token; call sample() or append_token()");
  if (s.processed() >= s.weights().config.max_seq_len) {
    throw IndexError("decode position " + std::to_string(s.processed()) + " exceeds max_seq_len " +
                     std::to_string(s.weights().config.max_seq_len));
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

// ---- worker pool ----------------------------------------------------------------

// Stack k is pinned to worker k. Each step runs three phases separated by
// the shared barrier: start, compute, publish.
class ParallelWorkers {
 public:
  explicit ParallelWorkers(std::size_t stacks)
      : stacks_(stacks), sync_(static_cast<std::ptrdiff_t>(stacks + 1)), outputs_(stacks), seconds_(stacks),
        errors_(stacks), logs_(stacks) {
    threads_.reserve(stacks);
    for (std::size_t k = 0; k < stacks; ++k) threads_.emplace_back([this, k] { loop(k); });
  }

  ~ParallelWorkers() {
    stop_.store(true);
    sync_.arrive_and_wait();
    for (auto& t : threads_) t.join();
  }

  StepTiming run(DecodeState& state) {
    current_ = &state;
    const auto t0 = std::chrono::steady_clock::now();
    sync_.arrive_and_wait();  // start
    sync_.arrive_and_wait();  // outputs computed
    sync_.arrive_and_wait();  // outputs published
    for (auto& log : logs_) {
      state.access_log_.insert(state.access_log_.end(), log.begin(), log.end());
      log.clear();
    }
    for (std::size_t k = 0; k < stacks_; ++k) {
      if (errors_[k]) {
        std::exception_ptr e = std::exchange(errors_[k], nullptr);
        try {
          std::rethrow_exception(e);
        } catch (const std::exception& ex) {
          throw StateError("decode worker for stack " + std::to_string(k) + " failed: " + ex.what());
        }
      }
    }
    StepTiming timing;
    timing.stack_seconds = seconds_;
    const ModelWeights& w = state.weights();
    state.last_logits_ = logits_row(w, combine_rows(w, outputs_));
    timing.seconds = seconds_since(t0);
    return timing;
  }

 private:
  void loop(std::size_t k) {
    while (true) {
      sync_.arrive_and_wait();
      if (stop_.load()) return;
      DecodeState& s = *current_;
      const std::size_t pos = s.processed_;
      const auto t0 = std::chrono::steady_clock::now();
      try {
        if (s.hooks_.before_stack) s.hooks_.before_stack(k, pos, s.caches_[k]);
        outputs_[k] = run_position(s.weights(), k, k, s.tokens_[pos], pos, s.caches_[k], &logs_[k], k);
        if (s.hooks_.on_stack_output) s.hooks_.on_stack_output(k, pos, outputs_[k], s.caches_[k]);
      } catch (...) {
        errors_[k] = std::current_exception();
      }
      seconds_[k] = seconds_since(t0);
      sync_.arrive_and_wait();
      const bool failed = std::any_of(errors_.begin(), errors_.end(), [](const auto& e) { return e != nullptr; });
      if (!failed) {
        try {
          s.published_[k].push_back(outputs_[k]);
          if (k + 1 < stacks_) publish_source(s.weights(), k + 1, outputs_[k], pos, s.caches_[k + 1]);
        } catch (...) {
          errors_[k] = std::current_exception();
        }
      }
      sync_.arrive_and_wait();
    }
  }

  std::size_t stacks_;
  std::barrier<> sync_;
  std::atomic<bool> stop_{false};
  DecodeState* current_ = nullptr;
  std::vector<std::vector<double>> outputs_;
  std::vector<double> seconds_;
  std::vector<std::exception_ptr> errors_;
  std::vector<std::vector<CrossRead>> logs_;
  std::vector<std::thread> threads_;
};

// ---- state ------------------------------------------------------------------------

DecodeState::DecodeState(const ModelWeights& weights, DecodeMode mode, SamplerSpec sampler)
    : weights_(&weights), mode_(mode), sampler_(sampler), rng_(sampler.seed) {
  if (mode == DecodeMode::kRecurrent && !weights.config.weight_sharing) {
    throw ModeError("recurrent decoding requires a shared-weights model");
  }
}

DecodeState::~DecodeState() = default;
DecodeState::DecodeState(DecodeState&&) noexcept = default;
DecodeState& DecodeState::operator=(DecodeState&&) noexcept = default;

KVCacheCounts DecodeState::cache_counts() const {
  KVCacheCounts total;
  for (const auto& set : caches_) total += kv_cache_entry_count(set);
  return total;
}

std::size_t DecodeState::access_violations() const {
  return static_cast<std::size_t>(
      std::count_if(access_log_.begin(), access_log_.end(), [](const CrossRead& r) { return r.entries > r.position; }));
}

void DecodeState::append_token(TokenId token) {
  if (token >= weights_->config.vocab_size) throw IndexError("token id " + std::to_string(token) + " out of range");
  if (tokens_.size() > processed_) throw StateError("a pending token already exists");
  tokens_.push_back(token);
}

TokenId DecodeState::sample() {
  const TokenId token = sample_token(last_logits_, sampler_, rng_);
  append_token(token);
  return token;
}

DecodeState prefill(const ModelWeights& weights, std::span<const TokenId> prompt, DecodeMode mode,
                    SamplerSpec sampler) {
  const ModelConfig& cfg = weights.config;
  if (prompt.empty()) throw DomainError("prefill needs a non-empty prompt");
  if (prompt.size() > cfg.max_seq_len) {
    throw IndexError("prompt of " + std::to_string(prompt.size()) + " tokens exceeds max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  }
  DecodeState s(weights, mode, sampler);
  s.tokens_.assign(prompt.begin(), prompt.end());
  s.processed_ = prompt.size();

  NoGradGuard no_grad;
  ForwardOptions options;
  const std::size_t p = cfg.stacks;
  if (mode == DecodeMode::kParallel) {
    s.caches_.resize(p);
    for (std::size_t k = 0; k < p; ++k) options.capture.push_back({&s.caches_[k], true, true});
  } else if (mode == DecodeMode::kRecurrent) {
    s.caches_.resize(1);
    options.capture.assign(p, CaptureTarget{nullptr, false, false});
    options.capture.back() = CaptureTarget{&s.caches_[0], true, false};
  }
  ForwardTrace trace = forward_teacher_forced(weights, prompt, options);
  s.last_logits_ = last_row(trace.logits);

  auto rows_of = [](const Tensor& t) {
    std::vector<std::vector<double>> rows;
    for (std::size_t r = 0; r < t.rows(); ++r) rows.emplace_back(t.row(r).begin(), t.row(r).end());
    return rows;
  };
  if (mode == DecodeMode::kParallel) {
    for (std::size_t k = 0; k < p; ++k) s.published_.push_back(rows_of(trace.stack_outputs[k]));
    if (p > 1) s.workers_ = std::make_unique<ParallelWorkers>(p);
  } else if (mode == DecodeMode::kRecurrent) {
    // Cross caches over the last pass's outputs, keyed by that pass's
    // cross-attention parameters.
    KVCacheSet& set = s.caches_[0];
    set.cross.assign(cfg.layers_per_stack(), KVCache(CacheKind::kCross, cfg.d_model));
    s.published_.push_back(rows_of(trace.stack_outputs.back()));
    for (std::size_t pos = 0; pos < prompt.size(); ++pos) publish_source(weights, p - 1, s.published_[0][pos], pos, set);
  }
  return s;
}

StepTiming decode_step_parallel(DecodeState& s) {
  check_step(s, DecodeMode::kParallel);
  StepTiming timing;
  if (s.workers_) {
    timing = s.workers_->run(s);
  } else {
    // A single stack needs no pipeline.
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t pos = s.processed_;
    if (s.hooks_.before_stack) s.hooks_.before_stack(0, pos, s.caches_[0]);
    std::vector<std::vector<double>> outputs{
        run_position(s.weights(), 0, 0, s.tokens_[pos], pos, s.caches_[0], nullptr, 0)};
    if (s.hooks_.on_stack_output) s.hooks_.on_stack_output(0, pos, outputs[0], s.caches_[0]);
    s.published_[0].push_back(outputs[0]);
    s.last_logits_ = logits_row(s.weights(), combine_rows(s.weights(), outputs));
    timing.seconds = seconds_since(t0);
    timing.stack_seconds = {timing.seconds};
  }
  ++s.processed_;
  return timing;
}

StepTiming decode_step_oracle(DecodeState& s) {
  check_step(s, DecodeMode::kOracle);
  const auto t0 = std::chrono::steady_clock::now();
  NoGradGuard no_grad;
  const std::span<const TokenId> seq(s.tokens_.data(), s.processed_ + 1);
  ForwardTrace trace = forward_teacher_forced(s.weights(), seq);
  s.last_logits_ = last_row(trace.logits);
  ++s.processed_;
  StepTiming timing;
  timing.seconds = seconds_since(t0);
  timing.stack_seconds = {timing.seconds};
  return timing;
}

StepTiming decode_step_recurrent(DecodeState& s) {
  check_step(s, DecodeMode::kRecurrent);
  const auto t0 = std::chrono::steady_clock::now();
  const ModelWeights& w = s.weights();
  const std::size_t last = w.config.stacks - 1;
  const std::size_t pos = s.processed_;
  if (s.hooks_.before_stack) s.hooks_.before_stack(last, pos, s.caches_[0]);
  std::vector<double> out = run_position(w, last, last, s.tokens_[pos], pos, s.caches_[0], &s.access_log_, last);
  if (s.hooks_.on_stack_output) s.hooks_.on_stack_output(last, pos, out, s.caches_[0]);
  publish_source(w, last, out, pos, s.caches_[0]);
  s.last_logits_ = logits_row(w, out);
  s.published_[0].push_back(std::move(out));
  ++s.processed_;
  StepTiming timing;
  timing.seconds = seconds_since(t0);
  timing.stack_seconds = {timing.seconds};
  return timing;
}

StepTiming decode_step(DecodeState& s) {
  switch (s.mode()) {
    case DecodeMode::kParallel: return decode_step_parallel(s);
    case DecodeMode::kOracle: return decode_step_oracle(s);
    case DecodeMode::kRecurrent: return decode_step_recurrent(s);
  }
  throw ModeError("unknown decode mode");
}

GenerationResult generate(const ModelWeights& weights, std::span<const TokenId> prompt, std::size_t n_tokens,
                          const SamplerSpec& sampler, DecodeMode mode, const StepHooks& hooks) {
  if (n_tokens == 0) throw ConfigError("n_tokens must be >= 1");
  DecodeState s = prefill(weights, prompt, mode, sampler);
  s.set_hooks(hooks);
  GenerationResult r;
  r.cache_trajectory.push_back(s.cache_counts());
  for (std::size_t i = 0; i < n_tokens; ++i) {
    r.logits.push_back(s.last_logits());
    r.tokens.push_back(s.sample());
    if (i + 1 == n_tokens) break;
    r.step_seconds.push_back(decode_step(s).seconds);
    r.cache_trajectory.push_back(s.cache_counts());
  }
  return r;
}

}  // namespace stagformer
