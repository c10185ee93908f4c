#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stagformer/attention.hpp"
#include "stagformer/model.hpp"

namespace stagformer {

enum class DecodeMode { kParallel, kOracle, kRecurrent };

DecodeMode parse_decode_mode(std::string_view name);
std::string_view decode_mode_name(DecodeMode mode);

// temperature 0 selects greedy (argmax, lowest id on ties).
struct SamplerSpec {
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

TokenId sample_token(std::span<const double> logits, const SamplerSpec& spec, std::mt19937_64& rng);

// One cross-cache read: the query at `position` of `stack` saw source
// entries [0, entries).
struct CrossRead {
  std::size_t stack = 0;
  std::size_t layer = 0;
  std::size_t position = 0;
  std::size_t entries = 0;
};

struct StepHooks {
  // Runs on the worker that computed stack `stack` at `position`, before the
  // barrier; edits to `output` are what gets published and combined.
  std::function<void(std::size_t stack, std::size_t position, std::span<double> output, const KVCacheSet& caches)>
      on_stack_output;
  // Runs on the worker about to compute stack `stack` at `position`; may
  // edit that stack's caches (fault and perturbation harnesses).
  std::function<void(std::size_t stack, std::size_t position, KVCacheSet& caches)> before_stack;
};

struct StepTiming {
  double seconds = 0.0;
  std::vector<double> stack_seconds;
};

class ParallelWorkers;

// Tokens processed so far plus each mode's incremental state. The token at
// index `processed()` (if any) is pending: sampled but not yet fed through
// the model.
class DecodeState {
 public:
  DecodeState(const ModelWeights& weights, DecodeMode mode, SamplerSpec sampler = {});
  ~DecodeState();
  DecodeState(DecodeState&&) noexcept;
  DecodeState& operator=(DecodeState&&) noexcept;

  const ModelWeights& weights() const noexcept { return *weights_; }
  DecodeMode mode() const noexcept { return mode_; }
  const std::vector<TokenId>& tokens() const noexcept { return tokens_; }
  std::size_t processed() const noexcept { return processed_; }
  const std::vector<double>& last_logits() const noexcept { return last_logits_; }

  // Parallel mode: one set per stack. Recurrent: a single set. Oracle: none.
  const std::vector<KVCacheSet>& caches() const noexcept { return caches_; }
  KVCacheCounts cache_counts() const;
  // Final activations of stack k at positions 0..processed()-1. In
  // recurrent mode buffer 0 holds the cross-attention source.
  const std::vector<std::vector<double>>& published(std::size_t stack) const { return published_.at(stack); }
  const std::vector<CrossRead>& access_log() const noexcept { return access_log_; }
  // Cross reads that included a source at or after the query position.
  std::size_t access_violations() const;

  void set_hooks(StepHooks hooks) { hooks_ = std::move(hooks); }
  void append_token(TokenId token);
  TokenId sample();

 private:
  friend class ParallelWorkers;
  friend DecodeState prefill(const ModelWeights&, std::span<const TokenId>, DecodeMode, SamplerSpec);
  friend StepTiming decode_step_parallel(DecodeState&);
  friend StepTiming decode_step_oracle(DecodeState&);
  friend StepTiming decode_step_recurrent(DecodeState&);

  const ModelWeights* weights_;
  DecodeMode mode_;
  SamplerSpec sampler_;
  std::mt19937_64 rng_;
  std::vector<TokenId> tokens_;
  std::size_t processed_ = 0;
  std::vector<double> last_logits_;
  std::vector<KVCacheSet> caches_;
  std::vector<std::vector<std::vector<double>>> published_;
  std::vector<CrossRead> access_log_;
  StepHooks hooks_;
  std::unique_ptr<ParallelWorkers> workers_;
};

// Runs a full teacher-forced pass over the prompt (stacks in order) and
// fills the mode's caches. Logits at the last prompt position are kept.
DecodeState prefill(const ModelWeights& weights, std::span<const TokenId> prompt, DecodeMode mode,
                    SamplerSpec sampler = {});

// Each consumes the pending token, leaving logits for the next position.
// Parallel: every stack runs on its own worker thread, with a barrier
// before stack outputs are published to the next stack's cross caches.
StepTiming decode_step_parallel(DecodeState& state);
// Cache-free teacher-forced recompute of the whole sequence.
StepTiming decode_step_oracle(DecodeState& state);
// Shared weights only: one pass cross-attending to final activations.
StepTiming decode_step_recurrent(DecodeState& state);
StepTiming decode_step(DecodeState& state);

struct GenerationResult {
  std::vector<TokenId> tokens;  // generated ids only
  std::vector<double> step_seconds;
  std::vector<KVCacheCounts> cache_trajectory;  // after prefill, then after each step
  std::vector<std::vector<double>> logits;      // logits each token was sampled from
};

// Samples n_tokens: the first from the prefill logits, each later one after
// a decode step on the previous sample.
GenerationResult generate(const ModelWeights& weights, std::span<const TokenId> prompt, std::size_t n_tokens,
                          const SamplerSpec& sampler, DecodeMode mode, const StepHooks& hooks = {});

}  // namespace stagformer
