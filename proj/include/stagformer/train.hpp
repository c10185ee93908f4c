#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stagformer/checkpoint.hpp"
#include "stagformer/config.hpp"
#include "stagformer/model.hpp"

namespace stagformer {

std::vector<TokenId> byte_tokenize(std::string_view text);
// Special ids produce no output.
std::string detokenize(std::span<const TokenId> ids);

class Corpus {
 public:
  // The last `validation_fraction` of the tokens form the validation split.
  static Corpus from_text(std::string_view text, double validation_fraction = 0.02);
  static Corpus load(const std::string& path, double validation_fraction = 0.02);

  std::span<const TokenId> all() const noexcept { return tokens_; }
  std::span<const TokenId> train() const noexcept { return std::span(tokens_).first(split_); }
  std::span<const TokenId> validation() const noexcept { return std::span(tokens_).subspan(split_); }

 private:
  std::vector<TokenId> tokens_;
  std::size_t split_ = 0;
};

struct Batch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<TokenId> inputs;   // [batch x seq_len], row-major
  std::vector<TokenId> targets;  // inputs shifted left by one
  std::vector<std::size_t> starts;
};

// Windows of seq_len + 1 tokens at uniformly drawn starts. Batch `step`
// depends only on (seed, step).
class BatchSampler {
 public:
  BatchSampler(std::span<const TokenId> tokens, std::size_t seq_len, std::size_t batch, std::uint64_t seed);

  Batch at(std::uint64_t step) const;
  Batch next() { return at(cursor_++); }

 private:
  std::span<const TokenId> tokens_;
  std::size_t seq_len_;
  std::size_t batch_;
  std::uint64_t seed_;
  std::uint64_t cursor_ = 0;
};

struct AdamHyper {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t warmup_steps = 0;
  double clip_norm = 0.0;  // 0 disables

  static AdamHyper from(const TrainHyper& h);
};

struct OptimizerState {
  AdamHyper hyper;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

OptimizerState make_optimizer(std::span<const Tensor> params, const AdamHyper& hyper);

struct AdamStepInfo {
  double grad_norm = 0.0;
  double clip_scale = 1.0;
  double lr = 0.0;
};

// Bias-corrected Adam with linear warmup and global-norm clipping. Every
// parameter must carry a gradient (StateError otherwise).
AdamStepInfo adam_step(std::span<Tensor> params, OptimizerState& state);

// Mean next-token cross-entropy of a batch; records on the active tape.
Tensor batch_loss(const ModelWeights& weights, const Batch& batch);
double evaluate_loss(const ModelWeights& weights, std::span<const TokenId> tokens, std::size_t seq_len,
                     std::size_t batch, std::size_t batches, std::uint64_t seed);

struct TrainRecord {
  std::uint64_t step = 0;
  std::uint64_t tokens = 0;
  double loss = 0.0;
  std::optional<double> val_loss;
  double seconds = 0.0;
};

struct TrainOptions {
  std::size_t steps = 1;
  // When non-empty: checkpoint.bin, log.csv and periodic checkpoints go here.
  std::string out_dir;
  // Continue from a checkpoint written by train(); its stored run config wins.
  std::optional<std::string> resume_from;
  std::function<void(const TrainRecord&)> on_step;
};

struct TrainResult {
  ModelWeights weights;
  OptimizerState optimizer;
  RunConfig config;
  std::vector<TrainRecord> log;
};

TrainResult train(const RunConfig& cfg, const Corpus& corpus, const TrainOptions& options);

void write_train_log(const std::string& path, std::span<const TrainRecord> log);
ResumeState make_resume_state(const OptimizerState& optimizer, const RunConfig& cfg);

// Mean of the last `window` training losses.
double smoothed_loss(std::span<const TrainRecord> log, std::size_t window = 50);

}  // namespace stagformer
