#include "stagformer/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "stagformer/errors.hpp"

namespace stagformer {

std::vector<TokenId> byte_tokenize(std::string_view text) {
  std::vector<TokenId> ids(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) ids[i] = static_cast<unsigned char>(text[i]);
  return ids;
}

std::string detokenize(std::span<const TokenId> ids) {
  std::string out;
  out.reserve(ids.size());
  for (TokenId id : ids) {
    if (id < 256) out.push_back(static_cast<char>(id));
  }
  return out;
}

// ---- corpus and batching ----------------------------------------------------

Corpus Corpus::from_text(std::string_view text, double validation_fraction) {
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw ConfigError("validation_fraction must lie in [0, 1)");
  }
  Corpus c;
  c.tokens_ = byte_tokenize(text);
  const auto held_out = static_cast<std::size_t>(std::floor(validation_fraction * static_cast<double>(text.size())));
  c.split_ = c.tokens_.size() - held_out;
  return c;
}

Corpus Corpus::load(const std::string& path, double validation_fraction) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open corpus '" + path + "'");
  std::ostringstream bytes;
  bytes << in.rdbuf();
  return from_text(bytes.str(), validation_fraction);
}

BatchSampler::BatchSampler(std::span<const TokenId> tokens, std::size_t seq_len, std::size_t batch,
                           std::uint64_t seed)
    : tokens_(tokens), seq_len_(seq_len), batch_(batch), seed_(seed) {
  if (seq_len == 0 || batch == 0) throw ConfigError("seq_len and batch_size must be >= 1");
  if (tokens.size() < seq_len + 1) {
    throw DomainError("corpus of " + std::to_string(tokens.size()) + " tokens is shorter than seq_len + 1 = " +
                      std::to_string(seq_len + 1));
  }
}

Batch BatchSampler::at(std::uint64_t step) const {
  std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32)};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<std::size_t> start_dist(0, tokens_.size() - seq_len_ - 1);
  Batch b;
  b.batch = batch_;
  b.seq_len = seq_len_;
  b.inputs.reserve(batch_ * seq_len_);
  b.targets.reserve(batch_ * seq_len_);
  for (std::size_t r = 0; r < batch_; ++r) {
    const std::size_t start = start_dist(rng);
    b.starts.push_back(start);
    b.inputs.insert(b.inputs.end(), tokens_.begin() + start, tokens_.begin() + start + seq_len_);
    b.targets.insert(b.targets.end(), tokens_.begin() + start + 1, tokens_.begin() + start + seq_len_ + 1);
  }
  return b;
}

// ---- optimizer ------------------------------------------------------------------

AdamHyper AdamHyper::from(const TrainHyper& h) {
  return AdamHyper{h.lr, h.beta1, h.beta2, h.eps, h.warmup_steps, h.clip_norm};
}

OptimizerState make_optimizer(std::span<const Tensor> params, const AdamHyper& hyper) {
  OptimizerState state;
  state.hyper = hyper;
  for (const Tensor& p : params) {
    state.m.emplace_back(p.numel(), 0.0);
    state.v.emplace_back(p.numel(), 0.0);
  }
  return state;
}

AdamStepInfo adam_step(std::span<Tensor> params, OptimizerState& state) {
  if (params.size() != state.m.size()) throw StateError("optimizer state does not match the parameter list");
  double sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) throw StateError("parameter " + std::to_string(i) + " has no gradient");
    if (state.m[i].size() != params[i].numel()) throw StateError("optimizer moment shape mismatch");
    for (double g : params[i].grad()) sq += g * g;
  }
  const AdamHyper& h = state.hyper;
  AdamStepInfo info;
  info.grad_norm = std::sqrt(sq);
  if (h.clip_norm > 0.0 && info.grad_norm > h.clip_norm) info.clip_scale = h.clip_norm / info.grad_norm;

  const std::uint64_t t = ++state.step;
  info.lr = h.lr;
  if (h.warmup_steps > 0 && t < h.warmup_steps) {
    info.lr = h.lr * static_cast<double>(t) / static_cast<double>(h.warmup_steps);
  }
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].mutable_data();
    auto grad = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double g = grad[j] * info.clip_scale;
      m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g;
      v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g * g;
      theta[j] -= info.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + h.eps);
    }
  }
  return info;
}

// ---- loss -------------------------------------------------------------------------

Tensor batch_loss(const ModelWeights& weights, const Batch& batch) {
  ForwardOptions options;
  options.batch = batch.batch;
  ForwardTrace trace = forward_teacher_forced(weights, batch.inputs, options);
  if (trace.cross_mask_violations != 0) {
    throw StateError("training forward let cross-attention read " + std::to_string(trace.cross_mask_violations) +
                     " same-or-later source positions");
  }
  return cross_entropy_logits(trace.logits, batch.targets);
}

double evaluate_loss(const ModelWeights& weights, std::span<const TokenId> tokens, std::size_t seq_len,
                     std::size_t batch, std::size_t batches, std::uint64_t seed) {
  NoGradGuard no_grad;
  BatchSampler sampler(tokens, seq_len, batch, seed);
  double total = 0.0;
  for (std::size_t i = 0; i < batches; ++i) total += batch_loss(weights, sampler.at(i)).item();
  return total / static_cast<double>(batches);
}

double smoothed_loss(std::span<const TrainRecord> log, std::size_t window) {
  if (log.empty()) throw DomainError("smoothed_loss of an empty log");
  const std::size_t n = std::min(window, log.size());
  double total = 0.0;
  for (std::size_t i = log.size() - n; i < log.size(); ++i) total += log[i].loss;
  return total / static_cast<double>(n);
}

// ---- loop -------------------------------------------------------------------------

void write_train_log(const std::string& path, std::span<const TrainRecord> log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write training log '" + path + "'");
  out << "step,tokens,loss,val_loss,seconds\n";
  char line[256];
  for (const TrainRecord& r : log) {
    char val[64] = "";
    if (r.val_loss) std::snprintf(val, sizeof val, "%.10g", *r.val_loss);
    std::snprintf(line, sizeof line, "%llu,%llu,%.10g,%s,%.6f\n", static_cast<unsigned long long>(r.step),
                  static_cast<unsigned long long>(r.tokens), r.loss, val, r.seconds);
    out << line;
  }
}

ResumeState make_resume_state(const OptimizerState& optimizer, const RunConfig& cfg) {
  ResumeState resume;
  resume.step = optimizer.step;
  resume.first_moment = optimizer.m;
  resume.second_moment = optimizer.v;
  resume.run = run_config_to_json(cfg);
  return resume;
}

namespace {

constexpr std::uint64_t kValidationSeedSalt = 0x5eed'0000'0000'0001ull;

}  // namespace

TrainResult train(const RunConfig& requested, const Corpus& corpus, const TrainOptions& options) {
  TrainResult result;
  if (options.resume_from) {
    Checkpoint ckpt = load_checkpoint(*options.resume_from);
    if (!ckpt.resume) throw FormatError("checkpoint '" + *options.resume_from + "' carries no optimizer state");
    result.config = run_config_from_json(ckpt.resume->run);
    result.weights = std::move(ckpt.weights);
    result.optimizer = make_optimizer(result.weights.trainable_tensors(), AdamHyper::from(result.config.train));
    result.optimizer.step = ckpt.resume->step;
    result.optimizer.m = std::move(ckpt.resume->first_moment);
    result.optimizer.v = std::move(ckpt.resume->second_moment);
  } else {
    result.config = requested;
    validate_config(result.config.model);
    result.weights = init_weights(result.config.model, result.config.model.seed);
    result.optimizer = make_optimizer(result.weights.trainable_tensors(), AdamHyper::from(result.config.train));
  }
  const RunConfig& cfg = result.config;
  if (options.steps == 0) throw ConfigError("steps must be >= 1");
  if (result.optimizer.step >= options.steps) {
    throw ConfigError("checkpoint is already at step " + std::to_string(result.optimizer.step) +
                      "; steps (a total) must exceed it");
  }
  if (cfg.train.seq_len > cfg.model.max_seq_len) {
    throw ConfigError("seq_len " + std::to_string(cfg.train.seq_len) + " exceeds max_seq_len " +
                      std::to_string(cfg.model.max_seq_len));
  }

  const BatchSampler sampler(corpus.train(), cfg.train.seq_len, cfg.train.batch_size, cfg.model.seed);
  const bool can_validate = cfg.train.eval_batches > 0 && corpus.validation().size() >= cfg.train.seq_len + 1;
  const std::uint64_t val_seed = cfg.model.seed ^ kValidationSeedSalt;
  std::vector<Tensor> params = result.weights.trainable_tensors();

  namespace fs = std::filesystem;
  if (!options.out_dir.empty()) fs::create_directories(options.out_dir);
  auto out_path = [&](const std::string& name) { return (fs::path(options.out_dir) / name).string(); };

  const auto t0 = std::chrono::steady_clock::now();
  while (result.optimizer.step < options.steps) {
    const std::uint64_t step = result.optimizer.step + 1;
    const Batch batch = sampler.at(step - 1);
    for (Tensor& p : params) p.zero_grad();
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = batch_loss(result.weights, batch);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      if (!options.out_dir.empty()) write_train_log(out_path("log.csv"), result.log);
      throw NumericError("non-finite loss " + std::to_string(value) + " at step " + std::to_string(step) +
                         " (batch seed " + std::to_string(cfg.model.seed) + ", batch index " +
                         std::to_string(step - 1) + ")");
    }
    tape.backward(loss);
    adam_step(params, result.optimizer);

    TrainRecord record;
    record.step = step;
    record.tokens = step * cfg.train.batch_size * cfg.train.seq_len;
    record.loss = value;
    const bool last = step == options.steps;
    if (can_validate && (last || (cfg.train.eval_every > 0 && step % cfg.train.eval_every == 0))) {
      record.val_loss = evaluate_loss(result.weights, corpus.validation(), cfg.train.seq_len, cfg.train.batch_size,
                                      cfg.train.eval_batches, val_seed);
    }
    record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(record);
    if (options.on_step) options.on_step(record);

    if (!options.out_dir.empty() && cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 &&
        !last) {
      const ResumeState resume = make_resume_state(result.optimizer, cfg);
      save_checkpoint(out_path("checkpoint_step" + std::to_string(step) + ".bin"), result.weights, &resume);
    }
  }

  if (!options.out_dir.empty()) {
    const ResumeState resume = make_resume_state(result.optimizer, cfg);
    save_checkpoint(out_path("checkpoint.bin"), result.weights, &resume);
    write_train_log(out_path("log.csv"), result.log);
  }
  return result;
}

}  // namespace stagformer
