#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "stagformer/model.hpp"
#include "stagformer/tensor.hpp"

namespace stagformer {

// Abstract cost units: e per embedding or unembedding, m per MLP, a per
// attention, comm per step of cross-stack transfer.
struct PerfParams {
  double e = 1.0;
  double m = 1.0;
  double a = 1.0;
  double comm = 0.0;
  double time_per_unit = 1.0;

  void validate() const;
};

struct ClosedFormFlops {
  double baseline = 0.0;
  double stagformer_total = 0.0;
  double stagformer_ideal_latency = 0.0;
};

// baseline 2e + l(m+a); total 2e + l(m+a) + (l(p-1)/p)(m+a); ideal
// 2e + l(m+a)/p. For p = 2 these are evaluated as 2e + 3l(m+a)/2 and
// 2e + l(m+a)/2.
ClosedFormFlops flops_closed_form(std::size_t layers, std::size_t stacks, const PerfParams& params);

struct CountedFlops {
  FlopCounts macs;
  std::size_t seq_len = 0;
  std::uint64_t total() const { return macs.total(); }
};

// MACs issued by one teacher-forced forward pass over seq_len tokens.
CountedFlops flops_counted(const ModelConfig& cfg, std::size_t seq_len);

// Coarse symbols read off a counted pass: e = unembed, a = self / l,
// m = ffn / l; each cross-attention layer is priced at (m + a).
struct PaperAggregation {
  double e = 0.0;
  double m = 0.0;
  double a = 0.0;
  std::size_t layers = 0;
  std::size_t cross_layers = 0;
  double aggregate = 0.0;
};
PaperAggregation paper_mode_aggregate(const ModelConfig& cfg, const CountedFlops& counted);

struct KvCacheRow {
  std::string variant;
  std::size_t layers = 0;
  std::size_t stacks = 1;
  std::size_t self_caches = 0;
  std::size_t cross_caches = 0;
  std::uint64_t bytes = 0;
  double ratio = 1.0;  // total caches / baseline(l) caches

  std::size_t total() const { return self_caches + cross_caches; }
};

struct KvCacheReport {
  std::size_t context_len = 0;
  std::size_t d_model = 0;
  std::vector<KvCacheRow> rows;

  const KvCacheRow& row(std::string_view variant) const;
};

// Cache counts of a configuration as the decode engine allocates them.
KvCacheRow kv_cache_counts(const ModelConfig& cfg, bool recurrent = false);
// Rows: baseline, separate (when l divides by p), shared, recurrent, for
// l = cfg.total_layers and p = max(cfg.stacks, 2). Bytes assume f64 K and V.
KvCacheReport kv_cache_report(const ModelConfig& cfg, std::size_t context_len);

enum class CostMode { kPaper, kMeasured };

struct CrossTerm {
  enum class Kind { kZero, kPaper, kCounted, kValue };
  Kind kind = Kind::kCounted;
  double value = 0.0;

  static CrossTerm parse(std::string_view text);
  std::string label() const;
};

struct SimulationOptions {
  PerfParams params;
  CostMode mode = CostMode::kPaper;
  CrossTerm cross;
  std::size_t workers = 0;  // 0: one per stack
};

struct ScheduleStep {
  std::size_t context = 0;
  std::vector<double> worker_busy;
  double latency = 0.0;
};

struct ScheduleResult {
  std::string variant;
  std::size_t layers = 0;
  std::size_t stacks = 1;
  std::optional<std::size_t> window;
  std::size_t prefill = 0;
  std::size_t decode = 0;
  std::vector<ScheduleStep> steps;
  double prefill_units = 0.0;
  double per_token_units = 0.0;  // mean step latency
  double total_units = 0.0;      // sum of decode step latencies
  double baseline_total_units = 0.0;
  double speedup = 1.0;          // baseline_total_units / total_units
  std::size_t self_caches = 0;
  std::size_t cross_caches = 0;
};

// Per-token baseline cost is 2e + l(m+a). Stack k costs e (its own
// embedding) + h(m+a) + [k>0] h*cross + [k last] e, stacks on one worker add
// up, and a step takes the slowest worker plus comm. Prefill runs positions
// in parallel and stacks in sequence.
ScheduleResult simulate_decode(const ModelConfig& cfg, std::size_t prefill_len, std::size_t decode_len,
                               const SimulationOptions& options);
ScheduleResult simulate_baseline(const ModelConfig& cfg, std::size_t prefill_len, std::size_t decode_len,
                                 const SimulationOptions& options);

std::string report_csv(const std::vector<ScheduleResult>& results);
nlohmann::json report_json(const std::vector<ScheduleResult>& results, const ModelConfig& cfg,
                           const SimulationOptions& options);
// Writes whichever paths are non-empty. Throws ConfigError if unwritable.
void emit_report(const std::vector<ScheduleResult>& results, const ModelConfig& cfg, const SimulationOptions& options,
                 const std::string& csv_path, const std::string& json_path);

}  // namespace stagformer
