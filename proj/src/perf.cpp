#include "stagformer/perf.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "stagformer/errors.hpp"

namespace stagformer {

void PerfParams::validate() const {
  for (double v : {e, m, a, comm, time_per_unit}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("cost parameters must be finite and >= 0");
  }
}

ClosedFormFlops flops_closed_form(std::size_t layers, std::size_t stacks, const PerfParams& params) {
  params.validate();
  if (stacks == 0) throw ConfigError("stacks must be >= 1");
  const double e = params.e, m = params.m, a = params.a;
  const double l = static_cast<double>(layers);
  const double p = static_cast<double>(stacks);
  ClosedFormFlops out;
  out.baseline = 2 * e + l * (m + a);
  if (stacks == 2) {
    out.stagformer_total = 2 * e + 3 * l * (m + a) / 2;
    out.stagformer_ideal_latency = 2 * e + l * (m + a) / 2;
  } else {
    out.stagformer_total = 2 * e + l * (m + a) + (l * (p - 1) / p) * (m + a);
    out.stagformer_ideal_latency = 2 * e + l * (m + a) / p;
  }
  return out;
}

CountedFlops flops_counted(const ModelConfig& cfg, std::size_t seq_len) {
  if (seq_len == 0) throw ConfigError("seq_len must be >= 1");
  const ModelWeights weights = init_weights(cfg, cfg.seed);
  const std::vector<TokenId> tokens(seq_len, 0);
  NoGradGuard no_grad;
  FlopCounter counter;
  forward_teacher_forced(weights, tokens);
  return CountedFlops{counter.counts(), seq_len};
}

PaperAggregation paper_mode_aggregate(const ModelConfig& cfg, const CountedFlops& counted) {
  PaperAggregation agg;
  agg.layers = cfg.layer_applications();
  agg.cross_layers = cfg.cross_layers();
  const double l = static_cast<double>(agg.layers);
  const double self = static_cast<double>(counted.macs[FlopPartition::kSelfAttention]);
  const double ffn = static_cast<double>(counted.macs[FlopPartition::kFfn]);
  agg.e = static_cast<double>(counted.macs[FlopPartition::kUnembed]);
  agg.a = self / l;
  agg.m = ffn / l;
  agg.aggregate = 2 * agg.e + self + ffn + static_cast<double>(agg.cross_layers) * (agg.m + agg.a);
  return agg;
}

// ---- KV-cache accounting ------------------------------------------------------------

const KvCacheRow& KvCacheReport::row(std::string_view variant) const {
  for (const auto& r : rows) {
    if (r.variant == variant) return r;
  }
  throw IndexError("no KV-cache row named '" + std::string(variant) + "'");
}

KvCacheRow kv_cache_counts(const ModelConfig& cfg, bool recurrent) {
  validate_config(cfg);
  KvCacheRow row;
  row.layers = cfg.total_layers;
  row.stacks = cfg.stacks;
  if (recurrent) {
    if (!cfg.weight_sharing) throw ModeError("recurrent decoding requires a shared-weights model");
    row.variant = "recurrent";
    row.self_caches = cfg.layers_per_stack();
    row.cross_caches = cfg.layers_per_stack();
    return row;
  }
  row.variant = cfg.stacks == 1 ? "baseline" : (cfg.weight_sharing ? "shared" : "separate");
  row.self_caches = cfg.layer_applications();
  row.cross_caches = cfg.cross_layers();
  return row;
}

KvCacheReport kv_cache_report(const ModelConfig& cfg, std::size_t context_len) {
  validate_config(cfg);
  KvCacheReport report;
  report.context_len = context_len;
  report.d_model = cfg.d_model;
  const std::size_t p = std::max<std::size_t>(cfg.stacks, 2);

  ModelConfig base = cfg;
  base.stacks = 1;
  base.weight_sharing = false;
  base.cross_window.reset();
  report.rows.push_back(kv_cache_counts(base));
  if (cfg.total_layers % p == 0) {
    ModelConfig separate = base;
    separate.stacks = p;
    separate.cross_window = cfg.cross_window;
    report.rows.push_back(kv_cache_counts(separate));
  }
  ModelConfig shared = base;
  shared.stacks = p;
  shared.weight_sharing = true;
  shared.cross_window = cfg.cross_window;
  report.rows.push_back(kv_cache_counts(shared));
  report.rows.push_back(kv_cache_counts(shared, true));

  const double baseline = static_cast<double>(report.rows.front().total());
  for (auto& r : report.rows) {
    r.bytes = static_cast<std::uint64_t>(r.total()) * context_len * 2 * cfg.d_model * sizeof(double);
    r.ratio = static_cast<double>(r.total()) / baseline;
  }
  return report;
}

// ---- schedule simulation --------------------------------------------------------------

CrossTerm CrossTerm::parse(std::string_view text) {
  if (text == "zero") return {Kind::kZero, 0.0};
  if (text == "paper") return {Kind::kPaper, 0.0};
  if (text == "counted") return {Kind::kCounted, 0.0};
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (text.empty() || ec != std::errc() || ptr != text.data() + text.size() || !(value >= 0.0)) {
    throw ConfigError("cross term must be zero, paper, counted or a non-negative number, got '" + std::string(text) +
                      "'");
  }
  return {Kind::kValue, value};
}

std::string CrossTerm::label() const {
  switch (kind) {
    case Kind::kZero: return "zero";
    case Kind::kPaper: return "paper";
    case Kind::kCounted: return "counted";
    case Kind::kValue: {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.17g", value);
      return buf;
    }
  }
  return "?";
}

namespace {

// Costs of one position at context length c (keys including itself).
struct UnitCosts {
  double e = 0.0;
  double m = 0.0;
  double a = 0.0;
  double cross = 0.0;
};

UnitCosts unit_costs(const ModelConfig& cfg, const SimulationOptions& o, std::size_t context) {
  UnitCosts u;
  const double d = static_cast<double>(cfg.d_model);
  const double c = static_cast<double>(context);
  if (o.mode == CostMode::kPaper) {
    u.e = o.params.e;
    u.m = o.params.m;
    u.a = o.params.a;
  } else {
    u.e = d * static_cast<double>(cfg.vocab_size);
    u.m = 2.0 * d * static_cast<double>(cfg.d_ff);
    u.a = 4.0 * d * d + 2.0 * c * d;
  }
  switch (o.cross.kind) {
    case CrossTerm::Kind::kZero: u.cross = 0.0; break;
    case CrossTerm::Kind::kPaper: u.cross = u.m + u.a; break;
    case CrossTerm::Kind::kValue: u.cross = o.cross.value; break;
    case CrossTerm::Kind::kCounted:
      if (o.mode == CostMode::kPaper) {
        // Dense counting prices a cross layer exactly like a self layer.
        u.cross = u.a;
      } else {
        const std::size_t visible = std::min<std::size_t>(context - 1, cfg.cross_window.value_or(context));
        u.cross = 4.0 * d * d + 2.0 * static_cast<double>(visible) * d;
      }
      break;
  }
  return u;
}

std::vector<double> stack_costs(const ModelConfig& cfg, const UnitCosts& u) {
  const std::size_t p = cfg.stacks;
  const double h = static_cast<double>(cfg.layers_per_stack());
  std::vector<double> cost(p);
  for (std::size_t k = 0; k < p; ++k) {
    cost[k] = u.e + h * (u.m + u.a);
    if (k > 0) cost[k] += h * u.cross;
    if (k + 1 == p) cost[k] += u.e;
  }
  return cost;
}

ScheduleResult make_result(const ModelConfig& cfg, std::size_t prefill_len, std::size_t decode_len) {
  if (decode_len == 0) throw ConfigError("decode length must be >= 1");
  ScheduleResult r;
  r.layers = cfg.total_layers;
  r.stacks = cfg.stacks;
  r.window = cfg.cross_window;
  r.prefill = prefill_len;
  r.decode = decode_len;
  const KvCacheRow caches = kv_cache_counts(cfg);
  r.self_caches = caches.self_caches;
  r.cross_caches = caches.cross_caches;
  return r;
}

void finish(ScheduleResult& r) {
  r.total_units = 0.0;
  for (const auto& s : r.steps) r.total_units += s.latency;
  r.per_token_units = r.total_units / static_cast<double>(r.steps.size());
}

}  // namespace

ScheduleResult simulate_baseline(const ModelConfig& cfg, std::size_t prefill_len, std::size_t decode_len,
                                 const SimulationOptions& options) {
  options.params.validate();
  ModelConfig base = cfg;
  base.stacks = 1;
  base.weight_sharing = false;
  base.cross_window.reset();
  ScheduleResult r = make_result(base, prefill_len, decode_len);
  r.variant = "baseline";
  const double l = static_cast<double>(base.total_layers);
  const double tpu = options.params.time_per_unit;
  for (std::size_t c = 1; c <= prefill_len; ++c) {
    const std::size_t context = options.mode == CostMode::kPaper ? 1 : c;
    const UnitCosts u = unit_costs(base, options, context);
    r.prefill_units += (2 * u.e + l * (u.m + u.a)) * tpu;
  }
  for (std::size_t i = 0; i < decode_len; ++i) {
    ScheduleStep step;
    step.context = prefill_len + i + 1;
    const UnitCosts u = unit_costs(base, options, step.context);
    step.latency = (2 * u.e + l * (u.m + u.a)) * tpu;
    step.worker_busy = {step.latency};
    r.steps.push_back(std::move(step));
  }
  finish(r);
  r.baseline_total_units = r.total_units;
  r.speedup = 1.0;
  return r;
}

ScheduleResult simulate_decode(const ModelConfig& cfg, std::size_t prefill_len, std::size_t decode_len,
                               const SimulationOptions& options) {
  options.params.validate();
  validate_config(cfg);
  const ScheduleResult baseline = simulate_baseline(cfg, prefill_len, decode_len, options);
  if (cfg.stacks == 1) return baseline;

  ScheduleResult r = make_result(cfg, prefill_len, decode_len);
  r.variant = cfg.weight_sharing ? "stagformer-shared" : "stagformer-separate";
  const std::size_t p = cfg.stacks;
  const std::size_t workers = options.workers == 0 ? p : std::min(options.workers, p);
  const double tpu = options.params.time_per_unit;

  for (std::size_t c = 1; c <= prefill_len; ++c) {
    const std::size_t context = options.mode == CostMode::kPaper ? 1 : c;
    for (double cost : stack_costs(cfg, unit_costs(cfg, options, context))) r.prefill_units += cost * tpu;
  }
  for (std::size_t i = 0; i < decode_len; ++i) {
    ScheduleStep step;
    step.context = prefill_len + i + 1;
    const std::vector<double> costs = stack_costs(cfg, unit_costs(cfg, options, step.context));
    step.worker_busy.assign(workers, 0.0);
    for (std::size_t k = 0; k < p; ++k) step.worker_busy[k % workers] += costs[k] * tpu;
    step.latency = *std::max_element(step.worker_busy.begin(), step.worker_busy.end()) + options.params.comm * tpu;
    r.steps.push_back(std::move(step));
  }
  finish(r);
  r.baseline_total_units = baseline.total_units;
  r.speedup = r.baseline_total_units / r.total_units;
  return r;
}

// ---- reports --------------------------------------------------------------------------

std::string report_csv(const std::vector<ScheduleResult>& results) {
  std::string out = "variant,l,p,window,prefill,decode,per_token_units,total_units,speedup,self_caches,cross_caches\n";
  char line[512];
  for (const auto& r : results) {
    const std::string window = r.window ? std::to_string(*r.window) : "inf";
    std::snprintf(line, sizeof line, "%s,%zu,%zu,%s,%zu,%zu,%.17g,%.17g,%.17g,%zu,%zu\n", r.variant.c_str(), r.layers,
                  r.stacks, window.c_str(), r.prefill, r.decode, r.per_token_units, r.total_units, r.speedup,
                  r.self_caches, r.cross_caches);
    out += line;
  }
  return out;
}

nlohmann::json report_json(const std::vector<ScheduleResult>& results, const ModelConfig& cfg,
                           const SimulationOptions& options) {
  using nlohmann::json;
  json doc;
  doc["mode"] = options.mode == CostMode::kPaper ? "paper" : "measured";
  doc["cross_term"] = options.cross.label();
  doc["params"] = {{"e", options.params.e},
                   {"m", options.params.m},
                   {"a", options.params.a},
                   {"comm", options.params.comm},
                   {"time_per_unit", options.params.time_per_unit}};
  const ClosedFormFlops cf = flops_closed_form(cfg.total_layers, std::max<std::size_t>(cfg.stacks, 2), options.params);
  doc["closed_form"] = {{"baseline", cf.baseline},
                        {"stagformer_total", cf.stagformer_total},
                        {"stagformer_ideal_latency", cf.stagformer_ideal_latency}};
  json rows = json::array();
  for (const auto& r : results) {
    rows.push_back({{"variant", r.variant},
                    {"l", r.layers},
                    {"p", r.stacks},
                    {"window", r.window ? json(*r.window) : json(nullptr)},
                    {"prefill", r.prefill},
                    {"decode", r.decode},
                    {"prefill_units", r.prefill_units},
                    {"per_token_units", r.per_token_units},
                    {"total_units", r.total_units},
                    {"speedup", r.speedup},
                    {"self_caches", r.self_caches},
                    {"cross_caches", r.cross_caches}});
  }
  doc["results"] = rows;
  const std::size_t context = results.empty() ? 0 : results.front().prefill + results.front().decode;
  json kv = json::array();
  for (const auto& row : kv_cache_report(cfg, context).rows) {
    kv.push_back({{"variant", row.variant},
                  {"self_caches", row.self_caches},
                  {"cross_caches", row.cross_caches},
                  {"bytes", row.bytes},
                  {"ratio", row.ratio}});
  }
  doc["kv_cache"] = {{"context_len", context}, {"rows", kv}};
  return doc;
}

void emit_report(const std::vector<ScheduleResult>& results, const ModelConfig& cfg, const SimulationOptions& options,
                 const std::string& csv_path, const std::string& json_path) {
  if (!csv_path.empty()) {
    std::ofstream out(csv_path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write CSV report '" + csv_path + "'");
    out << report_csv(results);
  }
  if (!json_path.empty()) {
    std::ofstream out(json_path, std::ios::trunc);
    if (!out) throw ConfigError("cannot write JSON report '" + json_path + "'");
    out << report_json(results, cfg, options).dump(2) << '\n';
  }
}

}  // namespace stagformer
