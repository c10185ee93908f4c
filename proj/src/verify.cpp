#include "stagformer/verify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <sstream>

#include "stagformer/attention.hpp"
#include "stagformer/decode.hpp"
#include "stagformer/errors.hpp"
#include "stagformer/model.hpp"
#include "stagformer/perf.hpp"
#include "stagformer/train.hpp"

namespace stagformer {

bool SuiteReport::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

namespace {

class Recorder {
 public:
  explicit Recorder(std::string suite) { report_.suite = std::move(suite); }

  void check(std::string name, bool ok, std::string detail = {}) {
    report_.checks.push_back({std::move(name), ok, std::move(detail)});
  }

  // Runs `body`; an exception becomes a failed check.
  void guarded(const std::string& name, const std::function<void()>& body) {
    try {
      body();
    } catch (const std::exception& e) {
      check(name, false, std::string("threw: ") + e.what());
    }
  }

  SuiteReport take() { return std::move(report_); }

 private:
  SuiteReport report_;
};

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

std::string window_label(std::optional<std::size_t> w) { return w ? std::to_string(*w) : std::string("inf"); }

ModelConfig toy_config(std::size_t stacks, bool shared, std::optional<std::size_t> window, std::size_t per_stack = 1) {
  ModelConfig cfg;
  cfg.vocab_size = kByteVocabSize;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.stacks = stacks;
  cfg.weight_sharing = shared;
  cfg.total_layers = shared ? per_stack : per_stack * stacks;
  cfg.cross_window = window;
  cfg.max_seq_len = 64;
  cfg.init_std = 0.1;
  cfg.seed = 11;
  return cfg;
}

std::vector<TokenId> random_tokens(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<TokenId> dist(0, 255);
  std::vector<TokenId> out(n);
  for (auto& t : out) t = dist(rng);
  return out;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = a.size() == b.size() ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

// ---- masks --------------------------------------------------------------------------

SuiteReport masks_suite() {
  Recorder r("masks");
  r.guarded("causal definition", [&] {
    bool ok = true;
    for (std::size_t n = 1; n <= 8; ++n) {
      const AttentionMask m = build_causal_mask(n);
      ok = ok && m.allowed_count() == n * (n + 1) / 2;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) ok = ok && m.allowed(i, j) == (j <= i);
    }
    r.check("causal definition", ok);
  });
  r.guarded("staggered definition", [&] {
    bool ok = true;
    std::string bad;
    for (std::optional<std::size_t> w : {std::optional<std::size_t>{}, std::optional<std::size_t>{1},
                                         std::optional<std::size_t>{2}, std::optional<std::size_t>{4}}) {
      for (std::size_t n = 1; n <= 8; ++n) {
        const AttentionMask m = build_staggered_mask(n, n, w);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            const bool want = j + 1 <= i && (!w || j + *w >= i);
            if (m.allowed(i, j) != want && bad.empty()) {
              bad = "window " + window_label(w) + " n " + std::to_string(n) + " (" + std::to_string(i) + "," +
                    std::to_string(j) + ")";
            }
            ok = ok && m.allowed(i, j) == want;
          }
        }
      }
    }
    r.check("staggered definition", ok, bad);
  });
  r.guarded("staggered diagonal excluded", [&] {
    bool ok = true;
    for (std::size_t n = 1; n <= 16; ++n) {
      const AttentionMask m = build_staggered_mask(n, n, std::nullopt);
      for (std::size_t i = 0; i < n; ++i) ok = ok && !m.allowed(i, i);
      ok = ok && m.count_non_strict() == 0;
    }
    r.check("staggered diagonal excluded", ok);
  });
  r.guarded("window row counts", [&] {
    bool ok = true;
    for (std::size_t w : {1, 2, 4}) {
      const AttentionMask m = build_staggered_mask(12, 12, w);
      for (std::size_t i = 0; i < 12; ++i) ok = ok && m.row_count(i) == std::min(i, w);
    }
    r.check("window row counts", ok);
  });
  r.guarded("disallowed keys are invisible", [&] {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    const std::size_t n = 6, width = 8;
    auto rand_tensor = [&] {
      std::vector<double> v(n * width);
      for (double& x : v) x = u(rng);
      return Tensor({n, width}, v);
    };
    const Tensor q = rand_tensor(), k = rand_tensor(), v = rand_tensor();
    bool ok = true;
    for (const AttentionMask& mask : {build_causal_mask(n), build_staggered_mask(n, n, std::nullopt),
                                      build_staggered_mask(n, n, 2)}) {
      const Tensor base = attention(q, k, v, mask, 0.5, {2, 1});
      for (std::size_t i = 0; i < n; ++i) {
        Tensor k2 = k.detach(), v2 = v.detach();
        for (std::size_t j = 0; j < n; ++j) {
          if (mask.allowed(i, j)) continue;
          for (std::size_t c = 0; c < width; ++c) {
            k2.mutable_data()[j * width + c] += 10.0 * u(rng);
            v2.mutable_data()[j * width + c] += 10.0 * u(rng);
          }
        }
        const Tensor out = attention(q, k2, v2, mask, 0.5, {2, 1});
        ok = ok && std::equal(base.row(i).begin(), base.row(i).end(), out.row(i).begin());
      }
    }
    r.check("disallowed keys are invisible", ok);
  });
  r.guarded("rope preserves pair norms", [&] {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    const RopeParams params{8, 10000.0};
    double worst = 0.0;
    for (std::size_t pos = 0; pos < 50; ++pos) {
      std::vector<double> row(16);
      for (double& x : row) x = u(rng);
      std::vector<double> rotated = row;
      rope_rotate_row(rotated, pos * 7, params);
      for (std::size_t t = 0; t < 8; ++t) {
        worst = std::max(worst, std::abs(std::hypot(row[2 * t], row[2 * t + 1]) -
                                         std::hypot(rotated[2 * t], rotated[2 * t + 1])));
      }
    }
    r.check("rope preserves pair norms", worst < 1e-12, "max diff " + format_double(worst));
  });
  return r.take();
}

// ---- gradients ----------------------------------------------------------------------

SuiteReport grad_suite() {
  Recorder r("grad");
  r.guarded("primitive gradients", [&] {
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    auto rand_param = [&](Shape shape) {
      std::size_t n = 1;
      for (auto s : shape) n *= s;
      std::vector<double> v(n);
      for (double& x : v) x = u(rng);
      return Tensor(shape, v, true);
    };
    Tensor a = rand_param({3, 4}), b = rand_param({4, 3}), g = rand_param({3}), bias = rand_param({3});
    auto loss = [&] {
      Tensor x = matmul(a, b);
      Tensor y = layer_norm(gelu(x), g, bias);
      return sum(mul(softmax_rows(y), y));
    };
    const FiniteDiffReport rep = finite_diff_check(loss, {a, b, g, bias}, 1e-5, 60, 1);
    r.check("primitive gradients", rep.max_relative_error < 1e-6, "max rel " + format_double(rep.max_relative_error));
  });
  r.guarded("toy model gradients", [&] {
    ModelConfig cfg = toy_config(2, false, std::nullopt, 1);
    cfg.init_std = 0.2;
    const ModelWeights w = init_weights(cfg, 4);
    const std::vector<TokenId> tokens = random_tokens(7, 9);
    Batch batch;
    batch.batch = 1;
    batch.seq_len = 6;
    batch.inputs.assign(tokens.begin(), tokens.end() - 1);
    batch.targets.assign(tokens.begin() + 1, tokens.end());
    const FiniteDiffReport rep =
        finite_diff_check([&] { return batch_loss(w, batch); }, w.trainable_tensors(), 1e-5, 60, 2);
    r.check("toy model gradients", rep.max_relative_error < 1e-5, "max rel " + format_double(rep.max_relative_error));
  });
  return r.take();
}

// ---- decode equivalence --------------------------------------------------------------

struct Variant {
  std::size_t stacks;
  bool shared;
  std::optional<std::size_t> window;
};

std::vector<Variant> full_variant_matrix() {
  std::vector<Variant> out{{1, false, std::nullopt}};
  for (std::size_t p = 2; p <= 4; ++p) {
    for (bool shared : {false, true}) {
      for (std::optional<std::size_t> w : {std::optional<std::size_t>{}, std::optional<std::size_t>{4},
                                           std::optional<std::size_t>{2}, std::optional<std::size_t>{1}}) {
        out.push_back({p, shared, w});
      }
    }
  }
  return out;
}

SuiteReport equiv_suite() {
  Recorder r("equiv");
  const std::vector<TokenId> prompt = random_tokens(6, 17);
  const SamplerSpec greedy{0.0, 0};
  for (const Variant& v : full_variant_matrix()) {
    const std::string name = "p" + std::to_string(v.stacks) + (v.shared ? " shared" : " separate") + " window " +
                             window_label(v.window);
    r.guarded(name, [&] {
      const ModelWeights w = init_weights(toy_config(v.stacks, v.shared, v.window), 30 + v.stacks);
      const std::size_t n = 17;
      const GenerationResult par = generate(w, prompt, n, greedy, DecodeMode::kParallel);
      const GenerationResult orc = generate(w, prompt, n, greedy, DecodeMode::kOracle);
      double worst = 0.0;
      for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, max_abs_diff(par.logits[i], orc.logits[i]));
      const bool same_tokens = par.tokens == orc.tokens;
      DecodeState s = prefill(w, prompt, DecodeMode::kParallel, greedy);
      for (int i = 0; i < 4; ++i) {
        s.sample();
        decode_step(s);
      }
      const bool stagger = s.access_violations() == 0 && s.access_log().empty() == (v.stacks == 1);
      r.check(name, same_tokens && worst < 1e-10 && stagger,
              "max logit diff " + format_double(worst) + (same_tokens ? "" : ", token mismatch") +
                  (stagger ? "" : ", stagger violated"));
    });
  }
  return r.take();
}

// ---- caches -----------------------------------------------------------------------------

SuiteReport cache_suite() {
  Recorder r("cache");
  for (std::size_t l : {4, 8, 36}) {
    r.guarded("report ratios l=" + std::to_string(l), [&] {
      ModelConfig cfg = toy_config(2, false, std::nullopt);
      cfg.total_layers = l;
      const KvCacheReport rep = kv_cache_report(cfg, 128);
      const bool ok = rep.row("baseline").total() == l && rep.row("separate").ratio == 1.5 &&
                      rep.row("shared").ratio == 3.0 && rep.row("recurrent").ratio == 2.0;
      r.check("report ratios l=" + std::to_string(l), ok);
    });
  }
  const std::vector<TokenId> prompt = random_tokens(5, 23);
  for (const Variant& v : std::vector<Variant>{{1, false, std::nullopt}, {2, false, std::nullopt}, {2, true, 2},
                                               {3, false, std::nullopt}, {4, true, 1}}) {
    const std::string name = "decode trajectory p" + std::to_string(v.stacks) + (v.shared ? " shared" : " separate");
    r.guarded(name, [&] {
      const ModelConfig cfg = toy_config(v.stacks, v.shared, v.window, 2);
      const ModelWeights w = init_weights(cfg, 8);
      DecodeState s = prefill(w, prompt, DecodeMode::kParallel, {0.0, 0});
      // One flag per stack: the hook runs concurrently on every worker.
      std::vector<char> mid_ok(cfg.stacks, 1);
      StepHooks hooks;
      hooks.on_stack_output = [&](std::size_t stack, std::size_t pos, std::span<double>, const KVCacheSet& caches) {
        bool ok = stack == 0 ? caches.cross.empty() : caches.cross.size() == cfg.layers_per_stack();
        for (const auto& c : caches.self) ok = ok && c.length() == pos + 1;
        for (const auto& c : caches.cross) ok = ok && c.length() == pos;
        if (!ok) mid_ok[stack] = 0;
      };
      s.set_hooks(std::move(hooks));
      const std::size_t steps = 6;
      for (std::size_t i = 0; i < steps; ++i) {
        s.sample();
        decode_step(s);
      }
      const std::size_t len = prompt.size() + steps;
      bool post_ok = true;
      for (const auto& set : s.caches()) {
        for (const auto& c : set.self) post_ok = post_ok && c.length() == len;
        for (const auto& c : set.cross) post_ok = post_ok && c.length() == len;
      }
      const KVCacheCounts counts = s.cache_counts();
      const KvCacheRow expected = kv_cache_counts(cfg);
      const bool count_ok = counts.self_caches == expected.self_caches && counts.cross_caches == expected.cross_caches &&
                            counts.self_entries == expected.self_caches * len &&
                            counts.cross_entries == expected.cross_caches * len;
      r.check(name, std::all_of(mid_ok.begin(), mid_ok.end(), [](char c) { return c != 0; }) && post_ok && count_ok);
    });
  }
  r.guarded("recurrent single self set", [&] {
    const ModelConfig cfg = toy_config(2, true, std::nullopt, 2);
    const ModelWeights w = init_weights(cfg, 8);
    DecodeState s = prefill(w, prompt, DecodeMode::kRecurrent, {0.0, 0});
    for (int i = 0; i < 5; ++i) {
      s.sample();
      decode_step(s);
    }
    const KVCacheCounts counts = s.cache_counts();
    const KvCacheRow expected = kv_cache_counts(cfg, true);
    r.check("recurrent single self set", s.caches().size() == 1 && counts.self_caches == expected.self_caches &&
                                             counts.cross_caches == expected.cross_caches &&
                                             counts.self_entries == 2 * (prompt.size() + 5));
  });
  return r.take();
}

// ---- flops ------------------------------------------------------------------------------

SuiteReport flops_suite() {
  Recorder r("flops");
  r.guarded("closed form example", [&] {
    const ClosedFormFlops f = flops_closed_form(8, 2, PerfParams{10, 6, 2, 0, 1});
    r.check("closed form example", f.baseline == 84 && f.stagformer_total == 116 && f.stagformer_ideal_latency == 52);
  });
  r.guarded("cross partition is the difference", [&] {
    ModelConfig base = toy_config(1, false, std::nullopt, 4);
    ModelConfig stag = toy_config(2, false, std::nullopt, 2);
    const CountedFlops a = flops_counted(base, 10), b = flops_counted(stag, 10);
    const bool ok = b.total() - a.total() == b.macs[FlopPartition::kCrossAttention] &&
                    a.macs[FlopPartition::kCrossAttention] == 0;
    r.check("cross partition is the difference", ok);
  });
  r.guarded("linear in depth", [&] {
    std::vector<std::uint64_t> layer_macs;
    for (std::size_t l : {2, 4, 8}) {
      const CountedFlops c = flops_counted(toy_config(1, false, std::nullopt, l), 8);
      layer_macs.push_back(c.total() - c.macs[FlopPartition::kUnembed]);
    }
    r.check("linear in depth", layer_macs[1] == 2 * layer_macs[0] && layer_macs[2] == 4 * layer_macs[0]);
  });
  r.guarded("paper aggregation matches closed form", [&] {
    const ModelConfig cfg = toy_config(2, false, std::nullopt, 2);
    const PaperAggregation agg = paper_mode_aggregate(cfg, flops_counted(cfg, 12));
    const ClosedFormFlops f = flops_closed_form(cfg.total_layers, 2, PerfParams{agg.e, agg.m, agg.a, 0, 1});
    r.check("paper aggregation matches closed form", f.stagformer_total == agg.aggregate);
  });
  r.guarded("schedule example", [&] {
    ModelConfig cfg = toy_config(2, false, std::nullopt);
    cfg.total_layers = 64;
    SimulationOptions o;
    o.cross = {CrossTerm::Kind::kZero, 0.0};
    const ScheduleResult s = simulate_decode(cfg, 16, 32, o);
    r.check("schedule example",
            s.steps.front().latency == 66 && s.baseline_total_units == 130.0 * 32 && s.speedup > 1.96 && s.speedup < 2);
  });
  return r.take();
}

}  // namespace

std::vector<std::string_view> verify_suite_names() { return {"masks", "grad", "equiv", "cache", "flops"}; }

std::vector<SuiteReport> run_verify(std::string_view suite) {
  std::vector<SuiteReport> out;
  auto run = [&](std::string_view name) {
    if (name == "masks") out.push_back(masks_suite());
    if (name == "grad") out.push_back(grad_suite());
    if (name == "equiv") out.push_back(equiv_suite());
    if (name == "cache") out.push_back(cache_suite());
    if (name == "flops") out.push_back(flops_suite());
  };
  if (suite == "all") {
    for (auto name : verify_suite_names()) run(name);
  } else {
    const auto names = verify_suite_names();
    if (std::find(names.begin(), names.end(), suite) == names.end()) {
      throw ConfigError("unknown verify suite '" + std::string(suite) + "'");
    }
    run(suite);
  }
  return out;
}

}  // namespace stagformer
