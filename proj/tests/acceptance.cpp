// One PASS/FAIL line per acceptance criterion. Arguments select criteria by
// number; none runs them all. Exit status is 1 if any selected one fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <set>
#include <string>

#include "fixtures.hpp"
#include "reference.hpp"
#include "stagformer/corpus.hpp"
#include "stagformer/decode.hpp"
#include "stagformer/perf.hpp"
#include "stagformer/train.hpp"

using namespace stagformer;

namespace {

// Tolerances.
constexpr double kGradRelTol = 1e-5;
constexpr double kGradStep = 1e-5;
constexpr std::size_t kGradCoordinates = 200;
constexpr double kDecodeLogitTol = 1e-10;
constexpr double kRecurrentTol = 1e-10;
constexpr double kMinSpeedupAt64 = 1.8;
constexpr double kLargeComm = 1000.0;
constexpr double kLossFraction = 0.7;  // of ln(259)
constexpr double kBaselineBand = 0.15;

constexpr SamplerSpec kGreedy{0.0, 0};

struct Verdict {
  bool passed = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      passed = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
  void note(const std::string& what) {
    if (!detail.empty()) detail += "; ";
    detail += what;
  }
};

std::string fmt(const char* pattern, double v) {
  char buf[96];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

bool rows_equal(const Tensor& a, const Tensor& b, std::size_t r) {
  const auto x = a.row(r), y = b.row(r);
  return std::equal(x.begin(), x.end(), y.begin(), y.end());
}

Verdict gradients() {
  Verdict v;
  ModelConfig c = fixture::toy(2, false, std::nullopt, 2, 32);
  c.vocab_size = 259;
  c.n_heads = 2;
  const ModelWeights w = init_weights(c, 101);
  const auto tokens = fixture::tokens(8, 3);
  std::vector<std::uint32_t> targets(tokens.begin() + 1, tokens.end());
  targets.push_back(kEosToken);
  auto loss = [&] { return cross_entropy_logits(forward_teacher_forced(w, tokens).logits, targets); };
  const FiniteDiffReport rep = finite_diff_check(loss, w.trainable_tensors(), kGradStep, kGradCoordinates, 7);
  v.require(rep.coordinates_checked == kGradCoordinates, "checked " + std::to_string(rep.coordinates_checked));
  v.require(rep.max_relative_error < kGradRelTol, "relative error too large");
  v.note(std::to_string(rep.coordinates_checked) + " coordinates, max rel " + fmt("%.3e", rep.max_relative_error));
  return v;
}

Verdict decode_equivalence() {
  Verdict v;
  const auto prompt = fixture::tokens(12, 21);
  double worst = 0.0;
  std::size_t variants = 0;
  for (const ModelConfig& c : fixture::variant_matrix(2, 32)) {
    const ModelWeights w = init_weights(c, 29);
    const GenerationResult par = generate(w, prompt, 64, kGreedy, DecodeMode::kParallel);
    const GenerationResult orc = generate(w, prompt, 64, kGreedy, DecodeMode::kOracle);
    ++variants;
    v.require(par.tokens == orc.tokens, fixture::describe(c) + " token mismatch");
    v.require(par.logits.size() == 64 && orc.logits.size() == 64, fixture::describe(c) + " logit count");
    double d = 0.0;
    for (std::size_t i = 0; i < std::min(par.logits.size(), orc.logits.size()); ++i)
      d = std::max(d, ref::max_abs_diff(par.logits[i], orc.logits[i]));
    v.require(d < kDecodeLogitTol, fixture::describe(c) + fmt(" logit diff %.3e", d));
    worst = std::max(worst, d);
  }
  v.require(variants == 10, "expected 10 variants");
  v.note(std::to_string(variants) + " variants x 64 tokens, max logit diff " + fmt("%.3e", worst));
  return v;
}

Verdict stagger() {
  Verdict v;
  std::size_t cases = 0;
  for (const ModelConfig& c : fixture::variant_matrix()) {
    if (c.stacks < 2) continue;
    const ModelWeights w = init_weights(c, 31);
    const auto tokens = fixture::tokens(10, 4);
    const Tensor base = forward_teacher_forced(w, tokens).logits;
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
      ForwardOptions opt;
      opt.edit_stack_output = [&](std::size_t s, const Tensor& x) {
        if (s != 0) return x;
        std::vector<double> data(x.data().begin(), x.data().end());
        for (std::size_t col = 0; col < x.cols(); ++col) data[i * x.cols() + col] += 0.5 + 0.1 * col;
        return Tensor(x.shape(), data);
      };
      const Tensor pert = forward_teacher_forced(w, tokens, opt).logits;
      ++cases;
      for (std::size_t r = 0; r <= i; ++r)
        v.require(rows_equal(base, pert, r), fixture::describe(c) + " row " + std::to_string(r) + " moved");
      // Stack 1 reaches the top after p - 1 staggered hops.
      const std::size_t reach = i + c.stacks - 1;
      if (reach < tokens.size())
        v.require(!rows_equal(base, pert, reach), fixture::describe(c) + " no effect at " + std::to_string(reach));
    }
  }
  v.note(std::to_string(cases) + " perturbations, rows <= i bitwise equal");
  return v;
}

Verdict causality() {
  Verdict v;
  std::size_t cases = 0;
  for (const ModelConfig& c : fixture::variant_matrix()) {
    const ModelWeights w = init_weights(c, 37);
    const auto tokens = fixture::tokens(12, 5);
    const Tensor base = forward_teacher_forced(w, tokens).logits;
    for (std::size_t j = 0; j < tokens.size(); ++j) {
      auto changed = tokens;
      changed[j] = (changed[j] + 131) % 256;
      const Tensor pert = forward_teacher_forced(w, changed).logits;
      ++cases;
      for (std::size_t i = 0; i < j; ++i)
        v.require(rows_equal(base, pert, i), fixture::describe(c) + " token " + std::to_string(j) + " leaked");
      v.require(!rows_equal(base, pert, j), fixture::describe(c) + " token " + std::to_string(j) + " ignored");
    }
  }
  v.note(std::to_string(cases) + " perturbations over 10 variants");
  return v;
}

Verdict kv_cache() {
  Verdict v;
  for (std::size_t l : {4u, 8u, 36u}) {
    const std::string tag = "l=" + std::to_string(l);
    const KvCacheReport r = kv_cache_report(fixture::toy(2, false, std::nullopt, l / 2), 128);
    v.require(r.row("baseline").ratio == 1.0, tag + " baseline");
    v.require(r.row("separate").ratio == 1.5, tag + " separate");
    v.require(r.row("shared").ratio == 3.0, tag + " shared");
    v.require(r.row("recurrent").ratio == 2.0, tag + " recurrent");

    // The decode engine allocates what the report claims.
    const auto prompt = fixture::tokens(3, 1);
    const auto allocated = [&](const ModelConfig& c, DecodeMode mode) {
      const ModelWeights w = init_weights(c, 2);
      const KVCacheCounts k = prefill(w, prompt, mode).cache_counts();
      return k.self_caches + k.cross_caches;
    };
    const double base = static_cast<double>(allocated(fixture::toy(1, false, std::nullopt, l), DecodeMode::kParallel));
    v.require(base == static_cast<double>(l), tag + " engine baseline");
    v.require(allocated(fixture::toy(2, false, std::nullopt, l / 2), DecodeMode::kParallel) / base == 1.5,
              tag + " engine separate");
    v.require(allocated(fixture::toy(2, true, std::nullopt, l), DecodeMode::kParallel) / base == 3.0,
              tag + " engine shared");
    v.require(allocated(fixture::toy(2, true, std::nullopt, l), DecodeMode::kRecurrent) / base == 2.0,
              tag + " engine recurrent");
  }
  v.note("ratios 1.5 / 3 / 2 for l in {4, 8, 36}, report and engine");
  return v;
}

Verdict flops() {
  Verdict v;
  std::mt19937_64 rng(61);
  std::uniform_real_distribution<double> cost(0.0, 1000.0);
  for (int t = 0; t < 20; ++t) {
    const double e = cost(rng), m = cost(rng), a = cost(rng);
    const std::size_t layers = 2 * (1 + rng() % 64);
    const double l = static_cast<double>(layers);
    const ClosedFormFlops f = flops_closed_form(layers, 2, {e, m, a, 0.0, 1.0});
    v.require(f.baseline == 2 * e + l * (m + a), "baseline tuple " + std::to_string(t));
    v.require(f.stagformer_total == 2 * e + 3 * l * (m + a) / 2, "total tuple " + std::to_string(t));
    v.require(f.stagformer_ideal_latency == 2 * e + l * (m + a) / 2, "latency tuple " + std::to_string(t));
  }
  std::size_t configs = 0;
  for (std::size_t lps : {1u, 2u, 4u}) {
    for (std::size_t n : {4u, 16u, 33u}) {
      const ModelConfig c = fixture::toy(2, false, std::nullopt, lps);
      const PaperAggregation agg = paper_mode_aggregate(c, flops_counted(c, n));
      const ClosedFormFlops cf = flops_closed_form(c.total_layers, 2, {agg.e, agg.m, agg.a, 0.0, 1.0});
      v.require(agg.aggregate == cf.stagformer_total, "aggregation l=" + std::to_string(c.total_layers));
      ++configs;
    }
  }
  v.note("20 random tuples exact; aggregation equals closed form on " + std::to_string(configs) + " configs");
  return v;
}

Verdict latency() {
  Verdict v;
  SimulationOptions o;
  o.params = PerfParams{1.0, 1.0, 1.0, 0.0, 1.0};
  o.cross = CrossTerm{CrossTerm::Kind::kZero, 0.0};
  double previous = 0.0, at64 = 0.0;
  std::string series;
  for (std::size_t l : {8u, 16u, 32u, 64u}) {
    const double s = simulate_decode(fixture::toy(2, false, std::nullopt, l / 2), 128, 256, o).speedup;
    v.require(s > previous, "not monotone at l=" + std::to_string(l));
    v.require(s <= 2.0, "above the ideal bound at l=" + std::to_string(l));
    series += (series.empty() ? "" : " ") + fmt("%.4f", s);
    previous = s;
    at64 = s;
  }
  v.require(at64 >= kMinSpeedupAt64, "speedup at l=64 below 1.8");
  SimulationOptions slow = o;
  slow.params.comm = kLargeComm;
  const double s = simulate_decode(fixture::toy(2, false, std::nullopt, 32), 128, 256, slow).speedup;
  v.require(s < 1.0, "large comm still faster");
  v.note("speedup " + series + "; comm 1000 " + fmt("%.4f", s));
  return v;
}

std::vector<std::vector<double>> forced_run(const ModelWeights& w, std::span<const TokenId> prompt,
                                            std::span<const TokenId> continuation, const StepHooks& hooks) {
  DecodeState s = prefill(w, prompt, DecodeMode::kParallel, kGreedy);
  s.set_hooks(hooks);
  std::vector<std::vector<double>> out;
  for (TokenId t : continuation) {
    s.append_token(t);
    decode_step(s);
    out.push_back(s.last_logits());
  }
  return out;
}

Verdict window_one() {
  Verdict v;
  std::size_t cases = 0;
  for (bool shared : {false, true}) {
    const ModelConfig c = fixture::toy(2, shared, 1, 2);
    const ModelWeights w = init_weights(c, 43);
    const std::string tag = fixture::describe(c);

    // Decode: corrupt the cross caches before stack 2 runs position pos.
    const auto prompt = fixture::tokens(4, 12);
    const auto cont = fixture::tokens(8, 13);
    const auto base = forced_run(w, prompt, cont, {});
    for (std::size_t step = 0; step < cont.size(); ++step) {
      const std::size_t pos = prompt.size() + step;
      const auto corrupt = [&](std::size_t first, std::size_t last) {
        StepHooks hooks;
        hooks.before_stack = [=](std::size_t k, std::size_t p, KVCacheSet& set) {
          if (k != 1 || p != pos) return;
          for (KVCache& cache : set.cross) {
            const std::size_t d = cache.width();
            for (std::size_t e = first * d; e < last * d; ++e) {
              cache.mutable_keys()[e] = 2.5 - 3.0 * cache.mutable_keys()[e];
              cache.mutable_values()[e] += 7.0;
            }
          }
        };
        return forced_run(w, prompt, cont, hooks)[step];
      };
      ++cases;
      v.require(ref::max_abs_diff(corrupt(0, pos - 1), base[step]) == 0.0, tag + " decode pos " + std::to_string(pos));
      v.require(ref::max_abs_diff(corrupt(pos - 1, pos), base[step]) > 0.0,
                tag + " previous source ignored at " + std::to_string(pos));
    }

    // Teacher-forced: a per-query source whose rows <= i-2 are replaced.
    const auto tokens = fixture::tokens(14, 14);
    const ref::Forward full = ref::forward(w, tokens);
    const ref::Rows& src = full.stack_outputs[0];
    for (std::size_t i = 2; i < tokens.size(); ++i) {
      ref::Rows noisy = src;
      for (std::size_t s = 0; s + 2 <= i; ++s)
        for (double& x : noisy[s]) x = 1.0 - 2.0 * x;
      const ref::Rows top = ref::pass(w, tokens, 1, 1, [&](std::size_t r, std::size_t s) -> const ref::Row& {
        return r == i ? noisy[s] : src[s];
      });
      ++cases;
      v.require(ref::max_abs_diff(ref::logits_of(w, top[i]), full.logits[i]) == 0.0,
                tag + " forward pos " + std::to_string(i));
    }
  }
  v.note(std::to_string(cases) + " positions bitwise invariant");
  return v;
}

Verdict recurrent() {
  Verdict v;
  double worst = 0.0;
  for (const ModelConfig& c : {fixture::toy(2, true, std::nullopt, 2), fixture::toy(3, true, std::nullopt, 2),
                               fixture::toy(2, true, 1, 3)}) {
    const std::string tag = fixture::describe(c);
    const ModelWeights w = init_weights(c, 47);
    const auto prompt = fixture::tokens(9, 15);
    DecodeState s = prefill(w, prompt, DecodeMode::kRecurrent, kGreedy);
    const Tensor full = forward_teacher_forced(w, prompt).logits;
    const double pre = ref::max_abs_diff(s.last_logits(), full.row(prompt.size() - 1));
    v.require(pre < kRecurrentTol, tag + fmt(" prefill diff %.3e", pre));
    std::vector<std::vector<double>> logits{s.last_logits()};
    for (int step = 0; step < 16; ++step) {
      s.sample();
      decode_step(s);
      logits.push_back(s.last_logits());
      v.require(s.caches().size() == 1, tag + " second cache set");
      const KVCacheCounts k = s.cache_counts();
      v.require(k.self_caches == c.total_layers && k.cross_caches == c.total_layers, tag + " cache count");
    }
    v.require(s.access_violations() == 0, tag + " cross read at or after the query");
    const ref::Rows want = ref::recurrent_logits(w, s.tokens(), prompt.size());
    v.require(want.size() == logits.size(), tag + " step count");
    for (std::size_t i = 0; i < std::min(want.size(), logits.size()); ++i) {
      const double d = ref::max_abs_diff(logits[i], want[i]);
      v.require(d < kRecurrentTol, tag + fmt(" step diff %.3e", d));
      worst = std::max(worst, d);
    }
    worst = std::max(worst, pre);
  }
  v.note("3 shared configs x 16 steps, max diff " + fmt("%.3e", worst) + ", one self-cache set");
  return v;
}

RunConfig desk_run(std::size_t stacks) {
  RunConfig r;
  r.model.vocab_size = 259;
  r.model.d_model = 128;
  r.model.n_heads = 4;
  r.model.d_ff = 512;
  r.model.total_layers = 8;
  r.model.stacks = stacks;
  r.model.weight_sharing = false;
  r.model.max_seq_len = 128;
  r.model.init_std = 0.02;
  r.model.seed = 1;
  r.train.seq_len = 128;
  r.train.batch_size = 8;
  r.train.lr = 2e-3;
  r.train.warmup_steps = 50;
  r.train.clip_norm = 1.0;
  r.train.eval_every = 0;
  r.train.eval_batches = 4;
  return r;
}

Verdict training() {
  Verdict v;
  const std::string text = synthetic_corpus(std::size_t{1} << 20, 2024);
  v.require(text.size() >= 1'000'000, "corpus below 1 MB");
  const Corpus corpus = Corpus::from_text(text, 0.02);
  TrainOptions options;
  options.steps = 500;
  const TrainResult stag = train(desk_run(2), corpus, options);
  const TrainResult base = train(desk_run(1), corpus, options);
  const double ls = smoothed_loss(stag.log), lb = smoothed_loss(base.log);
  const double limit = kLossFraction * std::log(259.0);
  v.require(ls < limit, "StagFormer loss above " + fmt("%.4f", limit));
  v.require(std::abs(lb - ls) <= kBaselineBand * ls, "baseline outside +-15%");
  v.note("smoothed loss p=2 " + fmt("%.4f", ls) + ", p=1 " + fmt("%.4f", lb) + fmt(" (limit %.4f", limit) +
         fmt(", ratio %.3f)", lb / ls));
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
      {"gradients match finite differences", gradients},
      {"parallel decode equals the teacher-forced oracle", decode_equivalence},
      {"stack outputs reach the logits one position late", stagger},
      {"causality", causality},
      {"KV-cache ratios", kv_cache},
      {"FLOP formulas", flops},
      {"latency simulation", latency},
      {"window-1 cross-attention ignores old sources", window_one},
      {"recurrent decoding", recurrent},
      {"training smoke run", training},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(static_cast<std::size_t>(std::stoul(argv[i])));

  bool all = true;
  for (std::size_t n = 1; n <= criteria.size(); ++n) {
    if (!selected.empty() && !selected.count(n)) continue;
    const auto start = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[n - 1].second();
    } catch (const std::exception& e) {
      v.passed = false;
      v.detail = std::string("threw: ") + e.what();
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%s criterion %zu: %s (%s) [%.1fs]\n", v.passed ? "PASS" : "FAIL", n, criteria[n - 1].first,
                v.detail.c_str(), seconds);
    std::fflush(stdout);
    all = all && v.passed;
  }
  return all ? 0 : 1;
}
