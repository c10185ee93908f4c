#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "stagformer/errors.hpp"
#include "stagformer/perf.hpp"

using namespace stagformer;

namespace {

ModelConfig dims(std::size_t layers, std::size_t stacks, bool shared = false) {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.total_layers = layers;
  c.stacks = stacks;
  c.weight_sharing = shared;
  c.max_seq_len = 32;
  return c;
}

SimulationOptions ideal() {
  SimulationOptions o;
  o.params = PerfParams{1.0, 1.0, 1.0, 0.0, 1.0};
  o.cross = CrossTerm{CrossTerm::Kind::kZero, 0.0};
  return o;
}

std::vector<std::string> csv_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  return lines;
}

}  // namespace

TEST_CASE("closed forms") {
  const ClosedFormFlops f = flops_closed_form(8, 2, {10, 6, 2, 0, 1});
  CHECK(f.baseline == 84);
  CHECK(f.stagformer_total == 116);
  CHECK(f.stagformer_ideal_latency == 52);

  const ClosedFormFlops g = flops_closed_form(12, 3, {1, 2, 3, 0, 1});
  CHECK(g.baseline == 2 + 12 * 5);
  CHECK(g.stagformer_total == doctest::Approx(2 + 60 + 8 * 5).epsilon(1e-15));
  CHECK(g.stagformer_ideal_latency == doctest::Approx(2 + 20).epsilon(1e-15));

  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 100.0);
  for (int i = 0; i < 20; ++i) {
    const PerfParams p{u(rng), u(rng), u(rng), 0, 1};
    const std::size_t l = 2 * (1 + rng() % 40);
    const ClosedFormFlops two = flops_closed_form(l, 2, p);
    const double ld = static_cast<double>(l);
    CHECK(std::abs(two.stagformer_total - (2 * p.e + ld * (p.m + p.a) + (ld / 2) * (p.m + p.a))) <=
          1e-12 * two.stagformer_total);
  }
  CHECK_THROWS_AS(flops_closed_form(8, 2, {-1, 1, 1, 0, 1}), ConfigError);
}

TEST_CASE("counted MACs follow tensor shapes") {
  const std::size_t n = 10, d = 16, f = 32, v = 259;
  const CountedFlops base = flops_counted(dims(1, 1), n);
  CHECK(base.macs[FlopPartition::kEmbed] == 0);
  CHECK(base.macs[FlopPartition::kSelfAttention] == 4 * n * d * d + 2 * n * n * d);
  CHECK(base.macs[FlopPartition::kFfn] == 2 * n * d * f);
  CHECK(base.macs[FlopPartition::kUnembed] == n * d * v);
  CHECK(base.macs[FlopPartition::kCrossAttention] == 0);

  const CountedFlops two = flops_counted(dims(2, 2), n);
  CHECK(two.macs[FlopPartition::kCrossAttention] == 4 * n * d * d + 2 * n * n * d);
}

TEST_CASE("counted partitions") {
  const CountedFlops p1 = flops_counted(dims(4, 1), 12), p2 = flops_counted(dims(4, 2), 12);
  CHECK(p2.total() - p1.total() == p2.macs[FlopPartition::kCrossAttention]);
  for (FlopPartition part : {FlopPartition::kEmbed, FlopPartition::kSelfAttention, FlopPartition::kFfn,
                             FlopPartition::kUnembed})
    CHECK(p1.macs[part] == p2.macs[part]);

  ModelConfig wide = dims(4, 2);
  wide.d_ff *= 2;
  const CountedFlops pw = flops_counted(wide, 12);
  CHECK(pw.macs[FlopPartition::kFfn] == 2 * p2.macs[FlopPartition::kFfn]);
  for (FlopPartition part : {FlopPartition::kEmbed, FlopPartition::kSelfAttention, FlopPartition::kCrossAttention,
                             FlopPartition::kUnembed})
    CHECK(pw.macs[part] == p2.macs[part]);
}

TEST_CASE("counted MACs are linear in depth") {
  const CountedFlops one = flops_counted(dims(1, 1), 8);
  for (std::size_t l : {2u, 4u, 8u}) {
    const CountedFlops c = flops_counted(dims(l, 1), 8);
    CHECK(c.macs[FlopPartition::kSelfAttention] == l * one.macs[FlopPartition::kSelfAttention]);
    CHECK(c.macs[FlopPartition::kFfn] == l * one.macs[FlopPartition::kFfn]);
    CHECK(c.macs[FlopPartition::kUnembed] == one.macs[FlopPartition::kUnembed]);
  }
  const CountedFlops c2 = flops_counted(dims(2, 2), 8), c4 = flops_counted(dims(4, 2), 8),
                     c8 = flops_counted(dims(8, 2), 8);
  CHECK(c8.total() - c4.total() == 2 * (c4.total() - c2.total()));
}

TEST_CASE("paper aggregation equals the closed form for two stacks") {
  for (std::size_t l : {2u, 4u, 8u, 12u}) {
    for (std::size_t n : {1u, 7u, 16u}) {
      const ModelConfig c = dims(l, 2);
      const PaperAggregation agg = paper_mode_aggregate(c, flops_counted(c, n));
      const ClosedFormFlops cf = flops_closed_form(l, 2, {agg.e, agg.m, agg.a, 0, 1});
      CHECK(agg.aggregate == cf.stagformer_total);
      CHECK(agg.cross_layers == l / 2);
    }
  }
}

TEST_CASE("kv cache report") {
  for (std::size_t l : {4u, 8u, 36u}) {
    ModelConfig c = dims(l, 2);
    for (std::size_t ctx : {1u, 100u, 4096u}) {
      const KvCacheReport r = kv_cache_report(c, ctx);
      CHECK(r.row("baseline").ratio == 1.0);
      CHECK(r.row("separate").ratio == 1.5);
      CHECK(r.row("shared").ratio == 3.0);
      CHECK(r.row("recurrent").ratio == 2.0);
      CHECK(r.row("baseline").self_caches == l);
      for (const auto& row : r.rows) CHECK(row.bytes == row.total() * ctx * 2 * c.d_model * 8);
    }
  }
  const KvCacheReport r36 = kv_cache_report(dims(36, 2), 10);
  CHECK(r36.row("baseline").total() == 36);
  CHECK(r36.row("separate").total() == 54);
  const KvCacheReport r18 = kv_cache_report(dims(18, 2, true), 10);
  CHECK(r18.row("shared").self_caches == 36);
  CHECK(r18.row("shared").cross_caches == 18);
  CHECK(r18.row("recurrent").total() == 36);
  CHECK_THROWS_AS(r18.row("nothing"), IndexError);

  const KvCacheReport odd = kv_cache_report(dims(9, 1), 4);
  CHECK_THROWS_AS(odd.row("separate"), IndexError);
  CHECK(odd.row("shared").ratio == 3.0);
  CHECK_THROWS_AS(kv_cache_counts(dims(4, 2), true), ModeError);
}

TEST_CASE("schedule example") {
  const ScheduleResult base = simulate_baseline(dims(64, 2), 16, 32, ideal());
  const ScheduleResult stag = simulate_decode(dims(64, 2), 16, 32, ideal());
  CHECK(base.per_token_units == 130);
  CHECK(stag.per_token_units == 66);
  CHECK(stag.total_units == 66 * 32);
  CHECK(stag.speedup == doctest::Approx(130.0 / 66.0).epsilon(1e-15));
  CHECK(stag.variant == "stagformer-separate");
  CHECK(stag.steps.size() == 32);
  CHECK(stag.steps[0].worker_busy.size() == 2);
  CHECK(stag.self_caches == 64);
  CHECK(stag.cross_caches == 32);
  CHECK(stag.prefill_units == 16 * (65 + 66));
  CHECK(simulate_decode(dims(64, 1), 16, 32, ideal()).variant == "baseline");
}

TEST_CASE("schedule limits") {
  double previous = 0.0;
  for (std::size_t l : {8u, 16u, 32u, 64u, 128u}) {
    const double s = simulate_decode(dims(l, 2), 8, 8, ideal()).speedup;
    CHECK(s > previous);
    CHECK(s < 2.0);
    previous = s;
  }
  SimulationOptions slow = ideal();
  slow.params.comm = 1000;
  CHECK(simulate_decode(dims(64, 2), 8, 8, slow).speedup < 1.0);
  SimulationOptions heavy = ideal();
  heavy.params.e = 1e9;
  CHECK(std::abs(simulate_decode(dims(8, 2), 8, 8, heavy).speedup - 1.0) < 1e-6);

  SimulationOptions one = ideal();
  one.workers = 1;
  CHECK(simulate_decode(dims(8, 2), 8, 8, one).speedup == 18.0 / 19.0);
  SimulationOptions two = ideal();
  two.workers = 2;
  const ScheduleResult r = simulate_decode(dims(12, 4), 8, 8, two);
  CHECK(r.steps[0].worker_busy.size() == 2);
  CHECK(r.per_token_units == 2 * (1 + 3 * 2) + 1);

  SimulationOptions paper = ideal();
  paper.cross = CrossTerm{CrossTerm::Kind::kPaper, 0.0};
  CHECK(simulate_decode(dims(8, 2), 8, 8, paper).per_token_units == 1 + 4 * 2 + 4 * 2 + 1);
  SimulationOptions counted = ideal();
  counted.cross = CrossTerm{};
  CHECK(simulate_decode(dims(8, 2), 8, 8, counted).per_token_units == 1 + 4 * 2 + 4 * 1 + 1);
  CHECK_THROWS_AS(simulate_decode(dims(8, 2), 8, 0, ideal()), ConfigError);
}

TEST_CASE("measured mode grows with context") {
  SimulationOptions m;
  m.mode = CostMode::kMeasured;
  const ScheduleResult base = simulate_baseline(dims(8, 2), 4, 6, m);
  CHECK(base.steps[1].latency - base.steps[0].latency == 8 * 2 * 16);
  const ScheduleResult stag = simulate_decode(dims(8, 2), 4, 6, m);
  CHECK(stag.speedup > 1.0);
  ModelConfig windowed = dims(8, 2);
  windowed.cross_window = 1;
  CHECK(simulate_decode(windowed, 4, 6, m).total_units < stag.total_units);
}

TEST_CASE("cross term parsing") {
  CHECK(CrossTerm::parse("zero").kind == CrossTerm::Kind::kZero);
  CHECK(CrossTerm::parse("paper").kind == CrossTerm::Kind::kPaper);
  CHECK(CrossTerm::parse("counted").kind == CrossTerm::Kind::kCounted);
  const CrossTerm v = CrossTerm::parse("2.5");
  CHECK(v.kind == CrossTerm::Kind::kValue);
  CHECK(v.value == 2.5);
  CHECK(v.label() == "2.5");
  CHECK_THROWS_AS(CrossTerm::parse("-1"), ConfigError);
  CHECK_THROWS_AS(CrossTerm::parse("lots"), ConfigError);
}

TEST_CASE("reports") {
  const ModelConfig c = dims(16, 2);
  const std::vector<ScheduleResult> results{simulate_baseline(c, 8, 8, ideal()), simulate_decode(c, 8, 8, ideal())};
  const std::string csv = report_csv(results);
  CHECK(csv == report_csv({simulate_baseline(c, 8, 8, ideal()), simulate_decode(c, 8, 8, ideal())}));
  const auto lines = csv_lines(csv);
  REQUIRE(lines.size() == 3);
  CHECK(lines[0] == "variant,l,p,window,prefill,decode,per_token_units,total_units,speedup,self_caches,cross_caches");
  CHECK(csv.find("variant,", 1) == std::string::npos);
  CHECK(lines[2].rfind("stagformer-separate,16,2,inf,8,8,", 0) == 0);
  std::vector<std::string> cols;
  std::stringstream row(lines[2]);
  for (std::string cell; std::getline(row, cell, ',');) cols.push_back(cell);
  REQUIRE(cols.size() == 11);
  CHECK(std::abs(std::stod(cols[8]) - results[0].total_units / std::stod(cols[7])) < 1e-12);

  const auto doc = report_json(results, c, ideal());
  CHECK(doc["closed_form"]["baseline"] == 2 + 16 * 2);
  CHECK(doc["results"].size() == 2);
  CHECK(doc["kv_cache"]["rows"].size() == 4);

  const auto dir = std::filesystem::temp_directory_path() / "stagformer_test_perf";
  std::filesystem::create_directories(dir);
  emit_report(results, c, ideal(), (dir / "r.csv").string(), (dir / "r.json").string());
  std::ifstream in(dir / "r.csv");
  std::stringstream got;
  got << in.rdbuf();
  CHECK(got.str() == csv);
  CHECK(std::filesystem::exists(dir / "r.json"));
  CHECK_THROWS_AS(emit_report(results, c, ideal(), (dir / "missing" / "r.csv").string(), ""), ConfigError);
  std::filesystem::remove_all(dir);
}
