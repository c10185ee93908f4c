#include "cli.hpp"

#include <CLI11.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <json.hpp>

#include "stagformer/checkpoint.hpp"
#include "stagformer/config.hpp"
#include "stagformer/decode.hpp"
#include "stagformer/errors.hpp"
#include "stagformer/perf.hpp"
#include "stagformer/train.hpp"
#include "stagformer/verify.hpp"

namespace stagformer::cli {

namespace {

using nlohmann::json;

// Maps library exceptions onto the exit-code contract.
template <typename Body>
int guarded(std::ostream& err, Body&& body) {
  try {
    return body();
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

RunConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig cfg = path.empty() ? RunConfig{} : load_run_config(path);
  for (const auto& o : overrides) apply_override(cfg, o);
  validate_config(cfg.model);
  return cfg;
}

json counts_json(const KVCacheCounts& c) {
  return {{"self_caches", c.self_caches},
          {"cross_caches", c.cross_caches},
          {"self_entries", c.self_entries},
          {"cross_entries", c.cross_entries}};
}

}  // namespace

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (args.corpus_path.empty() || !std::filesystem::is_regular_file(args.corpus_path)) {
      throw ConfigError("corpus file '" + args.corpus_path + "' does not exist");
    }
    RunConfig cfg = resolve_config(args.config_path, args.overrides);
    if (args.seed) cfg.model.seed = *args.seed;
    const Corpus corpus = Corpus::load(args.corpus_path, cfg.train.validation_fraction);

    TrainOptions options;
    options.steps = args.steps;
    options.out_dir = args.out_dir;
    if (!args.resume_path.empty()) options.resume_from = args.resume_path;
    const std::size_t every = std::max<std::size_t>(1, args.steps / 10);
    options.on_step = [&](const TrainRecord& r) {
      if (r.step % every == 0 || r.step == args.steps) {
        out << "step " << r.step << " loss " << std::setprecision(6) << r.loss;
        if (r.val_loss) out << " val_loss " << *r.val_loss;
        out << '\n';
      }
    };
    const TrainResult result = train(cfg, corpus, options);
    out << "final loss " << std::setprecision(10) << result.log.back().loss << " smoothed "
        << smoothed_loss(result.log) << '\n';
    out << "checkpoint " << (std::filesystem::path(args.out_dir) / "checkpoint.bin").string() << '\n';
    return kExitOk;
  });
}

int cmd_generate(const GenerateArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (args.n == 0) throw ConfigError("--n must be >= 1");
    const DecodeMode mode = parse_decode_mode(args.mode);
    const Checkpoint ckpt = load_checkpoint(args.checkpoint_path);
    if (mode == DecodeMode::kRecurrent && !ckpt.weights.config.weight_sharing) {
      throw ModeError("recurrent mode needs a shared-weights checkpoint; this model uses separate weights per stack");
    }
    std::vector<TokenId> prompt = byte_tokenize(args.prompt);
    if (prompt.empty()) prompt.push_back(kBosToken);
    const GenerationResult r = generate(ckpt.weights, prompt, args.n, {args.temperature, args.seed}, mode);
    out << detokenize(r.tokens);
    out.flush();
    if (!args.timings_path.empty()) {
      json doc;
      doc["mode"] = decode_mode_name(mode);
      doc["prompt_tokens"] = prompt.size();
      doc["generated"] = r.tokens;
      doc["step_seconds"] = r.step_seconds;
      json caches = json::array();
      for (const auto& c : r.cache_trajectory) caches.push_back(counts_json(c));
      doc["cache_sizes"] = caches;
      std::ofstream f(args.timings_path, std::ios::trunc);
      if (!f) throw ConfigError("cannot write timings file '" + args.timings_path + "'");
      f << doc.dump(2) << '\n';
    }
    return kExitOk;
  });
}

int cmd_bench(const BenchArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ModelConfig cfg = resolve_config(args.config_path, args.overrides).model;
    SimulationOptions options;
    if (args.mode == "paper") {
      options.mode = CostMode::kPaper;
    } else if (args.mode == "measured") {
      options.mode = CostMode::kMeasured;
    } else {
      throw ConfigError("--mode must be paper or measured, got '" + args.mode + "'");
    }
    options.params = PerfParams{args.e, args.m, args.a, args.comm, 1.0};
    options.params.validate();
    if (args.cross_term.empty()) {
      options.cross = options.mode == CostMode::kPaper ? CrossTerm{CrossTerm::Kind::kZero, 0.0} : CrossTerm{};
    } else {
      options.cross = CrossTerm::parse(args.cross_term);
    }
    options.workers = args.workers;

    ModelConfig variant = cfg;
    if (variant.stacks == 1) {
      variant.stacks = 2;
      validate_config(variant);
    }
    std::vector<ScheduleResult> results{simulate_baseline(cfg, args.prefill, args.decode, options),
                                        simulate_decode(variant, args.prefill, args.decode, options)};
    emit_report(results, variant, options, args.csv_path, args.json_path);
    if (args.csv_path.empty()) out << report_csv(results);
    const ClosedFormFlops cf = flops_closed_form(variant.total_layers, variant.stacks, options.params);
    err << "closed form: baseline " << cf.baseline << ", stagformer total " << cf.stagformer_total
        << ", ideal latency " << cf.stagformer_ideal_latency << "; speedup " << results.back().speedup << '\n';
    return kExitOk;
  });
}

int cmd_verify(const VerifyArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    std::optional<ScopedMaskFault> fault;
    if (args.inject_fault) fault.emplace(MaskFault::kDiagonalAllowed);
    const auto reports = run_verify(args.suite);
    bool all = true;
    for (const auto& rep : reports) {
      for (const auto& c : rep.checks) {
        out << std::left << std::setw(7) << rep.suite << ' ' << (c.passed ? "PASS" : "FAIL") << "  " << c.name;
        if (!c.detail.empty()) out << "  (" << c.detail << ')';
        out << '\n';
      }
      all = all && rep.passed();
    }
    out << (all ? "all checks passed" : "some checks FAILED") << '\n';
    return all ? kExitOk : kExitFailure;
  });
}

int cmd_inspect(const InspectArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const Checkpoint ckpt = load_checkpoint(args.checkpoint_path);
    const ModelConfig& cfg = ckpt.weights.config;
    out << "config " << model_config_to_json(cfg).dump() << '\n';
    out << "parameters " << count_params(cfg) << '\n';
    out << "alpha [";
    const auto alpha = ckpt.weights.alpha.data();
    for (std::size_t k = 0; k < alpha.size(); ++k) out << (k ? ", " : "") << std::setprecision(10) << alpha[k];
    out << "]\n";
    if (ckpt.resume) out << "trained steps " << ckpt.resume->step << '\n';
    const KvCacheReport rep = kv_cache_report(cfg, args.context);
    out << "kv cache at context " << args.context << ":\n";
    for (const auto& row : rep.rows) {
      out << "  " << std::left << std::setw(10) << row.variant << " self " << row.self_caches << " cross "
          << row.cross_caches << " bytes " << row.bytes << " ratio " << row.ratio << '\n';
    }
    return kExitOk;
  });
}

int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Staggered Transformer toolkit", "stagformer"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train a model on a byte corpus");
  train_cmd->add_option("--config", train_args.config_path, "JSON run config");
  train_cmd->add_option("--corpus", train_args.corpus_path, "training text")->required();
  train_cmd->add_option("--steps", train_args.steps, "total optimizer steps")->check(CLI::PositiveNumber);
  train_cmd->add_option("--out", train_args.out_dir, "output directory");
  train_cmd->add_option("--set", train_args.overrides, "key=value config override");
  train_cmd->add_option("--seed", train_args.seed, "init and batch seed");
  train_cmd->add_option("--resume", train_args.resume_path, "checkpoint to continue from");

  GenerateArgs gen_args;
  auto* gen_cmd = app.add_subcommand("generate", "sample bytes from a checkpoint");
  gen_cmd->add_option("--checkpoint", gen_args.checkpoint_path)->required();
  gen_cmd->add_option("--prompt", gen_args.prompt);
  gen_cmd->add_option("--n", gen_args.n, "tokens to generate");
  gen_cmd->add_option("--mode", gen_args.mode, "parallel, oracle or recurrent");
  gen_cmd->add_option("--temperature", gen_args.temperature, "0 selects greedy");
  gen_cmd->add_option("--seed", gen_args.seed);
  gen_cmd->add_option("--timings", gen_args.timings_path, "JSON side-file");

  BenchArgs bench_args;
  auto* bench_cmd = app.add_subcommand("bench", "simulate decode latency against the baseline");
  bench_cmd->add_option("--config", bench_args.config_path);
  bench_cmd->add_option("--set", bench_args.overrides);
  bench_cmd->add_option("--prefill", bench_args.prefill);
  bench_cmd->add_option("--decode", bench_args.decode);
  bench_cmd->add_option("--comm", bench_args.comm);
  bench_cmd->add_option("--mode", bench_args.mode, "paper or measured");
  bench_cmd->add_option("--csv", bench_args.csv_path);
  bench_cmd->add_option("--json", bench_args.json_path);
  bench_cmd->add_option("--e", bench_args.e);
  bench_cmd->add_option("--m", bench_args.m);
  bench_cmd->add_option("--a", bench_args.a);
  bench_cmd->add_option("--cross-term", bench_args.cross_term, "zero, paper, counted or a number");
  bench_cmd->add_option("--workers", bench_args.workers);

  VerifyArgs verify_args;
  auto* verify_cmd = app.add_subcommand("verify", "run invariant suites");
  verify_cmd->add_option("--suite", verify_args.suite, "masks, grad, equiv, cache, flops or all");
  verify_cmd->add_flag("--inject-fault", verify_args.inject_fault, "corrupt the staggered mask diagonal");

  InspectArgs inspect_args;
  auto* inspect_cmd = app.add_subcommand("inspect", "describe a checkpoint");
  inspect_cmd->add_option("--checkpoint", inspect_args.checkpoint_path)->required();
  inspect_cmd->add_option("--context", inspect_args.context);

  std::vector<std::string> rest(argv.rbegin(), argv.rend() - (argv.empty() ? 0 : 1));
  try {
    app.parse(rest);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  if (train_cmd->parsed()) return cmd_train(train_args, out, err);
  if (gen_cmd->parsed()) return cmd_generate(gen_args, out, err);
  if (bench_cmd->parsed()) return cmd_bench(bench_args, out, err);
  if (verify_cmd->parsed()) return cmd_verify(verify_args, out, err);
  return cmd_inspect(inspect_args, out, err);
}

}  // namespace stagformer::cli
