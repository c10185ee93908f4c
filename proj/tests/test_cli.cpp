#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "fixtures.hpp"
#include "stagformer/checkpoint.hpp"
#include "stagformer/corpus.hpp"

using namespace stagformer;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

Outcome invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "stagformer");
  std::ostringstream out, err;
  Outcome o;
  o.code = cli::run(args, out, err);
  o.out = out.str();
  o.err = err.str();
  return o;
}

const fs::path& workdir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "stagformer_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    std::ofstream(d / "corpus.txt") << synthetic_corpus(20000, 9);
    return d;
  }();
  return dir;
}

std::vector<std::string> tiny_train(const std::string& out, std::size_t steps, bool shared = false) {
  std::vector<std::string> args{"train", "--corpus", (workdir() / "corpus.txt").string(), "--steps",
                                std::to_string(steps), "--out", (workdir() / out).string()};
  for (std::string s : {"d_model=16", "n_heads=2", "d_ff=32", "stacks=2", "max_seq_len=48", "seq_len=16",
                        "batch_size=2", "warmup_steps=1", "eval_every=0", "eval_batches=1", "lr=0.003"}) {
    args.push_back("--set");
    args.push_back(s);
  }
  args.push_back("--set");
  args.push_back(shared ? "total_layers=1" : "total_layers=2");
  if (shared) {
    args.push_back("--set");
    args.push_back("weight_sharing=true");
  }
  return args;
}

std::string checkpoint(bool shared = false) {
  const std::string name = shared ? "shared" : "separate";
  const fs::path path = workdir() / name / "checkpoint.bin";
  if (!fs::exists(path)) REQUIRE(invoke(tiny_train(name, 3, shared)).code == 0);
  return path.string();
}

std::string timings() { return (workdir() / "timings.json").string(); }

}  // namespace

TEST_CASE("train") {
  const Outcome missing = invoke({"train", "--corpus", "/no/such/corpus.txt"});
  CHECK(missing.code == 2);
  CHECK(missing.err.find("/no/such/corpus.txt") != std::string::npos);
  CHECK(invoke({"train"}).code == 2);

  const Outcome one = invoke(tiny_train("one", 1));
  REQUIRE(one.code == 0);
  CHECK(one.out.find("final loss") != std::string::npos);
  const Checkpoint ckpt = load_checkpoint((workdir() / "one" / "checkpoint.bin").string());
  CHECK(ckpt.weights.config.stacks == 2);
  CHECK(ckpt.weights.config.d_model == 16);
  CHECK(fs::exists(workdir() / "one" / "log.csv"));

  const Outcome again = invoke(tiny_train("two", 1));
  CHECK(again.out.substr(0, again.out.find("checkpoint")) == one.out.substr(0, one.out.find("checkpoint")));

  std::vector<std::string> bad = tiny_train("bad", 1);
  bad.push_back("--set");
  bad.push_back("n_heads=3");
  CHECK(invoke(bad).code == 2);
  std::vector<std::string> unstable = tiny_train("nan", 3);
  for (std::string s : {"lr=1e200", "clip_norm=0", "warmup_steps=0"}) {
    unstable.push_back("--set");
    unstable.push_back(s);
  }
  CHECK(invoke(unstable).code == 3);
}

TEST_CASE("generate") {
  const std::string ckpt = checkpoint();
  const Outcome oracle =
      invoke({"generate", "--checkpoint", ckpt, "--prompt", "the ", "--n", "24", "--mode", "oracle", "--temperature",
              "0", "--timings", timings()});
  const Outcome parallel =
      invoke({"generate", "--checkpoint", ckpt, "--prompt", "the ", "--n", "24", "--mode", "parallel", "--temperature",
              "0", "--timings", timings()});
  REQUIRE(oracle.code == 0);
  REQUIRE(parallel.code == 0);
  CHECK(oracle.out == parallel.out);
  {
    std::ifstream in(timings());
    const auto doc = nlohmann::json::parse(in);
    CHECK(doc["mode"] == "parallel");
    CHECK(doc["generated"].size() == 24);
    CHECK(doc["step_seconds"].size() == 23);
    CHECK(doc["cache_sizes"].size() == 24);
  }

  const auto sampled = [&](const std::string& mode) {
    return invoke({"generate", "--checkpoint", ckpt, "--n", "16", "--mode", mode, "--temperature", "0.8", "--seed",
                   "11", "--timings", timings()});
  };
  CHECK(sampled("parallel").out == sampled("parallel").out);
  CHECK(sampled("parallel").out == sampled("oracle").out);

  CHECK(invoke({"generate", "--checkpoint", ckpt, "--n", "0", "--timings", timings()}).code == 2);
  const Outcome recurrent = invoke({"generate", "--checkpoint", ckpt, "--mode", "recurrent", "--timings", timings()});
  CHECK(recurrent.code == 2);
  CHECK(recurrent.err.find("separate weights") != std::string::npos);
  CHECK(invoke({"generate", "--checkpoint", ckpt, "--mode", "sideways", "--timings", timings()}).code == 2);
  CHECK(invoke({"generate", "--checkpoint", (workdir() / "absent.bin").string()}).code == 2);

  const std::string shared = checkpoint(true);
  const Outcome rec = invoke({"generate", "--checkpoint", shared, "--prompt", "a", "--n", "12", "--mode", "recurrent",
                              "--temperature", "0", "--timings", timings()});
  CHECK(rec.code == 0);
  CHECK(rec.out.size() <= 12);
}

TEST_CASE("bench") {
  const Outcome small = invoke({"bench", "--set", "total_layers=4", "--prefill", "8", "--decode", "8"});
  REQUIRE(small.code == 0);
  std::size_t rows = 0;
  for (char ch : small.out) rows += ch == '\n';
  CHECK(rows - 1 >= 2);
  CHECK(small.out.rfind("variant,", 0) == 0);
  CHECK(small.err.find("closed form: baseline 10") != std::string::npos);

  const std::string csv = (workdir() / "bench.csv").string(), json_path = (workdir() / "bench.json").string();
  const Outcome deep = invoke({"bench", "--set", "total_layers=64", "--set", "stacks=2", "--prefill", "16", "--decode",
                               "32", "--csv", csv, "--json", json_path});
  REQUIRE(deep.code == 0);
  CHECK(deep.out.empty());
  std::ifstream in(json_path);
  const auto doc = nlohmann::json::parse(in);
  CHECK(doc["results"][1]["speedup"].get<double>() > 1.8);
  CHECK(doc["closed_form"]["baseline"] == 130);
  CHECK(doc["closed_form"]["stagformer_total"] == 194);
  CHECK(doc["closed_form"]["stagformer_ideal_latency"] == 66);
  CHECK(doc["results"][1]["per_token_units"] == 66);

  CHECK(invoke({"bench", "--mode", "measured", "--set", "total_layers=4", "--prefill", "4", "--decode", "4"}).code ==
        0);
  CHECK(invoke({"bench", "--mode", "fast"}).code == 2);
  CHECK(invoke({"bench", "--cross-term", "huge"}).code == 2);
  CHECK(invoke({"bench", "--e", "-1"}).code == 2);
  CHECK(invoke({"bench", "--csv", (workdir() / "nodir" / "x.csv").string()}).code == 2);
}

TEST_CASE("verify") {
  const Outcome masks = invoke({"verify", "--suite", "masks"});
  CHECK(masks.code == 0);
  CHECK(masks.out.find("all checks passed") != std::string::npos);
  const Outcome faulty = invoke({"verify", "--suite", "equiv", "--inject-fault"});
  CHECK(faulty.code == 1);
  CHECK(faulty.out.find("FAIL") != std::string::npos);
  CHECK(invoke({"verify", "--suite", "equiv"}).code == 0);
  CHECK(invoke({"verify", "--suite", "nonsense"}).code == 2);
}

TEST_CASE("inspect") {
  const std::string ckpt = checkpoint();
  const Outcome o = invoke({"inspect", "--checkpoint", ckpt, "--context", "64"});
  REQUIRE(o.code == 0);
  const Checkpoint c = load_checkpoint(ckpt);
  CHECK(o.out.find("parameters " + std::to_string(count_params(c.weights.config))) != std::string::npos);
  CHECK(o.out.find("alpha [") != std::string::npos);
  CHECK(o.out.find("trained steps 3") != std::string::npos);
  CHECK(o.out.find("recurrent") != std::string::npos);

  const std::string edited = (workdir() / "edited.bin").string();
  fs::copy_file(ckpt, edited, fs::copy_options::overwrite_existing);
  fixture::edit_manifest(edited, [](nlohmann::json& m) { m["format_version"] = 99; });
  const Outcome bad = invoke({"inspect", "--checkpoint", edited});
  CHECK(bad.code == 2);
  CHECK(bad.err.find("format_version") != std::string::npos);
}

TEST_CASE("usage") {
  CHECK(invoke({}).code == 2);
  CHECK(invoke({"launch"}).code == 2);
  const Outcome help = invoke({"--help"});
  CHECK(help.code == 0);
  CHECK(help.out.find("generate") != std::string::npos);
}
