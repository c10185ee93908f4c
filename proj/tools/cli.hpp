#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace stagformer::cli {

// Stable exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumeric = 3;

struct TrainArgs {
  std::string config_path;  // empty: built-in defaults
  std::string corpus_path;
  std::size_t steps = 100;
  std::string out_dir = "run";
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string resume_path;
};

struct GenerateArgs {
  std::string checkpoint_path;
  std::string prompt;
  std::size_t n = 32;
  std::string mode = "parallel";
  double temperature = 1.0;
  std::uint64_t seed = 0;
  std::string timings_path = "generate_timings.json";
};

struct BenchArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::size_t prefill = 128;
  std::size_t decode = 256;
  double comm = 0.0;
  std::string mode = "paper";
  std::string csv_path;  // empty: CSV to stdout
  std::string json_path;
  double e = 1.0;
  double m = 1.0;
  double a = 1.0;
  std::string cross_term;  // empty: zero (paper) or counted (measured)
  std::size_t workers = 0;
};

struct VerifyArgs {
  std::string suite = "all";
  bool inject_fault = false;
};

struct InspectArgs {
  std::string checkpoint_path;
  std::size_t context = 256;
};

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err);
int cmd_generate(const GenerateArgs& args, std::ostream& out, std::ostream& err);
int cmd_bench(const BenchArgs& args, std::ostream& out, std::ostream& err);
int cmd_verify(const VerifyArgs& args, std::ostream& out, std::ostream& err);
int cmd_inspect(const InspectArgs& args, std::ostream& out, std::ostream& err);

// argv[0] is the program name.
int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);

}  // namespace stagformer::cli
