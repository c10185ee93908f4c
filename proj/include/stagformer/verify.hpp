#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace stagformer {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SuiteReport {
  std::string suite;
  std::vector<CheckResult> checks;

  bool passed() const;
};

// Suites: masks, grad, equiv, cache, flops. "all" runs every suite.
std::vector<std::string_view> verify_suite_names();
std::vector<SuiteReport> run_verify(std::string_view suite);

}  // namespace stagformer
