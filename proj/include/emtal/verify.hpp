#pragma once

// Built-in invariant suites behind `emtal verify`.

#include <string>
#include <vector>

namespace emtal {

struct CheckResult {
  std::string suite;
  std::string name;
  bool passed = false;
  double value = 0;      // measured error / count
  double tolerance = 0;
  std::string detail;
};

struct VerifyOptions {
  std::string scope = "all";  // all | gradcheck | equivalence | ema
  // Negative-control hook: corrupts one analytic gradient and one EMA row so
  // that the suites must fail.
  bool inject_fault = false;
  int threads = 1;
};

std::vector<CheckResult> run_verify(const VerifyOptions& opt);

std::string format_results(const std::vector<CheckResult>& results);

bool all_passed(const std::vector<CheckResult>& results);

// Individual suites, also used by the acceptance binary.
std::vector<CheckResult> verify_equivalence(bool inject_fault = false);
std::vector<CheckResult> verify_gradcheck(bool inject_fault = false);
std::vector<CheckResult> verify_ema(bool inject_fault = false);
std::vector<CheckResult> verify_router();
std::vector<CheckResult> verify_balance();

}  // namespace emtal
