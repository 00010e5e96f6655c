#pragma once

// Built-in invariant suites behind `zachvit selftest`.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace zachvit::selftest {

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct Options {
  /// Enables the softmax backward fault for the duration of the run.
  bool corrupt_softmax = false;
  /// Extra suite: parse and validate this ZVDS container.
  std::optional<std::filesystem::path> file;
};

std::vector<SuiteResult> run(const Options& options = {});
std::string format_report(const std::vector<SuiteResult>& results);

}  // namespace zachvit::selftest
