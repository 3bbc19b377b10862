#pragma once

// Property suites shared by the unit tests and the acceptance runner. Each
// check records whether it held and the worst deviation observed.

#include <string>
#include <vector>

namespace suites {

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct Report {
  std::vector<Check> checks;
  double seconds = 0.0;

  bool passed() const;
  void add(std::string name, bool passed, std::string detail);
};

Report geometry();
Report losses();
Report sampler();

}  // namespace suites
