#pragma once

// The 64-bit finite-difference verification suite: every tensor op, the full
// dynamic IR block in several configurations, and the distillation loss.
// Shared by the command-line gradcheck and the acceptance tests.

#include <string>
#include <vector>

namespace dymn {

struct GradcheckCase {
  std::string name;
  double max_rel_err = 0;
  double tolerance = 1e-6;
  bool pass = false;
};

std::vector<GradcheckCase> gradcheck_ops();
std::vector<GradcheckCase> gradcheck_blocks();
std::vector<GradcheckCase> gradcheck_loss();

}  // namespace dymn
