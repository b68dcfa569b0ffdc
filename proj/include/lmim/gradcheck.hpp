#pragma once

#include <string>
#include <vector>

namespace lmim {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0;
  double tol = 0;
  bool pass = false;
};

// Finite-difference verification (float64, h = 1e-4) of every
// differentiable op, every loss, the encoder/decoder/projector stacks,
// and the end-to-end toy-model loss. tol_override >= 0 replaces each
// check's own tolerance.
std::vector<GradCheckResult> run_gradcheck(double tol_override = -1.0);

}  // namespace lmim
