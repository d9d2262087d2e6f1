#pragma once

#include <functional>
#include <vector>

#include "sacnn/tensor.hpp"

namespace sacnn {

// ---------------------------------------------------------------------------
// Finite-difference gradient verification, run at double precision.
//
// The function under test maps the given inputs to a scalar loss while
// recording on the tape. Tape gradients are compared against central
// differences, coordinate by coordinate. Coordinates whose +/-eps evaluations
// land in different piecewise-linear regions (a relu flip or maxpool argmax
// change between the two probes) are skipped: the difference quotient is
// meaningless across a kink.
// ---------------------------------------------------------------------------

struct GradCheckOptions {
  double eps = 1e-5;          // absolute step, additionally scaled by max(1, |x|)
  double rel_floor = 1e-2;    // |a-b| / max(|a|, |b|, rel_floor); 1e-2 encodes
                              // "relative tolerance 1e-4 with absolute floor 1e-6"
  int max_coords_per_input = 0;  // 0 = check every coordinate
  std::uint64_t seed = 0x5eed;   // coordinate subsampling
};

struct GradCheckResult {
  double max_rel_err = 0.0;
  int coords_checked = 0;
  int coords_skipped_kink = 0;
};

using ScalarFn = std::function<DTensor(DTape&, std::vector<DTensor>&)>;

// `inputs` whose requires_grad is set are checked. Throws NumericError on a
// non-finite intermediate.
GradCheckResult grad_check(const ScalarFn& fn, std::vector<DTensor> inputs,
                           const GradCheckOptions& opts = {});

}  // namespace sacnn
