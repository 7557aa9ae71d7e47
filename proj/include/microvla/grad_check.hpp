#pragma once

#include <functional>
#include <string>
#include <vector>

#include "microvla/tensor.hpp"

namespace microvla {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::int64_t worst_index = -1;
};

// Compares reverse-mode gradients of a deterministic scalar function against
// central finite differences. Relative error per coordinate is
// |analytic - numeric| / max(1, |numeric|).
//
// max_coords_per_param > 0 checks a seeded random subset of coordinates per
// parameter instead of the full sweep (used where the parameter count makes a
// full sweep impractical); <= 0 sweeps everything.
GradCheckResult grad_check(const std::function<Tensor()>& f, const std::vector<Parameter*>& params,
                           double eps = 1e-5, int max_coords_per_param = 0);

}  // namespace microvla
