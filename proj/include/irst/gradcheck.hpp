#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace irst {

/// Result of the finite-difference check for one registered op or loss.
struct GradCheckCase {
    std::string name;
    double max_rel_err = 0;
    bool pass = false;
};

/// Runs every registered op and loss against central finite differences
/// (step 1e-3, double precision, >= `instances` random instances each).
/// Relative error is |analytic - fd| / max(|analytic|, |fd|, 1e-3).
std::vector<GradCheckCase> run_gradcheck(double tol = 1e-4, int instances = 20,
                                         std::uint64_t seed = 42,
                                         const std::vector<std::string>& only = {});

bool all_passed(const std::vector<GradCheckCase>& results);

}  // namespace irst
