#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gradcheck.hpp"

namespace fundus::check {

/// One differentiable operation exercised on random small shapes. `run`
/// builds fresh leaves from the seed and returns the finite-difference
/// comparison.
struct OpCase {
    std::string name;
    double tolerance;
    std::function<GradCheckResult(std::uint64_t seed)> run;
};

/// Every primitive op (tolerance 1e-5) plus the composite layers built from
/// them (attention at 1e-4).
const std::vector<OpCase>& op_cases();

}  // namespace fundus::check
