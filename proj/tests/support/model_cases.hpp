#pragma once

// Gradient checks of whole model graphs on tiny 64-bit configurations.

#include <vector>

#include "support/op_cases.hpp"

namespace fundus::check {

/// The masked-classifier objective and the GANomaly generator total.
const std::vector<OpCase>& model_cases();

}  // namespace fundus::check
