#pragma once

#include <cstdint>

#include "mmseg/gradcheck.hpp"

namespace mmseg {

/// Finite-difference checks over every differentiable layer, the convLSTM unroll and a
/// small end-to-end network. Entry names are `<layer>.<input>`.
GradCheckReport run_gradcheck_suite(std::uint64_t seed, double tolerance);

}  // namespace mmseg
