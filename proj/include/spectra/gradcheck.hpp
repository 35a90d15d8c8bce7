#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "spectra/tensor.hpp"

namespace spectra {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    /// max relative error per checked tensor, in input order
    std::vector<std::pair<std::string, double>> per_param;
};

// Central-difference verification of reverse-mode gradients.
//
// program must rebuild the scalar loss on the tape it is given; it must be
// deterministic (the first two evaluations are compared bitwise and a
// mismatch throws). Relu kinks are excluded by freezing each relu call's
// active mask during the reference evaluation and replaying it for every
// perturbed one. Per parameter at most samples_per_param coordinates are
// probed (seeded pick); the returned error is
//   max |analytic - central| / max(1, |analytic|).
GradCheckResult finite_difference_check(
    const std::function<Tensor(Tape&)>& program,
    const std::vector<std::pair<std::string, Tensor>>& params, double h,
    int samples_per_param = 8, std::uint64_t seed = 0);

}  // namespace spectra
