#pragma once

#include "dynshuffle/tensor.hpp"

#include <cstddef>
#include <functional>
#include <vector>

namespace dynshuffle {

using ScalarFunction = std::function<Tensor(const Tensor&)>;

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    std::vector<double> analytic;
    std::vector<double> numeric;
};

// Central difference stencils: second order uses x ± h, fourth order also
// x ± 2h. The fourth-order one tolerates a larger h, which keeps float32
// rounding in f out of the quotient for smooth nonlinear f; for f affine in x
// the second-order one is exact at any h.
enum class Stencil { second_order, fourth_order };

// Compares the taped gradient of f at x against central differences.
//
// The analytic pass records f under a fresh tape; the numeric pass evaluates
// f untaped around x per coordinate, using the exactly representable float
// offsets and double arithmetic for the difference quotient. The error per
// coordinate is |analytic − numeric| / max(1, |analytic|).
GradCheckReport finite_diff_report(const ScalarFunction& f, Tensor x, double eps = 1e-3,
                                   Stencil stencil = Stencil::second_order);

// Maximum relative error of finite_diff_report. Throws NumericError when f
// produces a non-finite value.
double finite_diff_check(const ScalarFunction& f, Tensor x, double eps = 1e-3,
                         Stencil stencil = Stencil::second_order);

}  // namespace dynshuffle
