#include "dynshuffle/gradcheck.hpp"

#include "dynshuffle/error.hpp"
#include "dynshuffle/tape.hpp"

#include <algorithm>
#include <cmath>

namespace dynshuffle {

namespace {

double evaluate(const ScalarFunction& f, const Tensor& x) {
    const Tensor y = f(x);
    if (y.numel() != 1) throw UsageError("finite_diff_check: function must return a scalar, got " + shape_str(y.shape()));
    const double v = y.item();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: function returned a non-finite value");
    return v;
}

}  // namespace

GradCheckReport finite_diff_report(const ScalarFunction& f, Tensor x, double eps, Stencil stencil) {
    if (!(eps > 0.0)) throw UsageError("finite_diff_check: eps must be positive");
    const bool had_grad_flag = x.requires_grad();
    x.set_requires_grad(true);
    x.clear_grad();

    GradCheckReport report;
    {
        Tape tape;
        Tensor y;
        {
            Tape::Recording rec(tape);
            y = f(x);
        }
        if (y.numel() != 1) throw UsageError("finite_diff_check: function must return a scalar, got " + shape_str(y.shape()));
        if (!std::isfinite(y.item())) throw NumericError("finite_diff_check: function returned a non-finite value");
        tape.backward(y);
        report.analytic.assign(x.numel(), 0.0);
        if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), report.analytic.begin());
    }
    x.clear_grad();
    x.set_requires_grad(had_grad_flag);

    report.numeric.resize(x.numel());
    auto values = x.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
        const float original = values[i];
        // f at original + k·eps, returning the offset actually taken.
        auto at = [&](double k, double& offset) {
            const float moved = static_cast<float>(original + k * eps);
            offset = static_cast<double>(moved) - static_cast<double>(original);
            values[i] = moved;
            const double v = evaluate(f, x);
            values[i] = original;
            return v;
        };
        double d_hi = 0, d_lo = 0;
        const double f_hi = at(1, d_hi), f_lo = at(-1, d_lo);
        const double central = (f_hi - f_lo) / (d_hi - d_lo);
        if (stencil == Stencil::second_order) {
            report.numeric[i] = central;
        } else {
            double d_hi2 = 0, d_lo2 = 0;
            const double f_hi2 = at(2, d_hi2), f_lo2 = at(-2, d_lo2);
            const double wide = (f_hi2 - f_lo2) / (d_hi2 - d_lo2);
            // Richardson step: the h² error terms of the two quotients cancel.
            report.numeric[i] = (4.0 * central - wide) / 3.0;
        }
        const double a = report.analytic[i];
        if (!std::isfinite(a)) throw NumericError("finite_diff_check: non-finite analytic gradient");
        const double err = std::abs(a - report.numeric[i]) / std::max(1.0, std::abs(a));
        if (err > report.max_rel_error) {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    return report;
}

double finite_diff_check(const ScalarFunction& f, Tensor x, double eps, Stencil stencil) {
    return finite_diff_report(f, std::move(x), eps, stencil).max_rel_error;
}

}  // namespace dynshuffle
