#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dsh {

struct GradCheckEntry {
    std::string op;
    double max_rel_error = 0.0;
    bool passed = false;
    std::string method;  // "finite-diff", "mask" or "dense-oracle"
};

struct GradCheckOptions {
    std::uint64_t seed = 1;
    double tolerance = 1e-4;
    // Name of one check whose backward is deliberately broken (halved), as a
    // negative control.
    std::string inject_fault;
};

std::vector<GradCheckEntry> run_gradcheck_suite(const GradCheckOptions& opts);
std::vector<std::string> gradcheck_op_names();

}  // namespace dsh
