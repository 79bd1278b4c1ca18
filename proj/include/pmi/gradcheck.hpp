#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pmi/optim.hpp"

namespace pmi {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    int64_t worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    std::string worst_param;
    bool passed = false;
    double tol = 0.0;
    std::string to_string() const;
};

// rel(a, n) with a small dead zone so FD noise on near-zero gradients does
// not register.
double rel_error(double analytic, double numeric);

// Compares analytic gradients of f() against central differences over every
// scalar of every parameter. f must be deterministic (checked by evaluating
// twice and comparing bits); use 64-bit parameters for meaningful results.
GradCheckReport grad_check(const std::function<ag::Var()>& f, ParamStore& params, double h, double tol);

}  // namespace pmi
