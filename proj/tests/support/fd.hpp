#pragma once

#include <functional>
#include <vector>

#include "pmi/autograd.hpp"
#include "pmi/gradcheck.hpp"
#include "pmi/rng.hpp"

namespace pmi_test {

// Central-difference check of f's gradient w.r.t. each leaf element; returns
// the max relative error. Leaves should be f64 for meaningful tolerances.
inline double fd_check(const std::function<pmi::ag::Var()>& f, const std::vector<pmi::ag::Var>& leaves,
                       double h = 1e-5) {
    using namespace pmi;
    for (const ag::Var& l : leaves) l->grad = Tensor();
    ag::Var loss = f();
    ag::backward(loss);
    double max_err = 0.0;
    for (const ag::Var& leaf : leaves) {
        Tensor analytic = leaf->grad_or_zeros();
        for (int64_t i = 0; i < leaf->value.numel(); ++i) {
            const double orig = leaf->value.get(i);
            double up, down;
            {
                ag::NoGradGuard guard;
                leaf->value.set(i, orig + h);
                up = f()->value.get(0);
                leaf->value.set(i, orig - h);
                down = f()->value.get(0);
                leaf->value.set(i, orig);
            }
            const double numeric = (up - down) / (2.0 * h);
            max_err = std::max(max_err, rel_error(analytic.get(i), numeric));
        }
    }
    return max_err;
}

inline pmi::Tensor random_tensor(pmi::Shape shape, pmi::RngStream& rng, double scale = 1.0,
                                 pmi::DType dt = pmi::DType::F64) {
    pmi::Tensor t(std::move(shape), dt);
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.normal(0.0, scale));
    return t;
}

}  // namespace pmi_test
