#include "pmi/gradcheck.hpp"

#include <cmath>
#include <sstream>

#include "pmi/error.hpp"

namespace pmi {

double rel_error(double analytic, double numeric) {
    const double denom = std::max(std::abs(analytic), std::abs(numeric));
    if (denom < 1e-7) return 0.0;
    return std::abs(analytic - numeric) / denom;
}

std::string GradCheckReport::to_string() const {
    std::ostringstream os;
    os << "grad-check: " << entries.size() << " parameters, max rel err " << max_rel_err;
    if (!worst_param.empty()) os << " (" << worst_param << ")";
    os << ", tol " << tol << " -> " << (passed ? "PASS" : "FAIL") << "\n";
    for (const auto& e : entries)
        os << "  " << e.name << ": max rel err " << e.max_rel_err << " at [" << e.worst_index << "] analytic "
           << e.analytic << " numeric " << e.numeric << "\n";
    return os.str();
}

namespace {
double eval_scalar(const std::function<ag::Var()>& f) {
    ag::NoGradGuard guard;
    ag::Var v = f();
    if (!v || v->value.numel() != 1) throw UsageError("grad_check: f must return a scalar");
    return v->value.get(0);
}
}  // namespace

GradCheckReport grad_check(const std::function<ag::Var()>& f, ParamStore& params, double h, double tol) {
    GradCheckReport report;
    report.tol = tol;

    // determinism probe
    {
        ag::NoGradGuard guard;
        ag::Var a = f();
        ag::Var b = f();
        if (!a->value.bit_equal(b->value))
            throw UsageError("grad_check aborted: f is non-deterministic (two evaluations returned " +
                             std::to_string(a->value.get(0)) + " and " + std::to_string(b->value.get(0)) +
                             "); fix the seed or disable stochastic ops");
    }

    params.zero_grad();
    ag::Var loss = f();
    ag::backward(loss);

    for (const ag::Var& p : params.list()) {
        GradCheckEntry entry;
        entry.name = p->name;
        Tensor analytic = p->grad_or_zeros();
        for (int64_t i = 0; i < p->value.numel(); ++i) {
            const double orig = p->value.get(i);
            p->value.set(i, orig + h);
            const double up = eval_scalar(f);
            p->value.set(i, orig - h);
            const double down = eval_scalar(f);
            p->value.set(i, orig);
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic.get(i);
            const double err = rel_error(a, numeric);
            if (err > entry.max_rel_err) {
                entry.max_rel_err = err;
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        if (entry.max_rel_err > report.max_rel_err) {
            report.max_rel_err = entry.max_rel_err;
            report.worst_param = entry.name;
        }
        report.entries.push_back(std::move(entry));
    }
    report.passed = report.max_rel_err <= tol;
    return report;
}

}  // namespace pmi
