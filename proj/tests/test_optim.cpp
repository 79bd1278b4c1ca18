#include <cmath>

#include <doctest.h>

#include "pmi/gradcheck.hpp"
#include "pmi/optim.hpp"
#include "support/fd.hpp"

using namespace pmi;

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    ParamStore store;
    ag::Var w = store.add("w", Tensor::from({3}, {1, -2, 0.5}, DType::F64));
    Adam opt(store, {.lr = 1e-3});
    Tensor before = w->value;
    opt.step(store);  // no grads populated
    CHECK(before.bit_equal(w->value));
    CHECK(opt.step_count() == 1);
    opt.step(store);
    CHECK(opt.step_count() == 2);
}

TEST_CASE("adam first-step oracle (scalar recurrence)") {
    ParamStore store;
    ag::Var w = store.add("w", Tensor::from({1}, {0.0}, DType::F64));
    AdamConfig cfg;
    cfg.lr = 1e-3;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.999;
    cfg.eps = 1e-8;
    Adam opt(store, cfg);
    w->grad = Tensor::from({1}, {1.0}, DType::F64);
    opt.step(store);
    // scalar oracle: m=0.1, v=0.001, mhat=1, vhat=1 -> delta = -lr/(1+eps)
    const double expected = -cfg.lr * 1.0 / (std::sqrt(1.0) + cfg.eps);
    CHECK(w->value.get(0) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(w->value.get(0) == doctest::Approx(-9.99999e-4).epsilon(1e-5));
}

TEST_CASE("adam matches a hand-rolled recurrence over several steps") {
    ParamStore store;
    ag::Var w = store.add("w", Tensor::from({1}, {0.7}, DType::F64));
    AdamConfig cfg;
    cfg.lr = 0.01;
    Adam opt(store, cfg);
    double theta = 0.7, m = 0, v = 0;
    RngStream rng(4);
    for (int t = 1; t <= 20; ++t) {
        const double g = rng.normal();
        w->grad = Tensor::from({1}, {g}, DType::F64);
        opt.step(store);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mhat = m / (1 - std::pow(0.9, t));
        const double vhat = v / (1 - std::pow(0.999, t));
        theta -= cfg.lr * mhat / (std::sqrt(vhat) + 1e-8);
        CHECK(w->value.get(0) == doctest::Approx(theta).epsilon(1e-12));
    }
}

TEST_CASE("adamw decoupled decay") {
    // lr = 0 -> decay is multiplied by lr, parameters unchanged
    {
        ParamStore store;
        ag::Var w = store.add("w", Tensor::from({2}, {1.5, -2}, DType::F64));
        Adam opt(store, {.lr = 0.0, .weight_decay = 0.1, .decoupled = true});
        w->grad = Tensor::from({2}, {1, 1}, DType::F64);
        opt.step(store);
        CHECK(w->value.get(0) == 1.5);
        CHECK(w->value.get(1) == -2.0);
    }
    // decay applies before the moment step
    {
        ParamStore store;
        ag::Var w = store.add("w", Tensor::from({1}, {2.0}, DType::F64));
        AdamConfig cfg{.lr = 0.1, .weight_decay = 0.5, .decoupled = true};
        Adam opt(store, cfg);
        w->grad = Tensor::from({1}, {1.0}, DType::F64);
        opt.step(store);
        double theta = 2.0;
        theta -= cfg.lr * cfg.weight_decay * theta;    // decoupled decay first
        theta -= cfg.lr * 1.0 / (std::sqrt(1.0) + cfg.eps);  // bias-corrected first step
        CHECK(w->value.get(0) == doctest::Approx(theta).epsilon(1e-12));
    }
}

TEST_CASE("adam reports shape mismatches by parameter name") {
    ParamStore store;
    ag::Var w = store.add("weights.q", Tensor::zeros({2, 2}, DType::F64));
    Adam opt(store, {});
    w->grad = Tensor::zeros({3}, DType::F64);
    try {
        opt.step(store);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        CHECK(std::string(e.what()).find("weights.q") != std::string::npos);
    }
}

TEST_CASE("grad_check: quadratic form is exact to rounding") {
    ParamStore store;
    RngStream rng(8);
    ag::Var x = store.add("x", pmi_test::random_tensor({5}, rng));
    Tensor a = pmi_test::random_tensor({5, 5}, rng);
    auto f = [&] {
        ag::Var xc = ag::reshape(x, {1, 5});
        return ag::sum_all(ag::mul(ag::matmul(xc, ag::constant(a)), xc));
    };
    GradCheckReport report = grad_check(f, store, 1e-4, 1e-8);
    CHECK(report.passed);
    CHECK(report.max_rel_err <= 1e-8);
}

TEST_CASE("grad_check flags a corrupted gradient kernel") {
    ParamStore store;
    RngStream rng(9);
    ag::Var good = store.add("good", pmi_test::random_tensor({3}, rng));
    ag::Var bad = store.add("bad", pmi_test::random_tensor({3}, rng));
    auto corrupted_double = [](const ag::Var& v) {
        // forward x*2, backward deliberately pushes 3*grad
        return ag::make_op("corrupted", mul_scalar(v->value, 2.0), {v}, [v](ag::Node& n) {
            ag::accumulate(v, mul_scalar(n.grad, 3.0));
        });
    };
    auto f = [&] { return ag::sum_all(ag::add(ag::mul(good, good), corrupted_double(bad))); };
    GradCheckReport report = grad_check(f, store, 1e-4, 1e-4);
    CHECK(!report.passed);
    CHECK(report.worst_param == "bad");
    for (const auto& e : report.entries) {
        if (e.name == "good") CHECK(e.max_rel_err <= 1e-6);
        if (e.name == "bad") CHECK(e.max_rel_err > 0.1);
    }
}

TEST_CASE("grad_check aborts on non-deterministic f") {
    ParamStore store;
    ag::Var w = store.add("w", Tensor::from({1}, {1.0}, DType::F64));
    int calls = 0;
    auto f = [&] {
        ++calls;
        return ag::scale(w, 1.0 + 0.001 * calls);
    };
    try {
        grad_check(f, store, 1e-4, 1e-4);
        FAIL("expected UsageError");
    } catch (const UsageError& e) {
        CHECK(std::string(e.what()).find("non-deterministic") != std::string::npos);
    }
}
