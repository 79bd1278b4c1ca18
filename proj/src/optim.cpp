#include "pmi/optim.hpp"

#include <cmath>

#include "pmi/error.hpp"

namespace pmi {

ag::Var ParamStore::add(const std::string& name, Tensor init) {
    if (index_.count(name)) throw UsageError("parameter '" + name + "' already registered");
    ag::Var v = ag::leaf(std::move(init), true, name);
    index_[name] = list_.size();
    list_.push_back(v);
    return v;
}

ag::Var ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter '" + name + "'");
    return list_[it->second];
}

void ParamStore::zero_grad() {
    for (const ag::Var& p : list_) p->grad = Tensor();
}

int64_t ParamStore::total_scalars() const {
    int64_t n = 0;
    for (const ag::Var& p : list_) n += p->value.numel();
    return n;
}

Adam::Adam(const ParamStore& params, AdamConfig cfg) : cfg_(cfg) {
    for (size_t i = 0; i < params.list().size(); ++i) {
        const ag::Var& p = params.list()[i];
        if (!p->requires_grad) continue;
        tracked_.push_back(i);
        m_.push_back(Tensor::zeros(p->value.shape(), p->value.dtype()));
        v_.push_back(Tensor::zeros(p->value.shape(), p->value.dtype()));
    }
}

void Adam::step(ParamStore& params) {
    ++step_count_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
    for (size_t i = 0; i < tracked_.size(); ++i) {
        if (tracked_[i] >= params.list().size())
            throw UsageError("optimizer state does not match parameter store");
        const ag::Var& p = params.list()[tracked_[i]];
        if (p->grad.defined() && p->grad.shape() != p->value.shape())
            throw DimensionError("gradient shape mismatch for parameter '" + p->name + "'");
        Tensor& m = m_[i];
        Tensor& v = v_[i];
        dispatch(p->value.dtype(), [&](auto tag) {
            using T = decltype(tag);
            T* theta = p->value.data<T>();
            const T* g = p->grad.defined() ? p->grad.data<T>() : nullptr;
            T* pm = m.data<T>();
            T* pv = v.data<T>();
            const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
            const T lr = static_cast<T>(cfg_.lr), eps = static_cast<T>(cfg_.eps);
            const T wd = static_cast<T>(cfg_.weight_decay);
            const T c1 = static_cast<T>(bc1), c2 = static_cast<T>(bc2);
            for (int64_t j = 0; j < p->value.numel(); ++j) {
                if (cfg_.decoupled && wd != T(0)) theta[j] -= lr * wd * theta[j];
                T gj = g ? g[j] : T(0);
                if (!cfg_.decoupled && wd != T(0)) gj += wd * theta[j];
                pm[j] = b1 * pm[j] + (T(1) - b1) * gj;
                pv[j] = b2 * pv[j] + (T(1) - b2) * gj * gj;
                const T mhat = pm[j] / c1;
                const T vhat = pv[j] / c2;
                theta[j] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
            return 0;
        });
    }
}

}  // namespace pmi
