#pragma once

#include <map>
#include <string>
#include <vector>

#include "pmi/autograd.hpp"

namespace pmi {

// Trainable parameters in insertion order (deterministic iteration for
// updates and checkpoints).
class ParamStore {
  public:
    ag::Var add(const std::string& name, Tensor init);
    ag::Var get(const std::string& name) const;
    bool has(const std::string& name) const { return index_.count(name) != 0; }
    const std::vector<ag::Var>& list() const { return list_; }
    void zero_grad();
    int64_t total_scalars() const;

  private:
    std::vector<ag::Var> list_;
    std::map<std::string, size_t> index_;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    bool decoupled = false;  // adamw: theta -= lr*wd*theta before the moment step
};

// Adam / AdamW with bias correction. Moment tensors exist for exactly the
// trainable parameters of the store; missing grads count as zero.
class Adam {
  public:
    Adam(const ParamStore& params, AdamConfig cfg);

    void step(ParamStore& params);
    int64_t step_count() const { return step_count_; }
    const AdamConfig& config() const { return cfg_; }

    // checkpoint access: (param index, moment) pairs in store order
    const std::vector<size_t>& tracked() const { return tracked_; }
    std::vector<Tensor>& first_moments() { return m_; }
    std::vector<Tensor>& second_moments() { return v_; }
    void set_step_count(int64_t s) { step_count_ = s; }

  private:
    AdamConfig cfg_;
    int64_t step_count_ = 0;
    std::vector<size_t> tracked_;
    std::vector<Tensor> m_, v_;
};

}  // namespace pmi
