#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "pmi/attention.hpp"

namespace pmi {

// N x D_m slot matrix (batched), the fast store M_w.
struct WorkingMemory {
    ag::Var state;  // [B, N, D_m]
    int64_t batch() const { return state->value.dim(0); }
    int64_t slots() const { return state->value.dim(1); }
    int64_t width() const { return state->value.dim(2); }
};

// C x N x D_m segment stack (batched), the slow store M_l.
struct LongTermMemory {
    ag::Var state;  // [B, C, N, D_m]
    int64_t batch() const { return state->value.dim(0); }
    int64_t segments() const { return state->value.dim(1); }
    int64_t slots() const { return state->value.dim(2); }
    int64_t width() const { return state->value.dim(3); }
};

struct WmWriteParams {
    ag::Var input_proj;  // D × D_m, near-identity init when D == D_m
    AttentionParams attn;
    std::vector<std::pair<ag::Var, ag::Var>> mlp;  // (weight D_m×D_m, bias D_m) per layer
    ag::Var ln1_gamma, ln1_beta;
    ag::Var ln2_gamma, ln2_beta;
};

struct GateParams {
    ag::Var w_input;   // D × D_m
    ag::Var w_forget;  // D_m × D_m
    double b_input = 0.0;
    double b_forget = 1.0;
    bool candidate_tanh = true;
    // test hooks bypassing the sigmoid
    std::optional<double> force_input;
    std::optional<double> force_forget;
};

struct LtmWriteParams {
    ag::Var seg_w;  // D_m × C
    ag::Var seg_b;  // C
    ag::Var ln3_gamma, ln3_beta;
};

struct MemoryInitParams {
    ag::Var wm0;   // N × D_m
    ag::Var ltm0;  // C × N × D_m
};

inline constexpr double kLayerNormEps = 1e-5;

// Competitive write: MHSC from perception into the slots, residual + LN_1,
// ReLU MLP chain, second residual from the previous memory + LN_2. Returns
// the candidate state; gating is separate.
ag::Var wm_write(const ag::Var& h_prev, const WorkingMemory& wm, const WmWriteParams& p,
                 const AttnOptions& attn_opt);

// Input/forget 'unit' gates (per-element): K = mean_t relu(h W^I) + tanh(M_w)W^F,
// I = sigmoid(K + b_i), F = sigmoid(K + b_f), M_w = I*tanh(candidate) + F*M_w_prev.
// token_mask restricts the mean over t to valid positions.
WorkingMemory gated_update(const ag::Var& h_prev, const WorkingMemory& prev, const ag::Var& candidate,
                           const GateParams& g, const Tensor* token_mask = nullptr);

// Consolidation: softmax segment coefficients from slot-pooled M_w,
// outer-product association, residual, LN_3 over the last dim.
LongTermMemory ltm_write(const WorkingMemory& wm, const LongTermMemory& prev, const LtmWriteParams& p);

// Mean over the segment axis -> [B, N, D_m].
ag::Var ltm_pool(const LongTermMemory& ltm);

// Batch-broadcast copies of the trainable initial states.
std::pair<WorkingMemory, LongTermMemory> memory_init(const MemoryInitParams& init, int64_t batch);

MemoryInitParams make_memory_init(ParamStore& store, const std::string& prefix, int64_t slots,
                                  int64_t segments, int64_t width, double sigma, uint64_t seed, DType dt);

}  // namespace pmi
