#include "pmi/memory.hpp"

#include <cmath>

#include "pmi/error.hpp"

namespace pmi {

ag::Var wm_write(const ag::Var& h_prev, const WorkingMemory& wm, const WmWriteParams& p,
                 const AttnOptions& attn_opt) {
    if (h_prev->value.rank() != 3) throw DimensionError("wm_write: h must be [B, T, D]");
    if (h_prev->value.dim(1) == 0) throw DataError("wm_write: empty sequence, nothing to write");
    ag::Var h_in = ag::matmul(h_prev, p.input_proj);
    ag::Var written = mhsc(wm.state, h_in, h_in, p.attn, attn_opt);
    ag::Var x = ag::layer_norm(ag::add(written, wm.state), p.ln1_gamma, p.ln1_beta, kLayerNormEps);
    ag::Var y = x;
    for (const auto& [w, b] : p.mlp) y = ag::relu(ag::add(ag::matmul(y, w), b));
    return ag::layer_norm(ag::add(wm.state, y), p.ln2_gamma, p.ln2_beta, kLayerNormEps);
}

WorkingMemory gated_update(const ag::Var& h_prev, const WorkingMemory& prev, const ag::Var& candidate,
                           const GateParams& g, const Tensor* token_mask) {
    const int64_t B = h_prev->value.dim(0);
    const int64_t T = h_prev->value.dim(1);

    ag::Var gates_i, gates_f;
    if (g.force_input && g.force_forget) {
        gates_i = ag::constant(Tensor::full(prev.state->value.shape(), *g.force_input, prev.state->value.dtype()));
        gates_f = ag::constant(Tensor::full(prev.state->value.shape(), *g.force_forget, prev.state->value.dtype()));
    } else {
        ag::Var hw = ag::relu(ag::matmul(h_prev, g.w_input));  // [B, T, D_m]
        ag::Var xbar;
        if (token_mask) {
            if (token_mask->rank() != 2 || token_mask->dim(0) != B || token_mask->dim(1) != T)
                throw DimensionError("gated_update: token mask must be [B, T]");
            Tensor m3 = *token_mask;
            Tensor mask3(Shape{B, T, 1}, hw->value.dtype());
            for (int64_t i = 0; i < B * T; ++i) mask3.set(i, m3.get(i));
            Tensor recip({B, 1}, hw->value.dtype());
            for (int64_t b = 0; b < B; ++b) {
                double cnt = 0;
                for (int64_t t = 0; t < T; ++t) cnt += m3.get(b * T + t) != 0.0 ? 1.0 : 0.0;
                recip.set(b, cnt > 0 ? 1.0 / cnt : 0.0);
            }
            ag::Var summed = ag::sum_axis(ag::mul(hw, ag::constant(mask3)), 1);  // [B, D_m]
            xbar = ag::mul(summed, ag::constant(std::move(recip)));
        } else {
            xbar = ag::mean_axis(hw, 1);  // [B, D_m]
        }
        const int64_t Dm = prev.width();
        ag::Var xb = ag::reshape(xbar, {B, 1, Dm});
        ag::Var key = ag::add(xb, ag::matmul(ag::tanh_v(prev.state), g.w_forget));  // [B, N, D_m]
        gates_i = ag::sigmoid(ag::add_const(key, g.b_input));
        gates_f = ag::sigmoid(ag::add_const(key, g.b_forget));
    }
    ag::Var cand = g.candidate_tanh ? ag::tanh_v(candidate) : candidate;
    ag::Var next = ag::add(ag::mul(gates_i, cand), ag::mul(gates_f, prev.state));
    return WorkingMemory{next};
}

LongTermMemory ltm_write(const WorkingMemory& wm, const LongTermMemory& prev, const LtmWriteParams& p) {
    ag::Var pooled = ag::mean_axis(wm.state, 1);  // [B, D_m]
    ag::Var logits = ag::add(ag::matmul(pooled, p.seg_w), p.seg_b);
    ag::Var coeffs = ag::softmax(logits, -1);  // [B, C]
    ag::Var assoc = ag::outer_broadcast(coeffs, wm.state);  // [B, C, N, D_m]
    ag::Var next = ag::layer_norm(ag::add(assoc, prev.state), p.ln3_gamma, p.ln3_beta, kLayerNormEps);
    return LongTermMemory{next};
}

ag::Var ltm_pool(const LongTermMemory& ltm) {
    if (ltm.segments() < 1) throw DimensionError("ltm_pool: no segments");
    return ag::mean_axis(ltm.state, 1);
}

std::pair<WorkingMemory, LongTermMemory> memory_init(const MemoryInitParams& init, int64_t batch) {
    return {WorkingMemory{ag::expand_batch(init.wm0, batch)}, LongTermMemory{ag::expand_batch(init.ltm0, batch)}};
}

MemoryInitParams make_memory_init(ParamStore& store, const std::string& prefix, int64_t slots,
                                  int64_t segments, int64_t width, double sigma, uint64_t seed, DType dt) {
    MemoryInitParams p;
    Tensor wm0({slots, width}, dt);
    RngStream rw = derive_stream(seed, "init/" + prefix + "wm_init");
    for (int64_t i = 0; i < wm0.numel(); ++i) wm0.set(i, rw.normal(0.0, sigma));
    Tensor ltm0({segments, slots, width}, dt);
    RngStream rl = derive_stream(seed, "init/" + prefix + "ltm_init");
    for (int64_t i = 0; i < ltm0.numel(); ++i) ltm0.set(i, rl.normal(0.0, sigma));
    p.wm0 = store.add(prefix + "wm_init", std::move(wm0));
    p.ltm0 = store.add(prefix + "ltm_init", std::move(ltm0));
    return p;
}

}  // namespace pmi
