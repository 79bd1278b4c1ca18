#pragma once

#include <string>
#include <vector>

#include "pmi/autograd.hpp"
#include "pmi/optim.hpp"

namespace pmi {

enum class TraceKind { WmWrite, WmRead, LtmRead };
const char* trace_kind_name(TraceKind kind);

// Post-mask attention weights of one call: [B, H, n_queries, n_keys].
struct AttentionTrace {
    int layer = 0;
    TraceKind kind = TraceKind::WmRead;
    Tensor probs;
};

// One sink per forward pass (single writer).
struct TraceSink {
    std::vector<AttentionTrace> traces;
    void record(int layer, TraceKind kind, Tensor probs) {
        traces.push_back({layer, kind, std::move(probs)});
    }
};

// Frozen top-k supports so finite-difference probes keep the index sets of
// the base point. First pass records, later passes replay in call order.
struct TopKFreeze {
    std::vector<Tensor> masks;
    size_t cursor = 0;
    bool recording = true;
    void begin_pass() {
        cursor = 0;
        recording = masks.empty();
    }
};

enum class SparseRenorm { None, Renormalize, MaskLogits };

struct AttentionParams {
    ag::Var wq, wk, wv;  // input dim × D_m
    ag::Var wo;          // D_m × D_m; null when the output projection is disabled
    int heads = 1;
};

AttentionParams make_attention_params(ParamStore& store, const std::string& prefix, int64_t d_q_in,
                                      int64_t d_kv_in, int64_t d_model, int heads, bool out_proj,
                                      uint64_t seed, DType dt);

struct AttnOptions {
    int64_t top_k = 0;  // 0 → dense
    SparseRenorm renorm = SparseRenorm::None;
    const Tensor* key_mask = nullptr;  // [B, n_keys] 1/0; masked keys are excluded pre-softmax
    TraceSink* sink = nullptr;
    int layer = 0;
    TraceKind kind = TraceKind::WmRead;
    TopKFreeze* freeze = nullptr;
};

// Multi-head sparse cross attention: per head softmax(QK^T/sqrt(D_m/H)),
// then all but the top-k entries of each query row zeroed without
// renormalization (configurable), times V, heads concatenated, output
// projection applied. k >= n_keys reproduces dense attention bitwise.
ag::Var mhsc(const ag::Var& q_src, const ag::Var& k_src, const ag::Var& v_src, const AttentionParams& p,
             const AttnOptions& opt);

// Dense multi-head cross attention (mhsc without sparsity).
ag::Var mhc(const ag::Var& q_src, const ag::Var& k_src, const ag::Var& v_src, const AttentionParams& p,
            AttnOptions opt = {});

}  // namespace pmi
