#pragma once

#include "pmi/memory.hpp"

namespace pmi {

struct FusionParams {
    AttentionParams read_wm_attn;   // W-tilde family
    AttentionParams read_ltm_attn;  // W-hat family
    AttentionParams fuse_attn;      // W-bar family
    ag::Var alpha_raw;              // unconstrained scalar, sigmoid-mapped into (0,1)
    std::optional<double> alpha_override;  // test hook: bypass the constraint map
    int64_t top_k = 5;              // LTM-read sparsity (shares the write-channel k)
};

// U_w: dense read, queries from perception, keys/values from the slots.
ag::Var read_wm(const ag::Var& h_prev, const WorkingMemory& wm, const FusionParams& p,
                TraceSink* sink = nullptr, int layer = 0);

// U_l: pool segments, then sparse (top-k) read over the pooled slots.
ag::Var read_ltm(const ag::Var& h_prev, const LongTermMemory& ltm, const FusionParams& p,
                 SparseRenorm renorm = SparseRenorm::None, TraceSink* sink = nullptr, int layer = 0,
                 TopKFreeze* freeze = nullptr);

// U_wl = MHC(queries from U_l, keys/values from U_w); U = a*U_w + (1-a)*U_wl.
// key_mask hides padded positions of U_w from the cross-source correction.
ag::Var fuse(const ag::Var& u_w, const ag::Var& u_l, const FusionParams& p,
             const Tensor* key_mask = nullptr);

}  // namespace pmi
