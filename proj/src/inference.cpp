#include "pmi/inference.hpp"

namespace pmi {

ag::Var read_wm(const ag::Var& h_prev, const WorkingMemory& wm, const FusionParams& p, TraceSink* sink,
                int layer) {
    AttnOptions opt;
    opt.sink = sink;
    opt.layer = layer;
    opt.kind = TraceKind::WmRead;
    return mhc(h_prev, wm.state, wm.state, p.read_wm_attn, opt);
}

ag::Var read_ltm(const ag::Var& h_prev, const LongTermMemory& ltm, const FusionParams& p, SparseRenorm renorm,
                 TraceSink* sink, int layer, TopKFreeze* freeze) {
    ag::Var pooled = ltm_pool(ltm);
    AttnOptions opt;
    opt.top_k = p.top_k;
    opt.renorm = renorm;
    opt.sink = sink;
    opt.layer = layer;
    opt.kind = TraceKind::LtmRead;
    opt.freeze = freeze;
    return mhsc(h_prev, pooled, pooled, p.read_ltm_attn, opt);
}

ag::Var fuse(const ag::Var& u_w, const ag::Var& u_l, const FusionParams& p, const Tensor* key_mask) {
    if (u_w->value.shape() != u_l->value.shape())
        throw DimensionError("fuse: U_w " + shape_str(u_w->value.shape()) + " and U_l " +
                             shape_str(u_l->value.shape()) + " must match");
    AttnOptions opt;
    opt.key_mask = key_mask;
    ag::Var u_wl = mhc(u_l, u_w, u_w, p.fuse_attn, opt);
    ag::Var alpha = p.alpha_override
                        ? ag::constant(Tensor::scalar(*p.alpha_override, u_w->value.dtype()))
                        : ag::sigmoid(p.alpha_raw);
    ag::Var one_minus = ag::add_const(ag::scale(alpha, -1.0), 1.0);
    return ag::add(ag::mul(u_w, alpha), ag::mul(u_wl, one_minus));
}

}  // namespace pmi
