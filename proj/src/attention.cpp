#include "pmi/attention.hpp"

#include <cmath>

#include "pmi/error.hpp"

namespace pmi {

const char* trace_kind_name(TraceKind kind) {
    switch (kind) {
        case TraceKind::WmWrite: return "wm_write";
        case TraceKind::WmRead: return "wm";
        case TraceKind::LtmRead: return "ltm";
    }
    return "?";
}

namespace {

Tensor init_weight(int64_t rows, int64_t cols, uint64_t seed, const std::string& name, DType dt) {
    Tensor w({rows, cols}, dt);
    RngStream rng = derive_stream(seed, "init/" + name);
    const double sigma = 1.0 / std::sqrt(static_cast<double>(rows));
    for (int64_t i = 0; i < w.numel(); ++i) w.set(i, rng.normal(0.0, sigma));
    return w;
}

}  // namespace

AttentionParams make_attention_params(ParamStore& store, const std::string& prefix, int64_t d_q_in,
                                      int64_t d_kv_in, int64_t d_model, int heads, bool out_proj,
                                      uint64_t seed, DType dt) {
    if (heads < 1 || d_model % heads != 0)
        throw ConfigError("attention '" + prefix + "': D_m=" + std::to_string(d_model) +
                          " must be divisible by heads=" + std::to_string(heads));
    AttentionParams p;
    p.heads = heads;
    p.wq = store.add(prefix + ".wq", init_weight(d_q_in, d_model, seed, prefix + ".wq", dt));
    p.wk = store.add(prefix + ".wk", init_weight(d_kv_in, d_model, seed, prefix + ".wk", dt));
    p.wv = store.add(prefix + ".wv", init_weight(d_kv_in, d_model, seed, prefix + ".wv", dt));
    if (out_proj) p.wo = store.add(prefix + ".wo", init_weight(d_model, d_model, seed, prefix + ".wo", dt));
    return p;
}

namespace {

ag::Var split_heads(const ag::Var& x, int heads) {
    // [B, T, D] -> [B, H, T, D/H]
    const int64_t B = x->value.dim(0), T = x->value.dim(1), D = x->value.dim(2);
    return ag::permute(ag::reshape(x, {B, T, heads, D / heads}), {0, 2, 1, 3});
}

ag::Var merge_heads(const ag::Var& x) {
    // [B, H, T, dh] -> [B, T, D]
    const int64_t B = x->value.dim(0), H = x->value.dim(1), T = x->value.dim(2), dh = x->value.dim(3);
    return ag::reshape(ag::permute(x, {0, 2, 1, 3}), {B, T, H * dh});
}

void check_proj(const ag::Var& src, const ag::Var& w, const char* which) {
    if (src->value.dim(src->value.rank() - 1) != w->value.dim(0))
        throw DimensionError(std::string("attention projection ") + which + ": input width " +
                             std::to_string(src->value.dim(src->value.rank() - 1)) + " does not match " +
                             shape_str(w->value.shape()));
}

}  // namespace

ag::Var mhsc(const ag::Var& q_src, const ag::Var& k_src, const ag::Var& v_src, const AttentionParams& p,
             const AttnOptions& opt) {
    if (k_src->value.dim(1) != v_src->value.dim(1))
        throw DimensionError("mhsc: key/value sequence lengths disagree");
    check_proj(q_src, p.wq, "W^Q");
    check_proj(k_src, p.wk, "W^K");
    check_proj(v_src, p.wv, "W^V");
    const int64_t d_model = p.wq->value.dim(1);
    const int64_t dh = d_model / p.heads;
    const int64_t n_keys = k_src->value.dim(1);
    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));

    ag::Var qh = split_heads(ag::matmul(q_src, p.wq), p.heads);
    ag::Var kh = split_heads(ag::matmul(k_src, p.wk), p.heads);
    ag::Var vh = split_heads(ag::matmul(v_src, p.wv), p.heads);

    ag::Var probs = ag::attention_probs(qh, kh, scale_factor, opt.key_mask);

    const bool sparse = opt.top_k > 0 && opt.top_k < n_keys;
    ag::Var weights = probs;
    if (sparse) {
        Tensor mask;
        if (opt.freeze && !opt.freeze->recording) {
            if (opt.freeze->cursor >= opt.freeze->masks.size())
                throw UsageError("top-k freeze: replay ran past the recorded masks");
            mask = opt.freeze->masks[opt.freeze->cursor];
        } else {
            mask = top_k_mask(probs->value, opt.top_k, -1);
            if (opt.freeze) opt.freeze->masks.push_back(mask);
        }
        if (opt.freeze) ++opt.freeze->cursor;
        switch (opt.renorm) {
            case SparseRenorm::None:
                weights = ag::mul(probs, ag::constant(mask));
                break;
            case SparseRenorm::Renormalize: {
                ag::Var masked = ag::mul(probs, ag::constant(mask));
                Shape keep = masked->value.shape();
                keep[keep.size() - 1] = 1;
                ag::Var denom = ag::reshape(ag::sum_axis(masked, -1), keep);
                weights = ag::div(masked, denom);
                break;
            }
            case SparseRenorm::MaskLogits:
                weights = ag::attention_probs(qh, kh, scale_factor, opt.key_mask, &mask);
                break;
        }
    }

    if (opt.sink) opt.sink->record(opt.layer, opt.kind, weights->value);

    ag::Var out = merge_heads(ag::matmul(weights, vh));
    if (p.wo) out = ag::matmul(out, p.wo);
    return out;
}

ag::Var mhc(const ag::Var& q_src, const ag::Var& k_src, const ag::Var& v_src, const AttentionParams& p,
            AttnOptions opt) {
    opt.top_k = 0;
    return mhsc(q_src, k_src, v_src, p, opt);
}

}  // namespace pmi
