#include "pmi/model.hpp"

#include <cmath>
#include <sstream>

#include "pmi/error.hpp"

namespace pmi {

void ModelConfig::validate() const {
    if (layers < 1) throw ConfigError("layers must be >= 1, got " + std::to_string(layers));
    if (dim < 1) throw ConfigError("dim must be >= 1");
    if (heads < 1 || dim % heads != 0)
        throw ConfigError("dim=" + std::to_string(dim) + " must be divisible by heads=" + std::to_string(heads));
    if (kind == Kind::Mitr) {
        if (memory_heads < 1 || dim % memory_heads != 0)
            throw ConfigError("dim=" + std::to_string(dim) + " must be divisible by memory_heads=" +
                              std::to_string(memory_heads));
        if (slots < 1) throw ConfigError("slots must be >= 1");
        if (segments < 1) throw ConfigError("segments must be >= 1");
        if (top_k < 1) throw ConfigError("top_k must be >= 1");
        if (mlp_layers < 1) throw ConfigError("mlp_layers must be >= 1");
        if (alpha_init <= 0.0 || alpha_init >= 1.0) throw ConfigError("alpha_init must be in (0, 1)");
    }
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
    if (ffn_mult < 1) throw ConfigError("ffn_mult must be >= 1");
}

namespace {

Tensor init_normal(Shape shape, double sigma, uint64_t seed, const std::string& name, DType dt) {
    Tensor t(std::move(shape), dt);
    RngStream rng = derive_stream(seed, "init/" + name);
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.normal(0.0, sigma));
    return t;
}

Tensor init_near_identity(int64_t d, uint64_t seed, const std::string& name, DType dt) {
    Tensor t = init_normal({d, d}, 0.01 / std::sqrt(static_cast<double>(d)), seed, name, dt);
    for (int64_t i = 0; i < d; ++i) t.set(i * d + i, t.get(i * d + i) + 1.0);
    return t;
}

double logit(double p) { return std::log(p / (1.0 - p)); }

}  // namespace

Model::Model(const ModelConfig& cfg, const TaskMeta& meta, uint64_t seed) : cfg_(cfg), meta_(meta) {
    cfg_.validate();
    const DType dt = cfg_.dtype;
    const int64_t D = cfg_.dim;
    const double sig = 1.0 / std::sqrt(static_cast<double>(D));

    if (meta_.text) {
        if (meta_.vocab_size < 1) throw ConfigError("text task requires a vocabulary");
        token_table_ = params_.add("embed.token_table",
                                   init_normal({meta_.vocab_size, D}, sig, seed, "embed.token_table", dt));
        sent_pos_ = params_.add("embed.sent_pos", init_normal({meta_.s_max, D}, sig, seed, "embed.sent_pos", dt));
        q_pos_ = params_.add("embed.q_pos", init_normal({1, D}, sig, seed, "embed.q_pos", dt));
        cls_ = params_.add("embed.cls", init_normal({1, D}, sig, seed, "embed.cls", dt));
    } else {
        if (meta_.image_h % meta_.patch != 0 || meta_.image_w % meta_.patch != 0)
            throw ConfigError("image dims " + std::to_string(meta_.image_h) + "x" + std::to_string(meta_.image_w) +
                              " not divisible by patch " + std::to_string(meta_.patch));
        const int64_t pv = meta_.patch * meta_.patch;
        patch_proj_ = params_.add("embed.patch_proj",
                                  init_normal({pv, D}, 1.0 / std::sqrt(static_cast<double>(pv)), seed,
                                              "embed.patch_proj", dt));
        pos_table_ = params_.add("embed.pos",
                                 init_normal({meta_.patches() + 1, D}, sig, seed, "embed.pos", dt));
        cls_ = params_.add("embed.cls", init_normal({1, D}, sig, seed, "embed.cls", dt));
    }

    if (cfg_.kind == ModelConfig::Kind::Mitr) {
        const int n_mem = cfg_.memory_sharing == ModelConfig::Sharing::Shared ? 1 : cfg_.layers;
        for (int i = 0; i < n_mem; ++i) {
            std::string prefix = n_mem == 1 ? "" : "L" + std::to_string(i) + ".";
            mem_init_.push_back(
                make_memory_init(params_, prefix, cfg_.slots, cfg_.segments, D, sig, seed, dt));
        }
        const int n_bundles = cfg_.param_sharing == ModelConfig::Sharing::Shared ? 1 : cfg_.layers;
        for (int i = 0; i < n_bundles; ++i) {
            std::string prefix = n_bundles == 1 ? "pmi.shared" : "pmi.L" + std::to_string(i);
            bundles_.push_back(make_bundle(prefix, seed));
        }
    } else {
        for (int i = 0; i < cfg_.layers; ++i) {
            std::string prefix = "tr.L" + std::to_string(i);
            TrLayer layer;
            layer.attn = make_attention_params(params_, prefix + ".attn", D, D, D, cfg_.heads,
                                               cfg_.attn_out_proj, seed, dt);
            layer.ln1_g = params_.add(prefix + ".ln1.gamma", Tensor::full({D}, 1.0, dt));
            layer.ln1_b = params_.add(prefix + ".ln1.beta", Tensor::zeros({D}, dt));
            layer.ln2_g = params_.add(prefix + ".ln2.gamma", Tensor::full({D}, 1.0, dt));
            layer.ln2_b = params_.add(prefix + ".ln2.beta", Tensor::zeros({D}, dt));
            const int64_t hidden = D * cfg_.ffn_mult;
            layer.ffn_w1 = params_.add(prefix + ".ffn.w1", init_normal({D, hidden}, sig, seed, prefix + ".ffn.w1", dt));
            layer.ffn_b1 = params_.add(prefix + ".ffn.b1", Tensor::zeros({hidden}, dt));
            layer.ffn_w2 = params_.add(prefix + ".ffn.w2",
                                       init_normal({hidden, D}, 1.0 / std::sqrt(static_cast<double>(hidden)),
                                                   seed, prefix + ".ffn.w2", dt));
            layer.ffn_b2 = params_.add(prefix + ".ffn.b2", Tensor::zeros({D}, dt));
            tr_layers_.push_back(std::move(layer));
        }
    }

    head_w_ = params_.add("head.w", init_normal({D, meta_.num_classes}, sig, seed, "head.w", dt));
    head_b_ = params_.add("head.b", Tensor::zeros({meta_.num_classes}, dt));
}

PmiBundle Model::make_bundle(const std::string& prefix, uint64_t seed) {
    const DType dt = cfg_.dtype;
    const int64_t D = cfg_.dim;
    const double sig = 1.0 / std::sqrt(static_cast<double>(D));
    PmiBundle b;

    b.write.input_proj = params_.add(prefix + ".write.input_proj",
                                     init_near_identity(D, seed, prefix + ".write.input_proj", dt));
    b.write.attn = make_attention_params(params_, prefix + ".write.attn", D, D, D, cfg_.memory_heads,
                                         cfg_.attn_out_proj, seed, dt);
    for (int j = 0; j < cfg_.mlp_layers; ++j) {
        std::string mp = prefix + ".write.mlp" + std::to_string(j);
        ag::Var w = params_.add(mp + ".w", init_normal({D, D}, sig, seed, mp + ".w", dt));
        ag::Var bias = params_.add(mp + ".b", Tensor::zeros({D}, dt));
        b.write.mlp.emplace_back(w, bias);
    }
    b.write.ln1_gamma = params_.add(prefix + ".write.ln1.gamma", Tensor::full({D}, 1.0, dt));
    b.write.ln1_beta = params_.add(prefix + ".write.ln1.beta", Tensor::zeros({D}, dt));
    b.write.ln2_gamma = params_.add(prefix + ".write.ln2.gamma", Tensor::full({D}, 1.0, dt));
    b.write.ln2_beta = params_.add(prefix + ".write.ln2.beta", Tensor::zeros({D}, dt));

    b.gate.w_input = params_.add(prefix + ".gate.w_input", init_normal({D, D}, sig, seed, prefix + ".gate.w_input", dt));
    b.gate.w_forget = params_.add(prefix + ".gate.w_forget", init_normal({D, D}, sig, seed, prefix + ".gate.w_forget", dt));
    b.gate.b_input = cfg_.gate_b_input;
    b.gate.b_forget = cfg_.gate_b_forget;
    b.gate.candidate_tanh = cfg_.gate_candidate_tanh;

    b.ltm.seg_w = params_.add(prefix + ".ltm.seg_w", init_normal({D, cfg_.segments}, sig, seed, prefix + ".ltm.seg_w", dt));
    b.ltm.seg_b = params_.add(prefix + ".ltm.seg_b", Tensor::zeros({cfg_.segments}, dt));
    b.ltm.ln3_gamma = params_.add(prefix + ".ltm.ln3.gamma", Tensor::full({D}, 1.0, dt));
    b.ltm.ln3_beta = params_.add(prefix + ".ltm.ln3.beta", Tensor::zeros({D}, dt));

    b.fusion.read_wm_attn = make_attention_params(params_, prefix + ".read_wm.attn", D, D, D, cfg_.heads,
                                                  cfg_.attn_out_proj, seed, dt);
    b.fusion.read_ltm_attn = make_attention_params(params_, prefix + ".read_ltm.attn", D, D, D, cfg_.heads,
                                                   cfg_.attn_out_proj, seed, dt);
    b.fusion.fuse_attn = make_attention_params(params_, prefix + ".fusion.attn", D, D, D, cfg_.heads,
                                               cfg_.attn_out_proj, seed, dt);
    b.fusion.alpha_raw = params_.add(prefix + ".fusion.alpha", Tensor::scalar(logit(cfg_.alpha_init), dt));
    if (!cfg_.alpha_trainable) b.fusion.alpha_raw->requires_grad = false;
    b.fusion.top_k = cfg_.top_k;
    return b;
}

ag::Var Model::embed(const TaskBatch& batch, ForwardCtx& ctx) const {
    const DType dt = cfg_.dtype;
    const int64_t D = cfg_.dim;
    ag::Var h;
    if (meta_.text) {
        if (!batch.is_text) throw DataError("model expects text batches");
        const int64_t B = batch.batch();
        const int64_t S = meta_.s_max + 1;  // sentence slots + question
        for (const auto& row : batch.slot_tokens)
            if (static_cast<int64_t>(row.size()) != S)
                throw DataError("batch slot count " + std::to_string(row.size()) + " != s_max+1 = " +
                                std::to_string(S));
        ag::Var emb = ag::sentence_embed(token_table_, batch.slot_tokens);  // [B, S, D]
        ag::Var pos = ag::reshape(ag::concat({sent_pos_, q_pos_}, 0), {1, S, D});
        // add position codes only to occupied slots so placeholders stay zero
        Tensor occupied({B, S, 1}, dt);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t s = 0; s < S; ++s)
                occupied.set(b * S + s,
                             batch.slot_tokens[static_cast<size_t>(b)][static_cast<size_t>(s)].empty() ? 0.0 : 1.0);
        ag::Var posed = ag::add(emb, ag::mul(pos, ag::constant(std::move(occupied))));
        ag::Var cls_b = ag::expand_batch(cls_, B);  // [B, 1, D]
        h = ag::concat({posed, cls_b}, 1);          // CLS last: S1..S_max, Q, CLS
    } else {
        if (batch.is_text) throw DataError("model expects image batches");
        const int64_t B = batch.batch();
        const int64_t P = meta_.patch;
        const int64_t H = meta_.image_h, W = meta_.image_w;
        if (batch.images.dim(1) != H || batch.images.dim(2) != W)
            throw ConfigError("image shape " + shape_str(batch.images.shape()) + " does not match task " +
                              std::to_string(H) + "x" + std::to_string(W));
        const int64_t np = meta_.patches();
        const int64_t pv = P * P;
        Tensor patches({B, np, pv}, dt);
        const int64_t pw = W / P;
        for (int64_t b = 0; b < B; ++b)
            for (int64_t p = 0; p < np; ++p) {
                const int64_t py = p / pw, px = p % pw;
                for (int64_t dy = 0; dy < P; ++dy)
                    for (int64_t dx = 0; dx < P; ++dx)
                        patches.set((b * np + p) * pv + dy * P + dx,
                                    batch.images.get((b * H + py * P + dy) * W + px * P + dx));
            }
        ag::Var x = ag::matmul(ag::constant(std::move(patches)), patch_proj_);  // [B, np, D]
        ag::Var cls_b = ag::expand_batch(cls_, B);
        ag::Var seq = ag::concat({cls_b, x}, 1);  // class token first (ViT convention)
        h = ag::add(seq, ag::reshape(pos_table_, {1, np + 1, D}));
    }
    h = ag::dropout(h, cfg_.dropout, ctx.dropout_stream, ctx.training);
    return h;
}

ForwardOut Model::forward(const TaskBatch& batch, ForwardCtx& ctx) {
    const int64_t B = batch.batch();
    if (B < 1) throw DataError("empty batch");
    const int64_t T = meta_.positions();
    Tensor mask = batch.mask.defined() ? batch.mask.astype(cfg_.dtype) : Tensor::full({B, T}, 1.0, cfg_.dtype);
    if (mask.dim(0) != B || mask.dim(1) != T)
        throw DimensionError("batch mask " + shape_str(mask.shape()) + " does not match [B, T] = [" +
                             std::to_string(B) + ", " + std::to_string(T) + "]");
    if (ctx.freeze) ctx.freeze->begin_pass();

    ForwardOut out;
    ag::Var h = embed(batch, ctx);

    if (cfg_.kind == ModelConfig::Kind::Mitr) {
        const bool shared_mem = cfg_.memory_sharing == ModelConfig::Sharing::Shared;
        WorkingMemory wm;
        LongTermMemory ltm;
        if (shared_mem) {
            if (cfg_.persistence == ModelConfig::Persistence::CrossBatchDetached && persisted_wm.defined()) {
                wm = WorkingMemory{ag::expand_batch(ag::constant(persisted_wm), B)};
                ltm = LongTermMemory{ag::expand_batch(ag::constant(persisted_ltm), B)};
            } else {
                std::tie(wm, ltm) = memory_init(mem_init_[0], B);
            }
            out.distinct_memory_chains = 1;
        } else {
            out.distinct_memory_chains = cfg_.layers;
        }
        for (int layer = 0; layer < cfg_.layers; ++layer) {
            const PmiBundle& bundle =
                bundles_[cfg_.param_sharing == ModelConfig::Sharing::Shared ? 0 : static_cast<size_t>(layer)];
            if (!shared_mem)
                std::tie(wm, ltm) = memory_init(mem_init_[static_cast<size_t>(layer)], B);

            AttnOptions wopt;
            wopt.top_k = cfg_.top_k;
            wopt.renorm = cfg_.sparse_renorm;
            wopt.key_mask = &mask;
            wopt.sink = ctx.sink;
            wopt.layer = layer;
            wopt.kind = TraceKind::WmWrite;
            wopt.freeze = ctx.freeze;
            ag::Var candidate = wm_write(h, wm, bundle.write, wopt);
            wm = gated_update(h, wm, candidate, bundle.gate, &mask);
            ltm = ltm_write(wm, ltm, bundle.ltm);

            ag::Var u_w = read_wm(h, wm, bundle.fusion, ctx.sink, layer);
            ag::Var u_l = read_ltm(h, ltm, bundle.fusion, cfg_.sparse_renorm, ctx.sink, layer, ctx.freeze);
            ag::Var u = fuse(u_w, u_l, bundle.fusion, &mask);
            h = cfg_.block_residual ? ag::add(h, u) : u;
            if (!shared_mem) {
                out.final_wm.push_back(wm);
                out.final_ltm.push_back(ltm);
            }
        }
        if (shared_mem) {
            out.final_wm.push_back(wm);
            out.final_ltm.push_back(ltm);
        }
    } else {
        for (const TrLayer& layer : tr_layers_) {
            AttnOptions opt;
            opt.key_mask = &mask;
            ag::Var a = mhc(h, h, h, layer.attn, opt);
            h = ag::layer_norm(ag::add(h, a), layer.ln1_g, layer.ln1_b, kLayerNormEps);
            ag::Var f = ag::relu(ag::add(ag::matmul(h, layer.ffn_w1), layer.ffn_b1));
            f = ag::add(ag::matmul(f, layer.ffn_w2), layer.ffn_b2);
            h = ag::layer_norm(ag::add(h, f), layer.ln2_g, layer.ln2_b, kLayerNormEps);
        }
        out.distinct_memory_chains = 0;
    }

    const int64_t cls_index = meta_.text ? T - 1 : 0;
    ag::Var cls_h = ag::reshape(ag::slice(h, 1, cls_index, 1), {B, cfg_.dim});
    out.logits = ag::add(ag::matmul(cls_h, head_w_), head_b_);
    out.hidden = h;
    return out;
}

std::pair<ag::Var, Metrics> loss_and_metrics(const ag::Var& logits, const std::vector<int32_t>& labels) {
    ag::Var loss = ag::cross_entropy(logits, labels);
    Metrics m;
    const int64_t B = logits->value.dim(0), K = logits->value.dim(1);
    int64_t hits = 0;
    for (int64_t b = 0; b < B; ++b) {
        int64_t best = 0;
        double bv = logits->value.get(b * K);
        for (int64_t j = 1; j < K; ++j) {
            const double v = logits->value.get(b * K + j);
            if (v > bv) {
                bv = v;
                best = j;
            }
        }
        if (best == labels[static_cast<size_t>(b)]) ++hits;
    }
    m.loss = loss->value.get(0);
    m.count = B;
    m.accuracy = 100.0 * static_cast<double>(hits) / static_cast<double>(B);
    m.error_pct = 100.0 - m.accuracy;
    return {loss, m};
}

std::map<std::string, int64_t> Model::component_counts() const {
    std::map<std::string, int64_t> counts;
    for (const ag::Var& p : params_.list()) {
        std::string comp;
        const std::string& n = p->name;
        if (n.rfind("embed.", 0) == 0) comp = "embedding";
        else if (n.rfind("head.", 0) == 0) comp = "head";
        else if (n.find("wm_init") != std::string::npos || n.find("ltm_init") != std::string::npos)
            comp = "memory_init";
        else if (n.rfind("tr.", 0) == 0) comp = "transformer";
        else {
            // pmi.<scope>.<part>...
            size_t a = n.find('.');
            size_t b = n.find('.', a + 1);
            size_t c = n.find('.', b + 1);
            comp = "pmi." + n.substr(b + 1, c - b - 1);
        }
        counts[comp] += p->value.numel();
    }
    int64_t total = 0;
    for (const auto& [k, v] : counts) total += v;
    counts["total"] = total;
    return counts;
}

int64_t Model::pmi_bundle_scalars() const {
    int64_t n = 0;
    for (const ag::Var& p : params_.list())
        if (p->name.rfind("pmi.", 0) == 0) n += p->value.numel();
    return n;
}

std::string count_params_table(const Model& model) {
    std::ostringstream os;
    auto counts = model.component_counts();
    const int64_t total = counts["total"];
    counts.erase("total");
    os << "component            scalars\n";
    for (const auto& [k, v] : counts) {
        os << k;
        for (size_t i = k.size(); i < 21; ++i) os << ' ';
        os << v << "\n";
    }
    os << "total                " << total << "\n";
    return os.str();
}

}  // namespace pmi
