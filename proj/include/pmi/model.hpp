#pragma once

#include <map>
#include <string>
#include <vector>

#include "pmi/inference.hpp"

namespace pmi {

struct ModelConfig {
    enum class Kind { Mitr, Transformer };
    enum class Sharing { Shared, PerLayer };
    enum class Persistence { PerBatch, CrossBatchDetached };

    Kind kind = Kind::Mitr;
    int layers = 8;
    int heads = 8;          // inference reads
    int memory_heads = 8;   // write channel
    int64_t dim = 256;      // D == D_m
    int64_t slots = 8;      // N
    int64_t segments = 5;   // C (paper's M)
    int64_t top_k = 5;
    int mlp_layers = 4;
    double dropout = 0.1;
    double alpha_init = 0.7;
    bool alpha_trainable = true;
    SparseRenorm sparse_renorm = SparseRenorm::None;
    bool gate_candidate_tanh = true;
    double gate_b_input = 0.0;
    double gate_b_forget = 1.0;
    bool attn_out_proj = true;
    bool block_residual = false;
    Sharing memory_sharing = Sharing::Shared;
    Sharing param_sharing = Sharing::Shared;
    Persistence persistence = Persistence::PerBatch;
    int ffn_mult = 4;  // control transformer FFN width multiplier
    DType dtype = DType::F32;

    void validate() const;
};

struct TaskMeta {
    bool text = true;
    int64_t vocab_size = 0;
    int64_t s_max = 0;  // sentence slots
    int64_t image_h = 0, image_w = 0, patch = 4;
    int64_t num_classes = 2;

    int64_t positions() const {
        return text ? s_max + 2 : (image_h / patch) * (image_w / patch) + 1;
    }
    int64_t patches() const { return (image_h / patch) * (image_w / patch); }
};

struct TaskBatch {
    bool is_text = true;
    // text: [B][s_max + 1][words]; slot s_max is the question
    std::vector<std::vector<std::vector<int32_t>>> slot_tokens;
    Tensor images;  // [B, H, W] in [0,1]
    Tensor mask;    // [B, positions] 1/0
    std::vector<int32_t> labels;
    std::vector<int32_t> task_ids;
    std::vector<int64_t> story_ids;

    int64_t batch() const { return is_text ? static_cast<int64_t>(slot_tokens.size()) : images.dim(0); }
};

struct ForwardCtx {
    bool training = false;
    TraceSink* sink = nullptr;
    TopKFreeze* freeze = nullptr;
    RngStream dropout_stream;
};

struct ForwardOut {
    ag::Var logits;
    ag::Var hidden;  // final h, [B, T, D]
    std::vector<WorkingMemory> final_wm;
    std::vector<LongTermMemory> final_ltm;
    int distinct_memory_chains = 0;
};

struct PmiBundle {
    WmWriteParams write;
    GateParams gate;
    LtmWriteParams ltm;
    FusionParams fusion;
};

struct Metrics {
    double loss = 0.0;
    double accuracy = 0.0;   // percent
    double error_pct = 0.0;  // 100 - accuracy
    int64_t count = 0;
};

class Model {
  public:
    Model(const ModelConfig& cfg, const TaskMeta& meta, uint64_t seed);

    ForwardOut forward(const TaskBatch& batch, ForwardCtx& ctx);

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const ModelConfig& config() const { return cfg_; }
    const TaskMeta& meta() const { return meta_; }

    // per-component trainable-scalar counts, plus "total"
    std::map<std::string, int64_t> component_counts() const;
    int64_t pmi_bundle_scalars() const;

    // cross-batch persisted memory (empty tensors when unset)
    Tensor persisted_wm, persisted_ltm;

  private:
    ModelConfig cfg_;
    TaskMeta meta_;
    ParamStore params_;

    // embeddings
    ag::Var token_table_, sent_pos_, q_pos_, cls_;
    ag::Var patch_proj_, pos_table_;
    ag::Var head_w_, head_b_;

    std::vector<MemoryInitParams> mem_init_;  // 1 or layers
    std::vector<PmiBundle> bundles_;          // 1 or layers (mitr)

    // control transformer
    struct TrLayer {
        AttentionParams attn;
        ag::Var ln1_g, ln1_b, ln2_g, ln2_b;
        ag::Var ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    };
    std::vector<TrLayer> tr_layers_;

    ag::Var embed(const TaskBatch& batch, ForwardCtx& ctx) const;
    PmiBundle make_bundle(const std::string& prefix, uint64_t seed);
};

// softmax cross-entropy (mean over batch) + batch accuracy/error%.
std::pair<ag::Var, Metrics> loss_and_metrics(const ag::Var& logits, const std::vector<int32_t>& labels);

// printable per-component parameter table
std::string count_params_table(const Model& model);

}  // namespace pmi
