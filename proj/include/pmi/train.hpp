#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pmi/babi.hpp"
#include "pmi/checkpoint.hpp"
#include "pmi/config.hpp"
#include "pmi/gradcheck.hpp"
#include "pmi/model.hpp"
#include "pmi/triangles.hpp"

namespace pmi {

struct EvalResult {
    Metrics overall;
    std::map<int, Metrics> per_task;  // bAbI: task id -> metrics
};

struct TrainResult {
    std::string checkpoint_path;
    std::string metrics_path;
    std::vector<double> step_losses;
    std::optional<EvalResult> final_valid;
    std::optional<EvalResult> final_test;
};

// Loaded task data; serves deterministic batches for any split.
class TaskData {
  public:
    static TaskData load(const RunConfig& cfg, const std::string& data_dir);

    const TaskMeta& meta() const { return meta_; }
    bool is_text() const { return meta_.text; }
    int64_t split_size(const std::string& split) const;
    TaskBatch make_batch(const std::string& split, const std::vector<int64_t>& indices) const;
    const std::vector<int>& task_ids() const { return task_ids_; }
    // train indices belonging to one task (text only)
    const std::vector<int64_t>& task_train_indices(int task) const;

  private:
    TaskMeta meta_;
    PadMode pad_ = PadMode::Mask;
    std::vector<int> task_ids_;
    // text
    BabiDataset babi_;
    std::map<int, std::vector<int64_t>> babi_task_train_;
    // images
    std::vector<TriangleSample> tri_train_, tri_valid_, tri_test_;
    int64_t image_size_ = 64;
};

Checkpoint make_checkpoint(const RunConfig& cfg, const Model& model, const Adam* opt, int64_t step,
                           int64_t epoch);
void apply_checkpoint(const Checkpoint& ckpt, Model& model, Adam* opt);

// Runs the configured number of epochs; writes metrics.csv, periodic and
// final checkpoints under out_dir; resumes bit-exactly when cfg `resume`
// points at a checkpoint of the same config.
TrainResult train_run(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir);

EvalResult evaluate_model(Model& model, const TaskData& data, const std::string& split, int64_t batch_size);
EvalResult evaluate_checkpoint(const std::string& ckpt_path, const std::string& data_dir,
                               const std::string& split);

// Traced forward on one deterministic batch from `split`; exports matrices.
std::vector<std::string> dump_traces_run(const std::string& ckpt_path, const std::string& data_dir,
                                         const std::string& out_dir, const std::string& split = "test",
                                         int64_t batch_size = 1, bool per_head = false);

// Generates train/valid/test containers per the triangles.* config keys.
void gen_triangles_run(const RunConfig& cfg, const std::string& out_dir);

// deterministic run id from (config text, seed)
std::string run_id_of(const RunConfig& cfg);

// Synthetic task shape used when no data files are involved (grad-check,
// parameter counting): a small text batch for babi configs, small images
// otherwise.
TaskMeta nominal_meta(const RunConfig& cfg, bool tiny);
TaskBatch nominal_batch(const TaskMeta& meta, int64_t batch, uint64_t seed);

// Full-model gradient check at 64-bit on a deterministic synthetic batch,
// with frozen top-k supports across the finite-difference probes.
GradCheckReport grad_check_run(const RunConfig& cfg, double h, double tol);

// Parameter table for the config in both sharing modes, plus the exact
// per_layer == layers x shared identity of the PMI bundle.
std::string count_params_run(const RunConfig& cfg);

}  // namespace pmi
