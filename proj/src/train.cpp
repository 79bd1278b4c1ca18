#include "pmi/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pmi/error.hpp"
#include "pmi/gradcheck.hpp"
#include "pmi/traces.hpp"

namespace pmi {

namespace {

int64_t now_ms() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
}

std::vector<int64_t> permutation(int64_t n, RngStream stream) {
    std::vector<int64_t> p(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
    for (int64_t i = n - 1; i > 0; --i)
        std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(stream.below(static_cast<uint64_t>(i + 1)))]);
    return p;
}

TriangleConfig triangle_config(const RunConfig& cfg) {
    TriangleConfig tc;
    tc.points_per_cluster = static_cast<int>(cfg.get_int("triangles.points_per_cluster"));
    tc.cluster_radius = cfg.get_double("triangles.cluster_radius");
    tc.side_min = cfg.get_double("triangles.side_min");
    tc.side_max = cfg.get_double("triangles.side_max");
    tc.margin = cfg.get_double("triangles.margin");
    tc.neg_margin = cfg.get_double("triangles.neg_margin");
    return tc;
}

struct MetricsWriter {
    std::ofstream out;
    std::string run_id;
    explicit MetricsWriter(const std::string& path, const std::string& id) : out(path), run_id(id) {
        if (!out) throw IoError("cannot open metrics file " + path);
        out << "run_id,wall_ms,step,epoch,split,task,loss,accuracy,error_pct\n";
        out.flush();
    }
    void row(int64_t step, int64_t epoch, const std::string& split, const std::string& task,
             const Metrics& m) {
        char loss_buf[64], acc_buf[64], err_buf[64];
        std::snprintf(loss_buf, sizeof(loss_buf), "%.9g", m.loss);
        std::snprintf(acc_buf, sizeof(acc_buf), "%.9g", m.accuracy);
        std::snprintf(err_buf, sizeof(err_buf), "%.9g", m.error_pct);
        out << run_id << ',' << now_ms() << ',' << step << ',' << epoch << ',' << split << ',' << task << ','
            << loss_buf << ',' << acc_buf << ',' << err_buf << "\n";
        out.flush();
    }
};

}  // namespace

std::string run_id_of(const RunConfig& cfg) {
    const uint64_t h = mix64(hash64(cfg.to_text()) ^ cfg.seed());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%08x", static_cast<uint32_t>(h));
    return buf;
}

TaskData TaskData::load(const RunConfig& cfg, const std::string& data_dir) {
    TaskData d;
    const std::string& task = cfg.get("task");
    if (task == "babi") {
        d.task_ids_ = cfg.babi_tasks();
        d.babi_ = babi_load(data_dir, d.task_ids_, cfg.get_int("babi.s_max"));
        d.pad_ = cfg.get("babi.pad_mode") == "zeros" ? PadMode::Zeros : PadMode::Mask;
        d.meta_.text = true;
        d.meta_.vocab_size = static_cast<int64_t>(d.babi_.vocab.words.size());
        d.meta_.num_classes = static_cast<int64_t>(d.babi_.vocab.answers.size());
        d.meta_.s_max = d.babi_.s_max;
        for (int64_t i = 0; i < static_cast<int64_t>(d.babi_.train.size()); ++i)
            d.babi_task_train_[d.babi_.train[static_cast<size_t>(i)].task_id].push_back(i);
    } else if (task == "triangles") {
        d.tri_train_ = triangles_read(data_dir + "/train.tri", &d.image_size_);
        d.tri_test_ = triangles_read(data_dir + "/test.tri");
        const std::string vpath = data_dir + "/valid.tri";
        if (std::filesystem::exists(vpath)) d.tri_valid_ = triangles_read(vpath);
        d.task_ids_ = {0};
        d.meta_.text = false;
        d.meta_.image_h = d.image_size_;
        d.meta_.image_w = d.image_size_;
        d.meta_.patch = 4;
        d.meta_.num_classes = 2;
    } else {
        throw ConfigError("unknown task '" + task + "'");
    }
    return d;
}

int64_t TaskData::split_size(const std::string& split) const {
    if (meta_.text) {
        if (split == "train") return static_cast<int64_t>(babi_.train.size());
        if (split == "valid") return static_cast<int64_t>(babi_.valid.size());
        if (split == "test") return static_cast<int64_t>(babi_.test.size());
    } else {
        if (split == "train") return static_cast<int64_t>(tri_train_.size());
        if (split == "valid") return static_cast<int64_t>(tri_valid_.size());
        if (split == "test") return static_cast<int64_t>(tri_test_.size());
    }
    throw DataError("unknown split '" + split + "'");
}

TaskBatch TaskData::make_batch(const std::string& split, const std::vector<int64_t>& indices) const {
    if (meta_.text) {
        const std::vector<BabiStory>* src = split == "train"   ? &babi_.train
                                            : split == "valid" ? &babi_.valid
                                                               : &babi_.test;
        std::vector<const BabiStory*> stories;
        stories.reserve(indices.size());
        for (int64_t i : indices) stories.push_back(&(*src)[static_cast<size_t>(i)]);
        return babi_batch(stories, babi_.s_max, babi_.vocab, pad_);
    }
    const std::vector<TriangleSample>* src = split == "train"   ? &tri_train_
                                             : split == "valid" ? &tri_valid_
                                                                : &tri_test_;
    std::vector<const TriangleSample*> samples;
    samples.reserve(indices.size());
    for (int64_t i : indices) samples.push_back(&(*src)[static_cast<size_t>(i)]);
    return triangles_batch(samples, image_size_);
}

const std::vector<int64_t>& TaskData::task_train_indices(int task) const {
    auto it = babi_task_train_.find(task);
    if (it == babi_task_train_.end()) throw DataError("no training stories for task " + std::to_string(task));
    return it->second;
}

Checkpoint make_checkpoint(const RunConfig& cfg, const Model& model, const Adam* opt, int64_t step,
                           int64_t epoch) {
    Checkpoint c;
    c.seed = cfg.seed();
    c.step = step;
    c.epoch = epoch;
    c.opt_step = opt ? opt->step_count() : 0;
    c.config_text = cfg.to_text();
    for (const ag::Var& p : model.params().list()) c.tensors.emplace_back(p->name, p->value);
    if (model.persisted_wm.defined()) {
        c.tensors.emplace_back("wm_persist", model.persisted_wm);
        c.tensors.emplace_back("ltm_persist", model.persisted_ltm);
    }
    if (opt) {
        Adam* o = const_cast<Adam*>(opt);
        for (size_t i = 0; i < o->tracked().size(); ++i) {
            const std::string& name = model.params().list()[o->tracked()[i]]->name;
            c.tensors.emplace_back("opt.m." + name, o->first_moments()[i]);
            c.tensors.emplace_back("opt.v." + name, o->second_moments()[i]);
        }
    }
    return c;
}

void apply_checkpoint(const Checkpoint& ckpt, Model& model, Adam* opt) {
    for (const ag::Var& p : model.params().list()) {
        const Tensor* t = ckpt.find(p->name);
        if (!t) throw DataError("checkpoint is missing tensor '" + p->name + "'");
        if (t->shape() != p->value.shape() || t->dtype() != p->value.dtype())
            throw DataError("checkpoint tensor '" + p->name + "' has shape " + shape_str(t->shape()) +
                            ", model expects " + shape_str(p->value.shape()));
        p->value = *t;
    }
    if (const Tensor* t = ckpt.find("wm_persist")) model.persisted_wm = *t;
    if (const Tensor* t = ckpt.find("ltm_persist")) model.persisted_ltm = *t;
    if (opt) {
        for (size_t i = 0; i < opt->tracked().size(); ++i) {
            const std::string& name = model.params().list()[opt->tracked()[i]]->name;
            const Tensor* m = ckpt.find("opt.m." + name);
            const Tensor* v = ckpt.find("opt.v." + name);
            if (!m || !v) throw DataError("checkpoint is missing optimizer state for '" + name + "'");
            opt->first_moments()[i] = *m;
            opt->second_moments()[i] = *v;
        }
        opt->set_step_count(ckpt.opt_step);
    }
}

EvalResult evaluate_model(Model& model, const TaskData& data, const std::string& split, int64_t batch_size) {
    const int64_t n = data.split_size(split);
    if (n == 0) throw DataError("split '" + split + "' is empty or missing");
    EvalResult res;
    double loss_sum = 0.0;
    int64_t hits = 0;
    std::map<int, std::pair<int64_t, int64_t>> task_hits;  // task -> (hits, count)
    std::map<int, double> task_loss;
    for (int64_t at = 0; at < n; at += batch_size) {
        const int64_t len = std::min(batch_size, n - at);
        std::vector<int64_t> idx(static_cast<size_t>(len));
        for (int64_t i = 0; i < len; ++i) idx[static_cast<size_t>(i)] = at + i;
        TaskBatch batch = data.make_batch(split, idx);
        ag::NoGradGuard guard;
        ForwardCtx ctx;
        ctx.training = false;
        ForwardOut out = model.forward(batch, ctx);
        const int64_t K = out.logits->value.dim(1);
        for (int64_t b = 0; b < len; ++b) {
            int64_t best = 0;
            double bv = out.logits->value.get(b * K);
            for (int64_t j = 1; j < K; ++j) {
                const double v = out.logits->value.get(b * K + j);
                if (v > bv) {
                    bv = v;
                    best = j;
                }
            }
            // per-sample loss for exact weighted aggregation
            double mx = out.logits->value.get(b * K);
            for (int64_t j = 1; j < K; ++j) mx = std::max(mx, out.logits->value.get(b * K + j));
            double lse = 0.0;
            for (int64_t j = 0; j < K; ++j) lse += std::exp(out.logits->value.get(b * K + j) - mx);
            const double sample_loss =
                mx + std::log(lse) - out.logits->value.get(b * K + batch.labels[static_cast<size_t>(b)]);
            loss_sum += sample_loss;
            const int task = batch.task_ids[static_cast<size_t>(b)];
            auto& th = task_hits[task];
            ++th.second;
            task_loss[task] += sample_loss;
            if (best == batch.labels[static_cast<size_t>(b)]) {
                ++hits;
                ++th.first;
            }
        }
    }
    res.overall.count = n;
    res.overall.loss = loss_sum / static_cast<double>(n);
    res.overall.accuracy = 100.0 * static_cast<double>(hits) / static_cast<double>(n);
    res.overall.error_pct = 100.0 - res.overall.accuracy;
    for (const auto& [task, hc] : task_hits) {
        Metrics m;
        m.count = hc.second;
        m.loss = task_loss[task] / static_cast<double>(hc.second);
        m.accuracy = 100.0 * static_cast<double>(hc.first) / static_cast<double>(hc.second);
        m.error_pct = 100.0 - m.accuracy;
        res.per_task[task] = m;
    }
    return res;
}

namespace {

void update_persisted(Model& model, const ForwardOut& out) {
    if (model.config().persistence != ModelConfig::Persistence::CrossBatchDetached) return;
    if (out.final_wm.empty()) return;
    const Tensor& wm = out.final_wm.back().state->value;
    const Tensor& ltm = out.final_ltm.back().state->value;
    const double inv_b = 1.0 / static_cast<double>(wm.dim(0));
    model.persisted_wm = mul_scalar(reduce_to_shape(wm, Shape(wm.shape().begin() + 1, wm.shape().end())), inv_b);
    model.persisted_ltm =
        mul_scalar(reduce_to_shape(ltm, Shape(ltm.shape().begin() + 1, ltm.shape().end())), inv_b);
}

}  // namespace

TrainResult train_run(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    const uint64_t seed = cfg.seed();
    TaskData data = TaskData::load(cfg, data_dir);
    Model model(cfg.model_config(), data.meta(), seed);
    AdamConfig acfg = cfg.adam_config();
    Adam opt(model.params(), acfg);

    int64_t start_step = 0;
    const std::string& resume = cfg.get("resume");
    if (!resume.empty()) {
        Checkpoint ckpt = checkpoint_load(resume);
        RunConfig stored = RunConfig::from_text(ckpt.config_text, resume);
        auto mismatches = cfg.diff(stored, {"resume"});
        if (!mismatches.empty()) {
            std::string msg = "resume refused: config does not match checkpoint:";
            for (const auto& m : mismatches) msg += "\n  " + m;
            throw ConfigError(msg);
        }
        apply_checkpoint(ckpt, model, &opt);
        start_step = ckpt.step;
    }

    const int64_t B = cfg.get_int("batch_size");
    const int64_t epochs = cfg.get_int("epochs");
    const int64_t train_n = data.split_size("train");
    if (train_n == 0) throw DataError("empty training split");
    const bool joint = data.is_text() && data.task_ids().size() > 1;
    const int64_t steps_per_epoch = std::max<int64_t>(1, train_n / B);
    const int64_t total_steps = epochs * steps_per_epoch;
    const int64_t eval_every = cfg.get_int("eval_every");
    const int64_t ckpt_every = cfg.get_int("checkpoint_every");
    const int64_t log_every = cfg.get_int("log_every");

    TrainResult result;
    result.metrics_path = out_dir + "/metrics.csv";
    MetricsWriter metrics(result.metrics_path, run_id_of(cfg));

    std::vector<int64_t> epoch_perm;
    int64_t perm_epoch = -1;
    for (int64_t step = start_step; step < total_steps; ++step) {
        const int64_t epoch = step / steps_per_epoch;
        const int64_t pos = step % steps_per_epoch;
        std::vector<int64_t> idx;
        int batch_task = 0;
        if (joint) {
            RngStream pick = derive_stream(seed, "task_pick", static_cast<uint64_t>(step));
            batch_task = data.task_ids()[pick.below(data.task_ids().size())];
            const auto& pool = data.task_train_indices(batch_task);
            RngStream samp = derive_stream(seed, "joint_sample", static_cast<uint64_t>(step));
            for (int64_t i = 0; i < B; ++i)
                idx.push_back(pool[static_cast<size_t>(samp.below(pool.size()))]);
        } else {
            if (perm_epoch != epoch) {
                epoch_perm = permutation(train_n, derive_stream(seed, "shuffle", static_cast<uint64_t>(epoch)));
                perm_epoch = epoch;
            }
            const int64_t take = std::min(B, train_n);
            for (int64_t i = 0; i < take; ++i)
                idx.push_back(epoch_perm[static_cast<size_t>((pos * B + i) % train_n)]);
            batch_task = data.is_text() ? data.task_ids()[0] : 0;
        }
        TaskBatch batch = data.make_batch("train", idx);
        ForwardCtx ctx;
        ctx.training = true;
        ctx.dropout_stream = derive_stream(seed, "dropout", static_cast<uint64_t>(step));
        ForwardOut out = model.forward(batch, ctx);
        auto [loss, m] = loss_and_metrics(out.logits, batch.labels);
        model.params().zero_grad();
        ag::backward(loss);
        opt.step(model.params());
        update_persisted(model, out);
        result.step_losses.push_back(m.loss);
        if (step % log_every == 0)
            metrics.row(step, epoch, "train", std::to_string(batch_task), m);
        if (ckpt_every > 0 && (step + 1) % ckpt_every == 0)
            checkpoint_save(out_dir + "/ckpt_step" + std::to_string(step + 1) + ".pmk",
                            make_checkpoint(cfg, model, &opt, step + 1, (step + 1) / steps_per_epoch));
        const bool epoch_end = pos == steps_per_epoch - 1;
        if (epoch_end && eval_every > 0 && (epoch + 1) % eval_every == 0) {
            for (const char* split : {"valid", "test"}) {
                if (data.split_size(split) == 0) continue;
                EvalResult ev = evaluate_model(model, data, split, B);
                metrics.row(step + 1, epoch + 1, split, "all", ev.overall);
                if (data.is_text())
                    for (const auto& [task, tm] : ev.per_task)
                        metrics.row(step + 1, epoch + 1, split, std::to_string(task), tm);
            }
        }
    }

    if (total_steps > 0) {
        for (const char* split : {"valid", "test"}) {
            if (data.split_size(split) == 0) continue;
            EvalResult ev = evaluate_model(model, data, split, B);
            if (std::string(split) == "valid") result.final_valid = ev;
            else result.final_test = ev;
        }
    }
    result.checkpoint_path = out_dir + "/checkpoint.pmk";
    checkpoint_save(result.checkpoint_path,
                    make_checkpoint(cfg, model, &opt, total_steps, epochs));
    return result;
}

EvalResult evaluate_checkpoint(const std::string& ckpt_path, const std::string& data_dir,
                               const std::string& split) {
    Checkpoint ckpt = checkpoint_load(ckpt_path);
    RunConfig cfg = RunConfig::from_text(ckpt.config_text, ckpt_path);
    TaskData data = TaskData::load(cfg, data_dir);
    Model model(cfg.model_config(), data.meta(), cfg.seed());
    apply_checkpoint(ckpt, model, nullptr);
    return evaluate_model(model, data, split, cfg.get_int("batch_size"));
}

std::vector<std::string> dump_traces_run(const std::string& ckpt_path, const std::string& data_dir,
                                         const std::string& out_dir, const std::string& split,
                                         int64_t batch_size, bool per_head) {
    Checkpoint ckpt = checkpoint_load(ckpt_path);
    RunConfig cfg = RunConfig::from_text(ckpt.config_text, ckpt_path);
    TaskData data = TaskData::load(cfg, data_dir);
    Model model(cfg.model_config(), data.meta(), cfg.seed());
    apply_checkpoint(ckpt, model, nullptr);
    const int64_t n = data.split_size(split);
    if (n == 0) throw DataError("split '" + split + "' is empty or missing");
    std::vector<int64_t> idx;
    for (int64_t i = 0; i < std::min(batch_size, n); ++i) idx.push_back(i);
    TaskBatch batch = data.make_batch(split, idx);
    ag::NoGradGuard guard;
    TraceSink sink;
    ForwardCtx ctx;
    ctx.training = false;
    ctx.sink = &sink;
    model.forward(batch, ctx);
    TraceDumpOptions opt;
    opt.per_head = per_head;
    return dump_trace_files(sink, data.meta(), out_dir, opt);
}

TaskMeta nominal_meta(const RunConfig& cfg, bool tiny) {
    TaskMeta meta;
    if (cfg.get("task") == "babi") {
        meta.text = true;
        if (tiny) {
            meta.vocab_size = 13;
            meta.s_max = 3;
            meta.num_classes = 4;
        } else {
            // standard bAbI-20k joint vocabulary footprint
            meta.vocab_size = 160;
            meta.s_max = 10;
            meta.num_classes = 32;
        }
    } else {
        meta.text = false;
        meta.patch = 4;
        meta.image_h = meta.image_w = tiny ? 16 : 64;
        meta.num_classes = 2;
    }
    return meta;
}

TaskBatch nominal_batch(const TaskMeta& meta, int64_t batch, uint64_t seed) {
    TaskBatch b;
    RngStream rng = derive_stream(seed, "nominal_batch");
    if (meta.text) {
        b.is_text = true;
        const int64_t S = meta.s_max + 1;
        b.slot_tokens.resize(static_cast<size_t>(batch));
        b.mask = Tensor::zeros({batch, S + 1}, DType::F32);
        for (int64_t i = 0; i < batch; ++i) {
            auto& slots = b.slot_tokens[static_cast<size_t>(i)];
            slots.resize(static_cast<size_t>(S));
            const int64_t used = 1 + static_cast<int64_t>(rng.below(static_cast<uint64_t>(meta.s_max)));
            for (int64_t s = 0; s < used; ++s) {
                const int64_t words = 2 + static_cast<int64_t>(rng.below(3));
                for (int64_t w = 0; w < words; ++w)
                    slots[static_cast<size_t>(s)].push_back(
                        static_cast<int32_t>(rng.below(static_cast<uint64_t>(meta.vocab_size))));
                b.mask.set(i * (S + 1) + s, 1.0);
            }
            const int64_t qwords = 2 + static_cast<int64_t>(rng.below(2));
            for (int64_t w = 0; w < qwords; ++w)
                slots[static_cast<size_t>(meta.s_max)].push_back(
                    static_cast<int32_t>(rng.below(static_cast<uint64_t>(meta.vocab_size))));
            b.mask.set(i * (S + 1) + meta.s_max, 1.0);
            b.mask.set(i * (S + 1) + meta.s_max + 1, 1.0);
            b.labels.push_back(static_cast<int32_t>(rng.below(static_cast<uint64_t>(meta.num_classes))));
            b.task_ids.push_back(0);
            b.story_ids.push_back(i);
        }
    } else {
        b.is_text = false;
        b.images = Tensor::zeros({batch, meta.image_h, meta.image_w}, DType::F32);
        for (int64_t i = 0; i < b.images.numel(); ++i)
            if (rng.uniform() < 0.05) b.images.set(i, 1.0);
        for (int64_t i = 0; i < batch; ++i) {
            b.labels.push_back(static_cast<int32_t>(rng.below(2)));
            b.task_ids.push_back(0);
            b.story_ids.push_back(i);
        }
    }
    return b;
}

GradCheckReport grad_check_run(const RunConfig& cfg, double h, double tol) {
    ModelConfig mc = cfg.model_config();
    mc.dtype = DType::F64;
    mc.dropout = 0.0;
    TaskMeta meta = nominal_meta(cfg, /*tiny=*/true);
    Model model(mc, meta, cfg.seed());
    TaskBatch batch = nominal_batch(meta, 2, cfg.seed());
    TopKFreeze freeze;
    auto f = [&]() {
        ForwardCtx ctx;
        ctx.training = false;
        ctx.freeze = &freeze;
        ForwardOut out = model.forward(batch, ctx);
        return ag::cross_entropy(out.logits, batch.labels);
    };
    return grad_check(f, model.params(), h, tol);
}

std::string count_params_run(const RunConfig& cfg) {
    std::ostringstream os;
    TaskMeta meta = nominal_meta(cfg, /*tiny=*/false);
    ModelConfig shared_cfg = cfg.model_config();
    shared_cfg.param_sharing = ModelConfig::Sharing::Shared;
    Model shared(shared_cfg, meta, cfg.seed());
    os << "param_sharing = shared\n" << count_params_table(shared);
    if (shared_cfg.kind == ModelConfig::Kind::Mitr) {
        ModelConfig per_cfg = shared_cfg;
        per_cfg.param_sharing = ModelConfig::Sharing::PerLayer;
        Model per_layer(per_cfg, meta, cfg.seed());
        os << "\nparam_sharing = per_layer\n" << count_params_table(per_layer);
        os << "\npmi bundle scalars: shared " << shared.pmi_bundle_scalars() << ", per_layer "
           << per_layer.pmi_bundle_scalars() << " (= " << shared_cfg.layers << " x "
           << shared.pmi_bundle_scalars() << ": "
           << (per_layer.pmi_bundle_scalars() == shared.pmi_bundle_scalars() * shared_cfg.layers ? "exact"
                                                                                                 : "MISMATCH")
           << ")\n";
    }
    return os.str();
}

void gen_triangles_run(const RunConfig& cfg, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    TriangleConfig tc = triangle_config(cfg);
    const uint64_t seed = cfg.seed();
    const int64_t image_size = tc.image_size;
    const std::pair<const char*, int64_t> splits[] = {
        {"train", cfg.get_int("triangles.train_count")},
        {"valid", cfg.get_int("triangles.valid_count")},
        {"test", cfg.get_int("triangles.test_count")},
    };
    for (const auto& [name, count] : splits) {
        if (count <= 0) continue;
        RngStream rng = derive_stream(seed, std::string("triangles/") + name);
        auto samples = triangle_gen(rng, count, tc);
        triangles_write(out_dir + "/" + name + ".tri", samples, image_size);
    }
}

}  // namespace pmi
