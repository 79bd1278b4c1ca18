// CLI front end for the PMI/MITR toolkit. Talks to the core exclusively
// through the C API in pmi.h.
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pmi.h"

namespace {

struct ConfigDeleter {
    void operator()(pmi_config* c) const { pmi_config_free(c); }
};
using ConfigPtr = std::unique_ptr<pmi_config, ConfigDeleter>;

int fail(int rc) {
    std::fprintf(stderr, "error: %s\n", pmi_last_error());
    return rc;
}

struct CommonOpts {
    std::string preset, config_file, data_dir = ".", out_dir = "out";
    std::vector<std::string> sets;
    int64_t seed = -1;
    bool seed_given = false;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool with_data = true, bool with_out = true) {
    cmd->add_option("--preset", o.preset, "configuration preset (babi, triangles)");
    cmd->add_option("--config", o.config_file, "flat key = value config file");
    cmd->add_option("--set", o.sets, "override: --set key=value")->take_all();
    cmd->add_option("--seed", o.seed, "run seed")->each([&o](const std::string&) { o.seed_given = true; });
    if (with_data) cmd->add_option("--data", o.data_dir, "data directory");
    if (with_out) cmd->add_option("--out", o.out_dir, "output directory");
}

// builds the config from preset or file plus --set/--seed overrides;
// --config replaces --preset when both are given
ConfigPtr build_config(const CommonOpts& o, int& rc) {
    ConfigPtr cfg;
    if (!o.config_file.empty()) {
        cfg.reset(pmi_config_from_file(o.config_file.c_str()));
    } else if (!o.preset.empty()) {
        cfg.reset(pmi_config_preset(o.preset.c_str()));
    } else {
        cfg.reset(pmi_config_default());
    }
    if (!cfg) {
        rc = PMI_ERR_CONFIG;
        return cfg;
    }
    for (const std::string& kv : o.sets) {
        size_t eq = kv.find('=');
        if (eq == std::string::npos) {
            std::fprintf(stderr, "error: --set expects key=value, got '%s'\n", kv.c_str());
            rc = PMI_ERR_CONFIG;
            cfg.reset();
            return cfg;
        }
        if (int r = pmi_config_set(cfg.get(), kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str());
            r != PMI_OK) {
            rc = r;
            cfg.reset();
            return cfg;
        }
    }
    if (o.seed_given) {
        if (int r = pmi_config_set(cfg.get(), "seed", std::to_string(o.seed).c_str()); r != PMI_OK) {
            rc = r;
            cfg.reset();
            return cfg;
        }
    }
    rc = PMI_OK;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PMI dual-level memory toolkit"};
    app.require_subcommand(1);

    CommonOpts train_o, eval_o, traces_o, gen_o, grad_o, count_o;
    std::string eval_ckpt, eval_split = "test", traces_ckpt;
    bool traces_per_head = false;
    double grad_h = 1e-4, grad_tol = 1e-4;

    CLI::App* train_cmd = app.add_subcommand("train", "train a model");
    add_common(train_cmd, train_o);

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(eval_cmd, eval_o, true, false);
    eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
    eval_cmd->add_option("--split", eval_split, "train|valid|test");

    CLI::App* traces_cmd = app.add_subcommand("dump-traces", "export attention matrices");
    add_common(traces_cmd, traces_o);
    traces_cmd->add_option("--ckpt", traces_ckpt, "checkpoint path")->required();
    traces_cmd->add_flag("--per-head", traces_per_head, "keep heads separate");

    CLI::App* gen_cmd = app.add_subcommand("gen-triangles", "generate triangle datasets");
    add_common(gen_cmd, gen_o, false, true);

    CLI::App* grad_cmd = app.add_subcommand("grad-check", "full-model finite-difference gradient check");
    add_common(grad_cmd, grad_o, false, false);
    grad_cmd->add_option("--h", grad_h, "central-difference step");
    grad_cmd->add_option("--tol", grad_tol, "max relative error tolerance");

    CLI::App* count_cmd = app.add_subcommand("count-params", "per-component parameter table");
    add_common(count_cmd, count_o, false, false);

    CLI11_PARSE(app, argc, argv);

    int rc = PMI_OK;
    if (train_cmd->parsed()) {
        ConfigPtr cfg = build_config(train_o, rc);
        if (!cfg) return fail(rc);
        if ((rc = pmi_train(cfg.get(), train_o.data_dir.c_str(), train_o.out_dir.c_str())) != PMI_OK)
            return fail(rc);
        std::printf("training complete; outputs in %s\n", train_o.out_dir.c_str());
    } else if (eval_cmd->parsed()) {
        std::string buf(1 << 16, '\0');
        if ((rc = pmi_evaluate(eval_ckpt.c_str(), eval_o.data_dir.c_str(), eval_split.c_str(), buf.data(),
                               buf.size())) != PMI_OK)
            return fail(rc);
        std::printf("%s\n", buf.c_str());
    } else if (traces_cmd->parsed()) {
        if ((rc = pmi_dump_traces(traces_ckpt.c_str(), traces_o.data_dir.c_str(), traces_o.out_dir.c_str(),
                                  traces_per_head ? 1 : 0)) != PMI_OK)
            return fail(rc);
        std::printf("traces written to %s\n", traces_o.out_dir.c_str());
    } else if (gen_cmd->parsed()) {
        ConfigPtr cfg = build_config(gen_o, rc);
        if (!cfg) return fail(rc);
        if ((rc = pmi_config_set(cfg.get(), "task", "triangles")) != PMI_OK) return fail(rc);
        if ((rc = pmi_gen_triangles(cfg.get(), gen_o.out_dir.c_str())) != PMI_OK) return fail(rc);
        std::printf("triangle datasets written to %s\n", gen_o.out_dir.c_str());
    } else if (grad_cmd->parsed()) {
        ConfigPtr cfg = build_config(grad_o, rc);
        if (!cfg) return fail(rc);
        double max_err = 0.0;
        std::string buf(1 << 16, '\0');
        rc = pmi_grad_check(cfg.get(), grad_h, grad_tol, &max_err, buf.data(), buf.size());
        std::printf("%s", buf.c_str());
        if (rc != PMI_OK) return fail(rc);
    } else if (count_cmd->parsed()) {
        ConfigPtr cfg = build_config(count_o, rc);
        if (!cfg) return fail(rc);
        std::string buf(1 << 16, '\0');
        if ((rc = pmi_count_params(cfg.get(), buf.data(), buf.size())) != PMI_OK) return fail(rc);
        std::printf("%s", buf.c_str());
    }
    return 0;
}
