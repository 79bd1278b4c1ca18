#include "pmi.h"

#include <cstring>
#include <string>

#include <json.hpp>

#include "pmi/config.hpp"
#include "pmi/error.hpp"
#include "pmi/train.hpp"

struct pmi_config {
    pmi::RunConfig cfg;
};

namespace {

thread_local std::string g_last_error;

int classify(const std::exception& e) {
    g_last_error = e.what();
    if (dynamic_cast<const pmi::ConfigError*>(&e)) return PMI_ERR_CONFIG;
    if (dynamic_cast<const pmi::DataError*>(&e)) return PMI_ERR_DATA;
    return PMI_ERR_INTERNAL;
}

template <class F>
int guarded(F&& f) {
    try {
        f();
        g_last_error.clear();
        return PMI_OK;
    } catch (const std::exception& e) {
        return classify(e);
    } catch (...) {
        g_last_error = "unknown error";
        return PMI_ERR_INTERNAL;
    }
}

void fill_buf(char* buf, size_t cap, const std::string& s) {
    if (!buf || cap == 0) return;
    const size_t n = std::min(cap - 1, s.size());
    std::memcpy(buf, s.data(), n);
    buf[n] = '\0';
}

nlohmann::json metrics_json(const pmi::Metrics& m) {
    return {{"loss", m.loss},
            {"accuracy", m.accuracy},
            {"error_pct", m.error_pct},
            {"count", m.count},
            {"failed_over_5pct", m.error_pct > 5.0}};
}

}  // namespace

extern "C" {

const char* pmi_version(void) { return "0.1.0"; }

const char* pmi_last_error(void) { return g_last_error.c_str(); }

pmi_config* pmi_config_preset(const char* name) {
    try {
        return new pmi_config{pmi::RunConfig::preset(name ? name : "")};
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return nullptr;
    }
}

pmi_config* pmi_config_default(void) { return new pmi_config{pmi::RunConfig()}; }

pmi_config* pmi_config_from_file(const char* path) {
    try {
        return new pmi_config{pmi::RunConfig::from_file(path ? path : "")};
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return nullptr;
    }
}

void pmi_config_free(pmi_config* cfg) { delete cfg; }

int pmi_config_set(pmi_config* cfg, const char* key, const char* value) {
    if (!cfg || !key || !value) {
        g_last_error = "null argument";
        return PMI_ERR_CONFIG;
    }
    return guarded([&] { cfg->cfg.set(key, value); });
}

int pmi_config_get(const pmi_config* cfg, const char* key, char* buf, size_t cap) {
    if (!cfg || !key) {
        g_last_error = "null argument";
        return PMI_ERR_CONFIG;
    }
    return guarded([&] { fill_buf(buf, cap, cfg->cfg.get(key)); });
}

int pmi_config_validate(const pmi_config* cfg) {
    if (!cfg) {
        g_last_error = "null config";
        return PMI_ERR_CONFIG;
    }
    return guarded([&] { cfg->cfg.validate(); });
}

int pmi_config_text(const pmi_config* cfg, char* buf, size_t cap) {
    if (!cfg) {
        g_last_error = "null config";
        return PMI_ERR_CONFIG;
    }
    return guarded([&] { fill_buf(buf, cap, cfg->cfg.to_text()); });
}

int pmi_train(const pmi_config* cfg, const char* data_dir, const char* out_dir) {
    if (!cfg || !data_dir || !out_dir) {
        g_last_error = "null argument";
        return PMI_ERR_CONFIG;
    }
    return guarded([&] { pmi::train_run(cfg->cfg, data_dir, out_dir); });
}

int pmi_evaluate(const char* checkpoint, const char* data_dir, const char* split, char* buf, size_t cap) {
    if (!checkpoint || !data_dir || !split) {
        g_last_error = "null argument";
        return PMI_ERR_CONFIG;
    }
    return guarded([&] {
        pmi::EvalResult res = pmi::evaluate_checkpoint(checkpoint, data_dir, split);
        nlohmann::json j;
        j["split"] = split;
        j["overall"] = metrics_json(res.overall);
        nlohmann::json tasks = nlohmann::json::object();
        for (const auto& [task, m] : res.per_task) tasks[std::to_string(task)] = metrics_json(m);
        j["tasks"] = tasks;
        fill_buf(buf, cap, j.dump(2));
    });
}

int pmi_dump_traces(const char* checkpoint, const char* data_dir, const char* out_dir, int per_head) {
    if (!checkpoint || !data_dir || !out_dir) {
        g_last_error = "null argument";
        return PMI_ERR_CONFIG;
    }
    return guarded(
        [&] { pmi::dump_traces_run(checkpoint, data_dir, out_dir, "test", 1, per_head != 0); });
}

int pmi_gen_triangles(const pmi_config* cfg, const char* out_dir) {
    if (!cfg || !out_dir) {
        g_last_error = "null argument";
        return PMI_ERR_CONFIG;
    }
    return guarded([&] { pmi::gen_triangles_run(cfg->cfg, out_dir); });
}

int pmi_grad_check(const pmi_config* cfg, double h, double tol, double* max_rel_err, char* buf, size_t cap) {
    if (!cfg) {
        g_last_error = "null config";
        return PMI_ERR_CONFIG;
    }
    int result = PMI_OK;
    std::string fail_msg;
    int rc = guarded([&] {
        pmi::GradCheckReport report = pmi::grad_check_run(cfg->cfg, h, tol);
        if (max_rel_err) *max_rel_err = report.max_rel_err;
        fill_buf(buf, cap, report.to_string());
        if (!report.passed) {
            fail_msg = "gradient check failed: max rel err " + std::to_string(report.max_rel_err);
            result = PMI_ERR_INTERNAL;
        }
    });
    if (rc != PMI_OK) return rc;
    if (result != PMI_OK) g_last_error = fail_msg;
    return result;
}

int pmi_count_params(const pmi_config* cfg, char* buf, size_t cap) {
    if (!cfg) {
        g_last_error = "null config";
        return PMI_ERR_CONFIG;
    }
    return guarded([&] { fill_buf(buf, cap, pmi::count_params_run(cfg->cfg)); });
}

}  // extern "C"
