#include "pmi/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "pmi/error.hpp"
#include "pmi/triangles.hpp"

namespace pmi {

namespace {

const std::map<std::string, std::string>& default_kv() {
    static const std::map<std::string, std::string> defaults = {
        {"model", "mitr"},
        {"task", "babi"},
        {"seed", "1"},
        {"epochs", "1"},
        {"batch_size", "64"},
        {"optimizer", "adam"},
        {"lr", "0.0002"},
        {"weight_decay", "0"},
        {"eval_every", "1"},
        {"checkpoint_every", "0"},
        {"log_every", "1"},
        {"dtype", "f32"},
        {"resume", ""},
        {"layers", "8"},
        {"heads", "8"},
        {"memory_heads", "8"},
        {"dim", "256"},
        {"slots", "8"},
        {"segments", "5"},
        {"top_k", "5"},
        {"mlp_layers", "4"},
        {"dropout", "0.1"},
        {"alpha_init", "0.7"},
        {"alpha_trainable", "true"},
        {"sparse_renorm", "none"},
        {"gate_candidate_tanh", "true"},
        {"gate_b_input", "0"},
        {"gate_b_forget", "1"},
        {"attn_out_proj", "true"},
        {"block_residual", "false"},
        {"memory_sharing", "shared"},
        {"param_sharing", "shared"},
        {"memory_persistence", "per_batch"},
        {"ffn_mult", "4"},
        {"babi.tasks", "1"},
        {"babi.s_max", "0"},
        {"babi.pad_mode", "mask"},
        {"triangles.train_count", "10000"},
        {"triangles.valid_count", "0"},
        {"triangles.test_count", "2000"},
        {"triangles.points_per_cluster", "8"},
        {"triangles.cluster_radius", "2.5"},
        {"triangles.side_min", "12"},
        {"triangles.side_max", "40"},
        {"triangles.margin", "4"},
        {"triangles.neg_margin", "0.15"},
        {"trace.per_head", "false"},
    };
    return defaults;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

const std::vector<std::string>& RunConfig::known_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> k;
        for (const auto& [key, _] : default_kv()) k.push_back(key);
        return k;
    }();
    return keys;
}

RunConfig::RunConfig() : kv_(default_kv()) {}

RunConfig RunConfig::preset(const std::string& name) {
    RunConfig cfg;
    if (name == "babi") {
        cfg.set("task", "babi");
        cfg.set("layers", "8");
        cfg.set("heads", "8");
        cfg.set("memory_heads", "8");
        cfg.set("dim", "256");
        cfg.set("mlp_layers", "4");
        cfg.set("optimizer", "adam");
        cfg.set("lr", "0.0002");
        cfg.set("batch_size", "64");
        cfg.set("alpha_init", "0.7");
        cfg.set("epochs", "200");
    } else if (name == "triangles") {
        cfg.set("task", "triangles");
        cfg.set("layers", "2");
        cfg.set("heads", "4");
        cfg.set("memory_heads", "1");
        cfg.set("dim", "128");
        cfg.set("mlp_layers", "5");
        cfg.set("optimizer", "adam");
        cfg.set("lr", "0.0001");
        cfg.set("batch_size", "100");
        cfg.set("alpha_init", "0.7");
        cfg.set("epochs", "30");
    } else {
        throw ConfigError("unknown preset '" + name + "' (valid: babi, triangles)");
    }
    return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str(), path);
}

RunConfig RunConfig::from_text(const std::string& text, const std::string& origin) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected `key = value`");
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    if (!kv_.count(key)) {
        std::string msg = "unknown config key '" + key + "'. Valid keys:";
        for (const auto& k : known_keys()) msg += "\n  " + k;
        throw ConfigError(msg);
    }
    kv_[key] = value;
}

const std::string& RunConfig::get(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
}

int64_t RunConfig::get_int(const std::string& key) const {
    try {
        size_t used = 0;
        int64_t v = std::stoll(get(key), &used);
        if (used != get(key).size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' is not an integer: '" + get(key) + "'");
    }
}

double RunConfig::get_double(const std::string& key) const {
    try {
        size_t used = 0;
        double v = std::stod(get(key), &used);
        if (used != get(key).size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' is not a number: '" + get(key) + "'");
    }
}

bool RunConfig::get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "' is not a boolean: '" + v + "'");
}

std::string RunConfig::to_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : kv_) os << k << " = " << v << "\n";
    return os.str();
}

std::vector<std::string> RunConfig::diff(const RunConfig& other, const std::vector<std::string>& ignore) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : kv_) {
        if (std::find(ignore.begin(), ignore.end(), k) != ignore.end()) continue;
        const auto it = other.kv_.find(k);
        const std::string& theirs = it == other.kv_.end() ? "<missing>" : it->second;
        if (v != theirs) out.push_back(k + ": '" + v + "' vs '" + theirs + "'");
    }
    return out;
}

ModelConfig RunConfig::model_config() const {
    ModelConfig mc;
    const std::string& kind = get("model");
    if (kind == "mitr") mc.kind = ModelConfig::Kind::Mitr;
    else if (kind == "transformer") mc.kind = ModelConfig::Kind::Transformer;
    else throw ConfigError("model must be 'mitr' or 'transformer', got '" + kind + "'");
    mc.layers = static_cast<int>(get_int("layers"));
    mc.heads = static_cast<int>(get_int("heads"));
    mc.memory_heads = static_cast<int>(get_int("memory_heads"));
    mc.dim = get_int("dim");
    mc.slots = get_int("slots");
    mc.segments = get_int("segments");
    mc.top_k = get_int("top_k");
    mc.mlp_layers = static_cast<int>(get_int("mlp_layers"));
    mc.dropout = get_double("dropout");
    mc.alpha_init = get_double("alpha_init");
    mc.alpha_trainable = get_bool("alpha_trainable");
    const std::string& sr = get("sparse_renorm");
    if (sr == "none") mc.sparse_renorm = SparseRenorm::None;
    else if (sr == "renormalize") mc.sparse_renorm = SparseRenorm::Renormalize;
    else if (sr == "mask_logits") mc.sparse_renorm = SparseRenorm::MaskLogits;
    else throw ConfigError("sparse_renorm must be none|renormalize|mask_logits, got '" + sr + "'");
    mc.gate_candidate_tanh = get_bool("gate_candidate_tanh");
    mc.gate_b_input = get_double("gate_b_input");
    mc.gate_b_forget = get_double("gate_b_forget");
    mc.attn_out_proj = get_bool("attn_out_proj");
    mc.block_residual = get_bool("block_residual");
    auto sharing = [&](const std::string& key) {
        const std::string& v = get(key);
        if (v == "shared") return ModelConfig::Sharing::Shared;
        if (v == "per_layer") return ModelConfig::Sharing::PerLayer;
        throw ConfigError(key + " must be shared|per_layer, got '" + v + "'");
    };
    mc.memory_sharing = sharing("memory_sharing");
    mc.param_sharing = sharing("param_sharing");
    const std::string& pers = get("memory_persistence");
    if (pers == "per_batch") mc.persistence = ModelConfig::Persistence::PerBatch;
    else if (pers == "cross_batch_detached") mc.persistence = ModelConfig::Persistence::CrossBatchDetached;
    else throw ConfigError("memory_persistence must be per_batch|cross_batch_detached, got '" + pers + "'");
    mc.ffn_mult = static_cast<int>(get_int("ffn_mult"));
    const std::string& dt = get("dtype");
    if (dt == "f32") mc.dtype = DType::F32;
    else if (dt == "f64") mc.dtype = DType::F64;
    else throw ConfigError("dtype must be f32|f64, got '" + dt + "'");
    return mc;
}

AdamConfig RunConfig::adam_config() const {
    AdamConfig ac;
    ac.lr = get_double("lr");
    ac.weight_decay = get_double("weight_decay");
    const std::string& opt = get("optimizer");
    if (opt == "adam") ac.decoupled = false;
    else if (opt == "adamw") ac.decoupled = true;
    else throw ConfigError("optimizer must be adam|adamw, got '" + opt + "'");
    return ac;
}

std::vector<int> RunConfig::babi_tasks() const {
    const std::string& spec = get("babi.tasks");
    std::vector<int> out;
    if (spec == "all") {
        for (int t = 1; t <= 20; ++t) out.push_back(t);
        return out;
    }
    std::istringstream ss(spec);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (tok.empty()) continue;
        try {
            int t = std::stoi(tok);
            if (t < 1 || t > 20) throw std::out_of_range("task");
            out.push_back(t);
        } catch (const std::exception&) {
            throw ConfigError("babi.tasks: bad task id '" + tok + "'");
        }
    }
    if (out.empty()) throw ConfigError("babi.tasks is empty");
    return out;
}

void RunConfig::validate() const {
    model_config().validate();
    adam_config();
    if (get_int("epochs") < 0) throw ConfigError("epochs must be >= 0");
    if (get_int("batch_size") < 1) throw ConfigError("batch_size must be >= 1");
    if (get_int("eval_every") < 0 || get_int("checkpoint_every") < 0 || get_int("log_every") < 1)
        throw ConfigError("bad cadence settings");
    const std::string& task = get("task");
    if (task != "babi" && task != "triangles")
        throw ConfigError("task must be babi|triangles, got '" + task + "'");
    if (task == "babi") {
        babi_tasks();
        const std::string& pm = get("babi.pad_mode");
        if (pm != "mask" && pm != "zeros") throw ConfigError("babi.pad_mode must be mask|zeros");
    } else {
        TriangleConfig tc;
        tc.points_per_cluster = static_cast<int>(get_int("triangles.points_per_cluster"));
        tc.cluster_radius = get_double("triangles.cluster_radius");
        tc.side_min = get_double("triangles.side_min");
        tc.side_max = get_double("triangles.side_max");
        tc.margin = get_double("triangles.margin");
        tc.neg_margin = get_double("triangles.neg_margin");
        tc.validate();
    }
}

}  // namespace pmi
