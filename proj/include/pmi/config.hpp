#pragma once

#include <map>
#include <string>
#include <vector>

#include "pmi/model.hpp"
#include "pmi/optim.hpp"

namespace pmi {

// Flat `key = value` configuration with `#` comments; dotted paths for
// nested keys. Unknown keys are rejected with the list of valid keys. A run
// is fully reconstructable from (config, data files, seed).
class RunConfig {
  public:
    RunConfig();  // defaults
    static RunConfig preset(const std::string& name);  // "babi" | "triangles"
    static RunConfig from_file(const std::string& path);
    static RunConfig from_text(const std::string& text, const std::string& origin = "<text>");

    void set(const std::string& key, const std::string& value);
    const std::string& get(const std::string& key) const;
    bool has_key(const std::string& key) const { return kv_.count(key) != 0; }

    int64_t get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;

    std::string to_text() const;  // canonical, sorted
    // keys that differ, formatted "key: ours vs theirs" (resume mismatch report)
    std::vector<std::string> diff(const RunConfig& other, const std::vector<std::string>& ignore = {}) const;

    void validate() const;
    ModelConfig model_config() const;
    AdamConfig adam_config() const;
    std::vector<int> babi_tasks() const;
    uint64_t seed() const { return static_cast<uint64_t>(get_int("seed")); }

    static const std::vector<std::string>& known_keys();

  private:
    std::map<std::string, std::string> kv_;
};

}  // namespace pmi
