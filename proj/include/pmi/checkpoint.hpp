#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pmi/tensor.hpp"

namespace pmi {

// Binary container: magic "PMCK", u32 version, u64 seed, i64 step, i64 epoch,
// i64 optimizer step, length-prefixed config text, named tensors (u32 name
// length + UTF-8 name, dtype byte, u8 rank, i64 dims, row-major little-endian
// payload), u32 CRC-32 of everything preceding it. load(save(x)) == x bitwise.
struct Checkpoint {
    uint32_t version = 1;
    uint64_t seed = 0;
    int64_t step = 0;
    int64_t epoch = 0;
    int64_t opt_step = 0;
    std::string config_text;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor* find(const std::string& name) const;
    bool has(const std::string& name) const { return find(name) != nullptr; }
};

void checkpoint_save(const std::string& path, const Checkpoint& ckpt);
Checkpoint checkpoint_load(const std::string& path);

uint32_t crc32_bytes(const uint8_t* data, size_t len, uint32_t seed = 0);

}  // namespace pmi
