#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace pmi {

// Counter-based stream: output i depends only on (key, i), so streams are
// replayable and checkpointable as (key, counter). Streams are derived by
// name from a run seed; no ambient global state anywhere.
class RngStream {
  public:
    RngStream() = default;
    explicit RngStream(uint64_t key, uint64_t counter = 0) : key_(key), counter_(counter) {}

    uint64_t next_u64();
    double uniform();                     // [0, 1)
    double normal();                      // standard normal, Box-Muller (consumes 2 draws)
    double normal(double mean, double stddev) { return mean + stddev * normal(); }
    uint64_t below(uint64_t n);           // [0, n), unbiased rejection

    uint64_t key() const { return key_; }
    uint64_t counter() const { return counter_; }
    void set_counter(uint64_t c) { counter_ = c; }

  private:
    uint64_t key_{0};
    uint64_t counter_{0};
};

// Named stream derivation: hash of (seed, name, salt).
RngStream derive_stream(uint64_t seed, std::string_view name, uint64_t salt = 0);

uint64_t hash64(std::string_view s);
uint64_t mix64(uint64_t x);

}  // namespace pmi
