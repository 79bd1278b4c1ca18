#pragma once

#include <cstdint>
#include <string>

namespace pmi_test {

// Synthetic bAbI task 1 (Single Supporting Fact) in the official en-valid-10k
// line grammar: stories of 5 blocks, each 2 movement statements + 1 question,
// line ids 1..15, questions as `ID Where is X? <TAB> answer <TAB> support`.
std::string gen_babi_task1(uint64_t seed, int64_t n_questions);

// Writes qa1_train.txt / qa1_valid.txt / qa1_test.txt under dir.
void write_babi_task1_dir(const std::string& dir, uint64_t seed, int64_t train_q, int64_t valid_q,
                          int64_t test_q);

}  // namespace pmi_test
