#pragma once

#include <istream>
#include <map>
#include <string>
#include <vector>

#include "pmi/model.hpp"

namespace pmi {

// One QA instance: every statement of the story up to the question, the
// question itself, the answer token, and the supporting statement line ids.
struct BabiStory {
    std::vector<std::vector<std::string>> sentences;  // tokenized statements in story order
    std::vector<int> sentence_ids;                    // story-local line ids (restart at 1)
    std::vector<std::string> question;
    int question_line_id = 0;
    std::string answer;
    std::vector<int> supporting;
    int task_id = 0;
    int64_t story_id = 0;
};

// lowercase, strip `.?,`, split on whitespace
std::vector<std::string> babi_tokenize(const std::string& line);

// Standard bAbI line format: `ID word word ...` statements,
// `ID question ? <TAB> answer <TAB> supporting_ids` questions, ID==1 starts
// a new story. One BabiStory per question.
std::vector<BabiStory> babi_parse(std::istream& in, int task_id = 0, int64_t story_id_base = 0);

// Canonical reprint of parsed stories (tokenized text, original line ids).
std::string babi_print(const std::vector<BabiStory>& stories);

// id 0 is reserved for unknowns in both tables; built from training data
// only, sorted for run-to-run stability.
struct BabiVocab {
    std::map<std::string, int32_t> word_ids;
    std::vector<std::string> words;  // index -> word, [0] = "<unk>"
    std::map<std::string, int32_t> answer_ids;
    std::vector<std::string> answers;  // [0] = "<unk>"

    int32_t word_id(const std::string& w) const;
    int32_t answer_id(const std::string& a) const;
};

BabiVocab babi_build_vocab(const std::vector<BabiStory>& train_stories);

enum class PadMode { Mask, Zeros };

// Positions: s_max sentence slots + question + CLS. Placeholder slots are
// masked out (Mask) or participate as all-zero inputs (Zeros).
TaskBatch babi_batch(const std::vector<const BabiStory*>& stories, int64_t s_max, const BabiVocab& vocab,
                     PadMode pad = PadMode::Mask);

struct BabiDataset {
    std::vector<BabiStory> train, valid, test;
    BabiVocab vocab;
    int64_t s_max = 0;
    std::vector<int> task_ids;
};

// Directory layout: qa{task}_{train,valid,test}.txt
BabiDataset babi_load(const std::string& dir, const std::vector<int>& tasks, int64_t s_max_override = 0);

}  // namespace pmi
