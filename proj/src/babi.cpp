#include "pmi/babi.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "pmi/error.hpp"

namespace pmi {

std::vector<std::string> babi_tokenize(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == '.' || c == '?' || c == ',') continue;
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

std::vector<BabiStory> babi_parse(std::istream& in, int task_id, int64_t story_id_base) {
    std::vector<BabiStory> out;
    std::vector<std::vector<std::string>> sentences;
    std::vector<int> sentence_ids;
    int64_t story_id = story_id_base;
    std::string line;
    int64_t line_no = 0;
    bool in_story = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        size_t sp = line.find(' ');
        if (sp == std::string::npos)
            throw DataError("babi parse error at line " + std::to_string(line_no) + ": no id separator");
        int id = 0;
        try {
            size_t used = 0;
            id = std::stoi(line.substr(0, sp), &used);
            if (used != sp) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw DataError("babi parse error at line " + std::to_string(line_no) + ": bad line id '" +
                            line.substr(0, sp) + "'");
        }
        if (id == 1) {
            sentences.clear();
            sentence_ids.clear();
            if (in_story) ++story_id;
            in_story = true;
        }
        std::string rest = line.substr(sp + 1);
        size_t tab = rest.find('\t');
        if (tab == std::string::npos) {
            sentences.push_back(babi_tokenize(rest));
            sentence_ids.push_back(id);
            if (sentences.back().empty())
                throw DataError("babi parse error at line " + std::to_string(line_no) + ": empty statement");
        } else {
            BabiStory s;
            s.sentences = sentences;
            s.sentence_ids = sentence_ids;
            s.question = babi_tokenize(rest.substr(0, tab));
            s.question_line_id = id;
            std::string after = rest.substr(tab + 1);
            size_t tab2 = after.find('\t');
            std::string ans = tab2 == std::string::npos ? after : after.substr(0, tab2);
            auto ans_tokens = babi_tokenize(ans);
            if (ans_tokens.size() != 1)
                throw DataError("babi parse error at line " + std::to_string(line_no) +
                                ": expected a single answer token, got '" + ans + "'");
            s.answer = ans_tokens[0];
            if (tab2 != std::string::npos) {
                std::istringstream ss(after.substr(tab2 + 1));
                int sid;
                while (ss >> sid) {
                    if (std::find(sentence_ids.begin(), sentence_ids.end(), sid) == sentence_ids.end())
                        throw DataError("babi parse error at line " + std::to_string(line_no) +
                                        ": supporting id " + std::to_string(sid) +
                                        " does not reference a statement");
                    s.supporting.push_back(sid);
                }
            }
            if (s.question.empty())
                throw DataError("babi parse error at line " + std::to_string(line_no) + ": empty question");
            s.task_id = task_id;
            s.story_id = story_id;
            out.push_back(std::move(s));
        }
    }
    return out;
}

std::string babi_print(const std::vector<BabiStory>& stories) {
    std::ostringstream os;
    // group consecutive stories by story_id, merge statement sets, emit by line id
    size_t i = 0;
    while (i < stories.size()) {
        size_t j = i;
        while (j < stories.size() && stories[j].story_id == stories[i].story_id) ++j;
        std::map<int, std::string> lines;
        for (size_t k = i; k < j; ++k) {
            const BabiStory& s = stories[k];
            for (size_t q = 0; q < s.sentences.size(); ++q) {
                std::string text;
                for (const auto& w : s.sentences[q]) text += (text.empty() ? "" : " ") + w;
                lines[s.sentence_ids[q]] = text + " .";
            }
            std::string qt;
            for (const auto& w : s.question) qt += (qt.empty() ? "" : " ") + w;
            std::string supp;
            for (int sid : s.supporting) supp += (supp.empty() ? "" : " ") + std::to_string(sid);
            lines[s.question_line_id] = qt + " ?\t" + s.answer + "\t" + supp;
        }
        for (const auto& [id, text] : lines) os << id << " " << text << "\n";
        i = j;
    }
    return os.str();
}

int32_t BabiVocab::word_id(const std::string& w) const {
    auto it = word_ids.find(w);
    return it == word_ids.end() ? 0 : it->second;
}

int32_t BabiVocab::answer_id(const std::string& a) const {
    auto it = answer_ids.find(a);
    return it == answer_ids.end() ? 0 : it->second;
}

BabiVocab babi_build_vocab(const std::vector<BabiStory>& train_stories) {
    std::set<std::string> words, answers;
    for (const BabiStory& s : train_stories) {
        for (const auto& sent : s.sentences) words.insert(sent.begin(), sent.end());
        words.insert(s.question.begin(), s.question.end());
        answers.insert(s.answer);
    }
    BabiVocab v;
    v.words.push_back("<unk>");
    for (const std::string& w : words) {
        v.word_ids[w] = static_cast<int32_t>(v.words.size());
        v.words.push_back(w);
    }
    v.answers.push_back("<unk>");
    for (const std::string& a : answers) {
        v.answer_ids[a] = static_cast<int32_t>(v.answers.size());
        v.answers.push_back(a);
    }
    return v;
}

TaskBatch babi_batch(const std::vector<const BabiStory*>& stories, int64_t s_max, const BabiVocab& vocab,
                     PadMode pad) {
    const int64_t B = static_cast<int64_t>(stories.size());
    TaskBatch batch;
    batch.is_text = true;
    batch.slot_tokens.resize(static_cast<size_t>(B));
    batch.mask = Tensor::zeros({B, s_max + 2}, DType::F32);
    for (int64_t b = 0; b < B; ++b) {
        const BabiStory& s = *stories[static_cast<size_t>(b)];
        const int64_t n = static_cast<int64_t>(s.sentences.size());
        if (n > s_max)
            throw DataError("story " + std::to_string(s.story_id) + " (task " + std::to_string(s.task_id) +
                            ") has " + std::to_string(n) + " sentences, exceeding s_max=" + std::to_string(s_max));
        auto& slots = batch.slot_tokens[static_cast<size_t>(b)];
        slots.resize(static_cast<size_t>(s_max + 1));
        for (int64_t i = 0; i < n; ++i) {
            auto& slot = slots[static_cast<size_t>(i)];
            for (const std::string& w : s.sentences[static_cast<size_t>(i)]) slot.push_back(vocab.word_id(w));
        }
        for (const std::string& w : s.question) slots[static_cast<size_t>(s_max)].push_back(vocab.word_id(w));
        for (int64_t i = 0; i < n; ++i) batch.mask.set(b * (s_max + 2) + i, 1.0);
        if (pad == PadMode::Zeros)
            for (int64_t i = n; i < s_max; ++i) batch.mask.set(b * (s_max + 2) + i, 1.0);
        batch.mask.set(b * (s_max + 2) + s_max, 1.0);      // question
        batch.mask.set(b * (s_max + 2) + s_max + 1, 1.0);  // CLS
        batch.labels.push_back(vocab.answer_id(s.answer));
        batch.task_ids.push_back(s.task_id);
        batch.story_ids.push_back(s.story_id);
    }
    return batch;
}

namespace {
std::vector<BabiStory> load_split(const std::string& dir, int task, const std::string& split,
                                  int64_t story_base) {
    std::string path = dir + "/qa" + std::to_string(task) + "_" + split + ".txt";
    std::ifstream in(path);
    if (!in) throw DataError("cannot open bAbI file " + path);
    return babi_parse(in, task, story_base);
}
}  // namespace

BabiDataset babi_load(const std::string& dir, const std::vector<int>& tasks, int64_t s_max_override) {
    if (tasks.empty()) throw ConfigError("no bAbI tasks selected");
    BabiDataset ds;
    ds.task_ids = tasks;
    int64_t base = 0;
    const std::pair<const char*, std::vector<BabiStory>*> splits[] = {
        {"train", &ds.train}, {"valid", &ds.valid}, {"test", &ds.test}};
    for (int t : tasks) {
        for (const auto& [split, dst] : splits) {
            auto stories = load_split(dir, t, split, base);
            if (!stories.empty()) base = stories.back().story_id + 1;
            dst->insert(dst->end(), stories.begin(), stories.end());
        }
    }
    ds.vocab = babi_build_vocab(ds.train);
    int64_t observed = 0;
    for (const auto* split : {&ds.train, &ds.valid, &ds.test})
        for (const BabiStory& s : *split)
            observed = std::max(observed, static_cast<int64_t>(s.sentences.size()));
    ds.s_max = s_max_override > 0 ? s_max_override : observed;
    if (observed > ds.s_max)
        throw DataError("configured s_max " + std::to_string(ds.s_max) + " below observed maximum " +
                        std::to_string(observed));
    return ds;
}

}  // namespace pmi
