#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "minigpt/model.hpp"

namespace minigpt {

// ---------------------------------------------------------------------------
// Perplexity and multiple-choice evaluation. Perplexity pools token-weighted:
// exp(sum of NLL over every predicted position / number of positions), never
// an average of per-entry perplexities. MCQ picks the choice whose full
// "question + ' ' + choice" concatenation scores the lowest perplexity.
// ---------------------------------------------------------------------------

struct McqItem {
    std::string question;
    std::vector<std::string> choices;
    int32_t answer_index = 0;
};

struct PplEntryDetail {
    int64_t entry = 0;      // index into the dataset
    int64_t positions = 0;  // predicted positions contributed
    double nll = 0.0;       // summed negative log-likelihood
};

struct McqItemDetail {
    int64_t item = 0;
    int32_t chosen = -1;  // -1 when skipped
    int32_t answer_index = 0;
    bool correct = false;
    bool skipped = false;
    std::vector<float> choice_ppl;  // empty when skipped
};

struct EvalReport {
    enum class Kind { perplexity, mcq };

    Kind kind = Kind::perplexity;
    float value = 0.0f;  // perplexity, or accuracy in percent
    int64_t total_positions = 0;
    int64_t used = 0;
    int64_t skipped = 0;
    std::vector<PplEntryDetail> entries;  // perplexity runs
    std::vector<McqItemDetail> items;     // mcq runs
    std::string separator;                // mcq concatenation separator
    bool answer_only = false;

    std::string to_json_string() const;
    std::string table() const;
    void save(const std::string& path) const;
};

EvalReport perplexity(const ModelBundle& m, const std::vector<std::string>& dataset,
                      int64_t seq_len);

struct McqOptions {
    // Score only the answer's token positions, conditioned on the question
    // prefix, instead of the whole concatenation.
    bool answer_only = false;
};

EvalReport mcq_eval(const ModelBundle& m, const std::vector<McqItem>& items,
                    const McqOptions& options = {});

// One JSON object per line: {"question": str, "choices": [str...], "answer": int}.
std::vector<McqItem> load_mcq_jsonl(const std::string& path);

}  // namespace minigpt
