#include "minigpt/eval.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace minigpt {

namespace {

// Summed NLL over the predicted positions of one token sequence, chunked into
// non-overlapping windows of seq_len tokens. Within a window only the first
// token is unconditioned; position p of the full sequence is predicted iff
// p % seq_len != 0. When first_scored > 0, earlier positions are evaluated
// for context but excluded from the sum (answer-only MCQ scoring).
double pooled_nll(const ModelBundle& m, std::span<const int32_t> ids, int64_t seq_len,
                  int64_t first_scored, int64_t* positions_out) {
    double nll = 0.0;
    int64_t positions = 0;
    const int64_t n = static_cast<int64_t>(ids.size());
    for (int64_t off = 0; off < n; off += seq_len) {
        const int64_t len = std::min(seq_len, n - off);
        if (len < 2) continue;
        // positions off+1 .. off+len-1 are predicted; logits row t scores off+t+1
        const int64_t first_pos = std::max(off + 1, first_scored);
        const int64_t last_pos = off + len - 1;
        if (first_pos > last_pos) continue;
        const Tensor logits = forward(m, ids.subspan(static_cast<size_t>(off),
                                                     static_cast<size_t>(len - 1)));
        const int64_t row0 = first_pos - off - 1;
        const int64_t rows = last_pos - first_pos + 1;
        const Tensor scored =
            rows == logits.dim(0) ? logits : ops::slice_rows(logits, row0, rows);
        nll += ops::xent_sum(scored, ids.subspan(static_cast<size_t>(first_pos),
                                                 static_cast<size_t>(rows)));
        positions += rows;
    }
    *positions_out = positions;
    return nll;
}

void check_seq_len(const ModelBundle& m, int64_t seq_len) {
    if (seq_len < 1) fail(ErrorClass::config, "seq_len must be at least 1");
    if (seq_len > m.config.max_seq) {
        fail(ErrorClass::config, "seq_len " + std::to_string(seq_len) + " exceeds max_seq " +
                                     std::to_string(m.config.max_seq));
    }
}

// Longest common prefix of two token streams; BPE may merge across the
// question/choice boundary, so the stable part of the encoding is found by
// comparison rather than by token counting.
int64_t common_prefix(const std::vector<int32_t>& a, const std::vector<int32_t>& b) {
    size_t i = 0;
    while (i < a.size() && i < b.size() && a[i] == b[i]) ++i;
    return static_cast<int64_t>(i);
}

std::string fmt_float(double v) {
    std::ostringstream s;
    s.precision(6);
    s << std::fixed << v;
    return s.str();
}

}  // namespace

EvalReport perplexity(const ModelBundle& m, const std::vector<std::string>& dataset,
                      int64_t seq_len) {
    check_seq_len(m, seq_len);
    EvalReport r;
    r.kind = EvalReport::Kind::perplexity;
    double nll = 0.0;
    for (size_t i = 0; i < dataset.size(); ++i) {
        const std::vector<int32_t> ids = m.tokenizer.encode(dataset[i]);
        if (ids.size() < 2) {
            ++r.skipped;
            continue;
        }
        PplEntryDetail d;
        d.entry = static_cast<int64_t>(i);
        d.nll = pooled_nll(m, ids, seq_len, 0, &d.positions);
        nll += d.nll;
        r.total_positions += d.positions;
        ++r.used;
        r.entries.push_back(d);
    }
    if (r.used == 0) fail(ErrorClass::evaluation, "no usable entries: every entry was empty or a single token");
    if (r.total_positions == 0) fail(ErrorClass::evaluation, "no predicted positions in the dataset");
    r.value = static_cast<float>(std::exp(nll / static_cast<double>(r.total_positions)));
    return r;
}

EvalReport mcq_eval(const ModelBundle& m, const std::vector<McqItem>& items,
                    const McqOptions& options) {
    if (items.empty()) fail(ErrorClass::evaluation, "MCQ item list is empty");
    EvalReport r;
    r.kind = EvalReport::Kind::mcq;
    r.separator = " ";
    r.answer_only = options.answer_only;

    int64_t correct = 0;
    for (size_t i = 0; i < items.size(); ++i) {
        const McqItem& item = items[i];
        if (item.choices.size() < 2) {
            fail(ErrorClass::format, "MCQ item " + std::to_string(i) + " has fewer than 2 choices");
        }
        if (item.answer_index < 0 ||
            item.answer_index >= static_cast<int32_t>(item.choices.size())) {
            fail(ErrorClass::format, "MCQ item " + std::to_string(i) + " answer index " +
                                         std::to_string(item.answer_index) + " out of range");
        }
        McqItemDetail d;
        d.item = static_cast<int64_t>(i);
        d.answer_index = item.answer_index;

        const std::vector<int32_t> prefix = m.tokenizer.encode(item.question + r.separator);
        bool usable = true;
        std::vector<float> ppl;
        for (const std::string& choice : item.choices) {
            if (m.tokenizer.encode(choice).empty()) {
                usable = false;
                break;
            }
            const std::vector<int32_t> ids = m.tokenizer.encode(item.question + r.separator + choice);
            const int64_t first = options.answer_only ? common_prefix(prefix, ids) : 0;
            int64_t positions = 0;
            const double nll = pooled_nll(m, ids, m.config.max_seq, first, &positions);
            if (positions == 0) {
                usable = false;
                break;
            }
            ppl.push_back(static_cast<float>(std::exp(nll / static_cast<double>(positions))));
            r.total_positions += positions;
        }
        if (!usable) {
            d.skipped = true;
            ++r.skipped;
            r.items.push_back(d);
            continue;
        }
        d.choice_ppl = std::move(ppl);
        d.chosen = 0;
        for (size_t c = 1; c < d.choice_ppl.size(); ++c) {
            if (d.choice_ppl[c] < d.choice_ppl[static_cast<size_t>(d.chosen)]) {
                d.chosen = static_cast<int32_t>(c);
            }
        }
        d.correct = d.chosen == item.answer_index;
        if (d.correct) ++correct;
        ++r.used;
        r.items.push_back(d);
    }
    if (r.used == 0) fail(ErrorClass::evaluation, "every MCQ item was skipped");
    r.value = static_cast<float>(100.0 * static_cast<double>(correct) / static_cast<double>(r.used));
    return r;
}

std::vector<McqItem> load_mcq_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) fail(ErrorClass::io, "cannot open MCQ file " + path);
    std::vector<McqItem> items;
    std::string line;
    int64_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("question") ||
            !j["question"].is_string() || !j.contains("choices") || !j["choices"].is_array() ||
            !j.contains("answer") || !j["answer"].is_number_integer()) {
            fail(ErrorClass::format, "malformed MCQ entry at " + path + ":" + std::to_string(line_no));
        }
        McqItem item;
        item.question = j["question"].get<std::string>();
        for (const auto& c : j["choices"]) {
            if (!c.is_string()) {
                fail(ErrorClass::format,
                     "non-string choice at " + path + ":" + std::to_string(line_no));
            }
            item.choices.push_back(c.get<std::string>());
        }
        item.answer_index = j["answer"].get<int32_t>();
        if (item.choices.size() < 2 || item.answer_index < 0 ||
            item.answer_index >= static_cast<int32_t>(item.choices.size())) {
            fail(ErrorClass::format, "MCQ entry at " + path + ":" + std::to_string(line_no) +
                                         " needs >= 2 choices and an in-range answer");
        }
        items.push_back(std::move(item));
    }
    return items;
}

std::string EvalReport::to_json_string() const {
    nlohmann::json j;
    j["version"] = 1;
    j["kind"] = kind == Kind::perplexity ? "perplexity" : "mcq";
    j["value"] = value;
    j["total_positions"] = total_positions;
    j["used"] = used;
    j["skipped"] = skipped;
    if (kind == Kind::perplexity) {
        nlohmann::json rows = nlohmann::json::array();
        for (const PplEntryDetail& d : entries) {
            rows.push_back({{"entry", d.entry}, {"positions", d.positions}, {"nll", d.nll}});
        }
        j["entries"] = std::move(rows);
    } else {
        j["separator"] = separator;
        j["answer_only"] = answer_only;
        nlohmann::json rows = nlohmann::json::array();
        for (const McqItemDetail& d : items) {
            rows.push_back({{"item", d.item},
                            {"chosen", d.chosen},
                            {"answer", d.answer_index},
                            {"correct", d.correct},
                            {"skipped", d.skipped},
                            {"choice_ppl", d.choice_ppl}});
        }
        j["items"] = std::move(rows);
    }
    return j.dump(2);
}

std::string EvalReport::table() const {
    std::ostringstream s;
    if (kind == Kind::perplexity) {
        s << "perplexity " << fmt_float(value) << " over " << total_positions << " positions ("
          << used << " entries, " << skipped << " skipped)\n";
    } else {
        s << "mcq accuracy " << fmt_float(value) << "% (" << used << " items, " << skipped
          << " skipped)\n";
        for (const McqItemDetail& d : items) {
            s << "  item " << d.item << ": ";
            if (d.skipped) {
                s << "skipped\n";
                continue;
            }
            s << "chose " << d.chosen << " (answer " << d.answer_index << ", "
              << (d.correct ? "correct" : "wrong") << ")";
            for (float p : d.choice_ppl) s << " " << fmt_float(p);
            s << "\n";
        }
    }
    return s.str();
}

void EvalReport::save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) fail(ErrorClass::io, "cannot write report " + path);
    f << to_json_string() << "\n";
    if (!f) fail(ErrorClass::io, "failed writing report " + path);
}

}  // namespace minigpt
