#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "minigpt/model.hpp"

namespace minigpt {

enum class Aggregate { mean, max };

const char* aggregate_name(Aggregate a);
Aggregate aggregate_from_name(const std::string& name);

struct SiteStats {
    std::string site;
    int64_t width = 0;
    int64_t n_tok = 0;
    std::vector<float> m;  // per-neuron mean (or max) absolute activation
};

// Per-neuron activation-magnitude statistics over a calibration dataset,
// normalized per token position, plus token frequencies over the same
// encoded stream. Pinned to the exact checkpoint via fingerprint.
struct StatsReport {
    std::string fingerprint;
    std::string dataset_id;
    Aggregate aggregate = Aggregate::mean;
    int64_t entries_processed = 0;
    int64_t entries_skipped = 0;  // entries that encoded to zero tokens
    std::vector<SiteStats> sites;
    std::vector<int64_t> token_freq;

    std::string to_json_string() const;
    static StatsReport from_json_string(const std::string& text);
    void save(const std::string& path) const;
    static StatsReport load(const std::string& path);
};

struct CollectOptions {
    int64_t seq_len = 0;      // window length; entries are split, never padded
    int64_t max_entries = 0;  // 0 means the whole dataset
    Aggregate aggregate = Aggregate::mean;
    std::string dataset_id;
};

StatsReport collect_stats(const ModelBundle& m, const std::vector<std::string>& dataset,
                          const CollectOptions& options);

// Exact weighted-mean (or elementwise-max) combination of two reports over
// the same checkpoint.
StatsReport merge_stats(const StatsReport& a, const StatsReport& b);

struct CompareRow {
    std::string site;
    int64_t neuron = 0;
    float m_a = 0;
    float m_b = 0;
};

std::vector<CompareRow> compare_stats(const StatsReport& a, const StatsReport& b);
std::string compare_csv(const std::vector<CompareRow>& rows);

}  // namespace minigpt
