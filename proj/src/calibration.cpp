#include "minigpt/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "minigpt/checkpoint.hpp"
#include "json.hpp"

namespace minigpt {

namespace {

using ordered_json = nlohmann::ordered_json;

// Accumulates one (sum or max, count) pair per site in the order forward
// visits them.
class StatsCollector : public ActivationObserver {
public:
    explicit StatsCollector(Aggregate aggregate) : aggregate_(aggregate) {}

    void observe(const std::string& site, const Tensor& a) override {
        const int64_t width = a.dim(a.ndim() - 1);
        const int64_t rows = a.numel() / width;
        Acc& acc = site_acc(site, width);
        acc.n_tok += rows;
        const auto data = a.data();
        for (int64_t r = 0; r < rows; ++r) {
            for (int64_t j = 0; j < width; ++j) {
                const double v = std::abs(static_cast<double>(data[static_cast<size_t>(r * width + j)]));
                if (aggregate_ == Aggregate::mean) {
                    acc.agg[static_cast<size_t>(j)] += v;
                } else {
                    acc.agg[static_cast<size_t>(j)] = std::max(acc.agg[static_cast<size_t>(j)], v);
                }
            }
        }
    }

    std::vector<SiteStats> finish() const {
        std::vector<SiteStats> out;
        out.reserve(order_.size());
        for (const auto& [site, acc] : order_) {
            SiteStats s;
            s.site = site;
            s.width = static_cast<int64_t>(acc.agg.size());
            s.n_tok = acc.n_tok;
            s.m.reserve(acc.agg.size());
            for (double v : acc.agg) {
                const double value = aggregate_ == Aggregate::mean ? v / static_cast<double>(acc.n_tok) : v;
                s.m.push_back(static_cast<float>(value));
            }
            out.push_back(std::move(s));
        }
        return out;
    }

private:
    struct Acc {
        std::vector<double> agg;
        int64_t n_tok = 0;
    };

    Acc& site_acc(const std::string& site, int64_t width) {
        for (auto& [name, acc] : order_) {
            if (name == site) {
                if (static_cast<int64_t>(acc.agg.size()) != width) {
                    fail(ErrorClass::contract, "site " + site + " changed width between sequences");
                }
                return acc;
            }
        }
        order_.emplace_back(site, Acc{std::vector<double>(static_cast<size_t>(width), 0.0), 0});
        return order_.back().second;
    }

    Aggregate aggregate_;
    std::vector<std::pair<std::string, Acc>> order_;
};

void check_same_layout(const StatsReport& a, const StatsReport& b, const char* op) {
    if (a.fingerprint != b.fingerprint) {
        fail(ErrorClass::fingerprint, std::string(op) + " requires stats from the same checkpoint: " +
                                          a.fingerprint + " vs " + b.fingerprint);
    }
    if (a.sites.size() != b.sites.size() || a.token_freq.size() != b.token_freq.size()) {
        fail(ErrorClass::dimension, std::string(op) + ": reports disagree on site or vocab layout");
    }
    for (size_t i = 0; i < a.sites.size(); ++i) {
        if (a.sites[i].site != b.sites[i].site || a.sites[i].width != b.sites[i].width) {
            fail(ErrorClass::dimension, std::string(op) + ": reports disagree at site " + a.sites[i].site);
        }
    }
}

std::string format_float(float v) {
    std::ostringstream s;
    s.precision(9);
    s << v;
    return s.str();
}

}  // namespace

const char* aggregate_name(Aggregate a) { return a == Aggregate::mean ? "mean" : "max"; }

Aggregate aggregate_from_name(const std::string& name) {
    if (name == "mean") return Aggregate::mean;
    if (name == "max") return Aggregate::max;
    fail(ErrorClass::config, "unknown aggregate \"" + name + "\" (expected mean or max)");
}

StatsReport collect_stats(const ModelBundle& m, const std::vector<std::string>& dataset,
                          const CollectOptions& options) {
    if (dataset.empty()) fail(ErrorClass::config, "calibration dataset is empty");
    if (options.seq_len < 1) fail(ErrorClass::config, "seq_len must be at least 1");
    if (options.seq_len > m.config.max_seq) {
        fail(ErrorClass::config, "seq_len " + std::to_string(options.seq_len) + " exceeds model max_seq " +
                                     std::to_string(m.config.max_seq));
    }

    StatsReport report;
    report.fingerprint = model_fingerprint(m);
    report.dataset_id = options.dataset_id;
    report.aggregate = options.aggregate;
    report.token_freq.assign(static_cast<size_t>(m.config.vocab_size), 0);

    StatsCollector collector(options.aggregate);
    int64_t entries = 0;
    for (const std::string& entry : dataset) {
        if (options.max_entries > 0 && entries >= options.max_entries) break;
        ++entries;
        const std::vector<int32_t> ids = m.tokenizer.encode(entry);
        if (ids.empty()) {
            ++report.entries_skipped;
            continue;
        }
        ++report.entries_processed;
        for (size_t start = 0; start < ids.size(); start += static_cast<size_t>(options.seq_len)) {
            const size_t len = std::min(static_cast<size_t>(options.seq_len), ids.size() - start);
            const std::span<const int32_t> window(ids.data() + start, len);
            forward(m, window, &collector);
            for (int32_t id : window) ++report.token_freq[static_cast<size_t>(id)];
        }
    }
    report.sites = collector.finish();
    if (report.sites.empty() || report.sites[0].n_tok == 0) {
        fail(ErrorClass::config, "calibration processed no token positions");
    }
    return report;
}

StatsReport merge_stats(const StatsReport& a, const StatsReport& b) {
    check_same_layout(a, b, "merge_stats");
    if (a.aggregate != b.aggregate) {
        fail(ErrorClass::config, "merge_stats: reports use different aggregates");
    }

    StatsReport out;
    out.fingerprint = a.fingerprint;
    out.dataset_id = a.dataset_id + "+" + b.dataset_id;
    out.aggregate = a.aggregate;
    out.entries_processed = a.entries_processed + b.entries_processed;
    out.entries_skipped = a.entries_skipped + b.entries_skipped;
    out.token_freq.resize(a.token_freq.size());
    for (size_t i = 0; i < a.token_freq.size(); ++i) out.token_freq[i] = a.token_freq[i] + b.token_freq[i];

    out.sites.reserve(a.sites.size());
    for (size_t i = 0; i < a.sites.size(); ++i) {
        const SiteStats& sa = a.sites[i];
        const SiteStats& sb = b.sites[i];
        SiteStats s;
        s.site = sa.site;
        s.width = sa.width;
        s.n_tok = sa.n_tok + sb.n_tok;
        s.m.reserve(sa.m.size());
        for (size_t j = 0; j < sa.m.size(); ++j) {
            if (a.aggregate == Aggregate::mean) {
                const double num = static_cast<double>(sa.m[j]) * static_cast<double>(sa.n_tok) +
                                   static_cast<double>(sb.m[j]) * static_cast<double>(sb.n_tok);
                s.m.push_back(static_cast<float>(num / static_cast<double>(s.n_tok)));
            } else {
                s.m.push_back(std::max(sa.m[j], sb.m[j]));
            }
        }
        out.sites.push_back(std::move(s));
    }
    return out;
}

std::vector<CompareRow> compare_stats(const StatsReport& a, const StatsReport& b) {
    check_same_layout(a, b, "compare_stats");
    std::vector<CompareRow> rows;
    for (size_t i = 0; i < a.sites.size(); ++i) {
        for (int64_t j = 0; j < a.sites[i].width; ++j) {
            rows.push_back(CompareRow{a.sites[i].site, j, a.sites[i].m[static_cast<size_t>(j)],
                                      b.sites[i].m[static_cast<size_t>(j)]});
        }
    }
    return rows;
}

std::string compare_csv(const std::vector<CompareRow>& rows) {
    std::string out = "site,neuron,m_a,m_b\n";
    for (const CompareRow& r : rows) {
        out += r.site;
        out += ',';
        out += std::to_string(r.neuron);
        out += ',';
        out += format_float(r.m_a);
        out += ',';
        out += format_float(r.m_b);
        out += '\n';
    }
    return out;
}

std::string StatsReport::to_json_string() const {
    ordered_json j;
    j["version"] = 1;
    j["fingerprint"] = fingerprint;
    j["dataset_id"] = dataset_id;
    j["aggregate"] = aggregate_name(aggregate);
    j["normalization"] = "per_token";
    j["entries_processed"] = entries_processed;
    j["entries_skipped"] = entries_skipped;
    ordered_json sites_json = ordered_json::array();
    for (const SiteStats& s : sites) {
        ordered_json sj;
        sj["site"] = s.site;
        sj["width"] = s.width;
        sj["n_tok"] = s.n_tok;
        sj["m"] = s.m;
        sites_json.push_back(std::move(sj));
    }
    j["sites"] = std::move(sites_json);
    j["token_freq"] = token_freq;
    return j.dump();
}

StatsReport StatsReport::from_json_string(const std::string& text) {
    ordered_json j = ordered_json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) fail(ErrorClass::format, "stats report is not valid JSON");
    if (j.value("version", -1) != 1) fail(ErrorClass::format, "unsupported stats report version");
    for (const char* key : {"fingerprint", "dataset_id", "aggregate", "normalization", "entries_processed",
                            "entries_skipped", "sites", "token_freq"}) {
        if (!j.contains(key)) fail(ErrorClass::format, std::string("stats report is missing ") + key);
    }
    if (j["normalization"].get<std::string>() != "per_token") {
        fail(ErrorClass::format, "stats report uses an unknown normalization");
    }

    StatsReport r;
    r.fingerprint = j["fingerprint"].get<std::string>();
    r.dataset_id = j["dataset_id"].get<std::string>();
    r.aggregate = aggregate_from_name(j["aggregate"].get<std::string>());
    r.entries_processed = j["entries_processed"].get<int64_t>();
    r.entries_skipped = j["entries_skipped"].get<int64_t>();
    if (!j["sites"].is_array() || !j["token_freq"].is_array()) {
        fail(ErrorClass::format, "stats report sites and token_freq must be arrays");
    }
    for (const auto& sj : j["sites"]) {
        SiteStats s;
        s.site = sj.value("site", std::string());
        s.width = sj.value("width", int64_t(-1));
        s.n_tok = sj.value("n_tok", int64_t(-1));
        if (!sj.contains("m") || !sj["m"].is_array()) fail(ErrorClass::format, "stats site is missing m");
        s.m = sj["m"].get<std::vector<float>>();
        if (s.site.empty() || s.n_tok < 0 || s.width != static_cast<int64_t>(s.m.size())) {
            fail(ErrorClass::format, "stats site " + s.site + " is inconsistent");
        }
        for (float v : s.m) {
            if (!(v >= 0.0f)) fail(ErrorClass::format, "stats site " + s.site + " has a negative or NaN m value");
        }
        r.sites.push_back(std::move(s));
    }
    r.token_freq = j["token_freq"].get<std::vector<int64_t>>();
    return r;
}

void StatsReport::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f.good()) fail(ErrorClass::io, "cannot open " + path + " for writing");
    f << to_json_string();
    f.flush();
    if (!f.good()) fail(ErrorClass::io, "failed writing " + path);
}

StatsReport StatsReport::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f.good()) fail(ErrorClass::io, "cannot open " + path + " for reading");
    std::ostringstream buf;
    buf << f.rdbuf();
    return from_json_string(buf.str());
}

}  // namespace minigpt
