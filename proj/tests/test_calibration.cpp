#include "doctest.h"

#include <cmath>

#include "minigpt/calibration.hpp"
#include "minigpt/checkpoint.hpp"
#include "support/test_util.hpp"

using namespace minigpt;

namespace {

int32_t byte_id(char c) { return BpeTokenizer::num_specials + static_cast<unsigned char>(c); }

ModelConfig tiny_config(int64_t d_ff) {
    ModelConfig c;
    c.n_layers = 1;
    c.d_model = 2;
    c.n_heads = 1;
    c.d_ff = {d_ff};
    c.vocab_size = BpeTokenizer::base_vocab_size;
    c.max_seq = 8;
    c.activation = ActivationKind::relu;
    return c;
}

// All weights zero; token 'a' embeds to (1,0), 'b' to (5,0), and position 1
// adds (2,0). Site embedding.output neuron 0 then reproduces the chosen
// per-token values exactly while every later site stays zero.
ModelBundle embedding_probe_model() {
    ModelBundle m = allocate_bundle(tiny_config(1), BpeTokenizer::byte_level());
    m.token_embedding.at(byte_id('a'), 0) = 1.0f;
    m.token_embedding.at(byte_id('b'), 0) = 5.0f;
    m.pos_embedding.at(1, 0) = 2.0f;
    return m;
}

// ReLU-gated hidden units: unit 0 fires only on token 'a', unit 1 only on
// 'b'. Attention is zeroed; layernorm turns the one-hot embeddings into
// opposite sign patterns that the mlp_in columns pick up.
ModelBundle gated_units_model() {
    ModelBundle m = allocate_bundle(tiny_config(2), BpeTokenizer::byte_level());
    m.token_embedding.at(byte_id('a'), 0) = 1.0f;
    m.token_embedding.at(byte_id('b'), 1) = 1.0f;
    LayerWeights& l = m.layers[0];
    for (float& v : l.ln2_gain.mut()) v = 1.0f;
    l.mlp_in_w.at(0, 0) = 1.0f;
    l.mlp_in_w.at(1, 0) = -1.0f;
    l.mlp_in_w.at(0, 1) = -1.0f;
    l.mlp_in_w.at(1, 1) = 1.0f;
    l.mlp_in_b.mut()[0] = -1.0f;
    l.mlp_in_b.mut()[1] = -1.0f;
    return m;
}

const SiteStats& site(const StatsReport& r, const std::string& name) {
    for (const SiteStats& s : r.sites) {
        if (s.site == name) return s;
    }
    REQUIRE_MESSAGE(false, "missing site ", name);
    static SiteStats dummy;
    return dummy;
}

CollectOptions opts(int64_t seq_len, const std::string& id = "data") {
    CollectOptions o;
    o.seq_len = seq_len;
    o.dataset_id = id;
    return o;
}

}  // namespace

TEST_CASE("per-token normalization reproduces the hand-computed mean") {
    const ModelBundle m = embedding_probe_model();
    // windows: "aa" -> values {1, 1+2}, "b" -> {5}; mean over 3 positions
    const StatsReport r = collect_stats(m, {"aa", "b"}, opts(4));

    const SiteStats& emb = site(r, "embedding.output");
    CHECK(emb.n_tok == 3);
    CHECK(emb.m[0] == 3.0f);  // (1 + 3 + 5) / 3, not the per-entry mean 3.25
    CHECK(emb.m[1] == 0.0f);

    // the same positions feed token_freq
    CHECK(r.token_freq[static_cast<size_t>(byte_id('a'))] == 2);
    CHECK(r.token_freq[static_cast<size_t>(byte_id('b'))] == 1);
    int64_t total = 0;
    for (int64_t c : r.token_freq) total += c;
    CHECK(total == emb.n_tok);
}

TEST_CASE("max aggregate keeps the peak magnitude") {
    const ModelBundle m = embedding_probe_model();
    CollectOptions o = opts(4);
    o.aggregate = Aggregate::max;
    const StatsReport r = collect_stats(m, {"aa", "b"}, o);
    CHECK(site(r, "embedding.output").m[0] == 5.0f);
}

TEST_CASE("zero mlp weights and biases give exactly zero statistics") {
    const ModelBundle m = embedding_probe_model();
    const StatsReport r = collect_stats(m, {"aa", "b"}, opts(4));
    for (float v : site(r, "layers.0.mlp_in.output").m) CHECK(v == 0.0f);
    for (float v : site(r, "layers.0.act.output").m) CHECK(v == 0.0f);
}

TEST_CASE("long entries are split into non-overlapping windows") {
    const ModelBundle m = embedding_probe_model();
    // 5 tokens with seq_len 2: windows of 2, 2, 1; position 1 adds 2 inside
    // each window, so values are {1,3},{1,3},{1}
    const StatsReport r = collect_stats(m, {"aaaaa"}, opts(2));
    const SiteStats& emb = site(r, "embedding.output");
    CHECK(emb.n_tok == 5);
    CHECK(emb.m[0] == doctest::Approx(9.0 / 5.0).epsilon(1e-7));
}

TEST_CASE("empty entries are skipped and counted") {
    const ModelBundle m = embedding_probe_model();
    const StatsReport r = collect_stats(m, {"", "aa", ""}, opts(4));
    CHECK(r.entries_processed == 1);
    CHECK(r.entries_skipped == 2);
    CHECK(site(r, "embedding.output").n_tok == 2);
}

TEST_CASE("max_entries truncates the dataset deterministically") {
    const ModelBundle m = embedding_probe_model();
    CollectOptions o = opts(4);
    o.max_entries = 2;
    const StatsReport r = collect_stats(m, {"aa", "b", "bbbb"}, o);
    CHECK(r.entries_processed == 2);
    CHECK(site(r, "embedding.output").n_tok == 3);
}

TEST_CASE("collect_stats rejects empty or impossible runs") {
    const ModelBundle m = embedding_probe_model();
    try {
        collect_stats(m, {}, opts(4));
        FAIL("expected config error");
    } catch (const Error& e) {
        CHECK(e.cls() == ErrorClass::config);
    }
    CHECK_THROWS_AS(collect_stats(m, {"", ""}, opts(4)), Error);
    CHECK_THROWS_AS(collect_stats(m, {"aa"}, opts(0)), Error);
    CHECK_THROWS_AS(collect_stats(m, {"aa"}, opts(m.config.max_seq + 1)), Error);
}

TEST_CASE("duplicating every entry leaves the statistics unchanged") {
    const ModelBundle m = init_model(tiny_config(3), BpeTokenizer::byte_level(), 11);
    const std::vector<std::string> once = {"hello world", "so long"};
    const std::vector<std::string> twice = {"hello world", "so long", "hello world", "so long"};
    const StatsReport r1 = collect_stats(m, once, opts(6));
    const StatsReport r2 = collect_stats(m, twice, opts(6));
    for (size_t i = 0; i < r1.sites.size(); ++i) {
        for (size_t j = 0; j < r1.sites[i].m.size(); ++j) {
            const float a = r1.sites[i].m[j];
            const float b = r2.sites[i].m[j];
            CHECK(std::abs(a - b) <= 1e-6f * std::max(1.0f, std::abs(a)));
        }
    }
}

TEST_CASE("merging reports matches collecting over the union") {
    const ModelBundle m = init_model(tiny_config(3), BpeTokenizer::byte_level(), 12);
    const std::vector<std::string> d1 = {"alpha beta", "gamma"};
    const std::vector<std::string> d2 = {"delta epsilon zeta"};
    const StatsReport r1 = collect_stats(m, d1, opts(5, "d1"));
    const StatsReport r2 = collect_stats(m, d2, opts(5, "d2"));
    const StatsReport merged = merge_stats(r1, r2);
    const StatsReport whole = collect_stats(m, {"alpha beta", "gamma", "delta epsilon zeta"}, opts(5));

    CHECK(merged.dataset_id == "d1+d2");
    for (size_t i = 0; i < whole.sites.size(); ++i) {
        CHECK(merged.sites[i].n_tok == whole.sites[i].n_tok);
        for (size_t j = 0; j < whole.sites[i].m.size(); ++j) {
            const float a = merged.sites[i].m[j];
            const float b = whole.sites[i].m[j];
            CHECK(std::abs(a - b) <= 1e-6f * std::max(1.0f, std::abs(a)));
        }
    }
    for (size_t t = 0; t < whole.token_freq.size(); ++t) {
        CHECK(merged.token_freq[t] == whole.token_freq[t]);
    }

    // merging a report with itself leaves m unchanged
    const StatsReport self = merge_stats(r1, r1);
    for (size_t i = 0; i < r1.sites.size(); ++i) {
        CHECK(self.sites[i].n_tok == 2 * r1.sites[i].n_tok);
        for (size_t j = 0; j < r1.sites[i].m.size(); ++j) {
            CHECK(self.sites[i].m[j] == r1.sites[i].m[j]);
        }
    }

    // associativity within tolerance
    const StatsReport r3 = collect_stats(m, {"eta theta"}, opts(5, "d3"));
    const StatsReport left = merge_stats(merge_stats(r1, r2), r3);
    const StatsReport right = merge_stats(r1, merge_stats(r2, r3));
    for (size_t i = 0; i < left.sites.size(); ++i) {
        for (size_t j = 0; j < left.sites[i].m.size(); ++j) {
            const float a = left.sites[i].m[j];
            const float b = right.sites[i].m[j];
            CHECK(std::abs(a - b) <= 1e-6f * std::max(1.0f, std::abs(a)));
        }
    }
}

TEST_CASE("merge refuses mismatched reports") {
    const ModelBundle m1 = init_model(tiny_config(3), BpeTokenizer::byte_level(), 1);
    const ModelBundle m2 = init_model(tiny_config(3), BpeTokenizer::byte_level(), 2);
    const StatsReport r1 = collect_stats(m1, {"abc"}, opts(4));
    const StatsReport r2 = collect_stats(m2, {"abc"}, opts(4));
    try {
        merge_stats(r1, r2);
        FAIL("expected fingerprint error");
    } catch (const Error& e) {
        CHECK(e.cls() == ErrorClass::fingerprint);
    }

    StatsReport max_flavour = collect_stats(m1, {"abc"}, [] {
        CollectOptions o;
        o.seq_len = 4;
        o.aggregate = Aggregate::max;
        return o;
    }());
    CHECK_THROWS_AS(merge_stats(r1, max_flavour), Error);
}

TEST_CASE("disjoint domains light up different hidden units") {
    const ModelBundle m = gated_units_model();
    const StatsReport ra = collect_stats(m, {"aaaa"}, opts(4, "domain_a"));
    const StatsReport rb = collect_stats(m, {"bbbb"}, opts(4, "domain_b"));

    const SiteStats& acts_a = site(ra, "layers.0.act.output");
    const SiteStats& acts_b = site(rb, "layers.0.act.output");
    CHECK(acts_a.m[0] > 0.5f);
    CHECK(acts_a.m[1] == 0.0f);  // never fired: exactly zero
    CHECK(acts_b.m[0] == 0.0f);
    CHECK(acts_b.m[1] > 0.5f);

    const auto rows = compare_stats(ra, rb);
    int64_t expected_rows = 0;
    for (const SiteStats& s : ra.sites) expected_rows += s.width;
    CHECK(static_cast<int64_t>(rows.size()) == expected_rows);

    // prune candidates for domain b: active in a, idle in b
    const float eps = 1e-3f;
    bool found_candidate = false;
    for (const auto& r : rows) {
        if (r.m_a >= eps && r.m_b < eps) found_candidate = true;
    }
    CHECK(found_candidate);

    // self comparison sits on the diagonal
    for (const auto& r : compare_stats(ra, ra)) CHECK(r.m_a == r.m_b);

    const std::string csv = compare_csv(rows);
    CHECK(csv.rfind("site,neuron,m_a,m_b\n", 0) == 0);
    CHECK(csv.find("layers.0.act.output,0,") != std::string::npos);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(rows.size()) + 1);

    try {
        const ModelBundle other = init_model(tiny_config(2), BpeTokenizer::byte_level(), 9);
        compare_stats(ra, collect_stats(other, {"aaaa"}, opts(4)));
        FAIL("expected fingerprint error");
    } catch (const Error& e) {
        CHECK(e.cls() == ErrorClass::fingerprint);
    }
}

TEST_CASE("stats report json roundtrip") {
    const ModelBundle m = gated_units_model();
    const StatsReport r = collect_stats(m, {"abab"}, opts(4, "roundtrip"));

    testutil::TempDir dir("stats");
    r.save(dir.file("stats.json"));
    const StatsReport back = StatsReport::load(dir.file("stats.json"));
    CHECK(back.to_json_string() == r.to_json_string());
    CHECK(back.fingerprint == r.fingerprint);
    CHECK(back.aggregate == r.aggregate);
    CHECK(back.sites.size() == r.sites.size());

    CHECK_THROWS_AS(StatsReport::load(dir.file("absent.json")), Error);
    try {
        StatsReport::from_json_string("{\"version\": 1}");
        FAIL("expected format error");
    } catch (const Error& e) {
        CHECK(e.cls() == ErrorClass::format);
    }
    CHECK_THROWS_AS(StatsReport::from_json_string("nope"), Error);
}
