#include "doctest.h"

#include <cfloat>
#include <cmath>

#include "minigpt/checkpoint.hpp"
#include "minigpt/pruning.hpp"
#include "support/test_util.hpp"

using namespace minigpt;

namespace {

StatsReport one_site_report(const std::string& site, std::vector<float> m) {
    StatsReport r;
    r.fingerprint = "feedfacefeedface";
    SiteStats s;
    s.site = site;
    s.width = static_cast<int64_t>(m.size());
    s.n_tok = 1;
    s.m = std::move(m);
    r.sites.push_back(std::move(s));
    return r;
}

// ReLU model where units 0..5 of every layer carry bias -10 and can never
// fire, while units 6..11 carry +0.5 and essentially always do.
ModelBundle dead_unit_model() {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 4;
    c.d_ff = {12, 12};
    c.vocab_size = BpeTokenizer::base_vocab_size;
    c.max_seq = 24;
    c.activation = ActivationKind::relu;
    ModelBundle m = init_model(c, BpeTokenizer::byte_level(), 21);
    for (LayerWeights& l : m.layers) {
        for (int64_t j = 0; j < 12; ++j) {
            l.mlp_in_b.mut()[static_cast<size_t>(j)] = j < 6 ? -10.0f : 0.5f;
        }
    }
    return m;
}

const std::vector<std::string> kCalib = {"the quick brown fox", "jumps over", "the lazy dog"};

StatsReport calib_stats(const ModelBundle& m) {
    CollectOptions o;
    o.seq_len = 12;
    o.dataset_id = "calib";
    return collect_stats(m, kCalib, o);
}

}  // namespace

TEST_CASE("linear criterion drops strictly below the threshold") {
    const StatsReport r = one_site_report("layers.0.mlp_in.output", {0.5f, 1e-5f, 0.2f});
    const CriterionPlan p = plan_linear(r, 1e-3f);
    REQUIRE(p.droppable.size() == 1);
    CHECK(p.droppable[0] == std::vector<uint8_t>{0, 1, 0});

    // threshold zero can never drop: m >= 0 and the comparison is strict
    const CriterionPlan none = plan_linear(one_site_report("layers.0.mlp_in.output", {0.0f, 0.5f}), 0.0f);
    CHECK(none.droppable[0] == std::vector<uint8_t>{0, 0});
}

TEST_CASE("activation criterion reads the post-activation site") {
    const StatsReport r = one_site_report("layers.0.act.output", {2e-4f, 0.1f});
    const CriterionPlan p = plan_activation(r, 1e-3f);
    CHECK(p.droppable[0] == std::vector<uint8_t>{1, 0});

    try {
        plan_activation(one_site_report("layers.0.mlp_in.output", {0.1f}), 1e-3f);
        FAIL("expected format error for missing site");
    } catch (const Error& e) {
        CHECK(e.cls() == ErrorClass::format);
    }
    CHECK_THROWS_AS(plan_activation(r, -1.0f), Error);
}

TEST_CASE("embedding criterion keeps specials and counted tokens") {
    std::vector<int64_t> freq(10, 0);
    freq[4] = 3;
    freq[7] = 1;
    CHECK(plan_embedding(freq, 0) == std::vector<int32_t>{0, 1, 2, 4, 7});
    CHECK(plan_embedding(freq, 1) == std::vector<int32_t>{0, 1, 2, 4});
    CHECK(plan_embedding(std::vector<int64_t>(10, 0), 0) == std::vector<int32_t>{0, 1, 2});

    std::vector<int64_t> all_used(6, 2);
    CHECK(plan_embedding(all_used, 0).size() == 6);
    CHECK_THROWS_AS(plan_embedding(freq, -1), Error);
}

TEST_CASE("dead relu units prune away without moving logits") {
    const ModelBundle base = dead_unit_model();
    const StatsReport stats = calib_stats(base);

    // the dead units report exactly zero post-activation magnitude
    for (const SiteStats& s : stats.sites) {
        if (s.site.find("act.output") == std::string::npos) continue;
        for (int64_t j = 0; j < 6; ++j) CHECK(s.m[static_cast<size_t>(j)] == 0.0f);
        for (int64_t j = 6; j < 12; ++j) CHECK(s.m[static_cast<size_t>(j)] > 1e-3f);
    }

    PlanOptions opt;
    opt.eps_linear = 1e-3f;
    opt.eps_act = 1e-3f;
    opt.prune_embeddings = false;
    const PrunePlan plan = build_plan(base, stats, opt);

    for (const LayerPlan& l : plan.layers) {
        CHECK(l.keep_hidden == std::vector<int64_t>{6, 7, 8, 9, 10, 11});
        REQUIRE(l.dropped.size() == 6);
        for (const DroppedUnit& u : l.dropped) {
            CHECK(u.unit < 6);
            CHECK(u.activation);
            // dead units are invisible to both criteria
            CHECK(u.linear_in == u.linear_out);
        }
    }

    const PruneResult result = merge_and_apply(base, plan);
    const ModelBundle& pruned = result.model;
    CHECK(pruned.config.d_ff == std::vector<int64_t>{6, 6});
    CHECK(param_count(pruned) == plan.predicted_param_count);

    // dropping k units removes exactly k * (2 * d_model + 1) parameters per layer
    const int64_t d = base.config.d_model;
    CHECK(param_count(base) - param_count(pruned) == 2 * 6 * (2 * d + 1));

    // forward equivalence on every calibration sequence
    for (const std::string& entry : kCalib) {
        const std::vector<int32_t> ids = base.tokenizer.encode(entry);
        const Tensor a = forward(base, ids);
        const Tensor b = forward(pruned, ids);
        REQUIRE(a.same_shape(b));
        for (int64_t i = 0; i < a.numel(); ++i) {
            CHECK(std::abs(a.data()[static_cast<size_t>(i)] - b.data()[static_cast<size_t>(i)]) <= 1e-5f);
        }
    }

    CHECK(relative_size(base, pruned) ==
          100.0 * static_cast<double>(plan.predicted_param_count) / static_cast<double>(param_count(base)));

    // the same plan cannot be applied to the already-pruned model
    CHECK_THROWS_AS(merge_and_apply(pruned, plan), Error);

    // re-planning on the pruned model drops nothing: every zero unit is gone
    const StatsReport stats2 = calib_stats(pruned);
    const PrunePlan plan2 = build_plan(pruned, stats2, opt);
    for (size_t l = 0; l < plan2.layers.size(); ++l) {
        CHECK(plan2.layers[l].dropped.empty());
        CHECK(plan2.layers[l].keep_hidden.size() == 6);
    }
}

TEST_CASE("an infinite threshold clamps to the strongest unit per layer") {
    const ModelBundle base = dead_unit_model();
    const StatsReport stats = calib_stats(base);
    PlanOptions opt;
    opt.eps_linear = FLT_MAX;
    opt.eps_act = FLT_MAX;
    opt.prune_embeddings = false;
    const PrunePlan plan = build_plan(base, stats, opt);

    for (size_t layer = 0; layer < plan.layers.size(); ++layer) {
        REQUIRE(plan.layers[layer].keep_hidden.size() == 1);
        const int64_t kept = plan.layers[layer].keep_hidden[0];
        const SiteStats* site = nullptr;
        for (const SiteStats& s : stats.sites) {
            if (s.site == "layers." + std::to_string(layer) + ".act.output") site = &s;
        }
        REQUIRE(site != nullptr);
        for (int64_t j = 0; j < site->width; ++j) {
            CHECK(site->m[static_cast<size_t>(kept)] >= site->m[static_cast<size_t>(j)]);
        }
        CHECK(plan.layers[layer].dropped.size() == 11);
    }
    const PruneResult result = merge_and_apply(base, plan);
    CHECK(result.model.config.d_ff == std::vector<int64_t>{1, 1});
}

TEST_CASE("raising the threshold only grows the drop set") {
    const ModelBundle base = init_model(
        [] {
            ModelConfig c;
            c.n_layers = 2;
            c.d_model = 8;
            c.n_heads = 2;
            c.d_ff = {16, 16};
            c.vocab_size = BpeTokenizer::base_vocab_size;
            c.max_seq = 12;
            c.activation = ActivationKind::gelu;
            return c;
        }(),
        BpeTokenizer::byte_level(), 33);
    const StatsReport stats = calib_stats(base);

    const float lo = 1e-3f;
    const float hi = 1e-1f;
    const CriterionPlan a = plan_activation(stats, lo);
    const CriterionPlan b = plan_activation(stats, hi);
    for (size_t l = 0; l < a.droppable.size(); ++l) {
        for (size_t j = 0; j < a.droppable[l].size(); ++j) {
            if (a.droppable[l][j]) CHECK(b.droppable[l][j]);
        }
    }
}

TEST_CASE("a plan that drops nothing reproduces the checkpoint bit for bit") {
    const ModelBundle base = dead_unit_model();
    const StatsReport stats = calib_stats(base);
    PlanOptions opt;
    opt.eps_linear = 0.0f;
    opt.eps_act = 0.0f;
    opt.prune_embeddings = false;
    const PrunePlan plan = build_plan(base, stats, opt);
    CHECK(plan.predicted_param_count == param_count(base));

    const PruneResult result = merge_and_apply(base, plan);
    CHECK(serialize_model(result.model) == serialize_model(base));
    CHECK(relative_size(base, result.model) == 100.0);
}

TEST_CASE("provenance distinguishes the two criteria") {
    // unit 0: quiet pre-activation only; unit 1: quiet post-activation only;
    // unit 2: quiet at both sites; unit 3: alive
    StatsReport stats = one_site_report("layers.0.mlp_in.output", {1e-6f, 0.5f, 1e-6f, 0.4f});
    SiteStats act;
    act.site = "layers.0.act.output";
    act.width = 4;
    act.n_tok = 1;
    act.m = {0.3f, 1e-6f, 1e-6f, 0.2f};
    stats.sites.push_back(act);

    const CriterionPlan lin = plan_linear(stats, 1e-3f);
    const CriterionPlan a = plan_activation(stats, 1e-3f);
    CHECK(lin.droppable[0] == std::vector<uint8_t>{1, 0, 1, 0});
    CHECK(a.droppable[0] == std::vector<uint8_t>{0, 1, 1, 0});
}

TEST_CASE("plan json roundtrip preserves every field") {
    const ModelBundle base = dead_unit_model();
    const StatsReport stats = calib_stats(base);
    PlanOptions opt;
    opt.eps_linear = 2e-3f;
    opt.eps_act = 1e-3f;
    opt.min_token_count = 1;
    const PrunePlan plan = build_plan(base, stats, opt);

    testutil::TempDir dir("plan");
    plan.save(dir.file("plan.json"));
    const PrunePlan back = PrunePlan::load(dir.file("plan.json"));
    CHECK(back.to_json_string() == plan.to_json_string());
    CHECK(back.fingerprint == plan.fingerprint);
    CHECK(back.eps_linear == plan.eps_linear);
    CHECK(back.eps_act == plan.eps_act);
    CHECK(back.min_token_count == plan.min_token_count);
    CHECK(back.predicted_param_count == plan.predicted_param_count);
    CHECK(back.keep_tokens == plan.keep_tokens);
    REQUIRE(back.layers.size() == plan.layers.size());
    for (size_t l = 0; l < back.layers.size(); ++l) {
        CHECK(back.layers[l].keep_hidden == plan.layers[l].keep_hidden);
        CHECK(back.layers[l].dropped.size() == plan.layers[l].dropped.size());
    }

    CHECK_THROWS_AS(PrunePlan::from_json_string("{}"), Error);
    CHECK_THROWS_AS(PrunePlan::from_json_string("no"), Error);
}

TEST_CASE("plans are pinned to their checkpoint") {
    const ModelBundle base = dead_unit_model();
    const StatsReport stats = calib_stats(base);
    const ModelBundle other = init_model(base.config, BpeTokenizer::byte_level(), 99);
    try {
        build_plan(other, stats, PlanOptions{});
        FAIL("expected fingerprint error");
    } catch (const Error& e) {
        CHECK(e.cls() == ErrorClass::fingerprint);
    }

    PlanOptions opt;
    opt.prune_embeddings = false;
    PrunePlan plan = build_plan(base, stats, opt);
    try {
        merge_and_apply(other, plan);
        FAIL("expected fingerprint error");
    } catch (const Error& e) {
        CHECK(e.cls() == ErrorClass::fingerprint);
    }

    // tampered keep sets are rejected even with the right fingerprint
    PrunePlan bad = plan;
    bad.layers[0].keep_hidden = {3, 3, 5};
    CHECK_THROWS_AS(merge_and_apply(base, bad), Error);
    bad = plan;
    bad.layers[0].keep_hidden = {999};
    CHECK_THROWS_AS(merge_and_apply(base, bad), Error);
    bad = plan;
    bad.keep_tokens.erase(bad.keep_tokens.begin());  // drop <pad>
    CHECK_THROWS_AS(merge_and_apply(base, bad), Error);
}

TEST_CASE("embedding pruning remaps ids and preserves kept-column logits") {
    // tokenizer with merges so closure matters
    const std::vector<std::string> corpus = {"abab abab", "cdcd cdcd"};
    const BpeTokenizer tok = BpeTokenizer::train(corpus, BpeTokenizer::base_vocab_size + 6);

    ModelConfig c;
    c.n_layers = 1;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = {8};
    c.vocab_size = tok.vocab_size();
    c.max_seq = 16;
    const ModelBundle base = init_model(c, tok, 7);

    // calibrate on the "ab" half of the corpus only
    CollectOptions co;
    co.seq_len = 8;
    co.dataset_id = "ab-domain";
    const StatsReport stats = collect_stats(base, {"abab abab"}, co);

    PlanOptions opt;
    opt.eps_linear = 0.0f;  // isolate embedding pruning
    opt.eps_act = 0.0f;
    opt.min_token_count = 0;
    const PrunePlan plan = build_plan(base, stats, opt);
    CHECK(plan.keep_tokens.size() < static_cast<size_t>(tok.vocab_size()));

    const PruneResult result = merge_and_apply(base, plan);
    const ModelBundle& pruned = result.model;
    CHECK(pruned.config.vocab_size == static_cast<int64_t>(plan.keep_tokens.size()));
    CHECK(param_count(pruned) == plan.predicted_param_count);

    // retained text: identical token stream after remap, identical decode
    const std::string text = "abab abab";
    const std::vector<int32_t> old_ids = base.tokenizer.encode(text);
    std::vector<int32_t> remapped;
    for (int32_t id : old_ids) {
        REQUIRE(result.remap.old_to_new[static_cast<size_t>(id)] != -1);
        remapped.push_back(result.remap.old_to_new[static_cast<size_t>(id)]);
    }
    CHECK(pruned.tokenizer.encode(text) == remapped);
    CHECK(pruned.tokenizer.decode(remapped) == text);

    // logits for kept vocabulary columns are untouched
    const Tensor a = forward(base, old_ids);
    const Tensor b = forward(pruned, remapped);
    REQUIRE(b.dim(1) == static_cast<int64_t>(plan.keep_tokens.size()));
    for (int64_t t = 0; t < a.dim(0); ++t) {
        for (size_t n = 0; n < plan.keep_tokens.size(); ++n) {
            CHECK(a.at(t, plan.keep_tokens[n]) == b.at(t, static_cast<int64_t>(n)));
        }
    }
}
