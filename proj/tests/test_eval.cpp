#include "doctest.h"

#include <cmath>
#include <fstream>

#include "json.hpp"
#include "minigpt/eval.hpp"
#include "support/test_util.hpp"

using namespace minigpt;

namespace {

int32_t byte_id(char c) {
    return 3 + static_cast<int32_t>(static_cast<unsigned char>(c));
}

// 16-token tokenizer: the three specials plus bytes 'a'..'m'
BpeTokenizer vocab16_tokenizer() {
    const BpeTokenizer base = BpeTokenizer::byte_level();
    std::vector<uint8_t> keep(static_cast<size_t>(base.vocab_size()), 0);
    keep[0] = keep[1] = keep[2] = 1;
    for (char c = 'a'; c <= 'm'; ++c) keep[static_cast<size_t>(byte_id(c))] = 1;
    return base.prune_vocab(keep).first;
}

ModelBundle zero_model(const BpeTokenizer& tok, int64_t max_seq = 16) {
    ModelConfig c;
    c.n_layers = 0;
    c.d_model = 4;
    c.n_heads = 2;
    c.d_ff = {};
    c.vocab_size = tok.vocab_size();
    c.max_seq = max_seq;
    return allocate_bundle(c, tok);
}

// 0-layer model that puts logit `strength` on the embedded row's successor:
// token embeddings are one-hot, the head column for `next` is the layernormed
// image of `prev`'s embedding scaled up. Everything else predicts uniformly.
ModelBundle copy_model(const std::vector<std::pair<char, char>>& transitions) {
    const BpeTokenizer tok = BpeTokenizer::byte_level();
    ModelBundle m = zero_model(tok, 32);
    for (size_t i = 0; i < m.final_ln_gain.mut().size(); ++i) m.final_ln_gain.mut()[i] = 1.0f;

    const Tensor ones = Tensor::from({4}, {1, 1, 1, 1});
    const Tensor zeros = Tensor::zeros({4});
    int dim = 0;
    for (const auto& [prev, next] : transitions) {
        Tensor e = Tensor::zeros({1, 4});
        e.mut()[static_cast<size_t>(dim)] = 1.0f;
        m.token_embedding.at(byte_id(prev), dim) = 1.0f;
        const Tensor u = ops::layernorm(e, ones, zeros, kLayerNormEps);
        for (int64_t k = 0; k < 4; ++k) {
            m.lm_head_w.at(k, byte_id(next)) = 10.0f * u.data()[static_cast<size_t>(k)];
        }
        ++dim;
    }
    return m;
}

// Reference perplexity with the same window rule, written independently of
// the eval path: per window, forward all but the last token and score the
// shifted targets.
double brute_ppl(const ModelBundle& m, const std::string& text, int64_t seq_len) {
    const std::vector<int32_t> ids = m.tokenizer.encode(text);
    double nll = 0.0;
    int64_t positions = 0;
    for (size_t off = 0; off < ids.size(); off += static_cast<size_t>(seq_len)) {
        const size_t len = std::min(static_cast<size_t>(seq_len), ids.size() - off);
        if (len < 2) continue;
        std::vector<int32_t> inputs(ids.begin() + static_cast<int64_t>(off),
                                    ids.begin() + static_cast<int64_t>(off + len - 1));
        std::vector<int32_t> targets(ids.begin() + static_cast<int64_t>(off + 1),
                                     ids.begin() + static_cast<int64_t>(off + len));
        nll += ops::xent_sum(forward(m, inputs), targets);
        positions += static_cast<int64_t>(targets.size());
    }
    return std::exp(nll / static_cast<double>(positions));
}

ModelBundle random_model(uint64_t seed) {
    ModelConfig c;
    c.n_layers = 1;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = {12};
    c.vocab_size = BpeTokenizer::base_vocab_size;
    c.max_seq = 64;
    return init_model(c, BpeTokenizer::byte_level(), seed);
}

}  // namespace

TEST_CASE("zero-logits model scores uniform perplexity") {
    const BpeTokenizer tok = vocab16_tokenizer();
    REQUIRE(tok.vocab_size() == 16);
    const ModelBundle m = zero_model(tok);
    const EvalReport r = perplexity(m, {"abc", "de"}, 8);
    CHECK(r.value == doctest::Approx(16.0).epsilon(1e-4));
    CHECK(r.total_positions == 3);
    CHECK(r.used == 2);
    CHECK(r.skipped == 0);
}

TEST_CASE("a model wired to copy its memorized sequence approaches perplexity 1") {
    const ModelBundle m = copy_model({{'a', 'b'}, {'b', 'a'}});
    const EvalReport r = perplexity(m, {"abababab"}, 32);
    CHECK(r.value <= 1.01f);
    CHECK(r.value >= 1.0f);
}

TEST_CASE("perplexity pools token-weighted across entries and windows") {
    const ModelBundle m = random_model(5);
    const std::vector<std::string> data = {"hello world", "tiny", "windows everywhere"};

    const EvalReport r = perplexity(m, data, 4);
    // independent recomputation, pooled over entries
    double nll = 0.0;
    int64_t pos = 0;
    for (const std::string& e : data) {
        const std::vector<int32_t> ids = m.tokenizer.encode(e);
        double entry_nll = 0.0;
        int64_t entry_pos = 0;
        for (size_t off = 0; off < ids.size(); off += 4) {
            const size_t len = std::min<size_t>(4, ids.size() - off);
            if (len < 2) continue;
            std::vector<int32_t> in(ids.begin() + static_cast<int64_t>(off),
                                    ids.begin() + static_cast<int64_t>(off + len - 1));
            std::vector<int32_t> tg(ids.begin() + static_cast<int64_t>(off + 1),
                                    ids.begin() + static_cast<int64_t>(off + len));
            entry_nll += ops::xent_sum(forward(m, in), tg);
            entry_pos += static_cast<int64_t>(tg.size());
        }
        nll += entry_nll;
        pos += entry_pos;
    }
    CHECK(r.total_positions == pos);
    CHECK(r.value == static_cast<float>(std::exp(nll / static_cast<double>(pos))));

    // the report's detail rows reproduce the headline value
    double detail_nll = 0.0;
    int64_t detail_pos = 0;
    for (const PplEntryDetail& d : r.entries) {
        detail_nll += d.nll;
        detail_pos += d.positions;
    }
    CHECK(detail_pos == r.total_positions);
    CHECK(r.value == static_cast<float>(std::exp(detail_nll / static_cast<double>(detail_pos))));
}

TEST_CASE("perplexity is invariant to entry order and duplication") {
    const ModelBundle m = random_model(6);
    const std::vector<std::string> data = {"one fish", "two fish", "red fish"};
    const std::vector<std::string> reversed(data.rbegin(), data.rend());
    std::vector<std::string> doubled = data;
    doubled.insert(doubled.end(), data.begin(), data.end());

    const float base = perplexity(m, data, 8).value;
    CHECK(perplexity(m, reversed, 8).value ==
          doctest::Approx(base).epsilon(1e-12));
    CHECK(perplexity(m, doubled, 8).value == doctest::Approx(base).epsilon(1e-6));
}

TEST_CASE("short entries are skipped and counted") {
    const ModelBundle m = random_model(7);
    const EvalReport r = perplexity(m, {"ab", "", "x"}, 8);
    CHECK(r.used == 1);
    CHECK(r.skipped == 2);

    try {
        perplexity(m, {"", "y"}, 8);
        FAIL("expected evaluation error");
    } catch (const Error& e) {
        CHECK(e.cls() == ErrorClass::evaluation);
    }
    CHECK_THROWS_AS(perplexity(m, {}, 8), Error);
    CHECK_THROWS_AS(perplexity(m, {"ab"}, 0), Error);
    CHECK_THROWS_AS(perplexity(m, {"ab"}, m.config.max_seq + 1), Error);
}

TEST_CASE("mcq picks the lowest-perplexity concatenation") {
    const BpeTokenizer tok = BpeTokenizer::byte_level();
    ModelBundle m = zero_model(tok, 32);
    m.lm_head_b.mut()[static_cast<size_t>(byte_id('a'))] = 20.0f;

    std::vector<McqItem> items = {
        {"pick", {"aaaa", "zzzz"}, 0},
        {"pick", {"zzzz", "aaaa"}, 1},
        {"pick", {"zzzz", "bbbb"}, 0},
    };
    const EvalReport r = mcq_eval(m, items);
    REQUIRE(r.items.size() == 3);
    CHECK(r.items[0].chosen == 0);
    CHECK(r.items[1].chosen == 1);
    CHECK(r.items[2].chosen != -1);  // scored, even though both choices are bad
    CHECK(r.items[0].correct);
    CHECK(r.items[1].correct);
    CHECK(r.used == 3);

    // accuracy is recomputable from the detail rows
    int correct = 0;
    for (const McqItemDetail& d : r.items) correct += d.correct ? 1 : 0;
    CHECK(r.value == static_cast<float>(100.0 * correct / 3.0));
}

TEST_CASE("mcq ties break toward the lowest choice index") {
    const ModelBundle m = random_model(8);
    const EvalReport r = mcq_eval(m, {{"which one", {"same", "same"}, 0}});
    REQUIRE(r.items.size() == 1);
    CHECK(r.items[0].choice_ppl[0] == r.items[0].choice_ppl[1]);
    CHECK(r.items[0].chosen == 0);
}

TEST_CASE("mcq selection matches a brute-force per-choice recomputation") {
    const ModelBundle m = random_model(9);
    std::vector<McqItem> items = {
        {"what follows one two three", {"four", "banana", "zebra stripes"}, 0},
        {"complete the rhyme", {"cat sat", "dog howled loud", "xy"}, 1},
        {"longest choice wins or not", {"a bc", "def ghi", "jk"}, 2},
        {"short", {"p", "q"}, 0},
    };
    const EvalReport r = mcq_eval(m, items);
    REQUIRE(r.used == 4);
    for (size_t i = 0; i < items.size(); ++i) {
        int32_t best = 0;
        float best_ppl = 0.0f;
        for (size_t c = 0; c < items[i].choices.size(); ++c) {
            const float ppl = static_cast<float>(
                brute_ppl(m, items[i].question + " " + items[i].choices[c], m.config.max_seq));
            CHECK(r.items[i].choice_ppl[c] == ppl);
            if (c == 0 || ppl < best_ppl) {
                best = static_cast<int32_t>(c);
                best_ppl = ppl;
            }
        }
        CHECK(r.items[i].chosen == best);
    }
}

TEST_CASE("mcq skips items whose choices cannot be scored") {
    const ModelBundle m = random_model(10);
    const EvalReport r = mcq_eval(m, {{"q", {"", "fine"}, 1}, {"q", {"ok", "also ok"}, 0}});
    CHECK(r.used == 1);
    CHECK(r.skipped == 1);
    CHECK(r.items[0].skipped);
    CHECK(r.items[0].chosen == -1);

    try {
        mcq_eval(m, {{"q", {"", "x"}, 0}});
        FAIL("expected evaluation error");
    } catch (const Error& e) {
        CHECK(e.cls() == ErrorClass::evaluation);
    }
    CHECK_THROWS_AS(mcq_eval(m, {}), Error);
}

TEST_CASE("mcq rejects malformed items") {
    const ModelBundle m = random_model(11);
    try {
        mcq_eval(m, {{"q", {"a", "b"}, 2}});
        FAIL("expected format error");
    } catch (const Error& e) {
        CHECK(e.cls() == ErrorClass::format);
    }
    try {
        mcq_eval(m, {{"q", {"only"}, 0}});
        FAIL("expected format error");
    } catch (const Error& e) {
        CHECK(e.cls() == ErrorClass::format);
    }
}

TEST_CASE("answer-only mode scores just the choice tokens") {
    const BpeTokenizer tok = BpeTokenizer::byte_level();
    ModelBundle m = zero_model(tok, 32);
    m.lm_head_b.mut()[static_cast<size_t>(byte_id('a'))] = 20.0f;

    const std::vector<McqItem> items = {{"zzzz", {"aa", "zz"}, 0}};
    const EvalReport whole = mcq_eval(m, items);
    McqOptions opt;
    opt.answer_only = true;
    const EvalReport cond = mcq_eval(m, items, opt);

    CHECK(cond.answer_only);
    CHECK(cond.total_positions < whole.total_positions);
    // byte tokenizer: the question prefix is exactly 5 tokens, so each choice
    // contributes its own 2 positions
    CHECK(cond.total_positions == 4);
    CHECK(cond.items[0].chosen == 0);

    // oracle: conditional NLL of the suffix tokens only
    for (size_t c = 0; c < items[0].choices.size(); ++c) {
        const std::vector<int32_t> ids = tok.encode("zzzz " + items[0].choices[c]);
        const std::vector<int32_t> inputs(ids.begin(), ids.end() - 1);
        const Tensor logits = forward(m, inputs);
        const Tensor tail = ops::slice_rows(logits, 4, 2);
        const std::vector<int32_t> targets(ids.begin() + 5, ids.end());
        const float ppl = static_cast<float>(std::exp(ops::xent_sum(tail, targets) / 2.0));
        CHECK(cond.items[0].choice_ppl[c] == ppl);
    }
}

TEST_CASE("mcq jsonl files load and validate") {
    testutil::TempDir dir("mcq");
    {
        std::ofstream f(dir.file("items.jsonl"));
        f << R"({"question": "2 + 2 =", "choices": ["4", "5"], "answer": 0})" << "\n";
        f << "\n";
        f << R"({"question": "sky color", "choices": ["green", "blue", "red"], "answer": 1})" << "\n";
    }
    const std::vector<McqItem> items = load_mcq_jsonl(dir.file("items.jsonl"));
    REQUIRE(items.size() == 2);
    CHECK(items[0].question == "2 + 2 =");
    CHECK(items[0].choices == std::vector<std::string>{"4", "5"});
    CHECK(items[0].answer_index == 0);
    CHECK(items[1].choices.size() == 3);

    {
        std::ofstream f(dir.file("bad.jsonl"));
        f << R"({"question": "ok", "choices": ["a", "b"], "answer": 0})" << "\n";
        f << "not json\n";
    }
    try {
        load_mcq_jsonl(dir.file("bad.jsonl"));
        FAIL("expected format error");
    } catch (const Error& e) {
        CHECK(e.cls() == ErrorClass::format);
        CHECK(std::string(e.what()).find(":2") != std::string::npos);
    }

    {
        std::ofstream f(dir.file("oor.jsonl"));
        f << R"({"question": "q", "choices": ["a", "b"], "answer": 7})" << "\n";
    }
    try {
        load_mcq_jsonl(dir.file("oor.jsonl"));
        FAIL("expected format error");
    } catch (const Error& e) {
        CHECK(e.cls() == ErrorClass::format);
    }

    try {
        load_mcq_jsonl(dir.file("missing.jsonl"));
        FAIL("expected io error");
    } catch (const Error& e) {
        CHECK(e.cls() == ErrorClass::io);
    }
}

TEST_CASE("eval reports serialize to json and a table") {
    const ModelBundle m = random_model(12);
    const EvalReport p = perplexity(m, {"some text here", "more text"}, 8);
    const nlohmann::json j = nlohmann::json::parse(p.to_json_string());
    CHECK(j["kind"] == "perplexity");
    CHECK(j["value"].get<float>() == p.value);
    CHECK(j["entries"].size() == 2);
    CHECK(p.table().find("perplexity") != std::string::npos);

    const EvalReport q = mcq_eval(m, {{"q", {"a b", "c d"}, 0}});
    const nlohmann::json k = nlohmann::json::parse(q.to_json_string());
    CHECK(k["kind"] == "mcq");
    CHECK(k["separator"] == " ");
    CHECK(k["items"].size() == 1);
    CHECK(q.table().find("accuracy") != std::string::npos);

    testutil::TempDir dir("report");
    q.save(dir.file("r.json"));
    CHECK(!testutil::read_bytes(dir.file("r.json")).empty());
}
