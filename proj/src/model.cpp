#include "minigpt/model.hpp"

#include <unordered_map>
#include <utility>

#include "json.hpp"

namespace minigpt {

namespace {

using ordered_json = nlohmann::ordered_json;

std::string layer_prefix(int64_t i) { return "layers." + std::to_string(i) + "."; }

// Shared traversal so const and mutable visitors cannot drift apart.
template <class Bundle, class Fn>
void visit_tensors(Bundle& m, Fn&& fn) {
    fn("token_embedding", m.token_embedding);
    fn("pos_embedding", m.pos_embedding);
    for (size_t i = 0; i < m.layers.size(); ++i) {
        auto& l = m.layers[i];
        const std::string p = layer_prefix(static_cast<int64_t>(i));
        fn(p + "ln1.gain", l.ln1_gain);
        fn(p + "ln1.bias", l.ln1_bias);
        fn(p + "attn.wq", l.wq);
        fn(p + "attn.bq", l.bq);
        fn(p + "attn.wk", l.wk);
        fn(p + "attn.bk", l.bk);
        fn(p + "attn.wv", l.wv);
        fn(p + "attn.bv", l.bv);
        fn(p + "attn.wo", l.wo);
        fn(p + "attn.bo", l.bo);
        fn(p + "ln2.gain", l.ln2_gain);
        fn(p + "ln2.bias", l.ln2_bias);
        fn(p + "mlp_in.weight", l.mlp_in_w);
        fn(p + "mlp_in.bias", l.mlp_in_b);
        fn(p + "mlp_out.weight", l.mlp_out_w);
        fn(p + "mlp_out.bias", l.mlp_out_b);
    }
    fn("final_ln.gain", m.final_ln_gain);
    fn("final_ln.bias", m.final_ln_bias);
    if (!m.config.tie_lm_head) {
        fn("lm_head.weight", m.lm_head_w);
        fn("lm_head.bias", m.lm_head_b);
    }
}

void expect_shape(const Tensor& t, const std::string& name, const std::vector<int64_t>& shape) {
    if (t.shape() != shape) {
        Tensor want = Tensor::zeros(shape);
        fail(ErrorClass::dimension,
             "tensor " + name + " has shape " + t.shape_str() + ", config requires " + want.shape_str());
    }
}

}  // namespace

void ModelConfig::validate() const {
    if (n_layers < 0) fail(ErrorClass::config, "n_layers must be non-negative");
    if (d_model < 1 || n_heads < 1 || vocab_size < 1 || max_seq < 1) {
        fail(ErrorClass::config, "d_model, n_heads, vocab_size, and max_seq must all be at least 1");
    }
    if (d_model % n_heads != 0) {
        fail(ErrorClass::config, "d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                                     std::to_string(n_heads));
    }
    if (static_cast<int64_t>(d_ff.size()) != n_layers) {
        fail(ErrorClass::config, "d_ff lists " + std::to_string(d_ff.size()) + " layers, n_layers is " +
                                     std::to_string(n_layers));
    }
    for (int64_t f : d_ff) {
        if (f < 1) fail(ErrorClass::config, "every d_ff entry must be at least 1");
    }
}

std::string ModelConfig::to_json_string() const {
    ordered_json j;
    j["version"] = 1;
    j["n_layers"] = n_layers;
    j["d_model"] = d_model;
    j["n_heads"] = n_heads;
    j["d_ff"] = d_ff;
    j["vocab_size"] = vocab_size;
    j["max_seq"] = max_seq;
    j["activation"] = activation_name(activation);
    j["tie_lm_head"] = tie_lm_head;
    return j.dump();
}

ModelConfig ModelConfig::from_json_string(const std::string& text) {
    ordered_json j = ordered_json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        fail(ErrorClass::format, "model config is not valid JSON");
    }
    if (j.value("version", -1) != 1) fail(ErrorClass::format, "unsupported model config version");
    for (const char* key : {"n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq", "activation",
                            "tie_lm_head"}) {
        if (!j.contains(key)) fail(ErrorClass::format, std::string("model config is missing ") + key);
    }
    ModelConfig c;
    c.n_layers = j["n_layers"].get<int64_t>();
    c.d_model = j["d_model"].get<int64_t>();
    c.n_heads = j["n_heads"].get<int64_t>();
    c.d_ff = j["d_ff"].get<std::vector<int64_t>>();
    c.vocab_size = j["vocab_size"].get<int64_t>();
    c.max_seq = j["max_seq"].get<int64_t>();
    c.activation = activation_from_name(j["activation"].get<std::string>());
    c.tie_lm_head = j["tie_lm_head"].get<bool>();
    c.validate();
    return c;
}

void ModelBundle::validate() const {
    config.validate();
    if (static_cast<int64_t>(tokenizer.vocab_size()) != config.vocab_size) {
        fail(ErrorClass::dimension, "tokenizer vocab of " + std::to_string(tokenizer.vocab_size()) +
                                        " does not match config vocab_size " + std::to_string(config.vocab_size));
    }
    if (static_cast<int64_t>(layers.size()) != config.n_layers) {
        fail(ErrorClass::dimension, "bundle has " + std::to_string(layers.size()) + " layers, config requires " +
                                        std::to_string(config.n_layers));
    }
    const int64_t d = config.d_model;
    expect_shape(token_embedding, "token_embedding", {config.vocab_size, d});
    expect_shape(pos_embedding, "pos_embedding", {config.max_seq, d});
    for (size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        const std::string p = layer_prefix(static_cast<int64_t>(i));
        const int64_t f = config.d_ff[i];
        expect_shape(l.ln1_gain, p + "ln1.gain", {d});
        expect_shape(l.ln1_bias, p + "ln1.bias", {d});
        for (const auto* w : {&l.wq, &l.wk, &l.wv, &l.wo}) expect_shape(*w, p + "attn.w*", {d, d});
        for (const auto* b : {&l.bq, &l.bk, &l.bv, &l.bo}) expect_shape(*b, p + "attn.b*", {d});
        expect_shape(l.ln2_gain, p + "ln2.gain", {d});
        expect_shape(l.ln2_bias, p + "ln2.bias", {d});
        expect_shape(l.mlp_in_w, p + "mlp_in.weight", {d, f});
        expect_shape(l.mlp_in_b, p + "mlp_in.bias", {f});
        expect_shape(l.mlp_out_w, p + "mlp_out.weight", {f, d});
        expect_shape(l.mlp_out_b, p + "mlp_out.bias", {d});
    }
    expect_shape(final_ln_gain, "final_ln.gain", {d});
    expect_shape(final_ln_bias, "final_ln.bias", {d});
    if (config.tie_lm_head) {
        if (!lm_head_w.empty() || !lm_head_b.empty()) {
            fail(ErrorClass::dimension, "tied lm head must not carry separate head tensors");
        }
    } else {
        expect_shape(lm_head_w, "lm_head.weight", {d, config.vocab_size});
        expect_shape(lm_head_b, "lm_head.bias", {config.vocab_size});
    }
}

void for_each_tensor(ModelBundle& m, const std::function<void(const std::string&, Tensor&)>& fn) {
    visit_tensors(m, fn);
}

void for_each_tensor(const ModelBundle& m, const std::function<void(const std::string&, const Tensor&)>& fn) {
    visit_tensors(m, fn);
}

ModelBundle allocate_bundle(ModelConfig config, BpeTokenizer tokenizer) {
    config.validate();
    if (static_cast<int64_t>(tokenizer.vocab_size()) != config.vocab_size) {
        fail(ErrorClass::dimension, "tokenizer vocab of " + std::to_string(tokenizer.vocab_size()) +
                                        " does not match config vocab_size " + std::to_string(config.vocab_size));
    }
    ModelBundle m;
    m.config = std::move(config);
    m.tokenizer = std::move(tokenizer);
    const int64_t d = m.config.d_model;
    const int64_t v = m.config.vocab_size;

    m.token_embedding = Tensor::zeros({v, d});
    m.pos_embedding = Tensor::zeros({m.config.max_seq, d});
    m.layers.resize(static_cast<size_t>(m.config.n_layers));
    for (size_t i = 0; i < m.layers.size(); ++i) {
        auto& l = m.layers[i];
        const int64_t f = m.config.d_ff[i];
        l.ln1_gain = Tensor::zeros({d});
        l.ln1_bias = Tensor::zeros({d});
        l.wq = Tensor::zeros({d, d});
        l.bq = Tensor::zeros({d});
        l.wk = Tensor::zeros({d, d});
        l.bk = Tensor::zeros({d});
        l.wv = Tensor::zeros({d, d});
        l.bv = Tensor::zeros({d});
        l.wo = Tensor::zeros({d, d});
        l.bo = Tensor::zeros({d});
        l.ln2_gain = Tensor::zeros({d});
        l.ln2_bias = Tensor::zeros({d});
        l.mlp_in_w = Tensor::zeros({d, f});
        l.mlp_in_b = Tensor::zeros({f});
        l.mlp_out_w = Tensor::zeros({f, d});
        l.mlp_out_b = Tensor::zeros({d});
    }
    m.final_ln_gain = Tensor::zeros({d});
    m.final_ln_bias = Tensor::zeros({d});
    if (!m.config.tie_lm_head) {
        m.lm_head_w = Tensor::zeros({d, v});
        m.lm_head_b = Tensor::zeros({v});
    }
    m.validate();
    return m;
}

ModelBundle init_model(ModelConfig config, BpeTokenizer tokenizer, uint64_t seed) {
    ModelBundle m = allocate_bundle(std::move(config), std::move(tokenizer));

    // Weights draw N(0, 0.02); biases stay zero and layernorm gains are one.
    // Draw order follows the checkpoint tensor order so init is reproducible.
    Rng rng(seed);
    for_each_tensor(m, [&rng](const std::string& name, Tensor& t) {
        const bool is_gain = name.size() >= 5 && name.compare(name.size() - 5, 5, ".gain") == 0;
        if (is_gain) {
            for (float& x : t.mut()) x = 1.0f;
        } else if (t.ndim() > 1) {
            for (float& x : t.mut()) x = static_cast<float>(rng.normal() * 0.02);
        }
        // remaining 1-d tensors are biases and stay zero
    });
    return m;
}

namespace {

// The two forward flavours share this template so evaluation and training
// can never disagree on the math.
struct EvalVal {
    Tensor owned;
    const Tensor* ref = nullptr;
    const Tensor& get() const { return ref ? *ref : owned; }
};

struct TensorEngine {
    using V = EvalVal;
    V param(const std::string&, const Tensor& t) { return V{Tensor{}, &t}; }
    V embed(const V& table, std::span<const int32_t> ids) { return V{ops::embed_rows(table.get(), ids)}; }
    V slice(const V& t, int64_t row0, int64_t rows) { return V{ops::slice_rows(t.get(), row0, rows)}; }
    V add(const V& a, const V& b) { return V{ops::add(a.get(), b.get())}; }
    V add_bias(const V& x, const V& b) { return V{ops::add_bias(x.get(), b.get())}; }
    V matmul(const V& a, const V& b) { return V{ops::matmul(a.get(), b.get())}; }
    V matmul_nt(const V& a, const V& b) { return V{ops::matmul_nt(a.get(), b.get())}; }
    V layernorm(const V& x, const V& g, const V& b) { return V{ops::layernorm(x.get(), g.get(), b.get(), kLayerNormEps)}; }
    V activation(const V& x, ActivationKind k) { return V{ops::activation(x.get(), k)}; }
    V attention(const V& q, const V& k, const V& v, int64_t heads) {
        return V{ops::causal_attention(q.get(), k.get(), v.get(), heads)};
    }
    const Tensor& peek(const V& v) { return v.get(); }
};

struct TapeEngine {
    Tape& tape;
    std::vector<std::pair<std::string, Tape::Id>>* params;
    std::unordered_map<std::string, Tape::Id> seen;

    using V = Tape::Id;
    V param(const std::string& name, const Tensor& t) {
        auto it = seen.find(name);
        if (it != seen.end()) return it->second;
        const V id = tape.leaf(t, true);
        seen.emplace(name, id);
        params->emplace_back(name, id);
        return id;
    }
    V embed(V table, std::span<const int32_t> ids) {
        return tape.embed_rows(table, std::vector<int32_t>(ids.begin(), ids.end()));
    }
    V slice(V t, int64_t row0, int64_t rows) { return tape.slice_rows(t, row0, rows); }
    V add(V a, V b) { return tape.add(a, b); }
    V add_bias(V x, V b) { return tape.add_bias(x, b); }
    V matmul(V a, V b) { return tape.matmul(a, b); }
    V matmul_nt(V a, V b) { return tape.matmul_nt(a, b); }
    V layernorm(V x, V g, V b) { return tape.layernorm(x, g, b, kLayerNormEps); }
    V activation(V x, ActivationKind k) { return tape.activation(x, k); }
    V attention(V q, V k, V v, int64_t heads) { return tape.causal_attention(q, k, v, heads); }
    const Tensor& peek(V v) { return tape.value(v); }
};

template <class Engine>
typename Engine::V forward_impl(Engine& eng, const ModelBundle& m, std::span<const int32_t> tokens,
                                ActivationObserver* observer) {
    const auto& cfg = m.config;
    const int64_t t_len = static_cast<int64_t>(tokens.size());
    if (t_len < 1) fail(ErrorClass::dimension, "forward requires at least one token");
    if (t_len > cfg.max_seq) {
        fail(ErrorClass::dimension, "sequence of " + std::to_string(t_len) + " tokens exceeds max_seq " +
                                        std::to_string(cfg.max_seq));
    }
    for (int32_t id : tokens) {
        if (id < 0 || id >= cfg.vocab_size) {
            fail(ErrorClass::index,
                 "token id " + std::to_string(id) + " out of range for vocab of " + std::to_string(cfg.vocab_size));
        }
    }
    auto see = [&](const std::string& site, const typename Engine::V& v) {
        if (observer != nullptr) observer->observe(site, eng.peek(v));
    };

    auto tok_table = eng.param("token_embedding", m.token_embedding);
    auto x = eng.add(eng.embed(tok_table, tokens),
                     eng.slice(eng.param("pos_embedding", m.pos_embedding), 0, t_len));
    see("embedding.output", x);

    for (size_t i = 0; i < m.layers.size(); ++i) {
        const auto& l = m.layers[i];
        const std::string p = layer_prefix(static_cast<int64_t>(i));

        auto h = eng.layernorm(x, eng.param(p + "ln1.gain", l.ln1_gain), eng.param(p + "ln1.bias", l.ln1_bias));
        auto q = eng.add_bias(eng.matmul(h, eng.param(p + "attn.wq", l.wq)), eng.param(p + "attn.bq", l.bq));
        auto k = eng.add_bias(eng.matmul(h, eng.param(p + "attn.wk", l.wk)), eng.param(p + "attn.bk", l.bk));
        auto v = eng.add_bias(eng.matmul(h, eng.param(p + "attn.wv", l.wv)), eng.param(p + "attn.bv", l.bv));
        auto attn = eng.attention(q, k, v, cfg.n_heads);
        auto attn_out = eng.add_bias(eng.matmul(attn, eng.param(p + "attn.wo", l.wo)), eng.param(p + "attn.bo", l.bo));
        see(p + "attn_out.output", attn_out);
        x = eng.add(x, attn_out);

        auto mlp_in = eng.layernorm(x, eng.param(p + "ln2.gain", l.ln2_gain), eng.param(p + "ln2.bias", l.ln2_bias));
        see(p + "mlp_in.input", mlp_in);
        auto pre = eng.add_bias(eng.matmul(mlp_in, eng.param(p + "mlp_in.weight", l.mlp_in_w)),
                                eng.param(p + "mlp_in.bias", l.mlp_in_b));
        see(p + "mlp_in.output", pre);
        auto act = eng.activation(pre, cfg.activation);
        see(p + "act.output", act);
        auto mlp_out = eng.add_bias(eng.matmul(act, eng.param(p + "mlp_out.weight", l.mlp_out_w)),
                                    eng.param(p + "mlp_out.bias", l.mlp_out_b));
        see(p + "mlp_out.output", mlp_out);
        x = eng.add(x, mlp_out);
    }

    x = eng.layernorm(x, eng.param("final_ln.gain", m.final_ln_gain), eng.param("final_ln.bias", m.final_ln_bias));
    if (cfg.tie_lm_head) {
        return eng.matmul_nt(x, tok_table);
    }
    return eng.add_bias(eng.matmul(x, eng.param("lm_head.weight", m.lm_head_w)),
                        eng.param("lm_head.bias", m.lm_head_b));
}

}  // namespace

Tensor forward(const ModelBundle& m, std::span<const int32_t> tokens, ActivationObserver* observer) {
    TensorEngine eng;
    return forward_impl(eng, m, tokens, observer).get();
}

TapeRun forward_on_tape(Tape& tape, const ModelBundle& m, std::span<const int32_t> tokens) {
    TapeRun run;
    TapeEngine eng{tape, &run.params, {}};
    run.logits = forward_impl(eng, m, tokens, nullptr);
    return run;
}

int64_t param_count(const ModelBundle& m) {
    int64_t count = 0;
    for_each_tensor(m, [&count](const std::string&, const Tensor& t) { count += t.numel(); });
    return count;
}

int64_t size_bytes(const ModelBundle& m) { return 4 * param_count(m); }

}  // namespace minigpt
