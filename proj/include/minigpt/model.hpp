#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "minigpt/tape.hpp"
#include "minigpt/tensor.hpp"
#include "minigpt/tokenizer.hpp"

namespace minigpt {

struct ModelConfig {
    int64_t n_layers = 0;
    int64_t d_model = 0;
    int64_t n_heads = 0;
    std::vector<int64_t> d_ff;  // one entry per layer; pruned layers may differ
    int64_t vocab_size = 0;
    int64_t max_seq = 0;
    ActivationKind activation = ActivationKind::gelu;
    bool tie_lm_head = false;

    void validate() const;
    std::string to_json_string() const;
    static ModelConfig from_json_string(const std::string& text);
};

struct LayerWeights {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_gain, ln2_bias;
    Tensor mlp_in_w, mlp_in_b;    // [d, d_ff], [d_ff]
    Tensor mlp_out_w, mlp_out_b;  // [d_ff, d], [d]
};

// Decoder weights plus the tokenizer they were trained with. With a tied LM
// head the head tensors stay empty and logits reuse token_embedding.
struct ModelBundle {
    ModelConfig config;
    BpeTokenizer tokenizer;
    Tensor token_embedding;  // [V, d]
    Tensor pos_embedding;    // [max_seq, d]
    std::vector<LayerWeights> layers;
    Tensor final_ln_gain, final_ln_bias;
    Tensor lm_head_w;  // [d, V] untied only
    Tensor lm_head_b;  // [V] untied only

    void validate() const;
};

constexpr float kLayerNormEps = 1e-5f;

// Visits every parameter tensor in the fixed checkpoint order.
void for_each_tensor(ModelBundle& m, const std::function<void(const std::string&, Tensor&)>& fn);
void for_each_tensor(const ModelBundle& m, const std::function<void(const std::string&, const Tensor&)>& fn);

// Receives per-site activation matrices [T, width] during forward. Sites are
// "embedding.output" and, per layer i, "layers.i.attn_out.output",
// "layers.i.mlp_in.input", "layers.i.mlp_in.output", "layers.i.act.output",
// "layers.i.mlp_out.output".
class ActivationObserver {
public:
    virtual ~ActivationObserver() = default;
    virtual void observe(const std::string& site, const Tensor& activations) = 0;
};

// Zero-filled tensors with shapes dictated by the config.
ModelBundle allocate_bundle(ModelConfig config, BpeTokenizer tokenizer);

ModelBundle init_model(ModelConfig config, BpeTokenizer tokenizer, uint64_t seed);

Tensor forward(const ModelBundle& m, std::span<const int32_t> tokens, ActivationObserver* observer = nullptr);

// Forward recorded on a tape for training. `params` maps tensor names to
// their leaf ids in first-use order; with a tied head, token_embedding
// appears once and collects gradient from both of its uses.
struct TapeRun {
    Tape::Id logits = -1;
    std::vector<std::pair<std::string, Tape::Id>> params;
};
TapeRun forward_on_tape(Tape& tape, const ModelBundle& m, std::span<const int32_t> tokens);

int64_t param_count(const ModelBundle& m);
int64_t size_bytes(const ModelBundle& m);

}  // namespace minigpt
