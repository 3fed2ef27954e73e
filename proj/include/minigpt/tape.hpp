#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "minigpt/tensor.hpp"

namespace minigpt {

// ---------------------------------------------------------------------------
// Reverse-mode tape. Ops append nodes in execution order, which keeps the
// node list topologically sorted; backward() walks it once in reverse.
// A tape belongs to a single training step and a single thread.
// ---------------------------------------------------------------------------
class Tape {
public:
    using Id = int32_t;

    Id leaf(Tensor value, bool requires_grad);

    Id matmul(Id a, Id b);
    Id matmul_nt(Id a, Id b);
    Id add(Id a, Id b);
    Id add_bias(Id x, Id bias);
    Id mul(Id a, Id b);
    Id scale(Id x, float s);
    Id sum(Id x);
    Id activation(Id x, ActivationKind kind);
    Id layernorm(Id x, Id gain, Id bias, float eps);
    Id embed_rows(Id table, std::vector<int32_t> ids);
    Id slice_rows(Id table, int64_t start, int64_t count);
    Id causal_attention(Id q, Id k, Id v, int n_heads);
    Id softmax_cross_entropy(Id logits, std::vector<int32_t> targets);

    const Tensor& value(Id id) const;
    bool requires_grad(Id id) const;

    // Populates gradients for every id reachable from `loss` that requires
    // them. `loss` must be a scalar produced on this tape.
    void backward(Id loss);

    bool has_grad(Id id) const;
    const Tensor& grad(Id id) const;  // Error(contract) when absent

    size_t node_count() const { return nodes_.size(); }

private:
    enum class OpKind : uint8_t {
        leaf,
        matmul,
        matmul_nt,
        add,
        add_bias,
        mul,
        scale,
        sum,
        activation,
        layernorm,
        embed_rows,
        slice_rows,
        attention,
        xent,
    };

    struct Node {
        OpKind kind;
        std::array<Id, 3> in{-1, -1, -1};
        Id out = -1;
        float fparam = 0.0f;          // scale factor / layernorm eps
        int iparam = 0;               // activation kind / n_heads
        int64_t start = 0;            // slice_rows
        std::vector<int32_t> ids;     // embed_rows ids / xent targets
        Tensor saved_a;               // layernorm xhat / attention probs / xent probs
        Tensor saved_b;               // layernorm per-row inverse stddev
    };

    Id push_value(Tensor value, bool needs_grad);
    Id record(Node node, Tensor value);
    void check(Id id, const char* who) const;
    void accumulate(Id id, const Tensor& g);
    void node_backward(const Node& n);

    std::vector<Tensor> values_;
    std::vector<Tensor> grads_;
    std::vector<bool> requires_;
    std::vector<Node> nodes_;
    bool ran_backward_ = false;
};

namespace ops {
// aᵀ·b, used by the tape backward pass
Tensor matmul_tn(const Tensor& a, const Tensor& b);
}

}  // namespace minigpt
