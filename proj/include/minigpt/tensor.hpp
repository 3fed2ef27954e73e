#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "minigpt/common.hpp"

namespace minigpt {

enum class ActivationKind : uint8_t { gelu, relu };

const char* activation_name(ActivationKind k);
ActivationKind activation_from_name(std::string_view name);

// ---------------------------------------------------------------------------
// Dense row-major f32 tensor. Plain value semantics: ops never mutate their
// inputs; whoever owns a tensor exclusively may write through mut().
// Every op in ops:: checks its output for NaN/Inf and raises Error(numeric),
// so tensors observable through this API hold finite values.
// ---------------------------------------------------------------------------
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int64_t> shape);
    static Tensor from(std::vector<int64_t> shape, std::vector<float> values);

    const std::vector<int64_t>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    std::span<const float> data() const { return data_; }
    std::span<float> mut() { return data_; }

    // 2-D element access used by the kernels and by tests
    float at(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * shape_[1] + c)]; }
    float& at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * shape_[1] + c)]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    std::string shape_str() const;

private:
    std::vector<int64_t> shape_;
    std::vector<float> data_;
};

// Raises Error(numeric) naming `where` if any element is NaN/Inf.
void ensure_finite(const Tensor& t, const char* where);

// ---------------------------------------------------------------------------
// Pure kernels. All reductions run in a fixed sequential order (ascending
// index of the contracted dimension) with double accumulators, so results are
// bit-identical across runs on the same platform.
// ---------------------------------------------------------------------------
namespace ops {

// c[m,n] = a[m,k] * b[k,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// c[m,n] = a[m,k] * b[n,k]^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);           // same shape
Tensor add_bias(const Tensor& x, const Tensor& bias);   // x[t,n] + bias[n] per row
Tensor mul(const Tensor& a, const Tensor& b);           // elementwise
Tensor scale(const Tensor& x, float s);
Tensor sum(const Tensor& x);                            // scalar, shape {1}

Tensor activation(const Tensor& x, ActivationKind kind);
float gelu_scalar(float x);        // exact erf form: 0.5*x*(1+erf(x/sqrt(2)))
float gelu_grad_scalar(float x);

// per-row normalization over the last dimension, then affine
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps);

Tensor embed_rows(const Tensor& table, std::span<const int32_t> ids);
Tensor slice_rows(const Tensor& table, int64_t start, int64_t count);

// softmax((q k^T) * 1/sqrt(head_dim) + causal mask) v, per head.
// save_probs, when given, receives the per-head attention probabilities laid
// out as [n_heads*t, t].
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads,
                        Tensor* save_probs = nullptr);

// Numerically stable (max-subtracted) mean negative log-likelihood.
// xent_sum returns the summed NLL in double together with the position count;
// softmax_cross_entropy is the mean as f32. save_probs receives the row
// softmax when given.
double xent_sum(const Tensor& logits, std::span<const int32_t> targets, Tensor* save_probs = nullptr);
float softmax_cross_entropy(const Tensor& logits, std::span<const int32_t> targets,
                            Tensor* save_probs = nullptr);

}  // namespace ops
}  // namespace minigpt
