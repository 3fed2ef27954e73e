#include "minigpt/tensor.hpp"

#include <cmath>
#include <sstream>

namespace minigpt {

const char* activation_name(ActivationKind k) {
    return k == ActivationKind::gelu ? "gelu" : "relu";
}

ActivationKind activation_from_name(std::string_view name) {
    if (name == "gelu") return ActivationKind::gelu;
    if (name == "relu") return ActivationKind::relu;
    fail(ErrorClass::format, "unknown activation kind: " + std::string(name));
}

static int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t e : shape) {
        if (e <= 0) {
            fail(ErrorClass::dimension, "tensor extents must be positive");
        }
        n *= e;
    }
    return n;
}

Tensor Tensor::zeros(std::vector<int64_t> shape) {
    Tensor t;
    const int64_t n = shape_numel(shape);
    t.shape_ = std::move(shape);
    t.data_.assign(static_cast<size_t>(n), 0.0f);
    return t;
}

Tensor Tensor::from(std::vector<int64_t> shape, std::vector<float> values) {
    const int64_t n = shape_numel(shape);
    if (n != static_cast<int64_t>(values.size())) {
        fail(ErrorClass::dimension, "tensor data length does not match shape");
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(values);
    return t;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << "x";
        os << shape_[i];
    }
    os << "]";
    return os.str();
}

void ensure_finite(const Tensor& t, const char* where) {
    for (float v : t.data()) {
        if (!std::isfinite(v)) {
            fail(ErrorClass::numeric, std::string("non-finite value produced in ") + where);
        }
    }
}

namespace ops {

static void require_2d(const Tensor& t, const char* who) {
    if (t.ndim() != 2) {
        fail(ErrorClass::dimension, std::string(who) + ": expected 2-D tensor, got " + t.shape_str());
    }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    if (a.dim(1) != b.dim(0)) {
        fail(ErrorClass::dimension,
             "matmul: inner extents differ, " + a.shape_str() + " x " + b.shape_str());
    }
    const int64_t m = a.dim(0), kk = a.dim(1), n = b.dim(1);
    Tensor c = Tensor::zeros({m, n});
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    float* pc = c.mut().data();
    std::vector<double> acc(static_cast<size_t>(n));
    for (int64_t i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        // reduction over k in ascending order
        for (int64_t k = 0; k < kk; ++k) {
            const double av = pa[i * kk + k];
            const float* brow = pb + k * n;
            for (int64_t j = 0; j < n; ++j) {
                acc[static_cast<size_t>(j)] += av * brow[j];
            }
        }
        for (int64_t j = 0; j < n; ++j) {
            pc[i * n + j] = static_cast<float>(acc[static_cast<size_t>(j)]);
        }
    }
    ensure_finite(c, "matmul");
    return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul_nt");
    require_2d(b, "matmul_nt");
    if (a.dim(1) != b.dim(1)) {
        fail(ErrorClass::dimension,
             "matmul_nt: inner extents differ, " + a.shape_str() + " x " + b.shape_str() + "^T");
    }
    const int64_t m = a.dim(0), kk = a.dim(1), n = b.dim(0);
    Tensor c = Tensor::zeros({m, n});
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    float* pc = c.mut().data();
    for (int64_t i = 0; i < m; ++i) {
        const float* arow = pa + i * kk;
        for (int64_t j = 0; j < n; ++j) {
            const float* brow = pb + j * kk;
            double acc = 0.0;
            for (int64_t k = 0; k < kk; ++k) {
                acc += static_cast<double>(arow[k]) * brow[k];
            }
            pc[i * n + j] = static_cast<float>(acc);
        }
    }
    ensure_finite(c, "matmul_nt");
    return c;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        fail(ErrorClass::dimension, "add: shapes differ, " + a.shape_str() + " vs " + b.shape_str());
    }
    Tensor c = Tensor::zeros(a.shape());
    auto pa = a.data();
    auto pb = b.data();
    auto pc = c.mut();
    for (size_t i = 0; i < pa.size(); ++i) {
        pc[i] = pa[i] + pb[i];
    }
    ensure_finite(c, "add");
    return c;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    require_2d(x, "add_bias");
    if (bias.ndim() != 1 || bias.dim(0) != x.dim(1)) {
        fail(ErrorClass::dimension,
             "add_bias: bias " + bias.shape_str() + " does not match " + x.shape_str());
    }
    const int64_t t = x.dim(0), n = x.dim(1);
    Tensor c = Tensor::zeros({t, n});
    auto px = x.data();
    auto pb = bias.data();
    auto pc = c.mut();
    for (int64_t i = 0; i < t; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            pc[static_cast<size_t>(i * n + j)] = px[static_cast<size_t>(i * n + j)] + pb[static_cast<size_t>(j)];
        }
    }
    ensure_finite(c, "add_bias");
    return c;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        fail(ErrorClass::dimension, "mul: shapes differ, " + a.shape_str() + " vs " + b.shape_str());
    }
    Tensor c = Tensor::zeros(a.shape());
    auto pa = a.data();
    auto pb = b.data();
    auto pc = c.mut();
    for (size_t i = 0; i < pa.size(); ++i) {
        pc[i] = pa[i] * pb[i];
    }
    ensure_finite(c, "mul");
    return c;
}

Tensor scale(const Tensor& x, float s) {
    Tensor c = Tensor::zeros(x.shape());
    auto px = x.data();
    auto pc = c.mut();
    for (size_t i = 0; i < px.size(); ++i) {
        pc[i] = px[i] * s;
    }
    ensure_finite(c, "scale");
    return c;
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.data()) {
        acc += v;
    }
    Tensor c = Tensor::from({1}, {static_cast<float>(acc)});
    ensure_finite(c, "sum");
    return c;
}

float gelu_scalar(float x) {
    const double xd = x;
    return static_cast<float>(0.5 * xd * (1.0 + std::erf(xd / 1.4142135623730951)));
}

float gelu_grad_scalar(float x) {
    const double xd = x;
    const double cdf = 0.5 * (1.0 + std::erf(xd / 1.4142135623730951));
    const double pdf = std::exp(-0.5 * xd * xd) * 0.3989422804014327;  // 1/sqrt(2*pi)
    return static_cast<float>(cdf + xd * pdf);
}

Tensor activation(const Tensor& x, ActivationKind kind) {
    Tensor c = Tensor::zeros(x.shape());
    auto px = x.data();
    auto pc = c.mut();
    if (kind == ActivationKind::relu) {
        for (size_t i = 0; i < px.size(); ++i) {
            pc[i] = px[i] > 0.0f ? px[i] : 0.0f;
        }
    } else {
        for (size_t i = 0; i < px.size(); ++i) {
            pc[i] = gelu_scalar(px[i]);
        }
    }
    ensure_finite(c, "activation");
    return c;
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
    require_2d(x, "layernorm");
    const int64_t t = x.dim(0), d = x.dim(1);
    if (gain.ndim() != 1 || gain.dim(0) != d || bias.ndim() != 1 || bias.dim(0) != d) {
        fail(ErrorClass::dimension, "layernorm: gain/bias do not match " + x.shape_str());
    }
    if (!(eps > 0.0f)) {
        fail(ErrorClass::contract, "layernorm: eps must be > 0");
    }
    Tensor c = Tensor::zeros({t, d});
    auto px = x.data();
    auto pg = gain.data();
    auto pb = bias.data();
    auto pc = c.mut();
    for (int64_t i = 0; i < t; ++i) {
        const float* row = px.data() + i * d;
        double mean = 0.0;
        for (int64_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            const double dev = row[j] - mean;
            var += dev * dev;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
        for (int64_t j = 0; j < d; ++j) {
            const double xhat = (row[j] - mean) * inv;
            pc[static_cast<size_t>(i * d + j)] =
                static_cast<float>(xhat * pg[static_cast<size_t>(j)] + pb[static_cast<size_t>(j)]);
        }
    }
    ensure_finite(c, "layernorm");
    return c;
}

Tensor embed_rows(const Tensor& table, std::span<const int32_t> ids) {
    require_2d(table, "embed_rows");
    const int64_t v = table.dim(0), d = table.dim(1);
    Tensor c = Tensor::zeros({static_cast<int64_t>(ids.size()), d});
    auto pt = table.data();
    auto pc = c.mut();
    for (size_t i = 0; i < ids.size(); ++i) {
        const int32_t id = ids[i];
        if (id < 0 || id >= v) {
            fail(ErrorClass::index,
                 "embed_rows: id " + std::to_string(id) + " out of range [0, " + std::to_string(v) + ")");
        }
        const float* row = pt.data() + static_cast<int64_t>(id) * d;
        std::copy(row, row + d, pc.data() + static_cast<int64_t>(i) * d);
    }
    return c;
}

Tensor slice_rows(const Tensor& table, int64_t start, int64_t count) {
    require_2d(table, "slice_rows");
    if (start < 0 || count < 1 || start + count > table.dim(0)) {
        fail(ErrorClass::index, "slice_rows: range out of bounds");
    }
    const int64_t d = table.dim(1);
    Tensor c = Tensor::zeros({count, d});
    auto pt = table.data();
    std::copy(pt.data() + start * d, pt.data() + (start + count) * d, c.mut().data());
    return c;
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads,
                        Tensor* save_probs) {
    require_2d(q, "causal_attention");
    if (!q.same_shape(k) || !q.same_shape(v)) {
        fail(ErrorClass::dimension, "causal_attention: q/k/v shapes differ");
    }
    const int64_t t = q.dim(0), d = q.dim(1);
    if (n_heads < 1 || d % n_heads != 0) {
        fail(ErrorClass::dimension, "causal_attention: d_model not divisible by n_heads");
    }
    const int64_t hd = d / n_heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(hd));

    Tensor out = Tensor::zeros({t, d});
    Tensor probs = Tensor::zeros({static_cast<int64_t>(n_heads) * t, t});
    auto pq = q.data();
    auto pk = k.data();
    auto pv = v.data();
    auto po = out.mut();
    auto pp = probs.mut();

    std::vector<double> row(static_cast<size_t>(t));
    for (int h = 0; h < n_heads; ++h) {
        const int64_t off = static_cast<int64_t>(h) * hd;
        for (int64_t i = 0; i < t; ++i) {
            // scores against positions 0..i (self included), max-subtracted softmax
            double mx = -1e300;
            for (int64_t j = 0; j <= i; ++j) {
                double s = 0.0;
                for (int64_t c = 0; c < hd; ++c) {
                    s += static_cast<double>(pq[static_cast<size_t>(i * d + off + c)]) *
                         pk[static_cast<size_t>(j * d + off + c)];
                }
                s *= sc;
                row[static_cast<size_t>(j)] = s;
                if (s > mx) mx = s;
            }
            double denom = 0.0;
            for (int64_t j = 0; j <= i; ++j) {
                row[static_cast<size_t>(j)] = std::exp(row[static_cast<size_t>(j)] - mx);
                denom += row[static_cast<size_t>(j)];
            }
            float* prow = pp.data() + (static_cast<int64_t>(h) * t + i) * t;
            for (int64_t j = 0; j <= i; ++j) {
                prow[j] = static_cast<float>(row[static_cast<size_t>(j)] / denom);
            }
            for (int64_t c = 0; c < hd; ++c) {
                double acc = 0.0;
                for (int64_t j = 0; j <= i; ++j) {
                    acc += static_cast<double>(prow[j]) * pv[static_cast<size_t>(j * d + off + c)];
                }
                po[static_cast<size_t>(i * d + off + c)] = static_cast<float>(acc);
            }
        }
    }
    ensure_finite(out, "causal_attention");
    if (save_probs) {
        *save_probs = std::move(probs);
    }
    return out;
}

double xent_sum(const Tensor& logits, std::span<const int32_t> targets, Tensor* save_probs) {
    require_2d(logits, "softmax_cross_entropy");
    const int64_t t = logits.dim(0), vocab = logits.dim(1);
    if (static_cast<int64_t>(targets.size()) != t) {
        fail(ErrorClass::dimension, "softmax_cross_entropy: target count does not match rows");
    }
    Tensor probs;
    float* pp = nullptr;
    if (save_probs) {
        probs = Tensor::zeros({t, vocab});
        pp = probs.mut().data();
    }
    auto pl = logits.data();
    double total = 0.0;
    for (int64_t i = 0; i < t; ++i) {
        const int32_t y = targets[static_cast<size_t>(i)];
        if (y < 0 || y >= vocab) {
            fail(ErrorClass::index,
                 "softmax_cross_entropy: target " + std::to_string(y) + " out of range [0, " +
                     std::to_string(vocab) + ")");
        }
        const float* row = pl.data() + i * vocab;
        double mx = row[0];
        for (int64_t j = 1; j < vocab; ++j) {
            if (row[j] > mx) mx = row[j];
        }
        double denom = 0.0;
        for (int64_t j = 0; j < vocab; ++j) {
            denom += std::exp(static_cast<double>(row[j]) - mx);
        }
        const double lse = mx + std::log(denom);
        total += lse - row[y];
        if (pp) {
            for (int64_t j = 0; j < vocab; ++j) {
                pp[i * vocab + j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - lse));
            }
        }
    }
    if (!std::isfinite(total)) {
        fail(ErrorClass::numeric, "non-finite value produced in softmax_cross_entropy");
    }
    if (save_probs) {
        *save_probs = std::move(probs);
    }
    return total;
}

float softmax_cross_entropy(const Tensor& logits, std::span<const int32_t> targets, Tensor* save_probs) {
    const double total = xent_sum(logits, targets, save_probs);
    return static_cast<float>(total / static_cast<double>(logits.dim(0)));
}

}  // namespace ops
}  // namespace minigpt
