#include "minigpt/tape.hpp"

#include <cmath>

namespace minigpt {

namespace ops {

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(0) != b.dim(0)) {
        fail(ErrorClass::dimension,
             "matmul_tn: shapes " + a.shape_str() + "^T x " + b.shape_str() + " do not compose");
    }
    const int64_t m = a.dim(0), kk = a.dim(1), n = b.dim(1);
    Tensor c = Tensor::zeros({kk, n});
    auto pa = a.data();
    auto pb = b.data();
    auto pc = c.mut();
    std::vector<double> acc(static_cast<size_t>(n));
    for (int64_t i = 0; i < kk; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int64_t r = 0; r < m; ++r) {
            const double av = pa[static_cast<size_t>(r * kk + i)];
            const float* brow = pb.data() + r * n;
            for (int64_t j = 0; j < n; ++j) {
                acc[static_cast<size_t>(j)] += av * brow[j];
            }
        }
        for (int64_t j = 0; j < n; ++j) {
            pc[static_cast<size_t>(i * n + j)] = static_cast<float>(acc[static_cast<size_t>(j)]);
        }
    }
    ensure_finite(c, "matmul_tn");
    return c;
}

}  // namespace ops

Tape::Id Tape::push_value(Tensor value, bool needs_grad) {
    values_.push_back(std::move(value));
    grads_.emplace_back();
    requires_.push_back(needs_grad);
    return static_cast<Id>(values_.size() - 1);
}

void Tape::check(Id id, const char* who) const {
    if (id < 0 || static_cast<size_t>(id) >= values_.size()) {
        fail(ErrorClass::contract, std::string(who) + ": id not on this tape");
    }
}

Tape::Id Tape::leaf(Tensor value, bool requires_grad) {
    ensure_finite(value, "leaf");
    const Id out = push_value(std::move(value), requires_grad);
    Node n;
    n.kind = OpKind::leaf;
    n.out = out;
    nodes_.push_back(std::move(n));
    return out;
}

Tape::Id Tape::record(Node node, Tensor value) {
    bool needs_grad = false;
    for (Id in : node.in) {
        if (in >= 0 && requires_[static_cast<size_t>(in)]) {
            needs_grad = true;
        }
    }
    const Id out = push_value(std::move(value), needs_grad);
    node.out = out;
    nodes_.push_back(std::move(node));
    return out;
}

const Tensor& Tape::value(Id id) const {
    check(id, "value");
    return values_[static_cast<size_t>(id)];
}

bool Tape::requires_grad(Id id) const {
    check(id, "requires_grad");
    return requires_[static_cast<size_t>(id)];
}

Tape::Id Tape::matmul(Id a, Id b) {
    check(a, "matmul");
    check(b, "matmul");
    Node n;
    n.kind = OpKind::matmul;
    n.in = {a, b, -1};
    return record(std::move(n), ops::matmul(value(a), value(b)));
}

Tape::Id Tape::matmul_nt(Id a, Id b) {
    check(a, "matmul_nt");
    check(b, "matmul_nt");
    Node n;
    n.kind = OpKind::matmul_nt;
    n.in = {a, b, -1};
    return record(std::move(n), ops::matmul_nt(value(a), value(b)));
}

Tape::Id Tape::add(Id a, Id b) {
    check(a, "add");
    check(b, "add");
    Node n;
    n.kind = OpKind::add;
    n.in = {a, b, -1};
    return record(std::move(n), ops::add(value(a), value(b)));
}

Tape::Id Tape::add_bias(Id x, Id bias) {
    check(x, "add_bias");
    check(bias, "add_bias");
    Node n;
    n.kind = OpKind::add_bias;
    n.in = {x, bias, -1};
    return record(std::move(n), ops::add_bias(value(x), value(bias)));
}

Tape::Id Tape::mul(Id a, Id b) {
    check(a, "mul");
    check(b, "mul");
    Node n;
    n.kind = OpKind::mul;
    n.in = {a, b, -1};
    return record(std::move(n), ops::mul(value(a), value(b)));
}

Tape::Id Tape::scale(Id x, float s) {
    check(x, "scale");
    Node n;
    n.kind = OpKind::scale;
    n.in = {x, -1, -1};
    n.fparam = s;
    return record(std::move(n), ops::scale(value(x), s));
}

Tape::Id Tape::sum(Id x) {
    check(x, "sum");
    Node n;
    n.kind = OpKind::sum;
    n.in = {x, -1, -1};
    return record(std::move(n), ops::sum(value(x)));
}

Tape::Id Tape::activation(Id x, ActivationKind kind) {
    check(x, "activation");
    Node n;
    n.kind = OpKind::activation;
    n.in = {x, -1, -1};
    n.iparam = static_cast<int>(kind);
    return record(std::move(n), ops::activation(value(x), kind));
}

Tape::Id Tape::layernorm(Id x, Id gain, Id bias, float eps) {
    check(x, "layernorm");
    check(gain, "layernorm");
    check(bias, "layernorm");
    const Tensor& xv = value(x);
    Tensor out = ops::layernorm(xv, value(gain), value(bias), eps);

    // recompute and save xhat and the per-row inverse stddev for backward
    const int64_t t = xv.dim(0), d = xv.dim(1);
    Tensor xhat = Tensor::zeros({t, d});
    Tensor inv = Tensor::zeros({t});
    auto px = xv.data();
    auto ph = xhat.mut();
    auto pi = inv.mut();
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
        const double rstd = 1.0 / std::sqrt(var + static_cast<double>(eps));
        pi[static_cast<size_t>(i)] = static_cast<float>(rstd);
        for (int64_t j = 0; j < d; ++j) {
            ph[static_cast<size_t>(i * d + j)] = static_cast<float>((row[j] - mean) * rstd);
        }
    }

    Node n;
    n.kind = OpKind::layernorm;
    n.in = {x, gain, bias};
    n.fparam = eps;
    n.saved_a = std::move(xhat);
    n.saved_b = std::move(inv);
    return record(std::move(n), std::move(out));
}

Tape::Id Tape::embed_rows(Id table, std::vector<int32_t> ids) {
    check(table, "embed_rows");
    Node n;
    n.kind = OpKind::embed_rows;
    n.in = {table, -1, -1};
    Tensor out = ops::embed_rows(value(table), ids);
    n.ids = std::move(ids);
    return record(std::move(n), std::move(out));
}

Tape::Id Tape::slice_rows(Id table, int64_t start, int64_t count) {
    check(table, "slice_rows");
    Node n;
    n.kind = OpKind::slice_rows;
    n.in = {table, -1, -1};
    n.start = start;
    return record(std::move(n), ops::slice_rows(value(table), start, count));
}

Tape::Id Tape::causal_attention(Id q, Id k, Id v, int n_heads) {
    check(q, "causal_attention");
    check(k, "causal_attention");
    check(v, "causal_attention");
    Node n;
    n.kind = OpKind::attention;
    n.in = {q, k, v};
    n.iparam = n_heads;
    Tensor probs;
    Tensor out = ops::causal_attention(value(q), value(k), value(v), n_heads, &probs);
    n.saved_a = std::move(probs);
    return record(std::move(n), std::move(out));
}

Tape::Id Tape::softmax_cross_entropy(Id logits, std::vector<int32_t> targets) {
    check(logits, "softmax_cross_entropy");
    Node n;
    n.kind = OpKind::xent;
    n.in = {logits, -1, -1};
    Tensor probs;
    const float mean = ops::softmax_cross_entropy(value(logits), targets, &probs);
    n.saved_a = std::move(probs);
    n.ids = std::move(targets);
    return record(std::move(n), Tensor::from({1}, {mean}));
}

bool Tape::has_grad(Id id) const {
    check(id, "has_grad");
    return !grads_[static_cast<size_t>(id)].empty();
}

const Tensor& Tape::grad(Id id) const {
    check(id, "grad");
    if (grads_[static_cast<size_t>(id)].empty()) {
        fail(ErrorClass::contract, "grad: no gradient recorded for this id");
    }
    return grads_[static_cast<size_t>(id)];
}

void Tape::accumulate(Id id, const Tensor& g) {
    if (!requires_[static_cast<size_t>(id)]) {
        return;
    }
    Tensor& slot = grads_[static_cast<size_t>(id)];
    if (slot.empty()) {
        slot = Tensor::zeros(values_[static_cast<size_t>(id)].shape());
    }
    auto pd = slot.mut();
    auto pg = g.data();
    for (size_t i = 0; i < pd.size(); ++i) {
        pd[i] += pg[i];
    }
}

void Tape::backward(Id loss) {
    check(loss, "backward");
    if (ran_backward_) {
        fail(ErrorClass::contract, "backward: tape already differentiated");
    }
    if (value(loss).numel() != 1) {
        fail(ErrorClass::contract, "backward: loss must be a scalar");
    }
    ran_backward_ = true;
    grads_[static_cast<size_t>(loss)] = Tensor::from({1}, {1.0f});
    for (size_t i = nodes_.size(); i-- > 0;) {
        const Node& n = nodes_[i];
        if (n.kind == OpKind::leaf) {
            continue;
        }
        if (!requires_[static_cast<size_t>(n.out)] || grads_[static_cast<size_t>(n.out)].empty()) {
            continue;
        }
        node_backward(n);
    }
    for (size_t i = 0; i < grads_.size(); ++i) {
        if (!grads_[i].empty()) {
            ensure_finite(grads_[i], "backward");
        }
    }
}

void Tape::node_backward(const Node& n) {
    const Tensor& go = grads_[static_cast<size_t>(n.out)];
    switch (n.kind) {
        case OpKind::leaf:
            break;
        case OpKind::matmul: {
            const Tensor& a = value(n.in[0]);
            const Tensor& b = value(n.in[1]);
            if (requires_[static_cast<size_t>(n.in[0])]) accumulate(n.in[0], ops::matmul_nt(go, b));
            if (requires_[static_cast<size_t>(n.in[1])]) accumulate(n.in[1], ops::matmul_tn(a, go));
            break;
        }
        case OpKind::matmul_nt: {
            const Tensor& a = value(n.in[0]);
            const Tensor& b = value(n.in[1]);
            if (requires_[static_cast<size_t>(n.in[0])]) accumulate(n.in[0], ops::matmul(go, b));
            if (requires_[static_cast<size_t>(n.in[1])]) accumulate(n.in[1], ops::matmul_tn(go, a));
            break;
        }
        case OpKind::add: {
            accumulate(n.in[0], go);
            accumulate(n.in[1], go);
            break;
        }
        case OpKind::add_bias: {
            accumulate(n.in[0], go);
            if (requires_[static_cast<size_t>(n.in[1])]) {
                const int64_t t = go.dim(0), d = go.dim(1);
                Tensor gb = Tensor::zeros({d});
                auto pg = go.data();
                auto pb = gb.mut();
                for (int64_t j = 0; j < d; ++j) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < t; ++i) {
                        acc += pg[static_cast<size_t>(i * d + j)];
                    }
                    pb[static_cast<size_t>(j)] = static_cast<float>(acc);
                }
                accumulate(n.in[1], gb);
            }
            break;
        }
        case OpKind::mul: {
            if (requires_[static_cast<size_t>(n.in[0])]) accumulate(n.in[0], ops::mul(go, value(n.in[1])));
            if (requires_[static_cast<size_t>(n.in[1])]) accumulate(n.in[1], ops::mul(go, value(n.in[0])));
            break;
        }
        case OpKind::scale: {
            accumulate(n.in[0], ops::scale(go, n.fparam));
            break;
        }
        case OpKind::sum: {
            const Tensor& x = value(n.in[0]);
            Tensor gx = Tensor::zeros(x.shape());
            const float g = go.data()[0];
            for (float& v : gx.mut()) {
                v = g;
            }
            accumulate(n.in[0], gx);
            break;
        }
        case OpKind::activation: {
            const Tensor& x = value(n.in[0]);
            Tensor gx = Tensor::zeros(x.shape());
            auto px = x.data();
            auto pg = go.data();
            auto pd = gx.mut();
            if (static_cast<ActivationKind>(n.iparam) == ActivationKind::relu) {
                for (size_t i = 0; i < pd.size(); ++i) {
                    pd[i] = px[i] > 0.0f ? pg[i] : 0.0f;
                }
            } else {
                for (size_t i = 0; i < pd.size(); ++i) {
                    pd[i] = pg[i] * ops::gelu_grad_scalar(px[i]);
                }
            }
            accumulate(n.in[0], gx);
            break;
        }
        case OpKind::layernorm: {
            const Tensor& xhat = n.saved_a;
            const Tensor& inv = n.saved_b;
            const Tensor& gain = value(n.in[1]);
            const int64_t t = xhat.dim(0), d = xhat.dim(1);
            auto pg = go.data();
            auto ph = xhat.data();
            auto pv = inv.data();
            auto pgain = gain.data();
            if (requires_[static_cast<size_t>(n.in[0])]) {
                Tensor gx = Tensor::zeros({t, d});
                auto pd = gx.mut();
                for (int64_t i = 0; i < t; ++i) {
                    double m1 = 0.0, m2 = 0.0;
                    for (int64_t j = 0; j < d; ++j) {
                        const double dxh = static_cast<double>(pg[static_cast<size_t>(i * d + j)]) *
                                           pgain[static_cast<size_t>(j)];
                        m1 += dxh;
                        m2 += dxh * ph[static_cast<size_t>(i * d + j)];
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    const double rstd = pv[static_cast<size_t>(i)];
                    for (int64_t j = 0; j < d; ++j) {
                        const double dxh = static_cast<double>(pg[static_cast<size_t>(i * d + j)]) *
                                           pgain[static_cast<size_t>(j)];
                        pd[static_cast<size_t>(i * d + j)] = static_cast<float>(
                            rstd * (dxh - m1 - ph[static_cast<size_t>(i * d + j)] * m2));
                    }
                }
                accumulate(n.in[0], gx);
            }
            if (requires_[static_cast<size_t>(n.in[1])]) {
                Tensor gg = Tensor::zeros({d});
                auto pd = gg.mut();
                for (int64_t j = 0; j < d; ++j) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < t; ++i) {
                        acc += static_cast<double>(pg[static_cast<size_t>(i * d + j)]) *
                               ph[static_cast<size_t>(i * d + j)];
                    }
                    pd[static_cast<size_t>(j)] = static_cast<float>(acc);
                }
                accumulate(n.in[1], gg);
            }
            if (requires_[static_cast<size_t>(n.in[2])]) {
                Tensor gb = Tensor::zeros({d});
                auto pd = gb.mut();
                for (int64_t j = 0; j < d; ++j) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < t; ++i) {
                        acc += pg[static_cast<size_t>(i * d + j)];
                    }
                    pd[static_cast<size_t>(j)] = static_cast<float>(acc);
                }
                accumulate(n.in[2], gb);
            }
            break;
        }
        case OpKind::embed_rows: {
            if (requires_[static_cast<size_t>(n.in[0])]) {
                const Tensor& table = value(n.in[0]);
                const int64_t d = table.dim(1);
                Tensor gt = Tensor::zeros(table.shape());
                auto pg = go.data();
                auto pd = gt.mut();
                for (size_t i = 0; i < n.ids.size(); ++i) {
                    const int64_t row = n.ids[i];
                    for (int64_t j = 0; j < d; ++j) {
                        pd[static_cast<size_t>(row * d + j)] += pg[static_cast<size_t>(static_cast<int64_t>(i) * d + j)];
                    }
                }
                accumulate(n.in[0], gt);
            }
            break;
        }
        case OpKind::slice_rows: {
            if (requires_[static_cast<size_t>(n.in[0])]) {
                const Tensor& table = value(n.in[0]);
                const int64_t d = table.dim(1);
                const int64_t count = go.dim(0);
                Tensor gt = Tensor::zeros(table.shape());
                auto pg = go.data();
                auto pd = gt.mut();
                for (int64_t i = 0; i < count; ++i) {
                    for (int64_t j = 0; j < d; ++j) {
                        pd[static_cast<size_t>((n.start + i) * d + j)] += pg[static_cast<size_t>(i * d + j)];
                    }
                }
                accumulate(n.in[0], gt);
            }
            break;
        }
        case OpKind::attention: {
            const Tensor& q = value(n.in[0]);
            const Tensor& k = value(n.in[1]);
            const Tensor& v = value(n.in[2]);
            const Tensor& probs = n.saved_a;
            const int n_heads = n.iparam;
            const int64_t t = q.dim(0), d = q.dim(1);
            const int64_t hd = d / n_heads;
            const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
            Tensor gq = Tensor::zeros({t, d});
            Tensor gk = Tensor::zeros({t, d});
            Tensor gv = Tensor::zeros({t, d});
            auto pq = q.data();
            auto pk = k.data();
            auto pv = v.data();
            auto pp = probs.data();
            auto pgo = go.data();
            auto pgq = gq.mut();
            auto pgk = gk.mut();
            auto pgv = gv.mut();
            std::vector<double> dP(static_cast<size_t>(t));
            std::vector<double> dS(static_cast<size_t>(t));
            for (int h = 0; h < n_heads; ++h) {
                const int64_t off = static_cast<int64_t>(h) * hd;
                for (int64_t i = 0; i < t; ++i) {
                    const float* prow = pp.data() + (static_cast<int64_t>(h) * t + i) * t;
                    // dV and dP over visible positions j <= i
                    double inner = 0.0;
                    for (int64_t j = 0; j <= i; ++j) {
                        double acc = 0.0;
                        for (int64_t c = 0; c < hd; ++c) {
                            acc += static_cast<double>(pgo[static_cast<size_t>(i * d + off + c)]) *
                                   pv[static_cast<size_t>(j * d + off + c)];
                        }
                        dP[static_cast<size_t>(j)] = acc;
                        inner += acc * prow[j];
                        for (int64_t c = 0; c < hd; ++c) {
                            pgv[static_cast<size_t>(j * d + off + c)] +=
                                prow[j] * pgo[static_cast<size_t>(i * d + off + c)];
                        }
                    }
                    for (int64_t j = 0; j <= i; ++j) {
                        dS[static_cast<size_t>(j)] = prow[j] * (dP[static_cast<size_t>(j)] - inner);
                    }
                    for (int64_t j = 0; j <= i; ++j) {
                        const double ds = dS[static_cast<size_t>(j)] * sc;
                        for (int64_t c = 0; c < hd; ++c) {
                            pgq[static_cast<size_t>(i * d + off + c)] +=
                                static_cast<float>(ds * pk[static_cast<size_t>(j * d + off + c)]);
                            pgk[static_cast<size_t>(j * d + off + c)] +=
                                static_cast<float>(ds * pq[static_cast<size_t>(i * d + off + c)]);
                        }
                    }
                }
            }
            accumulate(n.in[0], gq);
            accumulate(n.in[1], gk);
            accumulate(n.in[2], gv);
            break;
        }
        case OpKind::xent: {
            if (requires_[static_cast<size_t>(n.in[0])]) {
                const Tensor& probs = n.saved_a;
                const int64_t t = probs.dim(0), vocab = probs.dim(1);
                const float g = go.data()[0] / static_cast<float>(t);
                Tensor gl = Tensor::zeros({t, vocab});
                auto pp = probs.data();
                auto pd = gl.mut();
                for (int64_t i = 0; i < t; ++i) {
                    for (int64_t j = 0; j < vocab; ++j) {
                        pd[static_cast<size_t>(i * vocab + j)] = pp[static_cast<size_t>(i * vocab + j)] * g;
                    }
                    pd[static_cast<size_t>(i * vocab + n.ids[static_cast<size_t>(i)])] -= g;
                }
                accumulate(n.in[0], gl);
            }
            break;
        }
    }
}

}  // namespace minigpt
