#include "doctest.h"

#include <cmath>

#include "minigpt/tensor.hpp"
#include "support/test_util.hpp"

using namespace minigpt;

namespace {

Tensor t2(std::vector<float> v, int64_t r, int64_t c) {
    return Tensor::from({r, c}, std::move(v));
}

}  // namespace

TEST_CASE("matmul identity, annihilator, and hand product") {
    const Tensor a = t2({1, 2, 3, 4}, 2, 2);
    const Tensor eye = t2({1, 0, 0, 1}, 2, 2);
    const Tensor zero = t2({0, 0, 0, 0}, 2, 2);

    const Tensor ai = ops::matmul(a, eye);
    for (int i = 0; i < 4; ++i) CHECK(ai.data()[i] == a.data()[i]);

    const Tensor az = ops::matmul(a, zero);
    for (int i = 0; i < 4; ++i) CHECK(az.data()[i] == 0.0f);

    const Tensor b = t2({5, 6, 7, 8}, 2, 2);
    const Tensor ab = ops::matmul(a, b);
    // oracle: hand arithmetic, exact in f32
    CHECK(ab.at(0, 0) == 19.0f);
    CHECK(ab.at(0, 1) == 22.0f);
    CHECK(ab.at(1, 0) == 43.0f);
    CHECK(ab.at(1, 1) == 50.0f);
}

TEST_CASE("matmul reports both shapes on mismatch") {
    const Tensor a = t2({1, 2, 3, 4, 5, 6}, 2, 3);
    const Tensor b = t2({1, 2, 3, 4}, 2, 2);
    try {
        ops::matmul(a, b);
        FAIL("expected dimension error");
    } catch (const Error& e) {
        CHECK(e.cls() == ErrorClass::dimension);
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[2x2]") != std::string::npos);
    }
}

TEST_CASE("matmul identity association is bitwise") {
    Rng rng(11);
    const Tensor a = testutil::random_tensor(rng, {3, 3});
    const Tensor b = testutil::random_tensor(rng, {3, 4});
    Tensor eye = Tensor::zeros({3, 3});
    for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0f;

    const Tensor left = ops::matmul(ops::matmul(a, eye), b);
    const Tensor right = ops::matmul(a, ops::matmul(eye, b));
    for (int64_t i = 0; i < left.numel(); ++i) {
        CHECK(left.data()[static_cast<size_t>(i)] == right.data()[static_cast<size_t>(i)]);
    }
}

TEST_CASE("non-finite op outputs surface as numeric errors") {
    const float big = 3e38f;
    const Tensor a = t2({big, big, big, big}, 2, 2);
    CHECK_THROWS_AS(ops::matmul(a, a), Error);
    try {
        ops::add(a, a);
        FAIL("expected numeric error");
    } catch (const Error& e) {
        CHECK(e.cls() == ErrorClass::numeric);
    }
}

TEST_CASE("activation values") {
    const Tensor x = Tensor::from({3}, {-3.0f, 0.0f, 1.0f});
    const Tensor r = ops::activation(x, ActivationKind::relu);
    CHECK(r.data()[0] == 0.0f);
    CHECK(r.data()[1] == 0.0f);
    CHECK(r.data()[2] == 1.0f);

    const Tensor g = ops::activation(x, ActivationKind::gelu);
    CHECK(g.data()[1] == 0.0f);
    // oracle: closed-form erf evaluation of 0.5*1*(1+erf(1/sqrt(2)))
    const double expected = 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)));
    CHECK(std::abs(g.data()[2] - expected) < 1e-6);
    CHECK(g.data()[2] == doctest::Approx(0.8413447).epsilon(1e-6));
}

TEST_CASE("layernorm rows") {
    const Tensor gain1 = Tensor::from({2}, {1.0f, 1.0f});
    const Tensor bias0 = Tensor::from({2}, {0.0f, 0.0f});

    // constant row: zero variance handled by eps
    const Tensor c = ops::layernorm(t2({5, 5}, 1, 2), gain1, bias0, 1e-5f);
    CHECK(c.data()[0] == 0.0f);
    CHECK(c.data()[1] == 0.0f);

    // already normalized row passes through as eps -> 0
    const Tensor n = ops::layernorm(t2({1, -1}, 1, 2), gain1, bias0, 1e-12f);
    CHECK(n.data()[0] == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(n.data()[1] == doctest::Approx(-1.0).epsilon(1e-5));

    // oracle: hand arithmetic, mean 1, stddev 1, affine 2*xhat+1
    const Tensor gain2 = Tensor::from({2}, {2.0f, 2.0f});
    const Tensor bias1 = Tensor::from({2}, {1.0f, 1.0f});
    const Tensor a = ops::layernorm(t2({0, 2}, 1, 2), gain2, bias1, 1e-12f);
    CHECK(a.data()[0] == doctest::Approx(-1.0).epsilon(1e-5));
    CHECK(a.data()[1] == doctest::Approx(3.0).epsilon(1e-5));
}

TEST_CASE("softmax cross entropy values") {
    // uniform distribution over 4 classes
    const Tensor z = Tensor::zeros({1, 4});
    const int32_t t0[] = {2};
    CHECK(ops::softmax_cross_entropy(z, t0) == doctest::Approx(std::log(4.0)).epsilon(1e-6));

    // near-certainty
    Tensor hot = Tensor::zeros({1, 4});
    hot.at(0, 1) = 1000.0f;
    const int32_t t1[] = {1};
    CHECK(ops::softmax_cross_entropy(hot, t1) == doctest::Approx(0.0).epsilon(1e-6));

    // oracle: direct formula, lse = log(e^1 + e^2 + e^3), nll = lse - 3
    const Tensor l = t2({1, 2, 3}, 1, 3);
    const int32_t t2v[] = {2};
    const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
    CHECK(ops::softmax_cross_entropy(l, t2v) == doctest::Approx(lse - 3.0).epsilon(1e-6));
    CHECK(ops::softmax_cross_entropy(l, t2v) == doctest::Approx(0.40761).epsilon(1e-4));
}

TEST_CASE("softmax cross entropy rejects out-of-range targets") {
    const Tensor z = Tensor::zeros({1, 4});
    const int32_t bad[] = {4};
    try {
        ops::softmax_cross_entropy(z, bad);
        FAIL("expected index error");
    } catch (const Error& e) {
        CHECK(e.cls() == ErrorClass::index);
    }
}

TEST_CASE("softmax cross entropy is invariant to per-row logit shifts") {
    Rng rng(42);
    for (int it = 0; it < 10; ++it) {
        const Tensor l = testutil::random_tensor(rng, {4, 7}, 0.1, 2.0);
        std::vector<int32_t> targets;
        for (int i = 0; i < 4; ++i) targets.push_back(static_cast<int32_t>(rng.below(7)));
        const float base = ops::softmax_cross_entropy(l, targets);

        const float c = static_cast<float>(rng.uniform01() * 10.0 - 5.0);
        Tensor shifted = l;
        for (float& v : shifted.mut()) v += c;
        const float moved = ops::softmax_cross_entropy(shifted, targets);
        CHECK(std::abs(moved - base) < 1e-5);
    }
}

TEST_CASE("embed and slice kernels") {
    const Tensor table = t2({1, 2, 3, 4, 5, 6}, 3, 2);
    const int32_t ids[] = {2, 0};
    const Tensor g = ops::embed_rows(table, ids);
    CHECK(g.at(0, 0) == 5.0f);
    CHECK(g.at(0, 1) == 6.0f);
    CHECK(g.at(1, 0) == 1.0f);

    const int32_t bad[] = {3};
    CHECK_THROWS_AS(ops::embed_rows(table, bad), Error);

    const Tensor s = ops::slice_rows(table, 1, 2);
    CHECK(s.at(0, 0) == 3.0f);
    CHECK(s.at(1, 1) == 6.0f);
}

TEST_CASE("causal attention ignores future positions") {
    Rng rng(7);
    const int64_t t = 5, d = 8;
    const Tensor q = testutil::random_tensor(rng, {t, d});
    const Tensor k = testutil::random_tensor(rng, {t, d});
    Tensor v = testutil::random_tensor(rng, {t, d});
    const Tensor out = ops::causal_attention(q, k, v, 2);

    // changing the last row of v must not affect earlier outputs
    for (int64_t c = 0; c < d; ++c) v.at(t - 1, c) += 10.0f;
    const Tensor out2 = ops::causal_attention(q, k, v, 2);
    for (int64_t i = 0; i < t - 1; ++i) {
        for (int64_t c = 0; c < d; ++c) {
            CHECK(out.at(i, c) == out2.at(i, c));
        }
    }
}
