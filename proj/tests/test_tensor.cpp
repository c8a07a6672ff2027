#include <cmath>
#include <vector>

#include "doctest.h"

#include "dacnet/gradcheck.hpp"
#include "dacnet/tensor.hpp"

using namespace dacnet;

namespace {

// Direct six-loop cross-correlation, kept independent of the conv2d path.
std::vector<float> conv_reference(const std::vector<float>& x, int b, int cin, int h, int w,
                                  const std::vector<float>& weight, int cout, int k,
                                  const std::vector<float>& bias, int stride, int pad, int oh,
                                  int ow) {
    std::vector<float> out(static_cast<size_t>(b) * cout * oh * ow, 0.0f);
    for (int img = 0; img < b; ++img)
        for (int co = 0; co < cout; ++co)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = bias[static_cast<size_t>(co)];
                    for (int ci = 0; ci < cin; ++ci)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                int iy = oy * stride - pad + ky;
                                int ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                                acc += static_cast<double>(
                                           x[((img * cin + ci) * h + iy) * w + ix]) *
                                       weight[((co * cin + ci) * k + ky) * k + kx];
                            }
                    out[((img * cout + co) * oh + oy) * ow + ox] = static_cast<float>(acc);
                }
    return out;
}

}  // namespace

TEST_CASE("matmul identity and hand product") {
    Tensor eye = Tensor::from_vector({2, 2}, {1, 0, 0, 1});
    Tensor m = Tensor::from_vector({2, 2}, {1, 2, 3, 4});
    Tensor out = matmul(eye, m);
    for (int64_t i = 0; i < 4; ++i) CHECK(out.data()[i] == doctest::Approx(m.data()[i]));

    Tensor a = Tensor::from_vector({1, 2}, {1, 2});
    Tensor b = Tensor::from_vector({2, 1}, {3, 4});
    CHECK(matmul(a, b).item() == doctest::Approx(11.0f));

    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST_CASE("matmul gradient vs central finite differences") {
    Rng rng(11), probe(12);
    Tensor a = Tensor::uniform({3, 4}, -1, 1, rng, true);
    Tensor b = Tensor::uniform({4, 2}, -1, 1, rng, true);
    auto res = gradcheck::check("matmul", {a, b}, [&] { return matmul(a, b); }, probe);
    CHECK(res.passed);
    CHECK(res.frobenius_rel < 1e-3);
}

TEST_CASE("conv2d identity kernel and bias-only") {
    Rng rng(5);
    Tensor x = Tensor::uniform({2, 1, 4, 4}, 0, 1, rng);
    Tensor w = Tensor::from_vector({1, 1, 1, 1}, {1.0f});
    Tensor b = Tensor::zeros({1});
    Tensor out = conv2d(x, w, b, 1, 0);
    REQUIRE(out.shape() == Shape{2, 1, 4, 4});
    for (int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == doctest::Approx(x.data()[i]));

    Tensor zero = Tensor::zeros({1, 2, 5, 5});
    Tensor w2 = Tensor::zeros({3, 2, 3, 3});
    Tensor bias = Tensor::from_vector({3}, {0.5f, -1.0f, 2.0f});
    Tensor out2 = conv2d(zero, w2, bias, 1, 1);
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t i = 0; i < 25; ++i)
            CHECK(out2.data()[c * 25 + i] == doctest::Approx(bias.data()[c]));
}

TEST_CASE("conv2d matches the six-loop reference") {
    Rng rng(42);
    Tensor x = Tensor::uniform({1, 2, 5, 5}, -1, 1, rng, true);
    Tensor w = Tensor::uniform({3, 2, 3, 3}, -0.5, 0.5, rng, true);
    Tensor b = Tensor::uniform({3}, -0.2, 0.2, rng, true);
    Tensor out = conv2d(x, w, b, 1, 1);
    auto ref = conv_reference({x.data().begin(), x.data().end()}, 1, 2, 5, 5,
                              {w.data().begin(), w.data().end()}, 3, 3,
                              {b.data().begin(), b.data().end()}, 1, 1, 5, 5);
    REQUIRE(out.numel() == static_cast<int64_t>(ref.size()));
    for (size_t i = 0; i < ref.size(); ++i)
        CHECK(out.data()[i] == doctest::Approx(ref[i]).epsilon(1e-4));

    // stride-2, no padding
    Tensor out2 = conv2d(x, w, b, 2, 0);
    auto ref2 = conv_reference({x.data().begin(), x.data().end()}, 1, 2, 5, 5,
                               {w.data().begin(), w.data().end()}, 3, 3,
                               {b.data().begin(), b.data().end()}, 2, 0, 2, 2);
    for (size_t i = 0; i < ref2.size(); ++i)
        CHECK(out2.data()[i] == doctest::Approx(ref2[i]).epsilon(1e-4));

    Rng probe(9);
    auto res = gradcheck::check("conv2d", {x, w, b}, [&] { return conv2d(x, w, b, 1, 1); }, probe);
    CHECK(res.passed);
}

TEST_CASE("conv2d rejects non-integer output size") {
    Tensor x = Tensor::zeros({1, 1, 5, 5});
    Tensor w = Tensor::zeros({1, 1, 2, 2});
    Tensor b = Tensor::zeros({1});
    CHECK_THROWS_AS(conv2d(x, w, b, 2, 0), ConfigError);
    CHECK_THROWS_AS(conv2d(x, Tensor::zeros({1, 2, 3, 3}), b, 1, 1), DimensionError);
}

TEST_CASE("elementwise basics") {
    CHECK(sigmoid(Tensor::scalar(0.0f)).item() == doctest::Approx(0.5f));
    CHECK(sum(Tensor::from_vector({3}, {1, 2, 3})).item() == doctest::Approx(6.0f));
    CHECK(mean(Tensor::from_vector({4}, {1, 2, 3, 6})).item() == doctest::Approx(3.0f));

    Tensor x = Tensor::from_vector({3}, {2.0f, -2.0f, 0.0f}, true);
    Tensor loss = sum(abs(x));
    loss.backward();
    CHECK(x.grad()[0] == doctest::Approx(1.0f));
    CHECK(x.grad()[1] == doctest::Approx(-1.0f));
    CHECK(x.grad()[2] == doctest::Approx(0.0f));  // subgradient at the kink

    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({4})), DimensionError);
}

TEST_CASE("broadcasting add/mul semantics") {
    Tensor a = Tensor::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor row = Tensor::from_vector({3}, {10, 20, 30});
    Tensor out = add(a, row);
    CHECK(out.at({0, 0}) == doctest::Approx(11));
    CHECK(out.at({1, 2}) == doctest::Approx(36));

    Tensor col = Tensor::from_vector({2, 1}, {10, 100});
    Tensor prod = mul(a, col);
    CHECK(prod.at({0, 2}) == doctest::Approx(30));
    CHECK(prod.at({1, 0}) == doctest::Approx(400));

    // grads reduce over the broadcast axes
    Tensor rowg = Tensor::from_vector({3}, {1, 1, 1}, true);
    Tensor l = sum(add(a, rowg));
    l.backward();
    for (int i = 0; i < 3; ++i) CHECK(rowg.grad()[i] == doctest::Approx(2.0f));
}

TEST_CASE("reductions over axes") {
    Tensor x = Tensor::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor s0 = sum_over(x, {0});
    CHECK(s0.shape() == Shape{3});
    CHECK(s0.data()[0] == doctest::Approx(5));
    Tensor a1 = avg_over(x, {1});
    CHECK(a1.data()[0] == doctest::Approx(2));
    CHECK(a1.data()[1] == doctest::Approx(5));
    Tensor m1 = max_over(x, 1);
    CHECK(m1.data()[0] == doctest::Approx(3));
    CHECK(m1.data()[1] == doctest::Approx(6));
    CHECK(l2_norm_sq(Tensor::from_vector({2}, {3, 4})).item() == doctest::Approx(25));

    Tensor keep = sum_over(x, {1}, true);
    CHECK(keep.shape() == Shape{2, 1});
}

TEST_CASE("softmax cross entropy values") {
    Tensor uniform = Tensor::zeros({2, 7});
    CHECK(softmax_cross_entropy(uniform, {3, 6}).item() ==
          doctest::Approx(std::log(7.0f)).epsilon(1e-5));

    Tensor confident = Tensor::zeros({1, 5});
    confident.raw_data()[2] = 50.0f;
    CHECK(softmax_cross_entropy(confident, {2}).item() == doctest::Approx(0.0f).epsilon(1e-6));

    CHECK_THROWS_AS(softmax_cross_entropy(uniform, {3, 7}), ValidationError);
    CHECK_THROWS_AS(softmax_cross_entropy(uniform, {-1, 0}), ValidationError);
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(3);
    Tensor logits = Tensor::uniform({8, 10}, -5, 5, rng);
    auto probs = softmax_rows(logits);
    for (int64_t i = 0; i < 8; ++i) {
        double acc = 0;
        for (int64_t j = 0; j < 10; ++j) acc += probs[static_cast<size_t>(i * 10 + j)];
        CHECK(acc == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("softmax cross entropy gradient vs central finite differences") {
    Rng rng(17), probe(18);
    Tensor logits = Tensor::uniform({4, 5}, -2, 2, rng, true);
    std::vector<int> labels = {0, 3, 2, 4};
    gradcheck::CheckOptions opts;
    opts.step = 1e-2f;  // scalar loss; f32 rounding dominates at 1e-3
    auto res = gradcheck::check("ce", {logits},
                                [&] { return softmax_cross_entropy(logits, labels); }, probe,
                                opts);
    CHECK(res.passed);
}

TEST_CASE("backward basics") {
    Tensor x = Tensor::from_vector({2, 2}, {1, 2, 3, 4}, true);
    sum(x).backward();
    for (int i = 0; i < 4; ++i) CHECK(x.grad()[i] == doctest::Approx(1.0f));

    Tensor y = Tensor::scalar(3.0f, true);
    mul(y, y).backward();
    CHECK(y.grad()[0] == doctest::Approx(6.0f));

    CHECK_THROWS_AS(Tensor::zeros({2, 2}, true).backward(), UsageError);
}

TEST_CASE("backward accumulates across separate graphs") {
    Tensor x = Tensor::from_vector({2}, {1, 2}, true);
    sum(x).backward();
    sum(scale(x, 2.0f)).backward();
    CHECK(x.grad()[0] == doctest::Approx(3.0f));
    CHECK(x.grad()[1] == doctest::Approx(3.0f));
    x.zero_grad();
    sum(x).backward();
    CHECK(x.grad()[0] == doctest::Approx(1.0f));
}

TEST_CASE("shared subexpression accumulates along both paths") {
    // f(x) = sum(y) + sum(y*y) with y = 2x, so df/dx = 2 + 8x
    Tensor x = Tensor::from_vector({3}, {0.5f, -1.0f, 2.0f}, true);
    Tensor y = scale(x, 2.0f);
    Tensor loss = add(sum(y), sum(mul(y, y)));
    loss.backward();
    for (int i = 0; i < 3; ++i) {
        float expected = 2.0f + 8.0f * x.data()[i];
        CHECK(x.grad()[i] == doctest::Approx(expected).epsilon(1e-5));
    }
}

TEST_CASE("forward outputs stay finite for inputs in [-10, 10]") {
    Rng rng(23);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor x = Tensor::uniform({3, 4}, -10, 10, rng);
        Tensor y = Tensor::uniform({3, 4}, -10, 10, rng);
        std::vector<Tensor> outs = {
            relu(x), sigmoid(x),  add(x, y),       sub(x, y),      mul(x, y),
            abs(x),  square(x),   scale(x, -3.0f), sum(x),         mean(x),
            sum_over(x, {0}),     avg_over(x, {1}), max_over(x, 1), l2_norm_sq(x),
        };
        for (const auto& t : outs)
            for (float v : t.data()) CHECK(std::isfinite(v));
        auto probs = softmax_rows(x);
        for (float v : probs) CHECK(std::isfinite(v));
    }
}

TEST_CASE("maxpool forward and argmax routing") {
    Tensor x = Tensor::from_vector({1, 1, 4, 4}, {1, 2, 3, 4,
                                                  5, 6, 7, 8,
                                                  9, 10, 11, 12,
                                                  13, 14, 15, 16}, true);
    Tensor out = maxpool2d(x, 2, 2);
    CHECK(out.shape() == Shape{1, 1, 2, 2});
    CHECK(out.data()[0] == doctest::Approx(6));
    CHECK(out.data()[3] == doctest::Approx(16));
    sum(out).backward();
    CHECK(x.grad()[5] == doctest::Approx(1));
    CHECK(x.grad()[0] == doctest::Approx(0));
}

TEST_CASE("take_rows gathers and scatters") {
    Tensor m = Tensor::from_vector({3, 2}, {1, 2, 3, 4, 5, 6}, true);
    Tensor out = take_rows(m, {2, 0, 2});
    CHECK(out.at({0, 0}) == doctest::Approx(5));
    CHECK(out.at({1, 1}) == doctest::Approx(2));
    sum(out).backward();
    CHECK(m.grad()[0] == doctest::Approx(1));  // row 0 taken once
    CHECK(m.grad()[4] == doctest::Approx(2));  // row 2 taken twice
    CHECK(m.grad()[2] == doctest::Approx(0));
    CHECK_THROWS_AS(take_rows(m, {3}), ValidationError);
}

TEST_CASE("batchnorm normalizes per channel") {
    Rng rng(31);
    Tensor x = Tensor::uniform({4, 3, 5, 5}, -2, 2, rng, true);
    Tensor gamma = Tensor::full({3}, 1.0f, true);
    Tensor beta = Tensor::zeros({3}, true);
    auto bn = batchnorm2d(x, gamma, beta, 1e-5f);
    for (int c = 0; c < 3; ++c) {
        double acc = 0, acc2 = 0;
        for (int64_t img = 0; img < 4; ++img)
            for (int64_t i = 0; i < 25; ++i) {
                float v = bn.out.data()[(img * 3 + c) * 25 + i];
                acc += v;
                acc2 += static_cast<double>(v) * v;
            }
        CHECK(acc / 100.0 == doctest::Approx(0.0).epsilon(1e-4));
        CHECK(acc2 / 100.0 == doctest::Approx(1.0).epsilon(1e-3));
    }
    CHECK(bn.batch_mean.size() == 3);
    CHECK(bn.batch_var.size() == 3);
}

TEST_CASE("no-grad guard suppresses graph recording") {
    Tensor x = Tensor::from_vector({2}, {1, 2}, true);
    {
        NoGradGuard guard;
        Tensor y = scale(x, 3.0f);
        CHECK_FALSE(y.requires_grad());
    }
    Tensor z = scale(x, 3.0f);
    CHECK(z.requires_grad());
}
