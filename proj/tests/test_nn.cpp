#include <cmath>

#include "doctest.h"

#include "dacnet/gradcheck.hpp"
#include "dacnet/nn.hpp"

using namespace dacnet;

TEST_CASE("build_backbone is deterministic in the seed") {
    auto a = nn::build_backbone("digit-small", 10, 7);
    auto b = nn::build_backbone("digit-small", 10, 7);
    attn::AttentionBank empty_a, empty_b;
    auto pa = nn::named_parameters(a.backbone, a.classifier, empty_a);
    auto pb = nn::named_parameters(b.backbone, b.classifier, empty_b);
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i].tensor.numel() == pb[i].tensor.numel());
        for (int64_t j = 0; j < pa[i].tensor.numel(); ++j)
            CHECK(pa[i].tensor.data()[j] == pb[i].tensor.data()[j]);  // bit identical
    }
    auto c = nn::build_backbone("digit-small", 10, 8);
    bool any_diff = false;
    for (int64_t j = 0; j < 16 && !any_diff; ++j)
        any_diff = c.backbone.layers[0].conv.weight.data()[j] !=
                   a.backbone.layers[0].conv.weight.data()[j];
    CHECK(any_diff);

    CHECK_THROWS_AS(nn::build_backbone("resnet-18", 10, 7), ConfigError);
    CHECK_THROWS_AS(nn::build_backbone("digit-small", 1, 7), ConfigError);
}

TEST_CASE("digit-small shape propagation and attachment points") {
    auto built = nn::build_backbone("digit-small", 10, 3);
    CHECK(built.backbone.feature_dim == 128);
    CHECK(built.backbone.attention_points.size() == 2);
    CHECK(built.backbone.attention_channels == std::vector<int>{64, 128});
    CHECK(built.classifier.weight.shape() == Shape{10, 128});

    attn::AttentionBank bank = nn::make_attention_bank(built.backbone, 16, 3);
    Tensor x = Tensor::zeros({2, 3, 32, 32});
    auto fwd = nn::forward_features(built.backbone, x, &bank, true);
    CHECK(fwd.features.shape() == Shape{2, 128});
    REQUIRE(fwd.attn_weights.size() == 2);
    CHECK(fwd.attn_weights[0].shape() == Shape{2, 64});
    CHECK(fwd.attn_weights[1].shape() == Shape{2, 128});
    Tensor logits = nn::classify(built.classifier, fwd.features);
    CHECK(logits.shape() == Shape{2, 10});
    for (float v : logits.data()) CHECK(std::isfinite(v));  // zero image stays finite

    // 28x28 input propagates too
    Tensor x28 = Tensor::zeros({1, 3, 28, 28});
    auto fwd28 = nn::forward_features(built.backbone, x28, &bank, true);
    CHECK(fwd28.features.shape() == Shape{1, 128});
    CHECK(fwd28.attn_weights[0].shape() == Shape{1, 64});
}

TEST_CASE("attention bank size mismatch is rejected") {
    auto built = nn::build_backbone("digit-small", 10, 3);
    attn::AttentionBank bad;
    Rng rng(1);
    bad.modules.push_back(attn::make_attention(64, 16, rng));
    Tensor x = Tensor::zeros({1, 3, 32, 32});
    CHECK_THROWS_AS(nn::forward_features(built.backbone, x, &bad, true), ConfigError);
}

TEST_CASE("forced g = 1 reproduces the unattended network") {
    auto built = nn::build_backbone("digit-small", 10, 5);
    attn::AttentionBank bank = nn::make_attention_bank(built.backbone, 16, 5);
    for (auto& m : bank.modules) {
        for (auto* t : {&m.w1, &m.b1, &m.w2})
            std::fill(t->raw_data().begin(), t->raw_data().end(), 0.0f);
        std::fill(m.b2.raw_data().begin(), m.b2.raw_data().end(), 40.0f);  // sigmoid -> ~1
    }
    Rng rng(6);
    Tensor x = Tensor::uniform({2, 3, 32, 32}, 0, 1, rng);
    auto attended = nn::forward_features(built.backbone, x, &bank, true);
    auto plain = nn::forward_features(built.backbone, x, nullptr, true);
    for (int64_t i = 0; i < attended.features.numel(); ++i)
        CHECK(attended.features.data()[i] ==
              doctest::Approx(plain.features.data()[i]).epsilon(1e-4));
}

TEST_CASE("zero attention MLP halves the attended feature maps") {
    auto built = nn::build_backbone("digit-small", 10, 5);
    attn::AttentionBank bank = nn::make_attention_bank(built.backbone, 16, 5);
    for (auto& m : bank.modules)
        for (auto* t : {&m.w1, &m.b1, &m.w2, &m.b2})
            std::fill(t->raw_data().begin(), t->raw_data().end(), 0.0f);
    Rng rng(7);
    Tensor x = Tensor::uniform({1, 3, 32, 32}, 0, 1, rng);
    auto attended = nn::forward_features(built.backbone, x, &bank, true);
    for (const auto& g : attended.attn_weights)
        for (float v : g.data()) CHECK(v == doctest::Approx(0.5f));
}

TEST_CASE("source and target forwards share parameter storage") {
    auto built = nn::build_backbone("digit-small", 10, 9);
    attn::AttentionBank bank = nn::make_attention_bank(built.backbone, 16, 9);
    Rng rng(8);
    Tensor xs = Tensor::uniform({2, 3, 32, 32}, 0, 1, rng);
    Tensor xt = Tensor::uniform({2, 3, 32, 32}, 0, 1, rng);

    // grads from both forwards land in the same tensors (identity check)
    auto f1 = nn::forward_features(built.backbone, xs, &bank, true);
    sum(f1.features).backward();
    Tensor w = built.backbone.layers[0].conv.weight;
    REQUIRE(w.has_grad());
    std::vector<float> after_source(w.grad().begin(), w.grad().end());

    auto f2 = nn::forward_features(built.backbone, xt, &bank, true);
    sum(f2.features).backward();
    bool accumulated = false;
    for (size_t i = 0; i < after_source.size(); ++i)
        if (w.grad()[i] != after_source[i]) accumulated = true;
    CHECK(accumulated);
}

TEST_CASE("classifier prototype alignment and zero features") {
    nn::Classifier cls;
    cls.weight = Tensor::from_vector({3, 3}, {2, 0, 0,
                                              0, 3, 0,
                                              0, 0, 1});
    Tensor f = Tensor::from_vector({1, 3}, {0, 3, 0});  // equals row 1 direction
    Tensor logits = nn::classify(cls, f);
    int best = 0;
    for (int j = 1; j < 3; ++j)
        if (logits.data()[j] > logits.data()[best]) best = j;
    CHECK(best == 1);

    Tensor zeros = Tensor::zeros({2, 3});
    Tensor zl = nn::classify(cls, zeros);
    for (float v : zl.data()) CHECK(v == doctest::Approx(0.0f));

    CHECK_THROWS_AS(nn::classify(cls, Tensor::zeros({1, 4})), DimensionError);
}

TEST_CASE("classify gradient vs finite differences") {
    Rng rng(10), probe(11);
    nn::Classifier cls{Tensor::uniform({5, 6}, -1, 1, rng, true)};
    Tensor f = Tensor::uniform({3, 6}, -1, 1, rng, true);
    auto res = gradcheck::check("classify", {cls.weight, f},
                                [&] { return nn::classify(cls, f); }, probe);
    CHECK(res.passed);
}

TEST_CASE("feature gradients flow into attention parameters") {
    auto built = nn::build_backbone("digit-small", 4, 12, 3, 32);
    attn::AttentionBank bank = nn::make_attention_bank(built.backbone, 16, 12);
    Rng rng(13);
    Tensor x = Tensor::uniform({2, 3, 16, 16}, 0, 1, rng);
    auto fwd = nn::forward_features(built.backbone, x, &bank, true);
    sum(fwd.features).backward();
    for (auto& m : bank.modules) {
        REQUIRE(m.w1.has_grad());
        double norm = 0;
        for (float g : m.w1.grad()) norm += std::fabs(g);
        CHECK(norm > 0.0);
    }
}
