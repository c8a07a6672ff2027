#include <cmath>

#include "doctest.h"

#include "dacnet/gradcheck.hpp"
#include "dacnet/objectives.hpp"

using namespace dacnet;
using objectives::PseudoLabelBatch;

namespace {

// Per-domain cross entropy computed with plain double loops.
double ce_reference(const Tensor& logits, const std::vector<int>& labels) {
    int64_t b = logits.dim(0), n = logits.dim(1);
    double total = 0;
    for (int64_t i = 0; i < b; ++i) {
        const float* row = logits.data().data() + i * n;
        double m = row[0];
        for (int64_t j = 1; j < n; ++j) m = std::max(m, static_cast<double>(row[j]));
        double z = 0;
        for (int64_t j = 0; j < n; ++j) z += std::exp(row[j] - m);
        total += -(row[labels[static_cast<size_t>(i)]] - m - std::log(z));
    }
    return total / static_cast<double>(b);
}

Tensor logits_for_probs(const std::vector<float>& probs) {
    std::vector<float> logits;
    for (float p : probs) logits.push_back(std::log(p));
    return Tensor::from_vector({1, static_cast<int64_t>(probs.size())}, std::move(logits));
}

}  // namespace

TEST_CASE("source loss on uniform and confident logits") {
    Tensor uniform = Tensor::zeros({4, 10});
    std::vector<int> labels = {0, 3, 7, 9};
    CHECK(objectives::source_loss({uniform}, {labels}).item() ==
          doctest::Approx(std::log(10.0f)).epsilon(1e-5));
    // independent of the number of domains for identical batches
    CHECK(objectives::source_loss({uniform, uniform, uniform}, {labels, labels, labels}).item() ==
          doctest::Approx(std::log(10.0f)).epsilon(1e-5));

    Tensor confident = Tensor::zeros({2, 4});
    confident.raw_data()[1] = 60.0f;
    confident.raw_data()[4 + 2] = 60.0f;
    CHECK(objectives::source_loss({confident}, {{1, 2}}).item() ==
          doctest::Approx(0.0f).epsilon(1e-6));
}

TEST_CASE("source loss averages per-domain CE values") {
    Rng rng(4);
    Tensor l0 = Tensor::uniform({3, 5}, -2, 2, rng);
    Tensor l1 = Tensor::uniform({3, 5}, -2, 2, rng);
    std::vector<int> y0 = {0, 4, 2}, y1 = {1, 1, 3};
    double a = ce_reference(l0, y0), b = ce_reference(l1, y1);
    CHECK(objectives::source_loss({l0, l1}, {y0, y1}).item() ==
          doctest::Approx((a + b) / 2.0).epsilon(1e-5));
}

TEST_CASE("pseudo labels threshold on weak-view confidence") {
    PseudoLabelBatch high = objectives::pseudo_label(logits_for_probs({0.97f, 0.03f}), 0.95f);
    CHECK(high.labels[0] == 0);
    CHECK(high.confidence[0] == doctest::Approx(0.97f));
    CHECK(high.mask[0] == 1);

    PseudoLabelBatch low = objectives::pseudo_label(logits_for_probs({0.90f, 0.10f}), 0.95f);
    CHECK(low.mask[0] == 0);
    CHECK(low.masked_fraction() == doctest::Approx(0.0f));

    Rng rng(5);
    PseudoLabelBatch all_out =
        objectives::pseudo_label(Tensor::uniform({6, 4}, -1, 1, rng), 1.0f);
    for (char m : all_out.mask) CHECK(m == 0);

    CHECK_THROWS_AS(objectives::pseudo_label(logits_for_probs({0.5f, 0.5f}), 0.0f), ConfigError);
    CHECK_THROWS_AS(objectives::pseudo_label(logits_for_probs({0.5f, 0.5f}), 1.5f), ConfigError);
}

TEST_CASE("pseudo labels carry no gradient") {
    Rng rng(6);
    Tensor weak_logits = Tensor::uniform({4, 3}, -1, 1, rng, true);
    PseudoLabelBatch pl = objectives::pseudo_label(weak_logits, 0.3f);
    CHECK_FALSE(weak_logits.has_grad());
    // perturbing the weak view changes nothing downstream when labels are frozen
    Tensor strong = Tensor::uniform({4, 3}, -1, 1, rng, true);
    objectives::target_loss(strong, pl).backward();
    std::vector<float> g1(strong.grad().begin(), strong.grad().end());
    weak_logits.raw_data()[0] += 0.125f;  // would shift confidences, labels frozen
    strong.zero_grad();
    objectives::target_loss(strong, pl).backward();
    for (size_t i = 0; i < g1.size(); ++i) CHECK(strong.grad()[i] == g1[i]);
    CHECK_FALSE(weak_logits.has_grad());
}

TEST_CASE("masked fraction is monotone in tau") {
    Rng rng(7);
    Tensor logits = Tensor::uniform({32, 10}, -3, 3, rng);
    float previous = 1.1f;
    for (float tau : {0.5f, 0.8f, 0.95f, 0.99f}) {
        float frac = objectives::pseudo_label(logits, tau).masked_fraction();
        CHECK(frac <= previous);
        previous = frac;
    }
}

TEST_CASE("target loss normalizes by the full batch") {
    // one of four samples masked in, with strong-view CE value c
    Tensor strong = Tensor::zeros({4, 3});
    strong.raw_data()[0 * 3 + 0] = 1.0f;  // sample 0 logits (1,0,0)
    PseudoLabelBatch pl;
    pl.tau = 0.95f;
    pl.labels = {0, 1, 2, 0};
    pl.confidence = {0.99f, 0.5f, 0.5f, 0.5f};
    pl.mask = {1, 0, 0, 0};
    double c = ce_reference(Tensor::from_vector({1, 3}, {1, 0, 0}), {0});
    CHECK(objectives::target_loss(strong, pl).item() == doctest::Approx(c / 4.0).epsilon(1e-5));

    // all masked out -> exactly zero
    pl.mask = {0, 0, 0, 0};
    CHECK(objectives::target_loss(strong, pl).item() == doctest::Approx(0.0f));

    // strong view certain of the pseudo-label -> zero
    Tensor certain = Tensor::zeros({1, 3});
    certain.raw_data()[1] = 80.0f;
    PseudoLabelBatch one;
    one.tau = 0.5f;
    one.labels = {1};
    one.confidence = {0.9f};
    one.mask = {1};
    CHECK(objectives::target_loss(certain, one).item() == doctest::Approx(0.0f).epsilon(1e-6));
}

TEST_CASE("compactness loss hand values") {
    nn::Classifier cls;
    cls.weight = Tensor::from_vector({2, 2}, {0, 0, 1, 1}, true);
    Tensor f = Tensor::from_vector({2, 2}, {1, 0, 5, 5}, true);
    PseudoLabelBatch pl;
    pl.tau = 0.9f;
    pl.labels = {0, 1};
    pl.confidence = {0.95f, 0.1f};
    pl.mask = {1, 0};
    // only sample 0 counts: ||(1,0) - (0,0)||^2 / B = 1/2
    CHECK(objectives::compactness_loss(f, cls, pl).item() == doctest::Approx(0.5f));

    // coincident prototypes -> zero
    Tensor f2 = Tensor::from_vector({2, 2}, {0, 0, 1, 1});
    pl.mask = {1, 1};
    CHECK(objectives::compactness_loss(f2, cls, pl).item() == doctest::Approx(0.0f));

    // all masked out -> zero
    pl.mask = {0, 0};
    CHECK(objectives::compactness_loss(f, cls, pl).item() == doctest::Approx(0.0f));
}

TEST_CASE("compactness gradient w.r.t. prototypes matches the closed form") {
    Rng rng(8);
    Tensor f = Tensor::uniform({6, 4}, -1, 1, rng);
    nn::Classifier cls{Tensor::uniform({3, 4}, -1, 1, rng, true)};
    PseudoLabelBatch pl;
    pl.tau = 0.5f;
    pl.labels = {0, 2, 0, 1, 2, 2};
    pl.confidence.assign(6, 0.9f);
    pl.mask = {1, 1, 0, 1, 1, 0};
    objectives::compactness_loss(f, cls, pl).backward();
    REQUIRE(cls.weight.has_grad());
    // dL/dW_j = (2/B) * sum over masked i with label j of (W_j - f_i)
    for (int j = 0; j < 3; ++j)
        for (int d = 0; d < 4; ++d) {
            double expected = 0;
            for (int i = 0; i < 6; ++i)
                if (pl.mask[static_cast<size_t>(i)] && pl.labels[static_cast<size_t>(i)] == j)
                    expected += 2.0 / 6.0 *
                                (cls.weight.data()[j * 4 + d] - f.data()[i * 4 + d]);
            CHECK(cls.weight.grad()[j * 4 + d] == doctest::Approx(expected).epsilon(1e-4));
        }
}

TEST_CASE("source-variant compactness adds the labeled term") {
    Rng rng(9);
    nn::Classifier cls{Tensor::uniform({3, 4}, -1, 1, rng, true)};
    Tensor ft = Tensor::uniform({4, 4}, -1, 1, rng);
    Tensor fs = Tensor::uniform({4, 4}, -1, 1, rng);
    std::vector<int> ys = {0, 1, 2, 0};
    PseudoLabelBatch pl;
    pl.tau = 0.5f;
    pl.labels = {1, 1, 2, 0};
    pl.confidence.assign(4, 0.9f);
    pl.mask = {1, 0, 1, 1};

    float base = objectives::compactness_loss(ft, cls, pl).item();
    float with_source =
        objectives::compactness_loss_with_source(ft, cls, pl, {fs}, {ys}).item();
    double source_term = 0;
    for (int i = 0; i < 4; ++i)
        for (int d = 0; d < 4; ++d) {
            double diff = fs.data()[i * 4 + d] - cls.weight.data()[ys[static_cast<size_t>(i)] * 4 + d];
            source_term += diff * diff;
        }
    source_term /= 4.0;  // K = 1, B = 4
    CHECK(with_source == doctest::Approx(base + source_term).epsilon(1e-4));
}

TEST_CASE("all four losses are nonnegative on random inputs") {
    Rng rng(10);
    for (int rep = 0; rep < 10; ++rep) {
        Tensor logits = Tensor::uniform({5, 4}, -4, 4, rng);
        std::vector<int> labels;
        for (int i = 0; i < 5; ++i) labels.push_back(rng.uniform_int(4));
        CHECK(objectives::source_loss({logits}, {labels}).item() >= 0.0f);
        PseudoLabelBatch pl = objectives::pseudo_label(logits, 0.4f);
        CHECK(objectives::target_loss(logits, pl).item() >= 0.0f);
        nn::Classifier cls{Tensor::uniform({4, 6}, -1, 1, rng)};
        Tensor f = Tensor::uniform({5, 6}, -1, 1, rng);
        CHECK(objectives::compactness_loss(f, cls, pl).item() >= 0.0f);
    }
}

TEST_CASE("total loss arithmetic and guards") {
    Tensor ls = Tensor::scalar(1.0f), lt = Tensor::scalar(2.0f);
    Tensor lc = Tensor::scalar(3.0f), ld = Tensor::scalar(4.0f);
    CHECK(objectives::total_loss(ls, lt, lc, ld, 0.1f, 0.3f).item() ==
          doctest::Approx(4.5f).epsilon(1e-6));
    // row-#2 configuration: both weights zero
    CHECK(objectives::total_loss(ls, lt, lc, ld, 0.0f, 0.0f).item() == doctest::Approx(3.0f));
    Tensor z = Tensor::scalar(0.0f);
    CHECK(objectives::total_loss(z, z, z, z, 0.1f, 0.3f).item() == doctest::Approx(0.0f));
    CHECK_THROWS_AS(objectives::total_loss(ls, lt, lc, ld, -0.1f, 0.3f), ConfigError);
}

TEST_CASE("target and compactness losses pass finite-difference checks") {
    Rng rng(11), probe(12);
    Tensor strong = Tensor::uniform({4, 5}, -2, 2, rng, true);
    PseudoLabelBatch pl;
    pl.tau = 0.5f;
    pl.labels = {0, 3, 2, 4};
    pl.confidence = {0.9f, 0.9f, 0.3f, 0.8f};
    pl.mask = {1, 1, 0, 1};
    gradcheck::CheckOptions opts;
    opts.step = 1e-2f;
    auto res = gradcheck::check("target_loss", {strong},
                                [&] { return objectives::target_loss(strong, pl); }, probe, opts);
    CHECK(res.passed);

    nn::Classifier cls{Tensor::uniform({5, 6}, -1, 1, rng, true)};
    Tensor f = Tensor::uniform({4, 6}, -1, 1, rng, true);
    auto res2 = gradcheck::check("compactness", {f, cls.weight},
                                 [&] { return objectives::compactness_loss(f, cls, pl); }, probe,
                                 opts);
    CHECK(res2.passed);
}
