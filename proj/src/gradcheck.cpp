#include "dacnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>

#include "dacnet/domain_align.hpp"
#include "dacnet/nn.hpp"
#include "dacnet/objectives.hpp"
#include "dacnet/trainer.hpp"

namespace dacnet::gradcheck {

namespace {

// Probe-weighted scalarization evaluated in double, so finite differences are
// not limited by the f32 rounding of a single stored loss value.
double probed_value(const Tensor& out, const std::vector<float>& probe) {
    double acc = 0.0;
    auto d = out.data();
    for (size_t i = 0; i < d.size(); ++i) acc += static_cast<double>(d[i]) * probe[i];
    return acc;
}

}  // namespace

CheckResult check(const std::string& name, const std::vector<Tensor>& params,
                  const std::function<Tensor()>& forward, Rng& rng, const CheckOptions& opts) {
    CheckResult result;
    result.name = name;
    result.tol = opts.tol;

    Tensor out = forward();
    std::vector<float> probe(static_cast<size_t>(out.numel()));
    for (auto& w : probe) {
        float mag = rng.uniform(0.5f, 1.5f);
        w = rng.uniform() < 0.5 ? -mag : mag;
    }

    // reverse-mode gradients of sum(probe .* out)
    std::vector<Tensor> mutable_params = params;
    for (auto& p : mutable_params) p.zero_grad();
    Tensor loss = sum(mul(out, Tensor::from_vector(out.shape(), probe)));
    loss.backward();
    std::vector<std::vector<float>> ad;
    for (auto& p : mutable_params) {
        if (!p.has_grad()) {
            ad.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
        } else {
            ad.emplace_back(p.grad().begin(), p.grad().end());
        }
    }

    const bool debug_entries = std::getenv("DACNET_GRADCHECK_DEBUG") != nullptr;
    double err_sq = 0.0, fd_sq = 0.0;
    int64_t passed_entries = 0;
    result.entries = 0;
    for (size_t pi = 0; pi < mutable_params.size(); ++pi) {
        Tensor& p = mutable_params[pi];
        auto data = p.raw_data();
        int64_t n = p.numel();
        std::vector<int64_t> indices;
        if (opts.max_entries_per_param > 0 && n > opts.max_entries_per_param) {
            // seeded sample without replacement
            std::vector<int64_t> all(static_cast<size_t>(n));
            for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
            for (int k = 0; k < opts.max_entries_per_param; ++k) {
                int64_t j = k + rng.uniform_int(static_cast<int>(n - k));
                std::swap(all[static_cast<size_t>(k)], all[static_cast<size_t>(j)]);
                indices.push_back(all[static_cast<size_t>(k)]);
            }
        } else {
            for (int64_t i = 0; i < n; ++i) indices.push_back(i);
        }
        for (int64_t idx : indices) {
            float saved = data[static_cast<size_t>(idx)];
            double h = static_cast<double>(opts.step);
            double p1, m1, p2, m2;
            {
                NoGradGuard no_grad;
                data[static_cast<size_t>(idx)] = saved + opts.step;
                p1 = probed_value(forward(), probe);
                data[static_cast<size_t>(idx)] = saved - opts.step;
                m1 = probed_value(forward(), probe);
                data[static_cast<size_t>(idx)] = saved + 0.5f * opts.step;
                p2 = probed_value(forward(), probe);
                data[static_cast<size_t>(idx)] = saved - 0.5f * opts.step;
                m2 = probed_value(forward(), probe);
                data[static_cast<size_t>(idx)] = saved;
            }
            double d1 = (p1 - m1) / (2.0 * h);
            double d2 = (p2 - m2) / h;
            // smooth curvature cancels out of both central estimates; a
            // subgradient jump (relu/maxpool) inside the probed interval
            // leaves them disagreeing
            if (std::fabs(d1 - d2) >
                opts.kink_tol * std::max({0.02, std::fabs(d1), std::fabs(d2)})) {
                ++result.skipped;  // not differentiable here; skip the entry
                continue;
            }
            // d1 carries the least rounding noise; the extrapolated form
            // cancels the h^2 truncation that batch-stat normalization makes
            // significant in composite graphs. Each entry is compared against
            // whichever consistent estimator is closer: noise-limited and
            // curvature-limited entries have opposite preferences, and a real
            // gradient bug matches neither.
            double adv = static_cast<double>(ad[pi][static_cast<size_t>(idx)]);
            double fd = d1;
            if (opts.richardson) {
                double rich = (4.0 * d2 - d1) / 3.0;
                if (std::fabs(adv - rich) < std::fabs(adv - d1)) fd = rich;
            }
            if (debug_entries && std::fabs(adv - fd) >= opts.atol) {
                double denom_dbg = std::max({std::fabs(fd), std::fabs(adv), 1e-6});
                if (std::fabs(adv - fd) / denom_dbg >= opts.tol)
                    std::fprintf(stderr, "  [%s] p%zu[%lld] ad=%.6g fd=%.6g d2=%.6g\n",
                                 name.c_str(), pi, static_cast<long long>(idx), adv, fd, d2);
            }
            double denom = std::max({std::fabs(fd), std::fabs(adv), 1e-6});
            double rel = std::fabs(adv - fd) / denom;
            if (std::fabs(adv - fd) >= opts.atol) result.max_rel = std::max(result.max_rel, rel);
            if (rel < opts.tol || std::fabs(adv - fd) < opts.atol) ++passed_entries;
            err_sq += (adv - fd) * (adv - fd);
            fd_sq += fd * fd;
            ++result.entries;
        }
    }
    result.pass_fraction =
        result.entries ? static_cast<double>(passed_entries) / static_cast<double>(result.entries)
                       : 1.0;
    result.frobenius_rel = std::sqrt(err_sq) / std::max(std::sqrt(fd_sq), 1e-12);
    double skipped_fraction =
        static_cast<double>(result.skipped) /
        std::max<double>(1.0, static_cast<double>(result.entries + result.skipped));
    // a gradient block that sits entirely at the noise floor carries no
    // relative signal; accept it when the residual itself is below atol
    double err_rms =
        std::sqrt(err_sq / std::max<double>(1.0, static_cast<double>(result.entries)));
    bool frob_ok = result.frobenius_rel < opts.tol || err_rms < opts.atol;
    result.passed = result.pass_fraction >= opts.min_pass_fraction && frob_ok &&
                    skipped_fraction <= opts.max_skipped;
    return result;
}

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
    return Tensor::uniform(std::move(shape), lo, hi, rng, /*requires_grad=*/true);
}

// Random values bounded away from zero, for ops with a kink there.
Tensor rand_offset_tensor(Shape shape, Rng& rng, float min_abs = 0.2f) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (auto& v : t.raw_data()) {
        float mag = rng.uniform(min_abs, 1.0f);
        v = rng.uniform() < 0.5 ? -mag : mag;
    }
    return t;
}

std::vector<int> rand_labels(int64_t count, int classes, Rng& rng) {
    std::vector<int> labels(static_cast<size_t>(count));
    for (auto& l : labels) l = rng.uniform_int(classes);
    return labels;
}

struct Fixture {
    std::string name;
    std::function<CheckResult(uint64_t, Rng&)> run;
};

std::vector<Fixture> make_fixtures() {
    std::vector<Fixture> fx;
    auto add_fx = [&](const std::string& name, auto builder, CheckOptions opts = {}) {
        fx.push_back({name, [name, builder, opts](uint64_t seed, Rng& probe) {
                          Rng rng(seed);
                          auto [params, forward] = builder(rng);
                          return check(name, params, forward, probe, opts);
                      }});
    };
    using Built = std::pair<std::vector<Tensor>, std::function<Tensor()>>;

    // Central differences of a scalar-valued loss are limited by the f32
    // rounding of the stored loss; a wider step keeps the quotient clean
    // while the O(h^2) truncation stays far below the tolerance.
    CheckOptions scalar_opts;
    scalar_opts.step = 1e-2f;

    // per-entry (bi)linear ops: central differences are exact at any step,
    // so a wide one pushes f32 rounding far below the tolerance
    CheckOptions linear_opts;
    linear_opts.step = 5e-2f;

    CheckOptions attention_opts;
    attention_opts.step = 1e-2f;

    add_fx("matmul", [](Rng& rng) -> Built {
        Tensor a = rand_tensor({3, 4}, rng), b = rand_tensor({4, 2}, rng);
        return {{a, b}, [a, b] { return matmul(a, b); }};
    }, linear_opts);
    add_fx("matmul_nt", [](Rng& rng) -> Built {
        Tensor a = rand_tensor({3, 4}, rng), b = rand_tensor({5, 4}, rng);
        return {{a, b}, [a, b] { return matmul_nt(a, b); }};
    }, linear_opts);
    add_fx("conv2d", [](Rng& rng) -> Built {
        Tensor x = rand_tensor({1, 2, 5, 5}, rng);
        Tensor w = rand_tensor({3, 2, 3, 3}, rng);
        Tensor b = rand_tensor({3}, rng);
        return {{x, w, b}, [x, w, b] { return conv2d(x, w, b, 1, 1); }};
    }, linear_opts);
    add_fx("conv2d_strided", [](Rng& rng) -> Built {
        Tensor x = rand_tensor({2, 2, 7, 7}, rng);
        Tensor w = rand_tensor({3, 2, 3, 3}, rng);
        Tensor b = rand_tensor({3}, rng);
        return {{x, w, b}, [x, w, b] { return conv2d(x, w, b, 2, 1); }};
    }, linear_opts);
    add_fx("maxpool2d", [](Rng& rng) -> Built {
        // distinct, well-separated values so +/-h never flips an argmax
        Tensor x = Tensor::zeros({2, 2, 6, 6}, true);
        int64_t n = x.numel();
        std::vector<int> perm(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = static_cast<int>(i);
        for (int64_t i = n - 1; i > 0; --i)
            std::swap(perm[static_cast<size_t>(i)],
                      perm[static_cast<size_t>(rng.uniform_int(static_cast<int>(i + 1)))]);
        for (int64_t i = 0; i < n; ++i)
            x.raw_data()[static_cast<size_t>(i)] =
                -1.0f + 0.03f * static_cast<float>(perm[static_cast<size_t>(i)]);
        return {{x}, [x] { return maxpool2d(x, 2, 2); }};
    });
    add_fx("relu", [](Rng& rng) -> Built {
        Tensor x = rand_offset_tensor({3, 7}, rng);
        return {{x}, [x] { return relu(x); }};
    });
    add_fx("sigmoid", [](Rng& rng) -> Built {
        Tensor x = rand_tensor({3, 7}, rng, -3.0f, 3.0f);
        return {{x}, [x] { return sigmoid(x); }};
    });
    add_fx("exp", [](Rng& rng) -> Built {
        Tensor x = rand_tensor({3, 7}, rng, -2.0f, 1.0f);
        return {{x}, [x] { return exp(x); }};
    });
    add_fx("add", [](Rng& rng) -> Built {
        Tensor a = rand_tensor({4, 5}, rng), b = rand_tensor({4, 5}, rng);
        return {{a, b}, [a, b] { return add(a, b); }};
    });
    add_fx("add_broadcast", [](Rng& rng) -> Built {
        Tensor a = rand_tensor({4, 5}, rng), b = rand_tensor({5}, rng);
        return {{a, b}, [a, b] { return add(a, b); }};
    });
    add_fx("sub", [](Rng& rng) -> Built {
        Tensor a = rand_tensor({4, 5}, rng), b = rand_tensor({4, 5}, rng);
        return {{a, b}, [a, b] { return sub(a, b); }};
    });
    add_fx("mul", [](Rng& rng) -> Built {
        Tensor a = rand_tensor({4, 5}, rng), b = rand_tensor({4, 5}, rng);
        return {{a, b}, [a, b] { return mul(a, b); }};
    });
    add_fx("mul_broadcast", [](Rng& rng) -> Built {
        Tensor a = rand_tensor({2, 3, 2, 2}, rng), b = rand_tensor({2, 3, 1, 1}, rng);
        return {{a, b}, [a, b] { return mul(a, b); }};
    });
    add_fx("scale", [](Rng& rng) -> Built {
        Tensor x = rand_tensor({3, 4}, rng);
        return {{x}, [x] { return scale(x, -1.7f); }};
    });
    add_fx("abs", [](Rng& rng) -> Built {
        Tensor x = rand_offset_tensor({4, 5}, rng);
        return {{x}, [x] { return abs(x); }};
    });
    add_fx("square", [](Rng& rng) -> Built {
        Tensor x = rand_tensor({4, 5}, rng);
        return {{x}, [x] { return square(x); }};
    });
    add_fx("sum", [](Rng& rng) -> Built {
        Tensor x = rand_tensor({3, 4}, rng);
        return {{x}, [x] { return sum(x); }};
    }, scalar_opts);
    add_fx("mean", [](Rng& rng) -> Built {
        Tensor x = rand_tensor({3, 4}, rng);
        return {{x}, [x] { return mean(x); }};
    }, scalar_opts);
    add_fx("sum_over", [](Rng& rng) -> Built {
        Tensor x = rand_tensor({2, 3, 4}, rng);
        return {{x}, [x] { return sum_over(x, {0, 2}); }};
    });
    add_fx("avg_over", [](Rng& rng) -> Built {
        Tensor x = rand_tensor({2, 3, 4}, rng);
        return {{x}, [x] { return avg_over(x, {2}); }};
    });
    add_fx("max_over", [](Rng& rng) -> Built {
        // distinct well-separated values: +/-h must not flip an argmax
        Tensor x = Tensor::zeros({3, 5, 4}, true);
        int64_t n = x.numel();
        std::vector<int> perm(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = static_cast<int>(i);
        for (int64_t i = n - 1; i > 0; --i)
            std::swap(perm[static_cast<size_t>(i)],
                      perm[static_cast<size_t>(rng.uniform_int(static_cast<int>(i + 1)))]);
        for (int64_t i = 0; i < n; ++i)
            x.raw_data()[static_cast<size_t>(i)] =
                -0.9f + 0.03f * static_cast<float>(perm[static_cast<size_t>(i)]);
        return {{x}, [x] { return max_over(x, 1); }};
    });
    add_fx("l2_norm_sq", [](Rng& rng) -> Built {
        Tensor x = rand_tensor({4, 3}, rng);
        return {{x}, [x] { return l2_norm_sq(x); }};
    }, scalar_opts);
    add_fx("reshape", [](Rng& rng) -> Built {
        Tensor x = rand_tensor({3, 4}, rng);
        return {{x}, [x] { return reshape(x, {2, 6}); }};
    });
    add_fx("take_rows", [](Rng& rng) -> Built {
        Tensor m = rand_tensor({6, 4}, rng);
        std::vector<int> rows = {0, 3, 3, 5};
        return {{m}, [m, rows] { return take_rows(m, rows); }};
    }, linear_opts);
    add_fx("softmax_cross_entropy", [](Rng& rng) -> Built {
        Tensor logits = rand_tensor({4, 5}, rng, -2.0f, 2.0f);
        auto labels = rand_labels(4, 5, rng);
        return {{logits}, [logits, labels] { return softmax_cross_entropy(logits, labels); }};
    }, scalar_opts);
    add_fx("softmax_cross_entropy_weighted", [](Rng& rng) -> Built {
        Tensor logits = rand_tensor({4, 5}, rng, -2.0f, 2.0f);
        auto labels = rand_labels(4, 5, rng);
        std::vector<float> weights = {1.0f, 0.0f, 1.0f, 0.0f};
        return {{logits}, [logits, labels, weights] {
                    return softmax_cross_entropy_weighted(logits, labels, weights, 4.0f);
                }};
    }, scalar_opts);
    add_fx("batchnorm2d", [](Rng& rng) -> Built {
        Tensor x = rand_tensor({3, 2, 4, 4}, rng);
        Tensor gamma = rand_tensor({2}, rng, 0.5f, 1.5f);
        Tensor beta = rand_tensor({2}, rng);
        return {{x, gamma, beta},
                [x, gamma, beta] { return batchnorm2d(x, gamma, beta, 1e-5f).out; }};
    });
    add_fx("batchnorm2d_eval", [](Rng& rng) -> Built {
        Tensor x = rand_tensor({3, 2, 4, 4}, rng);
        Tensor gamma = rand_tensor({2}, rng, 0.5f, 1.5f);
        Tensor beta = rand_tensor({2}, rng);
        std::vector<float> mean = {rng.uniform(-0.3f, 0.3f), rng.uniform(-0.3f, 0.3f)};
        std::vector<float> var = {rng.uniform(0.5f, 1.5f), rng.uniform(0.5f, 1.5f)};
        return {{x, gamma, beta}, [x, gamma, beta, mean, var] {
                    return batchnorm2d_eval(x, gamma, beta, mean, var, 1e-5f);
                }};
    });
    add_fx("attention_apply", [](Rng& rng) -> Built {
        attn::AttentionModule m = attn::make_attention(8, 4, rng);
        // distinct spatial values keep the max-pool branch off its ties at
        // the wide step
        Tensor f = Tensor::zeros({2, 8, 3, 3}, true);
        int64_t n = f.numel();
        std::vector<int> perm(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = static_cast<int>(i);
        for (int64_t i = n - 1; i > 0; --i)
            std::swap(perm[static_cast<size_t>(i)],
                      perm[static_cast<size_t>(rng.uniform_int(static_cast<int>(i + 1)))]);
        for (int64_t i = 0; i < n; ++i)
            f.raw_data()[static_cast<size_t>(i)] =
                -1.6f + 0.03f * static_cast<float>(perm[static_cast<size_t>(i)]);
        // push hidden preactivations away from the relu kink so the fixture
        // is differentiable throughout the probed neighborhood
        {
            NoGradGuard ng;
            Tensor avg_desc = avg_over(f, {2, 3});
            Tensor max_desc = max_over(max_over(f, 3), 2);
            int64_t hidden = m.w1.dim(0);
            for (int64_t j = 0; j < hidden; ++j) {
                float min_pre = std::numeric_limits<float>::max();
                for (const Tensor& v : {avg_desc, max_desc})
                    for (int64_t img = 0; img < v.dim(0); ++img) {
                        double pre = m.b1.data()[j];
                        for (int64_t c = 0; c < 8; ++c)
                            pre += static_cast<double>(m.w1.data()[j * 8 + c]) *
                                   v.data()[img * 8 + c];
                        min_pre = std::min(min_pre, static_cast<float>(pre));
                    }
                if (min_pre < 0.3f) m.b1.raw_data()[j] += 0.3f - min_pre;
            }
        }
        return {{m.w1, m.b1, m.w2, m.b2, f}, [m, f] { return attn::apply(m, f); }};
    }, attention_opts);
    add_fx("classify", [](Rng& rng) -> Built {
        nn::Classifier cls{rand_tensor({5, 6}, rng)};
        Tensor f = rand_tensor({3, 6}, rng);
        return {{cls.weight, f}, [cls, f] { return nn::classify(cls, f); }};
    }, linear_opts);
    add_fx("source_loss", [](Rng& rng) -> Built {
        Tensor l0 = rand_tensor({3, 4}, rng, -2.0f, 2.0f);
        Tensor l1 = rand_tensor({3, 4}, rng, -2.0f, 2.0f);
        auto y0 = rand_labels(3, 4, rng), y1 = rand_labels(3, 4, rng);
        return {{l0, l1},
                [l0, l1, y0, y1] { return objectives::source_loss({l0, l1}, {y0, y1}); }};
    }, scalar_opts);
    add_fx("target_loss", [](Rng& rng) -> Built {
        Tensor logits = rand_tensor({4, 5}, rng, -2.0f, 2.0f);
        objectives::PseudoLabelBatch pl;
        pl.tau = 0.5f;
        pl.labels = rand_labels(4, 5, rng);
        pl.confidence = {0.9f, 0.2f, 0.8f, 0.4f};
        pl.mask = {1, 0, 1, 0};
        return {{logits}, [logits, pl] { return objectives::target_loss(logits, pl); }};
    }, scalar_opts);
    add_fx("compactness_loss", [](Rng& rng) -> Built {
        Tensor f = rand_tensor({4, 6}, rng);
        nn::Classifier cls{rand_tensor({5, 6}, rng)};
        objectives::PseudoLabelBatch pl;
        pl.tau = 0.5f;
        pl.labels = rand_labels(4, 5, rng);
        pl.confidence = {0.9f, 0.2f, 0.8f, 0.9f};
        pl.mask = {1, 0, 1, 1};
        return {{f, cls.weight},
                [f, cls, pl] { return objectives::compactness_loss(f, cls, pl); }};
    }, scalar_opts);
    add_fx("dac_loss", [](Rng& rng) -> Built {
        // includes the EMA update path: history constant, current batch live
        Tensor a0 = rand_tensor({3, 6}, rng, 0.05f, 0.95f);
        Tensor a1 = rand_tensor({3, 6}, rng, 0.05f, 0.95f);
        Tensor t0 = rand_tensor({3, 6}, rng, 0.05f, 0.95f);
        std::vector<float> hist_a(6), hist_t(6);
        for (auto& v : hist_a) v = rng.uniform(0.1f, 0.9f);
        for (auto& v : hist_t) v = rng.uniform(0.1f, 0.9f);
        return {{a0, a1, t0}, [a0, a1, t0, hist_a, hist_t] {
                    align::DomainEmaState s0(6, 0.9f), s1(6, 0.9f), st(6, 0.9f);
                    s0.restore(hist_a, true);
                    s1.restore(hist_a, true);
                    st.restore(hist_t, true);
                    Tensor m0 = s0.update(a0);
                    Tensor m1 = s1.update(a1);
                    Tensor mt = st.update(t0);
                    return align::dac_loss({{m0}, {m1}}, {mt});
                }};
    }, scalar_opts);
    add_fx("mmd_loss", [](Rng& rng) -> Built {
        Tensor a = rand_tensor({4, 3}, rng), b = rand_tensor({4, 3}, rng, -0.5f, 1.5f);
        return {{a, b}, [a, b] { return align::mmd_loss(a, b, 1.0f); }};
    }, scalar_opts);
    add_fx("fda_loss_features", [](Rng& rng) -> Built {
        Tensor a = rand_tensor({4, 3}, rng), b = rand_tensor({4, 3}, rng);
        return {{a, b}, [a, b] {
                    return align::fda_loss({a}, b, align::AlignmentMode::dac_features);
                }};
    }, scalar_opts);
    // Composite forward paths; f32 noise accumulates, spec'd at 1e-2.
    CheckOptions composite;
    composite.tol = 1e-2;
    composite.step = 1e-3f;
    composite.atol = 2e-3;
    composite.max_entries_per_param = 12;
    composite.kink_tol = 0.15;
    composite.richardson = true;
    add_fx("forward_features_attention", [](Rng& rng) -> Built {
        auto built = nn::build_backbone("digit-small", 4, rng.next_u64(), 3, 32);
        auto backbone = std::make_shared<nn::Backbone>(std::move(built.backbone));
        auto bank = std::make_shared<attn::AttentionBank>(
            nn::make_attention_bank(*backbone, 16, rng.next_u64()));
        Tensor x = rand_tensor({2, 3, 16, 16}, rng, 0.0f, 1.0f);
        x.set_requires_grad(false);
        std::vector<Tensor> params;
        for (auto& m : bank->modules) {
            params.push_back(m.w1);
            params.push_back(m.b1);
            params.push_back(m.w2);
            params.push_back(m.b2);
        }
        return {params, [backbone, bank, x] {
                    return nn::forward_features(*backbone, x, bank.get(), true).features;
                }};
    }, composite);
    add_fx("train_objective", [](Rng& rng) -> Built {
        auto built = nn::build_backbone("digit-small", 3, rng.next_u64(), 3, 16);
        auto backbone = std::make_shared<nn::Backbone>(std::move(built.backbone));
        auto cls = std::make_shared<nn::Classifier>(std::move(built.classifier));
        auto bank = std::make_shared<attn::AttentionBank>(
            nn::make_attention_bank(*backbone, 16, rng.next_u64()));
        Tensor xs = rand_tensor({4, 3, 12, 12}, rng, 0.0f, 1.0f);
        Tensor xt_weak = rand_tensor({4, 3, 12, 12}, rng, 0.0f, 1.0f);
        Tensor xt_strong = rand_tensor({4, 3, 12, 12}, rng, 0.0f, 1.0f);
        xs.set_requires_grad(false);
        xt_weak.set_requires_grad(false);
        xt_strong.set_requires_grad(false);
        auto labels = rand_labels(4, 3, rng);
        objectives::PseudoLabelBatch pl;
        pl.tau = 0.5f;
        pl.labels = rand_labels(4, 3, rng);
        pl.confidence = {0.9f, 0.9f, 0.2f, 0.8f};
        pl.mask = {1, 1, 0, 1};
        std::vector<Tensor> params;
        auto named = nn::named_parameters(*backbone, *cls, *bank);
        for (auto& np : named) {
            // conv biases feed straight into batchnorm, which subtracts the
            // batch mean; their gradient is exactly zero by construction and
            // carries no finite-difference signal
            if (np.name.find("conv") != std::string::npos &&
                np.name.find(".bias") != std::string::npos)
                continue;
            params.push_back(np.tensor);
        }
        return {params, [backbone, cls, bank, xs, xt_weak, xt_strong, labels, pl] {
                    auto src = nn::forward_features(*backbone, xs, bank.get(), true);
                    Tensor ls = objectives::source_loss({nn::classify(*cls, src.features)},
                                                        {labels});
                    auto weak = nn::forward_features(*backbone, xt_weak, bank.get(), true);
                    auto strong = nn::forward_features(*backbone, xt_strong, bank.get(), true);
                    Tensor lt = objectives::target_loss(nn::classify(*cls, strong.features), pl);
                    Tensor lc = objectives::compactness_loss(strong.features, *cls, pl);
                    std::vector<std::vector<Tensor>> src_ms(1);
                    std::vector<Tensor> tgt_ms;
                    for (size_t p = 0; p < weak.attn_weights.size(); ++p) {
                        src_ms[0].push_back(avg_over(src.attn_weights[p], {0}));
                        tgt_ms.push_back(avg_over(weak.attn_weights[p], {0}));
                    }
                    Tensor ld = align::dac_loss(src_ms, tgt_ms);
                    return objectives::total_loss(ls, lt, lc, ld, 0.1f, 0.3f);
                }};
    }, composite);
    return fx;
}

}  // namespace

std::vector<std::string> suite_op_names() {
    std::vector<std::string> names;
    for (const auto& fx : make_fixtures()) names.push_back(fx.name);
    return names;
}

std::vector<CheckResult> run_suite(uint64_t seed, int repeats, const std::string& filter) {
    std::vector<CheckResult> results;
    for (const auto& fx : make_fixtures()) {
        if (!filter.empty() && fx.name.find(filter) == std::string::npos) continue;
        for (int r = 0; r < repeats; ++r) {
            uint64_t fixture_seed = mix_seed(seed, hash_tag(fx.name), static_cast<uint64_t>(r));
            Rng probe(mix_seed(fixture_seed, hash_tag("probe")));
            CheckResult res = fx.run(fixture_seed, probe);
            res.name = fx.name + "#" + std::to_string(r);
            results.push_back(std::move(res));
        }
    }
    return results;
}

}  // namespace dacnet::gradcheck
