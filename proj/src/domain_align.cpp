#include "dacnet/domain_align.hpp"

#include <algorithm>
#include <cmath>

namespace dacnet::align {

AlignmentMode parse_mode(const std::string& name) {
    if (name == "dac-ema") return AlignmentMode::dac_ema;
    if (name == "dac-batch") return AlignmentMode::dac_batch;
    if (name == "mmd-attention") return AlignmentMode::mmd_attention;
    if (name == "dac-features") return AlignmentMode::dac_features;
    if (name == "mmd-features") return AlignmentMode::mmd_features;
    throw ConfigError("unknown alignment mode '" + name +
                      "' (expected dac-ema, dac-batch, mmd-attention, dac-features, "
                      "mmd-features)");
}

std::string mode_name(AlignmentMode mode) {
    switch (mode) {
        case AlignmentMode::dac_ema: return "dac-ema";
        case AlignmentMode::dac_batch: return "dac-batch";
        case AlignmentMode::mmd_attention: return "mmd-attention";
        case AlignmentMode::dac_features: return "dac-features";
        case AlignmentMode::mmd_features: return "mmd-features";
    }
    return "?";
}

bool is_attention_mode(AlignmentMode mode) {
    return mode == AlignmentMode::dac_ema || mode == AlignmentMode::dac_batch ||
           mode == AlignmentMode::mmd_attention;
}

bool is_ema_mode(AlignmentMode mode) {
    return mode == AlignmentMode::dac_ema || mode == AlignmentMode::dac_batch ||
           mode == AlignmentMode::dac_features;
}

DomainEmaState::DomainEmaState(int64_t channels, float alpha)
    : channels_(channels), alpha_(alpha) {
    if (alpha < 0.0f || alpha >= 1.0f)
        throw ConfigError("DomainEmaState: alpha must be in [0, 1), got " + std::to_string(alpha));
    values_.assign(static_cast<size_t>(channels), 0.0f);
}

Tensor DomainEmaState::update(const Tensor& batch_attn) {
    if (batch_attn.rank() != 2)
        throw DimensionError("ema_update: expected B x C batch, got " +
                             shape_str(batch_attn.shape()));
    if (batch_attn.dim(0) < 1)
        throw DimensionError("ema_update: empty batch");
    if (batch_attn.dim(1) != channels_)
        throw DimensionError("ema_update: state has " + std::to_string(channels_) +
                             " channels, batch has " + std::to_string(batch_attn.dim(1)));
    Tensor batch_mean = avg_over(batch_attn, {0});
    Tensor m_new;
    if (!initialized_ || alpha_ == 0.0f) {
        m_new = batch_mean;
    } else {
        Tensor history = Tensor::from_vector({channels_}, values_);
        m_new = add(scale(history, alpha_), scale(batch_mean, 1.0f - alpha_));
    }
    values_.assign(m_new.data().begin(), m_new.data().end());
    initialized_ = true;
    current_ = m_new;
    return m_new;
}

void DomainEmaState::restore(std::vector<float> values, bool initialized) {
    if (static_cast<int64_t>(values.size()) != channels_)
        throw DimensionError("DomainEmaState::restore: size mismatch");
    values_ = std::move(values);
    initialized_ = initialized;
}

const Tensor& DomainEmaState::current() const {
    if (!initialized_ || !current_.defined())
        throw UsageError(
            "domain EMA state has no statistics yet; run a warm-up forward and ema_update "
            "before computing the consistency loss");
    return current_;
}

Tensor dac_loss(const std::vector<std::vector<Tensor>>& source_ms,
                const std::vector<Tensor>& target_ms) {
    if (source_ms.empty() || target_ms.empty())
        throw UsageError("dac_loss: need at least one source domain and one attachment point");
    size_t points = target_ms.size();
    float k = static_cast<float>(source_ms.size());
    Tensor acc;
    for (size_t p = 0; p < points; ++p) {
        for (const auto& domain : source_ms) {
            if (domain.size() != points)
                throw DimensionError("dac_loss: attachment point count mismatch across domains");
            Tensor term = sum(abs(sub(domain[p], target_ms[p])));
            acc = acc.defined() ? add(acc, term) : term;
        }
    }
    return scale(acc, 1.0f / (k * static_cast<float>(points)));
}

Tensor mmd_loss(const Tensor& a, const Tensor& b, float bandwidth) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw DimensionError("mmd_loss: expected B x D samples with matching D, got " +
                             shape_str(a.shape()) + " and " + shape_str(b.shape()));
    int64_t m = a.dim(0), n = b.dim(0);
    if (m < 2 || n < 2)
        throw UsageError("mmd_loss: unbiased estimate needs at least 2 samples per side");

    if (bandwidth <= 0.0f) {
        // Median squared pairwise distance over the joint batch (off-diagonal
        // pairs), computed outside the graph.
        std::vector<float> joint;
        joint.reserve(static_cast<size_t>((m + n) * a.dim(1)));
        joint.insert(joint.end(), a.data().begin(), a.data().end());
        joint.insert(joint.end(), b.data().begin(), b.data().end());
        int64_t total = m + n, d = a.dim(1);
        std::vector<float> dists;
        dists.reserve(static_cast<size_t>(total * (total - 1) / 2));
        for (int64_t i = 0; i < total; ++i)
            for (int64_t j = i + 1; j < total; ++j) {
                double acc = 0.0;
                const float* pi = joint.data() + i * d;
                const float* pj = joint.data() + j * d;
                for (int64_t c = 0; c < d; ++c) {
                    double delta = static_cast<double>(pi[c]) - pj[c];
                    acc += delta * delta;
                }
                dists.push_back(static_cast<float>(acc));
            }
        size_t mid = dists.size() / 2;
        std::nth_element(dists.begin(), dists.begin() + mid, dists.end());
        bandwidth = std::max(dists[mid], 1e-12f);
    }
    float inv_bw = -1.0f / bandwidth;

    // ||x_i - y_j||^2 = ||x_i||^2 + ||y_j||^2 - 2 x_i . y_j, assembled with
    // broadcasting so backward falls out of the graph.
    auto sq_norms = [](const Tensor& t) { return sum_over(square(t), {1}); };
    auto kernel_matrix = [&](const Tensor& x, const Tensor& y) {
        Tensor gram = matmul_nt(x, y);
        Tensor nx = reshape(sq_norms(x), {x.dim(0), 1});
        Tensor ny = reshape(sq_norms(y), {1, y.dim(0)});
        Tensor d2 = add(add(nx, ny), scale(gram, -2.0f));
        return exp(scale(d2, inv_bw));
    };

    auto offdiag_mean = [&](const Tensor& kmat, int64_t size) {
        std::vector<float> mask(static_cast<size_t>(size * size), 1.0f);
        for (int64_t i = 0; i < size; ++i) mask[static_cast<size_t>(i * size + i)] = 0.0f;
        Tensor masked = mul(kmat, Tensor::from_vector({size, size}, std::move(mask)));
        return scale(sum(masked), 1.0f / static_cast<float>(size * (size - 1)));
    };

    Tensor kaa = offdiag_mean(kernel_matrix(a, a), m);
    Tensor kbb = offdiag_mean(kernel_matrix(b, b), n);
    Tensor kab;
    if (m == n) {
        // equal-size unbiased estimator: the paired cross terms k(x_i, y_i)
        // are excluded, so identical sample sets give exactly zero
        kab = offdiag_mean(kernel_matrix(a, b), m);
    } else {
        kab = scale(sum(kernel_matrix(a, b)), 1.0f / static_cast<float>(m * n));
    }
    return add(add(kaa, kbb), scale(kab, -2.0f));
}

Tensor fda_loss(const std::vector<Tensor>& source_feats, const Tensor& target_feats,
                AlignmentMode mode) {
    if (mode != AlignmentMode::dac_features && mode != AlignmentMode::mmd_features)
        throw ConfigError("fda_loss: mode " + mode_name(mode) +
                          " aligns attention weights, not features");
    if (source_feats.empty()) throw UsageError("fda_loss: no source features");
    if (mode == AlignmentMode::mmd_features) {
        Tensor acc;
        for (const Tensor& f : source_feats) {
            Tensor term = mmd_loss(f, target_feats);
            acc = acc.defined() ? add(acc, term) : term;
        }
        return scale(acc, 1.0f / static_cast<float>(source_feats.size()));
    }
    // dac_features without EMA history: l1 between batch means, one "point".
    std::vector<std::vector<Tensor>> src(source_feats.size());
    for (size_t k = 0; k < source_feats.size(); ++k)
        src[k] = {avg_over(source_feats[k], {0})};
    return dac_loss(src, {avg_over(target_feats, {0})});
}

}  // namespace dacnet::align
