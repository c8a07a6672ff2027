#include "dacnet/objectives.hpp"

#include <algorithm>

namespace dacnet::objectives {

float PseudoLabelBatch::masked_fraction() const {
    if (labels.empty()) return 0.0f;
    int64_t kept = std::count(mask.begin(), mask.end(), char{1});
    return static_cast<float>(kept) / static_cast<float>(labels.size());
}

PseudoLabelBatch pseudo_label(const Tensor& weak_logits, float tau) {
    if (tau <= 0.0f || tau > 1.0f)
        throw ConfigError("pseudo_label: tau must be in (0, 1], got " + std::to_string(tau));
    if (weak_logits.rank() != 2)
        throw DimensionError("pseudo_label: expected B x N logits, got " +
                             shape_str(weak_logits.shape()));
    int64_t batch = weak_logits.dim(0), n = weak_logits.dim(1);
    std::vector<float> probs = softmax_rows(weak_logits);
    PseudoLabelBatch pl;
    pl.tau = tau;
    pl.labels.resize(static_cast<size_t>(batch));
    pl.confidence.resize(static_cast<size_t>(batch));
    pl.mask.resize(static_cast<size_t>(batch));
    for (int64_t i = 0; i < batch; ++i) {
        const float* row = probs.data() + i * n;
        int best = 0;
        for (int64_t j = 1; j < n; ++j)
            if (row[j] > row[best]) best = static_cast<int>(j);
        pl.labels[static_cast<size_t>(i)] = best;
        pl.confidence[static_cast<size_t>(i)] = row[best];
        pl.mask[static_cast<size_t>(i)] = row[best] >= tau ? 1 : 0;
    }
    return pl;
}

Tensor source_loss(const std::vector<Tensor>& logits_per_domain,
                   const std::vector<std::vector<int>>& labels_per_domain) {
    if (logits_per_domain.empty() || logits_per_domain.size() != labels_per_domain.size())
        throw UsageError("source_loss: need matching logits/labels for at least one domain");
    Tensor acc;
    for (size_t k = 0; k < logits_per_domain.size(); ++k) {
        Tensor ce = softmax_cross_entropy(logits_per_domain[k], labels_per_domain[k]);
        acc = acc.defined() ? add(acc, ce) : ce;
    }
    return scale(acc, 1.0f / static_cast<float>(logits_per_domain.size()));
}

Tensor target_loss(const Tensor& strong_logits, const PseudoLabelBatch& pl) {
    if (strong_logits.dim(0) != pl.size())
        throw DimensionError("target_loss: logits batch " + std::to_string(strong_logits.dim(0)) +
                             " != pseudo-label batch " + std::to_string(pl.size()));
    std::vector<float> weights(pl.mask.begin(), pl.mask.end());
    return softmax_cross_entropy_weighted(strong_logits, pl.labels, weights,
                                          static_cast<float>(pl.size()));
}

namespace {

// sum_i w_i * || f_i - W_{y_i} ||^2 as a graph expression.
Tensor masked_sq_distances(const Tensor& feats, const Tensor& prototypes,
                           const std::vector<int>& labels, const std::vector<float>& weights) {
    Tensor proto = take_rows(prototypes, labels);
    Tensor per_sample = sum_over(square(sub(feats, proto)), {1});
    return sum(mul(per_sample, Tensor::from_vector({per_sample.dim(0)}, weights)));
}

}  // namespace

Tensor compactness_loss(const Tensor& target_feats, const nn::Classifier& cls,
                        const PseudoLabelBatch& pl) {
    if (target_feats.rank() != 2 || target_feats.dim(1) != cls.weight.dim(1))
        throw DimensionError("compactness_loss: features " + shape_str(target_feats.shape()) +
                             " do not match classifier " + shape_str(cls.weight.shape()));
    if (target_feats.dim(0) != pl.size())
        throw DimensionError("compactness_loss: feature/pseudo-label batch mismatch");
    std::vector<float> weights(pl.mask.begin(), pl.mask.end());
    Tensor total = masked_sq_distances(target_feats, cls.weight, pl.labels, weights);
    return scale(total, 1.0f / static_cast<float>(pl.size()));
}

Tensor compactness_loss_with_source(const Tensor& target_feats, const nn::Classifier& cls,
                                    const PseudoLabelBatch& pl,
                                    const std::vector<Tensor>& source_feats,
                                    const std::vector<std::vector<int>>& source_labels) {
    Tensor lc = compactness_loss(target_feats, cls, pl);
    if (source_feats.empty() || source_feats.size() != source_labels.size())
        throw UsageError("compactness_loss_with_source: need source features and labels");
    Tensor acc;
    int64_t total_count = 0;
    for (size_t k = 0; k < source_feats.size(); ++k) {
        std::vector<float> ones(static_cast<size_t>(source_feats[k].dim(0)), 1.0f);
        Tensor term = masked_sq_distances(source_feats[k], cls.weight, source_labels[k], ones);
        acc = acc.defined() ? add(acc, term) : term;
        total_count += source_feats[k].dim(0);
    }
    return add(lc, scale(acc, 1.0f / static_cast<float>(total_count)));
}

Tensor total_loss(const Tensor& ls, const Tensor& lt, const Tensor& lc, const Tensor& ld,
                  float lambda_c, float lambda_d) {
    if (lambda_c < 0.0f || lambda_d < 0.0f)
        throw ConfigError("total_loss: loss weights must be non-negative");
    return add(add(ls, lt), add(scale(lc, lambda_c), scale(ld, lambda_d)));
}

}  // namespace dacnet::objectives
