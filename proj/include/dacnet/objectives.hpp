#pragma once

#include <vector>

#include "dacnet/nn.hpp"
#include "dacnet/tensor.hpp"

namespace dacnet::objectives {

// Pseudo-labels from the weak view: argmax class and its softmax confidence,
// computed outside the graph. mask[i] <=> confidence[i] >= tau.
struct PseudoLabelBatch {
    std::vector<int> labels;
    std::vector<float> confidence;
    std::vector<char> mask;
    float tau = 0.95f;

    int64_t size() const { return static_cast<int64_t>(labels.size()); }
    float masked_fraction() const;
};

PseudoLabelBatch pseudo_label(const Tensor& weak_logits, float tau);

// L_s: mean cross entropy per source domain, averaged over domains.
Tensor source_loss(const std::vector<Tensor>& logits_per_domain,
                   const std::vector<std::vector<int>>& labels_per_domain);

// L_t: confidence-masked cross entropy on the strong view, normalized by the
// full batch size rather than the confident count.
Tensor target_loss(const Tensor& strong_logits, const PseudoLabelBatch& pl);

// L_c: (1/B) sum_i mask_i * || f_i - W_{y_i} ||^2; gradient reaches both the
// features and the prototype rows. The source variant adds the same squared
// distances for labeled source features, normalized by K*B.
Tensor compactness_loss(const Tensor& target_feats, const nn::Classifier& cls,
                        const PseudoLabelBatch& pl);
Tensor compactness_loss_with_source(const Tensor& target_feats, const nn::Classifier& cls,
                                    const PseudoLabelBatch& pl,
                                    const std::vector<Tensor>& source_feats,
                                    const std::vector<std::vector<int>>& source_labels);

struct LossReport {
    float ls = 0.0f;
    float lt = 0.0f;
    float lc = 0.0f;
    float ld = 0.0f;
    float total = 0.0f;
    float masked_fraction = 0.0f;
};

// total = ls + lt + lambda_c * lc + lambda_d * ld.
Tensor total_loss(const Tensor& ls, const Tensor& lt, const Tensor& lc, const Tensor& ld,
                  float lambda_c, float lambda_d);

}  // namespace dacnet::objectives
