#pragma once

#include <string>
#include <vector>

#include "dacnet/tensor.hpp"

namespace dacnet::align {

enum class AlignmentMode {
    dac_ema,       // EMA attention statistics, l1 distance (default)
    dac_batch,     // same but batch means only (alpha = 0)
    mmd_attention, // MMD between per-sample attention vectors
    dac_features,  // EMA-l1 applied to final feature vectors
    mmd_features,  // MMD between final feature vectors
};

AlignmentMode parse_mode(const std::string& name);
std::string mode_name(AlignmentMode mode);
bool is_attention_mode(AlignmentMode mode);
bool is_ema_mode(AlignmentMode mode);

// Running mean of an alignment observable (attention weights or features)
// for one (domain, attachment point) pair. `update` returns a graph tensor:
// gradient flows through the current batch term only, the accumulated history
// is a constant for backward.
class DomainEmaState {
public:
    DomainEmaState() = default;
    DomainEmaState(int64_t channels, float alpha);

    // batch_attn: [B x C]. First update adopts the batch mean.
    Tensor update(const Tensor& batch_attn);

    bool initialized() const { return initialized_; }
    float alpha() const { return alpha_; }
    int64_t channels() const { return channels_; }
    const std::vector<float>& values() const { return values_; }
    void restore(std::vector<float> values, bool initialized);

    // Graph tensor from the latest update; cleared between steps.
    const Tensor& current() const;
    void end_step() { current_ = Tensor(); }

private:
    int64_t channels_ = 0;
    float alpha_ = 0.999f;
    bool initialized_ = false;
    std::vector<float> values_;
    Tensor current_;
};

// L_d of the consistency objective: mean over attachment points of
// (1/K) * sum_k || m_{S_k} - m_T ||_1. Tensors come from DomainEmaState::update
// (or are plain batch means in dac_batch mode).
Tensor dac_loss(const std::vector<std::vector<Tensor>>& source_ms,
                const std::vector<Tensor>& target_ms);

// Unbiased squared MMD with an RBF kernel; for equal sample counts the
// paired cross terms are excluded so identical sets give exactly zero. The
// bandwidth defaults to the median pairwise squared distance over the joint
// batch and enters backward as a constant; pass a positive `bandwidth` to
// pin it (finite-difference checks need a fixed kernel).
Tensor mmd_loss(const Tensor& a, const Tensor& b, float bandwidth = 0.0f);

// Alignment applied to final features instead of attention weights. Only the
// feature modes are valid here; EMA handling for dac_features lives with the
// caller's DomainEmaState instances (same machinery as attention alignment).
Tensor fda_loss(const std::vector<Tensor>& source_feats, const Tensor& target_feats,
                AlignmentMode mode);

}  // namespace dacnet::align
