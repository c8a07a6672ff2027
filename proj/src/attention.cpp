#include "dacnet/attention.hpp"

#include <cmath>

namespace dacnet::attn {

int hidden_width(int channels, int reduction) {
    return channels / reduction > 0 ? channels / reduction : 1;
}

namespace {

Tensor kaiming_uniform(Shape shape, int fan_in, Rng& rng) {
    float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
    return Tensor::uniform(std::move(shape), -bound, bound, rng, /*requires_grad=*/true);
}

Tensor mlp(const AttentionModule& m, const Tensor& v) {
    Tensor h = relu(add(matmul_nt(v, m.w1), m.b1));
    return add(matmul_nt(h, m.w2), m.b2);
}

}  // namespace

AttentionModule make_attention(int channels, int reduction, Rng& rng) {
    AttentionModule m;
    m.channels = channels;
    m.reduction = reduction;
    int hidden = hidden_width(channels, reduction);
    m.w1 = kaiming_uniform({hidden, channels}, channels, rng);
    m.b1 = Tensor::zeros({hidden}, true);
    m.w2 = kaiming_uniform({channels, hidden}, hidden, rng);
    m.b2 = Tensor::zeros({channels}, true);
    return m;
}

Tensor apply(const AttentionModule& m, const Tensor& feature_map) {
    if (feature_map.rank() != 4)
        throw DimensionError("attention: expected B x C x H x W feature map, got " +
                             shape_str(feature_map.shape()));
    if (feature_map.dim(1) != m.channels)
        throw DimensionError("attention: module has " + std::to_string(m.channels) +
                             " channels, feature map has " + std::to_string(feature_map.dim(1)));
    Tensor avg_desc = avg_over(feature_map, {2, 3});
    Tensor max_desc = max_over(max_over(feature_map, 3), 2);
    Tensor g = sigmoid(add(mlp(m, avg_desc), mlp(m, max_desc)));
    // f32 sigmoid rounds to exactly 0/1 for |x| > ~17; keep g in the open
    // interval the consistency loss assumes
    return clamp(g, 1e-7f, 1.0f - 6e-8f);
}

}  // namespace dacnet::attn
