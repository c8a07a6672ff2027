#pragma once

#include <vector>

#include "dacnet/tensor.hpp"

namespace dacnet::attn {

// Channel attention: avg- and max-pooled descriptors pass through a shared
// bottleneck MLP, the branch outputs are summed and squashed with a sigmoid.
struct AttentionModule {
    Tensor w1;  // [hidden, C]
    Tensor b1;  // [hidden]
    Tensor w2;  // [C, hidden]
    Tensor b2;  // [C]
    int channels = 0;
    int reduction = 16;
};

// Bottleneck width is max(1, C / r) so small toy channel counts survive r=16.
int hidden_width(int channels, int reduction);

AttentionModule make_attention(int channels, int reduction, Rng& rng);

// F[B x C x H x W] -> g in (0,1)^{B x C}.
Tensor apply(const AttentionModule& m, const Tensor& feature_map);

// One module per backbone attachment point, in attachment order.
struct AttentionBank {
    std::vector<AttentionModule> modules;

    bool empty() const { return modules.empty(); }
    size_t size() const { return modules.size(); }
};

}  // namespace dacnet::attn
