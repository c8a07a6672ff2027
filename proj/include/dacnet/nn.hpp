#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dacnet/attention.hpp"
#include "dacnet/tensor.hpp"

namespace dacnet::nn {

struct LayerSpec {
    enum class Kind { conv, maxpool, avgpool_global, fc, relu, batchnorm };
    Kind kind{};
    // conv
    int out_channels = 0;
    int kernel = 0;
    int stride = 1;
    int pad = 0;
    // fc
    int width = 0;
};

struct Conv2dLayer {
    Tensor weight;  // [out, in, k, k]
    Tensor bias;    // [out]
    int stride = 1;
    int pad = 0;
};

struct BatchNormLayer {
    Tensor gamma;
    Tensor beta;
    std::vector<float> running_mean;
    std::vector<float> running_var;
    float eps = 1e-5f;
    float momentum = 0.1f;  // running <- (1-momentum)*running + momentum*batch
};

struct FcLayer {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out]
};

struct Layer {
    LayerSpec spec;
    Conv2dLayer conv;
    BatchNormLayer bn;
    FcLayer fc;
};

// Feature embedding network. Attention attachment points index into the layer
// list and always follow the activation of a convolutional block, so the
// attended value is a 4-d feature map.
struct Backbone {
    std::vector<Layer> layers;
    std::vector<int> attention_points;  // apply attention after layers[i]
    std::vector<int> attention_channels;
    int in_channels = 3;
    int feature_dim = 0;
    int num_classes = 0;
};

// Final linear layer without bias; row j of the weight matrix acts as the
// prototype vector for class j.
struct Classifier {
    Tensor weight;  // [num_classes, feature_dim]
};

struct BuildResult {
    Backbone backbone;
    Classifier classifier;
};

// preset: "digit-small" (3 conv blocks + global pool + 1 fc). Initialization
// is Kaiming-uniform fan-in for conv/fc weights, zero biases, deterministic
// in the seed.
BuildResult build_backbone(const std::string& preset, int num_classes, uint64_t seed,
                           int in_channels = 3, int fc_width = 128);

std::vector<LayerSpec> digit_small_spec(int fc_width = 128);

struct ForwardResult {
    Tensor features;                   // [B, feature_dim]
    std::vector<Tensor> attn_weights;  // one [B, C_l] per attachment point
};

// Runs the embedding network. When `bank` is non-null its modules rescale the
// feature map channel-wise at each attachment point. `training` selects batch
// statistics (and updates running stats) vs. running statistics for the
// batchnorm layers.
ForwardResult forward_features(Backbone& bk, const Tensor& x, const attn::AttentionBank* bank,
                               bool training);

Tensor classify(const Classifier& cls, const Tensor& features);

// All trainable leaves, paired with stable names for checkpoints.
struct NamedParam {
    std::string name;
    Tensor tensor;
};
std::vector<NamedParam> named_parameters(Backbone& bk, Classifier& cls, attn::AttentionBank& bank);

attn::AttentionBank make_attention_bank(const Backbone& bk, int reduction, uint64_t seed);

}  // namespace dacnet::nn
