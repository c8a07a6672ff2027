#include "dacnet/nn.hpp"

#include <cmath>

namespace dacnet::nn {

namespace {

Tensor kaiming_uniform(Shape shape, int fan_in, Rng& rng) {
    float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
    return Tensor::uniform(std::move(shape), -bound, bound, rng, /*requires_grad=*/true);
}

Layer make_conv(int in_channels, const LayerSpec& spec, Rng& rng) {
    Layer layer;
    layer.spec = spec;
    int fan_in = in_channels * spec.kernel * spec.kernel;
    layer.conv.weight =
        kaiming_uniform({spec.out_channels, in_channels, spec.kernel, spec.kernel}, fan_in, rng);
    layer.conv.bias = Tensor::zeros({spec.out_channels}, true);
    layer.conv.stride = spec.stride;
    layer.conv.pad = spec.pad;
    return layer;
}

Layer make_batchnorm(int channels, Rng&) {
    Layer layer;
    layer.spec.kind = LayerSpec::Kind::batchnorm;
    layer.bn.gamma = Tensor::full({channels}, 1.0f, true);
    layer.bn.beta = Tensor::zeros({channels}, true);
    layer.bn.running_mean.assign(static_cast<size_t>(channels), 0.0f);
    layer.bn.running_var.assign(static_cast<size_t>(channels), 1.0f);
    return layer;
}

Layer make_fc(int in_width, const LayerSpec& spec, Rng& rng) {
    Layer layer;
    layer.spec = spec;
    layer.fc.weight = kaiming_uniform({in_width, spec.width}, in_width, rng);
    layer.fc.bias = Tensor::zeros({spec.width}, true);
    return layer;
}

}  // namespace

std::vector<LayerSpec> digit_small_spec(int fc_width) {
    using K = LayerSpec::Kind;
    std::vector<LayerSpec> specs;
    auto conv = [](int out, int kernel, int pad) {
        LayerSpec s;
        s.kind = K::conv;
        s.out_channels = out;
        s.kernel = kernel;
        s.stride = 1;
        s.pad = pad;
        return s;
    };
    LayerSpec bn{.kind = K::batchnorm};
    LayerSpec act{.kind = K::relu};
    LayerSpec pool{.kind = K::maxpool, .kernel = 2, .stride = 2};
    LayerSpec gap{.kind = K::avgpool_global};
    LayerSpec fc{.kind = K::fc, .width = fc_width};

    specs.push_back(conv(64, 5, 2));
    specs.push_back(bn);
    specs.push_back(act);
    specs.push_back(pool);
    specs.push_back(conv(64, 5, 2));
    specs.push_back(bn);
    specs.push_back(act);  // attention point 1
    specs.push_back(pool);
    specs.push_back(conv(128, 5, 2));
    specs.push_back(bn);
    specs.push_back(act);  // attention point 2
    specs.push_back(gap);
    specs.push_back(fc);
    specs.push_back(act);
    return specs;
}

BuildResult build_backbone(const std::string& preset, int num_classes, uint64_t seed,
                           int in_channels, int fc_width) {
    if (preset != "digit-small")
        throw ConfigError("build_backbone: unknown preset '" + preset +
                          "' (supported: digit-small)");
    if (num_classes < 2)
        throw ConfigError("build_backbone: num_classes must be >= 2, got " +
                          std::to_string(num_classes));

    Rng rng(mix_seed(seed, hash_tag("model-init")));
    BuildResult result;
    Backbone& bk = result.backbone;
    bk.in_channels = in_channels;
    bk.num_classes = num_classes;

    int channels = in_channels;
    int conv_count = 0;
    for (const LayerSpec& spec : digit_small_spec(fc_width)) {
        switch (spec.kind) {
            case LayerSpec::Kind::conv:
                bk.layers.push_back(make_conv(channels, spec, rng));
                channels = spec.out_channels;
                ++conv_count;
                break;
            case LayerSpec::Kind::batchnorm:
                bk.layers.push_back(make_batchnorm(channels, rng));
                break;
            case LayerSpec::Kind::fc:
                bk.layers.push_back(make_fc(channels, spec, rng));
                channels = spec.width;
                break;
            default: {
                Layer layer;
                layer.spec = spec;
                bk.layers.push_back(layer);
                // attention attaches after the activation of conv blocks 2 and 3
                if (spec.kind == LayerSpec::Kind::relu && (conv_count == 2 || conv_count == 3) &&
                    bk.attention_points.size() < 2 &&
                    bk.layers.size() >= 2 &&
                    bk.layers[bk.layers.size() - 2].spec.kind == LayerSpec::Kind::batchnorm) {
                    bk.attention_points.push_back(static_cast<int>(bk.layers.size()) - 1);
                    bk.attention_channels.push_back(channels);
                }
                break;
            }
        }
    }
    bk.feature_dim = channels;
    result.classifier.weight = kaiming_uniform({num_classes, bk.feature_dim}, bk.feature_dim, rng);
    return result;
}

attn::AttentionBank make_attention_bank(const Backbone& bk, int reduction, uint64_t seed) {
    Rng rng(mix_seed(seed, hash_tag("attention-init")));
    attn::AttentionBank bank;
    for (int c : bk.attention_channels)
        bank.modules.push_back(attn::make_attention(c, reduction, rng));
    return bank;
}

ForwardResult forward_features(Backbone& bk, const Tensor& x, const attn::AttentionBank* bank,
                               bool training) {
    if (bank && !bank->empty() && bank->size() != bk.attention_points.size())
        throw ConfigError("forward_features: attention bank has " + std::to_string(bank->size()) +
                          " modules for " + std::to_string(bk.attention_points.size()) +
                          " attachment points");
    ForwardResult result;
    Tensor h = x;
    size_t next_point = 0;
    for (size_t i = 0; i < bk.layers.size(); ++i) {
        Layer& layer = bk.layers[i];
        switch (layer.spec.kind) {
            case LayerSpec::Kind::conv:
                h = conv2d(h, layer.conv.weight, layer.conv.bias, layer.conv.stride,
                           layer.conv.pad);
                break;
            case LayerSpec::Kind::batchnorm: {
                if (training) {
                    BatchNormOut bnout = batchnorm2d(h, layer.bn.gamma, layer.bn.beta,
                                                     layer.bn.eps);
                    float m = layer.bn.momentum;
                    for (size_t c = 0; c < layer.bn.running_mean.size(); ++c) {
                        layer.bn.running_mean[c] =
                            (1.0f - m) * layer.bn.running_mean[c] + m * bnout.batch_mean[c];
                        layer.bn.running_var[c] =
                            (1.0f - m) * layer.bn.running_var[c] + m * bnout.batch_var[c];
                    }
                    h = bnout.out;
                } else {
                    h = batchnorm2d_eval(h, layer.bn.gamma, layer.bn.beta, layer.bn.running_mean,
                                         layer.bn.running_var, layer.bn.eps);
                }
                break;
            }
            case LayerSpec::Kind::relu:
                h = relu(h);
                break;
            case LayerSpec::Kind::maxpool:
                h = maxpool2d(h, layer.spec.kernel, layer.spec.stride);
                break;
            case LayerSpec::Kind::avgpool_global:
                h = avg_over(h, {2, 3});
                break;
            case LayerSpec::Kind::fc:
                h = add(matmul(h, layer.fc.weight), layer.fc.bias);
                break;
        }
        if (next_point < bk.attention_points.size() &&
            bk.attention_points[next_point] == static_cast<int>(i)) {
            if (h.rank() != 4)
                throw ConfigError("forward_features: attention point " +
                                  std::to_string(next_point) + " is not a conv feature map");
            if (bank && !bank->empty()) {
                Tensor g = attn::apply(bank->modules[next_point], h);
                result.attn_weights.push_back(g);
                h = mul(h, reshape(g, {g.dim(0), g.dim(1), 1, 1}));
            }
            ++next_point;
        }
    }
    result.features = h;
    return result;
}

Tensor classify(const Classifier& cls, const Tensor& features) {
    if (features.rank() != 2 || features.dim(1) != cls.weight.dim(1))
        throw DimensionError("classify: features " + shape_str(features.shape()) +
                             " do not match classifier " + shape_str(cls.weight.shape()));
    return matmul_nt(features, cls.weight);
}

std::vector<NamedParam> named_parameters(Backbone& bk, Classifier& cls,
                                         attn::AttentionBank& bank) {
    std::vector<NamedParam> params;
    int conv_idx = 0, bn_idx = 0, fc_idx = 0;
    for (Layer& layer : bk.layers) {
        switch (layer.spec.kind) {
            case LayerSpec::Kind::conv: {
                std::string base = "backbone.conv" + std::to_string(conv_idx++);
                params.push_back({base + ".weight", layer.conv.weight});
                params.push_back({base + ".bias", layer.conv.bias});
                break;
            }
            case LayerSpec::Kind::batchnorm: {
                std::string base = "backbone.bn" + std::to_string(bn_idx++);
                params.push_back({base + ".gamma", layer.bn.gamma});
                params.push_back({base + ".beta", layer.bn.beta});
                break;
            }
            case LayerSpec::Kind::fc: {
                std::string base = "backbone.fc" + std::to_string(fc_idx++);
                params.push_back({base + ".weight", layer.fc.weight});
                params.push_back({base + ".bias", layer.fc.bias});
                break;
            }
            default:
                break;
        }
    }
    params.push_back({"classifier.weight", cls.weight});
    for (size_t i = 0; i < bank.modules.size(); ++i) {
        std::string base = "attn." + std::to_string(i);
        params.push_back({base + ".w1", bank.modules[i].w1});
        params.push_back({base + ".b1", bank.modules[i].b1});
        params.push_back({base + ".w2", bank.modules[i].w2});
        params.push_back({base + ".b2", bank.modules[i].b2});
    }
    return params;
}

}  // namespace dacnet::nn
