#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dacnet/rng.hpp"
#include "dacnet/tensor.hpp"

namespace dacnet::data {

struct DomainDataset {
    int domain_id = -1;
    std::string name;
    Tensor images;  // [N, C, H, W], values in [0, 1]
    std::optional<std::vector<int>> labels;
    int num_classes = 0;

    bool is_source() const { return labels.has_value(); }
    int64_t size() const { return images.defined() ? images.dim(0) : 0; }
};

enum class DomainTransform { clean, inverted, gaussian_noise, stripe_background, hue_shift, blur };

struct DomainRecipe {
    std::string name;
    DomainTransform transform = DomainTransform::clean;
    float noise_sigma = 0.20f;
    float stripe_amp = 0.50f;
    float hue_base = 0.58f;
    float blur_sigma = 1.1f;
};

// Recipes by short name: clean, inverted, noise, stripes, hue, blur.
DomainRecipe recipe_from_name(const std::string& name);
std::vector<std::string> recipe_names();

// Renders the same class-balanced glyph population under each recipe's
// transform. Content is keyed on (seed, index) only, so two domains with the
// same recipe produce identical tensors for the same seed.
std::vector<DomainDataset> generate_synthetic(const std::vector<DomainRecipe>& recipes,
                                              int n_per_domain, int num_classes, int image_size,
                                              uint64_t seed);

struct AugmentationPolicy {
    enum class Kind { weak, strong };
    Kind kind = Kind::weak;
    // Scales every perturbation range; 0 turns the policy into the identity.
    float magnitude = 1.0f;

    static AugmentationPolicy weak() { return {Kind::weak, 1.0f}; }
    static AugmentationPolicy strong() { return {Kind::strong, 1.0f}; }
};

// image: [C, H, W] in [0, 1]; output clamped to [0, 1].
Tensor augment(const Tensor& image, const AugmentationPolicy& policy, Rng& rng);
// In-place variant used by the batch assembler.
void augment_into(const float* src, float* dst, int64_t c, int64_t h, int64_t w,
                  const AugmentationPolicy& policy, Rng& rng);

// ---- IDX (MNIST) format -------------------------------------------------

// labels_path may be empty for an unlabeled dataset. Grayscale pixels are
// scaled to [0,1] and replicated across `channels`.
DomainDataset load_idx(const std::string& images_path, const std::string& labels_path,
                       int channels = 1);
void write_idx_images(const std::string& path, const Tensor& images);
void write_idx_labels(const std::string& path, const std::vector<int>& labels);

// ---- native dataset container --------------------------------------------
// 16-byte header: "DACD", version u16, N u32, C/H/W u8, num_classes u16, one
// pad byte; then little-endian f32 pixels, then u16 labels with 0xFFFF
// meaning unlabeled.

void save_dataset(const std::string& path, const DomainDataset& ds);
DomainDataset load_dataset(const std::string& path);

// Deterministic subset of the first ceil(N * fraction) samples of a seeded
// shuffle; used for the target-amount study.
DomainDataset subset_dataset(const DomainDataset& ds, float fraction, uint64_t seed);

// Drops labels so a generated domain can serve as the unlabeled target.
DomainDataset strip_labels(const DomainDataset& ds);

// ---- batching -------------------------------------------------------------

struct DomainBatch {
    int domain_id = -1;
    Tensor images;                 // weakly augmented view
    std::optional<Tensor> strong;  // strong view (target only)
    std::optional<std::vector<int>> labels;
};

struct StepBatches {
    std::vector<DomainBatch> sources;
    DomainBatch target;
};

// Yields one size-B batch per source domain plus one target batch per step.
// Epoch length is ceil(max dataset size / B); smaller datasets cycle through
// reshuffles. Fully deterministic in (seed, epoch, step).
class Sampler {
public:
    Sampler(const std::vector<DomainDataset>* sources, const DomainDataset* target,
            int batch_size, uint64_t seed, AugmentationPolicy weak_policy,
            AugmentationPolicy strong_policy, bool augment_sources = true);

    int64_t steps_per_epoch() const { return steps_per_epoch_; }
    StepBatches batches(int64_t epoch, int64_t step);

private:
    const std::vector<int>& epoch_order(int64_t epoch, int64_t stream_index, int64_t size);

    const std::vector<DomainDataset>* sources_;
    const DomainDataset* target_;
    int batch_size_;
    uint64_t seed_;
    AugmentationPolicy weak_;
    AugmentationPolicy strong_;
    bool augment_sources_;
    int64_t steps_per_epoch_ = 0;
    int64_t cached_epoch_ = -1;
    std::vector<std::vector<int>> order_cache_;  // per stream (sources..., target)
};

}  // namespace dacnet::data
