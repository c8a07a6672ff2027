#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dacnet/data.hpp"
#include "dacnet/domain_align.hpp"
#include "dacnet/nn.hpp"
#include "dacnet/objectives.hpp"

namespace dacnet::train {

struct TrainConfig {
    float lambda_d = 0.3f;
    float lambda_c = 0.1f;
    float tau = 0.95f;
    float alpha = 0.999f;
    int reduction = 16;
    int epochs = 30;
    int batch_size = 64;
    std::string optimizer = "sgd-momentum";  // sgd-momentum | adam
    float lr = 0.05f;
    float momentum = 0.9f;
    std::string lr_schedule = "cosine";  // cosine | constant
    uint64_t seed = 0;
    std::string mode = "dac-ema";
    bool disable_attention = false;
    bool disable_ld = false;
    bool disable_lc = false;
    bool disable_lt = false;
    bool include_source_compactness = false;
    float target_fraction = 1.0f;
    std::vector<int> source_subset;  // empty = use all sources
    float clip_grad_norm = 5.0f;     // 0 disables clipping
    int log_interval = 50;
    int num_classes = 10;
    std::string preset = "digit-small";
    int fc_width = 128;
    bool eval_best = false;

    void validate() const;
    align::AlignmentMode alignment_mode() const { return align::parse_mode(mode); }
};

std::string config_to_json(const TrainConfig& cfg);
// Fields absent from the JSON keep their values from `base`.
TrainConfig config_from_json(const std::string& text, const TrainConfig& base = TrainConfig{});

struct MetricsRecord {
    int64_t epoch = 0;
    int64_t step = 0;
    objectives::LossReport losses;
    std::optional<float> target_acc;
    double wall_seconds = 0.0;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRecord& rec);

struct Model {
    nn::Backbone backbone;
    nn::Classifier classifier;
    attn::AttentionBank bank;  // empty when attention is disabled

    std::vector<nn::NamedParam> named_params() {
        return nn::named_parameters(backbone, classifier, bank);
    }
};

class Optimizer {
public:
    Optimizer() = default;
    Optimizer(const std::string& kind, float momentum);

    void apply(std::vector<nn::NamedParam>& params, float lr);

    const std::string& kind() const { return kind_; }
    int64_t adam_steps() const { return adam_t_; }
    void set_adam_steps(int64_t t) { adam_t_ = t; }
    std::unordered_map<std::string, std::vector<float>>& slot1() { return slot1_; }
    std::unordered_map<std::string, std::vector<float>>& slot2() { return slot2_; }

private:
    std::string kind_ = "sgd-momentum";
    float momentum_ = 0.9f;
    int64_t adam_t_ = 0;
    std::unordered_map<std::string, std::vector<float>> slot1_;  // momentum / adam m
    std::unordered_map<std::string, std::vector<float>> slot2_;  // adam v
};

// EMA statistics per (domain, alignment site). Sites are the attention
// attachment points, or a single site when aligning final features.
struct EmaBank {
    std::vector<std::vector<align::DomainEmaState>> source_states;  // [K][sites]
    std::vector<align::DomainEmaState> target_states;               // [sites]

    bool empty() const { return target_states.empty(); }
    void end_step();
};

struct TrainSession {
    TrainConfig cfg;
    int in_channels = 3;
    Model model;
    Optimizer opt;
    EmaBank ema;
    int64_t epoch = 0;        // next epoch to run
    int64_t global_step = 0;
    Rng trainer_rng{0};
};

TrainSession make_session(const TrainConfig& cfg, int in_channels, int num_sources);

// One optimization step over K source batches plus the target batch.
objectives::LossReport train_step(TrainSession& s, const data::StepBatches& batches, float lr);

float cosine_lr(int64_t step, int64_t total_steps, float lr0);

// Top-1 accuracy with running batchnorm statistics and no augmentation.
float evaluate(Model& model, const data::DomainDataset& dataset, int eval_batch = 256);

struct FitOptions {
    std::string out_dir;  // metrics.csv, last.ckpt, final.ckpt live here
    bool keep_epoch_checkpoints = false;
    std::string resume_from;  // checkpoint path; empty = fresh run
    const data::DomainDataset* target_test = nullptr;
};

struct FitResult {
    std::vector<MetricsRecord> history;
    std::string final_checkpoint;
    float final_accuracy = -1.0f;  // last-epoch eval (or best with eval_best)
};

FitResult fit(const TrainConfig& cfg, const std::vector<data::DomainDataset>& sources,
              const data::DomainDataset& target, const FitOptions& options);

void save_checkpoint(const std::string& path, const TrainSession& s);
TrainSession load_checkpoint(const std::string& path);

}  // namespace dacnet::train
