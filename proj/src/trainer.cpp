#include "dacnet/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace dacnet::train {

using nlohmann::json;

void TrainConfig::validate() const {
    if (lambda_d < 0.0f || lambda_c < 0.0f)
        throw ConfigError("config: lambda_d and lambda_c must be non-negative");
    if (tau <= 0.0f || tau > 1.0f) throw ConfigError("config: tau must be in (0, 1]");
    if (alpha < 0.0f || alpha >= 1.0f) throw ConfigError("config: alpha must be in [0, 1)");
    if (reduction < 1) throw ConfigError("config: reduction ratio must be >= 1");
    if (epochs < 0) throw ConfigError("config: epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("config: batch size must be >= 1");
    if (lr <= 0.0f) throw ConfigError("config: learning rate must be positive");
    if (optimizer != "sgd-momentum" && optimizer != "adam")
        throw ConfigError("config: optimizer must be sgd-momentum or adam, got " + optimizer);
    if (lr_schedule != "cosine" && lr_schedule != "constant")
        throw ConfigError("config: lr schedule must be cosine or constant, got " + lr_schedule);
    if (target_fraction <= 0.0f || target_fraction > 1.0f)
        throw ConfigError("config: target_fraction must be in (0, 1]");
    if (clip_grad_norm < 0.0f) throw ConfigError("config: clip_grad_norm must be >= 0");
    if (num_classes < 2) throw ConfigError("config: num_classes must be >= 2");
    align::AlignmentMode m = alignment_mode();
    if (disable_attention && !disable_ld && align::is_attention_mode(m))
        throw UsageError("config: mode " + mode +
                         " aligns attention statistics and needs the attention bank; drop "
                         "--no-attention or add --no-ld (or use a feature mode)");
}

std::string config_to_json(const TrainConfig& c) {
    json j;
    j["lambda_d"] = c.lambda_d;
    j["lambda_c"] = c.lambda_c;
    j["tau"] = c.tau;
    j["alpha"] = c.alpha;
    j["reduction"] = c.reduction;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["optimizer"] = c.optimizer;
    j["lr"] = c.lr;
    j["momentum"] = c.momentum;
    j["lr_schedule"] = c.lr_schedule;
    j["seed"] = c.seed;
    j["mode"] = c.mode;
    j["disable_attention"] = c.disable_attention;
    j["disable_ld"] = c.disable_ld;
    j["disable_lc"] = c.disable_lc;
    j["disable_lt"] = c.disable_lt;
    j["include_source_compactness"] = c.include_source_compactness;
    j["target_fraction"] = c.target_fraction;
    j["source_subset"] = c.source_subset;
    j["clip_grad_norm"] = c.clip_grad_norm;
    j["log_interval"] = c.log_interval;
    j["num_classes"] = c.num_classes;
    j["preset"] = c.preset;
    j["fc_width"] = c.fc_width;
    j["eval_best"] = c.eval_best;
    return j.dump();
}

TrainConfig config_from_json(const std::string& text, const TrainConfig& base) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("config: invalid JSON: ") + e.what());
    }
    TrainConfig c = base;
    c.lambda_d = j.value("lambda_d", c.lambda_d);
    c.lambda_c = j.value("lambda_c", c.lambda_c);
    c.tau = j.value("tau", c.tau);
    c.alpha = j.value("alpha", c.alpha);
    c.reduction = j.value("reduction", c.reduction);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.optimizer = j.value("optimizer", c.optimizer);
    c.lr = j.value("lr", c.lr);
    c.momentum = j.value("momentum", c.momentum);
    c.lr_schedule = j.value("lr_schedule", c.lr_schedule);
    c.seed = j.value("seed", c.seed);
    c.mode = j.value("mode", c.mode);
    c.disable_attention = j.value("disable_attention", c.disable_attention);
    c.disable_ld = j.value("disable_ld", c.disable_ld);
    c.disable_lc = j.value("disable_lc", c.disable_lc);
    c.disable_lt = j.value("disable_lt", c.disable_lt);
    c.include_source_compactness =
        j.value("include_source_compactness", c.include_source_compactness);
    c.target_fraction = j.value("target_fraction", c.target_fraction);
    c.source_subset = j.value("source_subset", c.source_subset);
    c.clip_grad_norm = j.value("clip_grad_norm", c.clip_grad_norm);
    c.log_interval = j.value("log_interval", c.log_interval);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.preset = j.value("preset", c.preset);
    c.fc_width = j.value("fc_width", c.fc_width);
    c.eval_best = j.value("eval_best", c.eval_best);
    return c;
}

std::string metrics_csv_header() {
    return "epoch,step,ls,lt,lc,ld,total,masked_fraction,target_acc,wall_seconds";
}

std::string metrics_csv_row(const MetricsRecord& rec) {
    char buf[256];
    std::string acc;
    if (rec.target_acc) {
        char abuf[32];
        std::snprintf(abuf, sizeof abuf, "%.6f", static_cast<double>(*rec.target_acc));
        acc = abuf;
    }
    std::snprintf(buf, sizeof buf, "%lld,%lld,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%s,%.3f",
                  static_cast<long long>(rec.epoch), static_cast<long long>(rec.step),
                  static_cast<double>(rec.losses.ls), static_cast<double>(rec.losses.lt),
                  static_cast<double>(rec.losses.lc), static_cast<double>(rec.losses.ld),
                  static_cast<double>(rec.losses.total),
                  static_cast<double>(rec.losses.masked_fraction), acc.c_str(),
                  rec.wall_seconds);
    return buf;
}

// ---- optimizer ------------------------------------------------------------

Optimizer::Optimizer(const std::string& kind, float momentum)
    : kind_(kind), momentum_(momentum) {
    if (kind != "sgd-momentum" && kind != "adam")
        throw ConfigError("optimizer: unknown kind '" + kind + "'");
}

void Optimizer::apply(std::vector<nn::NamedParam>& params, float lr) {
    if (kind_ == "adam") ++adam_t_;
    constexpr float beta1 = 0.9f, beta2 = 0.999f, adam_eps = 1e-8f;
    for (auto& np : params) {
        auto data = np.tensor.raw_data();
        size_t n = data.size();
        bool has_grad = np.tensor.has_grad();
        auto grad = np.tensor.grad();
        auto& s1 = slot1_[np.name];
        if (s1.size() != n) s1.assign(n, 0.0f);
        if (kind_ == "sgd-momentum") {
            for (size_t i = 0; i < n; ++i) {
                float g = has_grad ? grad[i] : 0.0f;
                s1[i] = momentum_ * s1[i] + g;
                data[i] -= lr * s1[i];
            }
        } else {
            auto& s2 = slot2_[np.name];
            if (s2.size() != n) s2.assign(n, 0.0f);
            float bc1 = 1.0f - std::pow(beta1, static_cast<float>(adam_t_));
            float bc2 = 1.0f - std::pow(beta2, static_cast<float>(adam_t_));
            for (size_t i = 0; i < n; ++i) {
                float g = has_grad ? grad[i] : 0.0f;
                s1[i] = beta1 * s1[i] + (1.0f - beta1) * g;
                s2[i] = beta2 * s2[i] + (1.0f - beta2) * g * g;
                float mhat = s1[i] / bc1;
                float vhat = s2[i] / bc2;
                data[i] -= lr * mhat / (std::sqrt(vhat) + adam_eps);
            }
        }
    }
}

void EmaBank::end_step() {
    for (auto& domain : source_states)
        for (auto& st : domain) st.end_step();
    for (auto& st : target_states) st.end_step();
}

// ---- session --------------------------------------------------------------

TrainSession make_session(const TrainConfig& cfg, int in_channels, int num_sources) {
    cfg.validate();
    TrainSession s;
    s.cfg = cfg;
    s.in_channels = in_channels;
    auto built = nn::build_backbone(cfg.preset, cfg.num_classes, cfg.seed, in_channels,
                                    cfg.fc_width);
    s.model.backbone = std::move(built.backbone);
    s.model.classifier = std::move(built.classifier);
    if (!cfg.disable_attention)
        s.model.bank = nn::make_attention_bank(s.model.backbone, cfg.reduction, cfg.seed);
    s.opt = Optimizer(cfg.optimizer, cfg.momentum);
    s.trainer_rng = Rng(mix_seed(cfg.seed, hash_tag("trainer")));

    align::AlignmentMode mode = cfg.alignment_mode();
    if (align::is_ema_mode(mode)) {
        float alpha = mode == align::AlignmentMode::dac_batch ? 0.0f : cfg.alpha;
        std::vector<int64_t> site_channels;
        if (align::is_attention_mode(mode)) {
            if (!cfg.disable_attention)
                for (int c : s.model.backbone.attention_channels) site_channels.push_back(c);
        } else {
            site_channels.push_back(s.model.backbone.feature_dim);
        }
        for (int64_t c : site_channels) s.ema.target_states.emplace_back(c, alpha);
        s.ema.source_states.resize(static_cast<size_t>(num_sources));
        for (auto& domain : s.ema.source_states)
            for (int64_t c : site_channels) domain.emplace_back(c, alpha);
    }
    return s;
}

// ---- train step -----------------------------------------------------------

namespace {

float finite_or_throw(const Tensor& t, const char* term) {
    float v = t.item();
    if (!std::isfinite(v))
        throw NumericalError(std::string("non-finite loss term '") + term + "' (" +
                             std::to_string(v) + ")");
    return v;
}

void clip_gradients(std::vector<nn::NamedParam>& params, float max_norm) {
    if (max_norm <= 0.0f) return;
    double acc = 0.0;
    for (auto& np : params)
        if (np.tensor.has_grad())
            for (float g : np.tensor.grad()) acc += static_cast<double>(g) * g;
    double norm = std::sqrt(acc);
    if (norm <= max_norm) return;
    float factor = static_cast<float>(max_norm / norm);
    for (auto& np : params)
        if (np.tensor.has_grad())
            for (float& g : np.tensor.raw_grad()) g *= factor;
}

}  // namespace

objectives::LossReport train_step(TrainSession& s, const data::StepBatches& batches, float lr) {
    const TrainConfig& cfg = s.cfg;
    align::AlignmentMode mode = cfg.alignment_mode();
    bool use_attention = !cfg.disable_attention;
    bool need_ld = !cfg.disable_ld;
    bool need_lt = !cfg.disable_lt;
    bool need_lc = !cfg.disable_lc;
    bool need_pl = need_lt || need_lc;
    bool attention_obs = align::is_attention_mode(mode);
    if (need_ld && attention_obs && !use_attention)
        throw UsageError("train_step: attention alignment requires the attention bank");
    const attn::AttentionBank* bank = use_attention ? &s.model.bank : nullptr;

    // (1) source forwards
    std::vector<Tensor> src_logits, src_feats;
    std::vector<std::vector<Tensor>> src_attn;
    std::vector<std::vector<int>> src_labels;
    for (const auto& batch : batches.sources) {
        if (!batch.labels)
            throw ValidationError("train_step: source batch without labels");
        auto fwd = nn::forward_features(s.model.backbone, batch.images, bank, true);
        src_logits.push_back(nn::classify(s.model.classifier, fwd.features));
        src_feats.push_back(fwd.features);
        src_attn.push_back(std::move(fwd.attn_weights));
        src_labels.push_back(*batch.labels);
    }

    // (2) target forwards
    bool ema_active = align::is_ema_mode(mode) && !s.ema.empty();
    // Pseudo-labels come from an evaluation-statistics forward with no graph;
    // the same forward supplies target EMA observables when L_d is disabled.
    objectives::PseudoLabelBatch pl;
    bool have_pl = false;
    nn::ForwardResult weak_eval;
    bool have_weak_eval = false;
    if (need_pl || (!need_ld && ema_active)) {
        NoGradGuard no_grad;
        weak_eval = nn::forward_features(s.model.backbone, batches.target.images, bank, false);
        have_weak_eval = true;
        if (need_pl) {
            pl = objectives::pseudo_label(nn::classify(s.model.classifier, weak_eval.features),
                                          cfg.tau);
            have_pl = true;
        }
    }
    nn::ForwardResult weak_grad;
    bool have_weak_grad = false;
    if (need_ld) {
        weak_grad = nn::forward_features(s.model.backbone, batches.target.images, bank, true);
        have_weak_grad = true;
    }
    nn::ForwardResult strong_fwd;
    Tensor strong_logits;
    if (need_pl) {
        if (!batches.target.strong)
            throw ValidationError("train_step: target batch is missing the strong view");
        strong_fwd = nn::forward_features(s.model.backbone, *batches.target.strong, bank, true);
        strong_logits = nn::classify(s.model.classifier, strong_fwd.features);
    }

    // (3) EMA statistics
    std::vector<std::vector<Tensor>> src_ms;
    std::vector<Tensor> tgt_ms;
    if (ema_active) {
        const nn::ForwardResult& tgt_fwd = have_weak_grad ? weak_grad : weak_eval;
        if (!have_weak_grad && !have_weak_eval)
            throw UsageError("train_step: no target forward available for EMA statistics");
        auto observables = [&](const std::vector<Tensor>& attn_w,
                               const Tensor& feats) -> std::vector<Tensor> {
            if (attention_obs) return attn_w;
            return {feats};
        };
        src_ms.resize(src_attn.size());
        for (size_t k = 0; k < src_attn.size(); ++k) {
            auto obs = observables(src_attn[k], src_feats[k]);
            for (size_t p = 0; p < obs.size(); ++p)
                src_ms[k].push_back(s.ema.source_states[k][p].update(obs[p]));
        }
        auto tobs = observables(tgt_fwd.attn_weights, tgt_fwd.features);
        for (size_t p = 0; p < tobs.size(); ++p)
            tgt_ms.push_back(s.ema.target_states[p].update(tobs[p]));
    }

    // (4) losses
    Tensor ls = objectives::source_loss(src_logits, src_labels);
    Tensor lt = need_lt && have_pl ? objectives::target_loss(strong_logits, pl)
                                   : Tensor::scalar(0.0f);
    Tensor lc = Tensor::scalar(0.0f);
    if (need_lc && have_pl) {
        lc = cfg.include_source_compactness
                 ? objectives::compactness_loss_with_source(strong_fwd.features,
                                                            s.model.classifier, pl, src_feats,
                                                            src_labels)
                 : objectives::compactness_loss(strong_fwd.features, s.model.classifier, pl);
    }
    Tensor ld = Tensor::scalar(0.0f);
    if (need_ld) {
        switch (mode) {
            case align::AlignmentMode::dac_ema:
            case align::AlignmentMode::dac_batch:
            case align::AlignmentMode::dac_features:
                ld = align::dac_loss(src_ms, tgt_ms);
                break;
            case align::AlignmentMode::mmd_attention: {
                Tensor acc;
                size_t points = weak_grad.attn_weights.size();
                for (size_t k = 0; k < src_attn.size(); ++k)
                    for (size_t p = 0; p < points; ++p) {
                        Tensor term = align::mmd_loss(src_attn[k][p], weak_grad.attn_weights[p]);
                        acc = acc.defined() ? add(acc, term) : term;
                    }
                ld = scale(acc, 1.0f / static_cast<float>(src_attn.size() * points));
                break;
            }
            case align::AlignmentMode::mmd_features:
                ld = align::fda_loss(src_feats, weak_grad.features, mode);
                break;
        }
    }
    Tensor total = objectives::total_loss(ls, lt, lc, ld, cfg.lambda_c, cfg.lambda_d);

    objectives::LossReport report;
    report.ls = finite_or_throw(ls, "ls");
    report.lt = finite_or_throw(lt, "lt");
    report.lc = finite_or_throw(lc, "lc");
    report.ld = finite_or_throw(ld, "ld");
    report.total = finite_or_throw(total, "total");
    report.masked_fraction = have_pl ? pl.masked_fraction() : 0.0f;

    // (5) backward + (6) update
    auto params = s.model.named_params();
    for (auto& np : params) np.tensor.zero_grad();
    total.backward();
    clip_gradients(params, cfg.clip_grad_norm);
    s.opt.apply(params, lr);
    s.ema.end_step();
    return report;
}

float cosine_lr(int64_t step, int64_t total_steps, float lr0) {
    if (total_steps < 1) throw ConfigError("cosine_lr: total_steps must be >= 1");
    if (step < 0 || step > total_steps)
        throw ConfigError("cosine_lr: step outside [0, total_steps]");
    double phase = 3.141592653589793 * static_cast<double>(step) / static_cast<double>(total_steps);
    return static_cast<float>(0.5 * (1.0 + std::cos(phase)) * static_cast<double>(lr0));
}

float evaluate(Model& model, const data::DomainDataset& dataset, int eval_batch) {
    if (dataset.size() == 0) throw ValidationError("evaluate: dataset is empty");
    if (!dataset.labels) throw ValidationError("evaluate: dataset has no labels");
    NoGradGuard no_grad;
    const attn::AttentionBank* bank = model.bank.empty() ? nullptr : &model.bank;
    int64_t n = dataset.size();
    int64_t c = dataset.images.dim(1), h = dataset.images.dim(2), w = dataset.images.dim(3);
    int64_t stride = c * h * w;
    int64_t correct = 0;
    for (int64_t first = 0; first < n; first += eval_batch) {
        int64_t count = std::min<int64_t>(eval_batch, n - first);
        Tensor chunk = Tensor::zeros({count, c, h, w});
        std::memcpy(chunk.raw_data().data(), dataset.images.data().data() + first * stride,
                    sizeof(float) * static_cast<size_t>(count * stride));
        auto fwd = nn::forward_features(model.backbone, chunk, bank, false);
        Tensor logits = nn::classify(model.classifier, fwd.features);
        const float* pl = logits.data().data();
        int64_t classes = logits.dim(1);
        for (int64_t i = 0; i < count; ++i) {
            const float* row = pl + i * classes;
            int best = 0;
            for (int64_t j = 1; j < classes; ++j)
                if (row[j] > row[best]) best = static_cast<int>(j);
            if (best == (*dataset.labels)[static_cast<size_t>(first + i)]) ++correct;
        }
    }
    return static_cast<float>(correct) / static_cast<float>(n);
}

// ---- checkpoints ------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[8] = {'D', 'A', 'C', 'C', 'K', 'P', 'T', '1'};

void write_u16(std::ofstream& out, uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    out.write(reinterpret_cast<char*>(b), 2);
}
void write_u32(std::ofstream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<char*>(b), 4);
}
uint16_t read_u16(std::ifstream& in) {
    unsigned char b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    return static_cast<uint16_t>(b[0]) | (static_cast<uint16_t>(b[1]) << 8);
}
uint32_t read_u32(std::ifstream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void write_section(std::ofstream& out, const std::string& name, const Shape& shape,
                   const float* data, size_t count) {
    write_u16(out, static_cast<uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    unsigned char rank = static_cast<unsigned char>(shape.size());
    out.write(reinterpret_cast<char*>(&rank), 1);
    for (int64_t d : shape) write_u32(out, static_cast<uint32_t>(d));
    out.write(reinterpret_cast<const char*>(data),
              static_cast<std::streamsize>(sizeof(float) * count));
}

struct Section {
    Shape shape;
    std::vector<float> data;
};

std::unordered_map<std::string, Section> read_sections(std::ifstream& in,
                                                       const std::string& path) {
    std::unordered_map<std::string, Section> sections;
    while (true) {
        int peek = in.peek();
        if (peek == EOF) break;
        uint16_t name_len = read_u16(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        unsigned char rank = 0;
        in.read(reinterpret_cast<char*>(&rank), 1);
        if (!in) throw FormatError(path + ": truncated section header");
        Section sec;
        int64_t count = 1;
        for (int r = 0; r < rank; ++r) {
            int64_t d = read_u32(in);
            sec.shape.push_back(d);
            count *= d;
        }
        sec.data.resize(static_cast<size_t>(count));
        in.read(reinterpret_cast<char*>(sec.data.data()),
                static_cast<std::streamsize>(sizeof(float) * sec.data.size()));
        if (!in) throw FormatError(path + ": truncated section '" + name + "'");
        sections.emplace(std::move(name), std::move(sec));
    }
    return sections;
}

std::vector<std::pair<std::string, std::vector<float>*>> bn_running_stats(nn::Backbone& bk) {
    std::vector<std::pair<std::string, std::vector<float>*>> out;
    int bn_idx = 0;
    for (auto& layer : bk.layers) {
        if (layer.spec.kind != nn::LayerSpec::Kind::batchnorm) continue;
        std::string base = "backbone.bn" + std::to_string(bn_idx++);
        out.push_back({base + ".running_mean", &layer.bn.running_mean});
        out.push_back({base + ".running_var", &layer.bn.running_var});
    }
    return out;
}

}  // namespace

void save_checkpoint(const std::string& path, const TrainSession& s) {
    TrainSession& ms = const_cast<TrainSession&>(s);  // named_params needs mutable refs
    std::string tmp = path + ".tmp";
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out.write(kCheckpointMagic, 8);

    json meta;
    meta["version"] = 1;
    meta["config"] = json::parse(config_to_json(s.cfg));
    meta["in_channels"] = s.in_channels;
    meta["num_sources"] = s.ema.source_states.size();
    meta["epoch"] = s.epoch;
    meta["global_step"] = s.global_step;
    meta["rng"] = s.trainer_rng.serialize();
    meta["adam_t"] = s.opt.adam_steps();
    {
        json init_src = json::array(), init_tgt = json::array();
        for (const auto& domain : s.ema.source_states) {
            json row = json::array();
            for (const auto& st : domain) row.push_back(st.initialized());
            init_src.push_back(row);
        }
        for (const auto& st : s.ema.target_states) init_tgt.push_back(st.initialized());
        meta["ema_source_init"] = init_src;
        meta["ema_target_init"] = init_tgt;
    }
    std::string meta_text = meta.dump();
    write_u32(out, static_cast<uint32_t>(meta_text.size()));
    out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));

    for (auto& np : ms.model.named_params())
        write_section(out, np.name, np.tensor.shape(), np.tensor.data().data(),
                      np.tensor.data().size());
    for (auto& [name, stats] : bn_running_stats(ms.model.backbone))
        write_section(out, name, {static_cast<int64_t>(stats->size())}, stats->data(),
                      stats->size());
    for (auto& [name, buf] : ms.opt.slot1())
        write_section(out, "opt.m." + name, {static_cast<int64_t>(buf.size())}, buf.data(),
                      buf.size());
    for (auto& [name, buf] : ms.opt.slot2())
        write_section(out, "opt.v." + name, {static_cast<int64_t>(buf.size())}, buf.data(),
                      buf.size());
    for (size_t k = 0; k < s.ema.source_states.size(); ++k)
        for (size_t p = 0; p < s.ema.source_states[k].size(); ++p) {
            const auto& st = s.ema.source_states[k][p];
            write_section(out, "ema.s" + std::to_string(k) + ".p" + std::to_string(p),
                          {static_cast<int64_t>(st.values().size())}, st.values().data(),
                          st.values().size());
        }
    for (size_t p = 0; p < s.ema.target_states.size(); ++p) {
        const auto& st = s.ema.target_states[p];
        write_section(out, "ema.t.p" + std::to_string(p),
                      {static_cast<int64_t>(st.values().size())}, st.values().data(),
                      st.values().size());
    }
    out.close();
    if (!out) throw IoError("write failed for " + tmp);
    std::filesystem::rename(tmp, path);
}

TrainSession load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw FormatError(path + ": bad checkpoint magic (expected \"DACCKPT1\")");
    uint32_t meta_len = read_u32(in);
    std::string meta_text(meta_len, '\0');
    in.read(meta_text.data(), meta_len);
    if (!in) throw FormatError(path + ": truncated metadata block");
    json meta;
    try {
        meta = json::parse(meta_text);
    } catch (const json::parse_error& e) {
        throw FormatError(path + ": invalid metadata JSON: " + e.what());
    }

    TrainConfig cfg = config_from_json(meta.at("config").dump());
    int in_channels = meta.at("in_channels").get<int>();
    int num_sources = meta.at("num_sources").get<int>();
    TrainSession s = make_session(cfg, in_channels, num_sources);
    s.epoch = meta.at("epoch").get<int64_t>();
    s.global_step = meta.at("global_step").get<int64_t>();
    s.trainer_rng.deserialize(meta.at("rng").get<std::string>());
    s.opt.set_adam_steps(meta.at("adam_t").get<int64_t>());

    auto sections = read_sections(in, path);
    auto take = [&](const std::string& name) -> Section& {
        auto it = sections.find(name);
        if (it == sections.end())
            throw FormatError(path + ": missing checkpoint section '" + name + "'");
        return it->second;
    };
    for (auto& np : s.model.named_params()) {
        Section& sec = take(np.name);
        if (sec.shape != np.tensor.shape())
            throw FormatError(path + ": section '" + np.name + "' has shape " +
                              shape_str(sec.shape) + ", model expects " +
                              shape_str(np.tensor.shape()));
        std::copy(sec.data.begin(), sec.data.end(), np.tensor.raw_data().begin());
    }
    for (auto& [name, stats] : bn_running_stats(s.model.backbone)) {
        Section& sec = take(name);
        if (sec.data.size() != stats->size())
            throw FormatError(path + ": section '" + name + "' size mismatch");
        *stats = sec.data;
    }
    for (auto& [name, sec] : sections) {
        if (name.rfind("opt.m.", 0) == 0) s.opt.slot1()[name.substr(6)] = sec.data;
        if (name.rfind("opt.v.", 0) == 0) s.opt.slot2()[name.substr(6)] = sec.data;
    }
    for (size_t k = 0; k < s.ema.source_states.size(); ++k)
        for (size_t p = 0; p < s.ema.source_states[k].size(); ++p) {
            Section& sec = take("ema.s" + std::to_string(k) + ".p" + std::to_string(p));
            bool init = meta.at("ema_source_init")[k][p].get<bool>();
            s.ema.source_states[k][p].restore(sec.data, init);
        }
    for (size_t p = 0; p < s.ema.target_states.size(); ++p) {
        Section& sec = take("ema.t.p" + std::to_string(p));
        bool init = meta.at("ema_target_init")[p].get<bool>();
        s.ema.target_states[p].restore(sec.data, init);
    }
    return s;
}

// ---- fit --------------------------------------------------------------------

FitResult fit(const TrainConfig& cfg_in, const std::vector<data::DomainDataset>& sources_in,
              const data::DomainDataset& target_in, const FitOptions& options) {
    cfg_in.validate();

    std::vector<data::DomainDataset> sources;
    if (!cfg_in.source_subset.empty()) {
        for (int idx : cfg_in.source_subset) {
            if (idx < 0 || idx >= static_cast<int>(sources_in.size()))
                throw ConfigError("fit: source_subset index " + std::to_string(idx) +
                                  " out of range");
            sources.push_back(sources_in[static_cast<size_t>(idx)]);
        }
    } else {
        sources = sources_in;
    }
    if (sources.empty()) throw ConfigError("fit: need at least one source domain");
    for (const auto& src : sources) {
        if (!src.labels)
            throw ValidationError("fit: source domain '" + src.name + "' has no labels");
        for (int y : *src.labels)
            if (y < 0 || y >= cfg_in.num_classes)
                throw ValidationError("fit: label " + std::to_string(y) + " in '" + src.name +
                                      "' outside [0, " + std::to_string(cfg_in.num_classes) + ")");
    }

    data::DomainDataset target = data::strip_labels(
        cfg_in.target_fraction < 1.0f
            ? data::subset_dataset(target_in, cfg_in.target_fraction, cfg_in.seed)
            : target_in);

    int64_t c = target.images.dim(1), h = target.images.dim(2), w = target.images.dim(3);
    for (const auto& src : sources)
        if (src.images.dim(1) != c || src.images.dim(2) != h || src.images.dim(3) != w)
            throw DimensionError("fit: source '" + src.name + "' images " +
                                 shape_str(src.images.shape()) + " do not match target " +
                                 shape_str(target.images.shape()));

    TrainSession s = options.resume_from.empty()
                         ? make_session(cfg_in, static_cast<int>(c),
                                        static_cast<int>(sources.size()))
                         : load_checkpoint(options.resume_from);
    const TrainConfig& cfg = s.cfg;

    std::filesystem::create_directories(options.out_dir);
    std::string metrics_path = options.out_dir + "/metrics.csv";
    bool write_header = !std::filesystem::exists(metrics_path) ||
                        std::filesystem::file_size(metrics_path) == 0;
    std::ofstream metrics(metrics_path, std::ios::app);
    if (!metrics) throw IoError("cannot open " + metrics_path + " for writing");
    if (write_header) metrics << metrics_csv_header() << "\n";

    data::Sampler sampler(&sources, &target, cfg.batch_size, cfg.seed,
                          data::AugmentationPolicy::weak(), data::AugmentationPolicy::strong());
    int64_t steps_per_epoch = sampler.steps_per_epoch();
    int64_t total_steps = static_cast<int64_t>(cfg.epochs) * steps_per_epoch;

    FitResult result;
    float best_acc = -1.0f;
    auto t0 = std::chrono::steady_clock::now();
    auto wall = [&t0] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    auto log_record = [&](MetricsRecord rec) {
        metrics << metrics_csv_row(rec) << "\n";
        metrics.flush();
        result.history.push_back(std::move(rec));
    };

    for (int64_t epoch = s.epoch; epoch < cfg.epochs; ++epoch) {
        objectives::LossReport last_report;
        for (int64_t step = 0; step < steps_per_epoch; ++step) {
            float lr = cfg.lr_schedule == "cosine" ? cosine_lr(s.global_step, total_steps, cfg.lr)
                                                   : cfg.lr;
            auto batches = sampler.batches(epoch, step);
            try {
                last_report = train_step(s, batches, lr);
            } catch (const NumericalError& e) {
                throw NumericalError("epoch " + std::to_string(epoch) + " step " +
                                     std::to_string(step) + ": " + e.what());
            }
            ++s.global_step;
            if (cfg.log_interval > 0 && s.global_step % cfg.log_interval == 0 &&
                step + 1 != steps_per_epoch) {
                MetricsRecord rec{epoch, s.global_step, last_report, std::nullopt, wall()};
                log_record(rec);
            }
        }
        s.epoch = epoch + 1;

        MetricsRecord rec{epoch, s.global_step, last_report, std::nullopt, 0.0};
        if (options.target_test) {
            float acc = evaluate(s.model, *options.target_test);
            rec.target_acc = acc;
            result.final_accuracy = acc;
            if (acc > best_acc) {
                best_acc = acc;
                if (cfg.eval_best) save_checkpoint(options.out_dir + "/best.ckpt", s);
            }
        }
        rec.wall_seconds = wall();
        log_record(rec);

        save_checkpoint(options.out_dir + "/last.ckpt", s);
        if (options.keep_epoch_checkpoints) {
            char name[32];
            std::snprintf(name, sizeof name, "epoch_%03lld.ckpt", static_cast<long long>(epoch));
            save_checkpoint(options.out_dir + "/" + name, s);
        }
    }

    result.final_checkpoint = options.out_dir + "/final.ckpt";
    save_checkpoint(result.final_checkpoint, s);
    if (cfg.eval_best && best_acc >= 0.0f) result.final_accuracy = best_acc;
    return result;
}

}  // namespace dacnet::train
