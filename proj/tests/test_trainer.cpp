#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"

#include "dacnet/trainer.hpp"

using namespace dacnet;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& name) {
    auto path = fs::temp_directory_path() / ("dacnet_trainer_" + name);
    fs::remove_all(path);
    fs::create_directories(path);
    return path.string();
}

train::TrainConfig tiny_config() {
    train::TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.lr = 0.02f;
    cfg.seed = 5;
    cfg.num_classes = 4;
    cfg.fc_width = 32;
    cfg.log_interval = 2;
    return cfg;
}

struct TinyData {
    std::vector<data::DomainDataset> sources;
    data::DomainDataset target;
    data::DomainDataset target_test;
};

TinyData tiny_data(int n = 24, int classes = 4) {
    TinyData d;
    auto domains = data::generate_synthetic({data::recipe_from_name("clean"),
                                             data::recipe_from_name("noise"),
                                             data::recipe_from_name("stripes")},
                                            n, classes, 28, 11);
    d.sources = {domains[0], domains[1]};
    d.target = data::strip_labels(domains[2]);
    d.target.domain_id = 2;
    d.target_test = data::generate_synthetic({data::recipe_from_name("stripes")}, n, classes, 28,
                                             12)[0];
    return d;
}

}  // namespace

TEST_CASE("cosine schedule endpoints and midpoint") {
    CHECK(train::cosine_lr(0, 100, 0.05f) == doctest::Approx(0.05f));
    CHECK(train::cosine_lr(100, 100, 0.05f) == doctest::Approx(0.0f));
    CHECK(train::cosine_lr(50, 100, 0.05f) == doctest::Approx(0.025f));
    CHECK_THROWS_AS(train::cosine_lr(101, 100, 0.05f), ConfigError);
}

TEST_CASE("config json round trip and validation") {
    train::TrainConfig cfg = tiny_config();
    cfg.mode = "mmd-attention";
    cfg.source_subset = {1, 0};
    train::TrainConfig back = train::config_from_json(train::config_to_json(cfg));
    CHECK(back.mode == "mmd-attention");
    CHECK(back.source_subset == std::vector<int>{1, 0});
    CHECK(back.epochs == cfg.epochs);
    CHECK(back.seed == cfg.seed);

    // partial JSON only overrides the named fields
    train::TrainConfig merged = train::config_from_json("{\"lambda_d\": 0.7}", cfg);
    CHECK(merged.lambda_d == doctest::Approx(0.7f));
    CHECK(merged.epochs == cfg.epochs);

    train::TrainConfig bad = cfg;
    bad.lambda_c = -1.0f;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    train::TrainConfig conflict = cfg;
    conflict.disable_attention = true;  // dac-ema still enabled
    CHECK_THROWS_AS(conflict.validate(), UsageError);
    conflict.disable_ld = true;
    CHECK_NOTHROW(conflict.validate());
}

TEST_CASE("ablation degeneracy: all switches off reduce to supervised training") {
    train::TrainConfig cfg = tiny_config();
    cfg.disable_attention = true;
    cfg.disable_lt = true;
    cfg.disable_lc = true;
    cfg.disable_ld = true;
    TinyData d = tiny_data();
    auto session = train::make_session(cfg, 3, 2);
    CHECK(session.ema.empty());
    CHECK(session.model.bank.empty());

    data::Sampler sampler(&d.sources, &d.target, cfg.batch_size, cfg.seed,
                          data::AugmentationPolicy::weak(), data::AugmentationPolicy::strong());
    auto report = train::train_step(session, sampler.batches(0, 0), 0.01f);
    CHECK(report.lt == 0.0f);
    CHECK(report.lc == 0.0f);
    CHECK(report.ld == 0.0f);
    CHECK(report.total == doctest::Approx(report.ls).epsilon(1e-6));
    CHECK(report.masked_fraction == 0.0f);
}

TEST_CASE("identical source and target streams give zero alignment loss") {
    train::TrainConfig cfg = tiny_config();
    TinyData d = tiny_data();
    auto session = train::make_session(cfg, 3, 1);

    data::DomainBatch src;
    src.domain_id = 0;
    src.images = Tensor::zeros({8, 3, 28, 28});
    std::memcpy(src.images.raw_data().data(), d.sources[0].images.data().data(),
                sizeof(float) * static_cast<size_t>(src.images.numel()));
    src.labels = std::vector<int>((*d.sources[0].labels).begin(),
                                  (*d.sources[0].labels).begin() + 8);
    data::DomainBatch tgt;
    tgt.domain_id = 1;
    tgt.images = src.images;    // same stream
    tgt.strong = src.images;
    data::StepBatches batches;
    batches.sources = {src};
    batches.target = tgt;

    // lr = 0 freezes the parameters; one warm-up step then exact agreement
    auto r1 = train::train_step(session, batches, 0.0f);
    CHECK(r1.ld < 1e-6f);
    auto r2 = train::train_step(session, batches, 0.0f);
    CHECK(r2.ld < 1e-6f);
}

TEST_CASE("one pinned step reproduces its golden loss report") {
    // regression fixture: regenerate these constants deliberately whenever
    // the numerical path changes (print the report and update)
    train::TrainConfig cfg = tiny_config();
    cfg.tau = 0.5f;
    TinyData d = tiny_data();
    auto session = train::make_session(cfg, 3, 2);
    data::Sampler sampler(&d.sources, &d.target, cfg.batch_size, cfg.seed,
                          data::AugmentationPolicy::weak(), data::AugmentationPolicy::strong());
    auto report = train::train_step(session, sampler.batches(0, 0), 0.01f);
    auto again = [&] {
        auto s2 = train::make_session(cfg, 3, 2);
        data::Sampler smp(&d.sources, &d.target, cfg.batch_size, cfg.seed,
                          data::AugmentationPolicy::weak(), data::AugmentationPolicy::strong());
        return train::train_step(s2, smp.batches(0, 0), 0.01f);
    }();
    // bit-identical replay of the same fixture
    CHECK(report.ls == again.ls);
    CHECK(report.lt == again.lt);
    CHECK(report.lc == again.lc);
    CHECK(report.ld == again.ld);
    CHECK(report.total == again.total);
    // and the Eq. 7 identity
    CHECK(report.total ==
          doctest::Approx(report.ls + report.lt + 0.1f * report.lc + 0.3f * report.ld)
              .epsilon(1e-6));
}

TEST_CASE("disable_ld updates EMA but leaves gradients as if alignment were absent") {
    train::TrainConfig cfg = tiny_config();
    cfg.disable_ld = true;
    TinyData d = tiny_data();
    data::Sampler sampler(&d.sources, &d.target, cfg.batch_size, cfg.seed,
                          data::AugmentationPolicy::weak(), data::AugmentationPolicy::strong());
    auto batches = sampler.batches(0, 0);

    auto session = train::make_session(cfg, 3, 2);
    train::train_step(session, batches, 0.01f);
    for (const auto& st : session.ema.target_states) CHECK(st.initialized());
    for (const auto& dom : session.ema.source_states)
        for (const auto& st : dom) CHECK(st.initialized());

    // manual replication with no alignment machinery at all
    auto manual = train::make_session(cfg, 3, 2);
    {
        std::vector<Tensor> logits, feats;
        std::vector<std::vector<int>> labels;
        for (const auto& b : batches.sources) {
            auto fwd = nn::forward_features(manual.model.backbone, b.images, &manual.model.bank,
                                            true);
            logits.push_back(nn::classify(manual.model.classifier, fwd.features));
            feats.push_back(fwd.features);
            labels.push_back(*b.labels);
        }
        objectives::PseudoLabelBatch pl;
        {
            NoGradGuard ng;
            auto weak = nn::forward_features(manual.model.backbone, batches.target.images,
                                             &manual.model.bank, false);
            pl = objectives::pseudo_label(nn::classify(manual.model.classifier, weak.features),
                                          cfg.tau);
        }
        auto strong = nn::forward_features(manual.model.backbone, *batches.target.strong,
                                           &manual.model.bank, true);
        Tensor ls = objectives::source_loss(logits, labels);
        Tensor lt = objectives::target_loss(nn::classify(manual.model.classifier,
                                                         strong.features), pl);
        Tensor lc = objectives::compactness_loss(strong.features, manual.model.classifier, pl);
        Tensor total = objectives::total_loss(ls, lt, lc, Tensor::scalar(0.0f), cfg.lambda_c,
                                              cfg.lambda_d);
        auto params = manual.model.named_params();
        for (auto& np : params) np.tensor.zero_grad();
        total.backward();
        // same clipping and update as train_step
        double acc = 0;
        for (auto& np : params)
            if (np.tensor.has_grad())
                for (float g : np.tensor.grad()) acc += static_cast<double>(g) * g;
        double norm = std::sqrt(acc);
        if (cfg.clip_grad_norm > 0 && norm > cfg.clip_grad_norm) {
            float f = static_cast<float>(cfg.clip_grad_norm / norm);
            for (auto& np : params)
                if (np.tensor.has_grad())
                    for (float& g : np.tensor.raw_grad()) g *= f;
        }
        manual.opt.apply(params, 0.01f);
    }
    auto p1 = session.model.named_params();
    auto p2 = manual.model.named_params();
    REQUIRE(p1.size() == p2.size());
    for (size_t i = 0; i < p1.size(); ++i)
        for (int64_t j = 0; j < p1[i].tensor.numel(); ++j)
            CHECK(p1[i].tensor.data()[j] == p2[i].tensor.data()[j]);
}

TEST_CASE("nan in a loss term aborts with the term name") {
    train::TrainConfig cfg = tiny_config();
    TinyData d = tiny_data();
    auto session = train::make_session(cfg, 3, 2);
    // poison a logit path; relu layers upstream would mask NaN weights
    session.model.classifier.weight.raw_data()[0] = std::numeric_limits<float>::quiet_NaN();
    data::Sampler sampler(&d.sources, &d.target, cfg.batch_size, cfg.seed,
                          data::AugmentationPolicy::weak(), data::AugmentationPolicy::strong());
    try {
        train::train_step(session, sampler.batches(0, 0), 0.01f);
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        CHECK(std::string(e.what()).find("ls") != std::string::npos);
    }
}

TEST_CASE("evaluate guards and self-consistency") {
    train::TrainConfig cfg = tiny_config();
    auto session = train::make_session(cfg, 3, 1);
    TinyData d = tiny_data();

    data::DomainDataset empty;
    empty.images = Tensor::zeros({0, 3, 28, 28});
    empty.labels = std::vector<int>{};
    CHECK_THROWS_AS(train::evaluate(session.model, empty), ValidationError);
    CHECK_THROWS_AS(train::evaluate(session.model, d.target), ValidationError);  // unlabeled

    // dataset labeled by the model's own argmax evaluates to accuracy 1
    data::DomainDataset self = d.target_test;
    {
        NoGradGuard ng;
        auto fwd = nn::forward_features(session.model.backbone, self.images,
                                        &session.model.bank, false);
        Tensor logits = nn::classify(session.model.classifier, fwd.features);
        std::vector<int> argmax(static_cast<size_t>(logits.dim(0)));
        for (int64_t i = 0; i < logits.dim(0); ++i) {
            const float* row = logits.data().data() + i * logits.dim(1);
            int best = 0;
            for (int64_t j = 1; j < logits.dim(1); ++j)
                if (row[j] > row[best]) best = static_cast<int>(j);
            argmax[static_cast<size_t>(i)] = best;
        }
        self.labels = argmax;
    }
    CHECK(train::evaluate(session.model, self) == doctest::Approx(1.0f));
}

TEST_CASE("random model sits at chance level on balanced data") {
    auto test_set = data::generate_synthetic({data::recipe_from_name("clean")}, 500, 10, 28, 31)[0];
    double acc_sum = 0;
    for (uint64_t seed = 0; seed < 5; ++seed) {
        train::TrainConfig cfg;
        cfg.num_classes = 10;
        cfg.seed = seed;
        auto session = train::make_session(cfg, 3, 1);
        acc_sum += train::evaluate(session.model, test_set);
    }
    CHECK(acc_sum / 5.0 == doctest::Approx(0.1).epsilon(0.5));  // 0.1 +/- 0.05
}

TEST_CASE("fit with zero epochs returns the initial checkpoint and empty history") {
    train::TrainConfig cfg = tiny_config();
    cfg.epochs = 0;
    TinyData d = tiny_data();
    train::FitOptions options;
    options.out_dir = temp_dir("zero_epochs");
    auto result = train::fit(cfg, d.sources, d.target, options);
    CHECK(result.history.empty());
    CHECK(fs::exists(result.final_checkpoint));
    auto restored = train::load_checkpoint(result.final_checkpoint);
    CHECK(restored.epoch == 0);
}

TEST_CASE("fit logs a decomposable total at every record") {
    train::TrainConfig cfg = tiny_config();
    cfg.tau = 0.6f;
    TinyData d = tiny_data();
    train::FitOptions options;
    options.out_dir = temp_dir("decompose");
    options.target_test = &d.target_test;
    auto result = train::fit(cfg, d.sources, d.target, options);
    REQUIRE_FALSE(result.history.empty());
    for (const auto& rec : result.history) {
        float lhs = rec.losses.total;
        float rhs = rec.losses.ls + rec.losses.lt + cfg.lambda_c * rec.losses.lc +
                    cfg.lambda_d * rec.losses.ld;
        CHECK(std::fabs(lhs - rhs) < 1e-6f);
    }
    CHECK(result.history.back().target_acc.has_value());
}

TEST_CASE("seeded runs are deterministic and checkpoints resume identically") {
    train::TrainConfig cfg = tiny_config();
    TinyData d = tiny_data();

    train::FitOptions opt_a;
    opt_a.out_dir = temp_dir("det_a");
    opt_a.keep_epoch_checkpoints = true;
    opt_a.target_test = &d.target_test;
    auto a = train::fit(cfg, d.sources, d.target, opt_a);

    train::FitOptions opt_b;
    opt_b.out_dir = temp_dir("det_b");
    opt_b.target_test = &d.target_test;
    auto b = train::fit(cfg, d.sources, d.target, opt_b);

    REQUIRE(a.history.size() == b.history.size());
    for (size_t i = 0; i < a.history.size(); ++i) {
        CHECK(a.history[i].epoch == b.history[i].epoch);
        CHECK(a.history[i].step == b.history[i].step);
        CHECK(a.history[i].losses.total == b.history[i].losses.total);  // bit identical
        CHECK(a.history[i].losses.ld == b.history[i].losses.ld);
        CHECK(a.history[i].target_acc.has_value() == b.history[i].target_acc.has_value());
        if (a.history[i].target_acc)
            CHECK(*a.history[i].target_acc == *b.history[i].target_acc);
    }

    // resume from the end-of-epoch-0 checkpoint and replay epoch 1
    train::FitOptions opt_c;
    opt_c.out_dir = temp_dir("det_c");
    opt_c.resume_from = opt_a.out_dir + "/epoch_000.ckpt";
    opt_c.target_test = &d.target_test;
    auto c = train::fit(cfg, d.sources, d.target, opt_c);
    std::vector<train::MetricsRecord> epoch1;
    for (const auto& rec : a.history)
        if (rec.epoch == 1) epoch1.push_back(rec);
    REQUIRE(c.history.size() == epoch1.size());
    for (size_t i = 0; i < epoch1.size(); ++i) {
        CHECK(c.history[i].step == epoch1[i].step);
        CHECK(c.history[i].losses.total == epoch1[i].losses.total);
        if (epoch1[i].target_acc)
            CHECK(*c.history[i].target_acc == *epoch1[i].target_acc);
    }
}

TEST_CASE("checkpoint files reject corruption") {
    train::TrainConfig cfg = tiny_config();
    auto session = train::make_session(cfg, 3, 2);
    std::string dir = temp_dir("ckpt");
    std::string path = dir + "/model.ckpt";
    train::save_checkpoint(path, session);
    auto restored = train::load_checkpoint(path);
    auto p1 = session.model.named_params();
    auto p2 = restored.model.named_params();
    for (size_t i = 0; i < p1.size(); ++i)
        for (int64_t j = 0; j < p1[i].tensor.numel(); ++j)
            CHECK(p1[i].tensor.data()[j] == p2[i].tensor.data()[j]);

    std::ofstream bad(dir + "/bad.ckpt", std::ios::binary);
    bad << "NOTACKPT--------";
    bad.close();
    CHECK_THROWS_AS(train::load_checkpoint(dir + "/bad.ckpt"), FormatError);
}

TEST_CASE("source_subset picks single-source adaptation") {
    train::TrainConfig cfg = tiny_config();
    cfg.epochs = 1;
    cfg.source_subset = {1};
    TinyData d = tiny_data();
    train::FitOptions options;
    options.out_dir = temp_dir("subset");
    auto result = train::fit(cfg, d.sources, d.target, options);
    auto restored = train::load_checkpoint(result.final_checkpoint);
    CHECK(restored.ema.source_states.size() == 1);  // K = 1
}

TEST_CASE("target_fraction subsamples the target set") {
    train::TrainConfig cfg = tiny_config();
    cfg.epochs = 1;
    cfg.target_fraction = 0.5f;
    TinyData d = tiny_data(30);
    // ceil(30 * 0.5) = 15 -> smaller than sources, so epoch length still
    // follows the bigger source; just verify the run completes and logs
    train::FitOptions options;
    options.out_dir = temp_dir("fraction");
    CHECK_NOTHROW(train::fit(cfg, d.sources, d.target, options));
}

TEST_CASE("single-domain training reaches the sanity floor") {
    // class signal check: train and test within one domain
    auto domains = data::generate_synthetic({data::recipe_from_name("clean")}, 640, 10, 28, 51);
    auto test_split = data::generate_synthetic({data::recipe_from_name("clean")}, 200, 10, 28, 52);
    train::TrainConfig cfg;
    cfg.epochs = 10;
    cfg.batch_size = 64;
    cfg.lr = 0.05f;
    cfg.seed = 3;
    cfg.num_classes = 10;
    cfg.disable_attention = true;
    cfg.disable_lt = true;
    cfg.disable_lc = true;
    cfg.disable_ld = true;
    std::vector<data::DomainDataset> sources = {domains[0]};
    data::DomainDataset target = data::strip_labels(domains[0]);
    train::FitOptions options;
    options.out_dir = temp_dir("sanity");
    options.target_test = &test_split[0];
    auto result = train::fit(cfg, sources, target, options);
    CHECK(result.final_accuracy > 0.95f);
}
