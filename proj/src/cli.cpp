#include "dacnet/cli.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "dacnet/data.hpp"
#include "dacnet/gradcheck.hpp"
#include "dacnet/trainer.hpp"

#ifndef DACNET_BUILD_ID
#define DACNET_BUILD_ID "v0.1.0-unknown"
#endif

namespace dacnet::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_manifest(const std::string& out_dir, const std::string& command, const json& config,
                    const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs) {
    fs::create_directories(out_dir);
    json m;
    m["command"] = command;
    m["config"] = config;
    m["inputs"] = inputs;
    m["outputs"] = outputs;
    m["build"] = DACNET_BUILD_ID;
    std::ofstream out(out_dir + "/manifest.json");
    if (!out) throw IoError("cannot write " + out_dir + "/manifest.json");
    out << m.dump(2) << "\n";
}

data::DomainDataset load_dataset_checked(const std::string& path) {
    if (!fs::exists(path)) throw IoError("missing file: " + path);
    return data::load_dataset(path);
}

// ---- gen --------------------------------------------------------------

int cmd_gen(const std::string& domains, int n, int classes, int size, uint64_t seed,
            std::string out_dir, int test_n) {
    auto names = split_list(domains);
    if (names.empty()) throw UsageError("gen: --domains must name at least one recipe");
    if (classes < 2 || classes > 10)
        throw UsageError("gen: --classes must be in [2, 10]; digit glyphs stop at 9");
    std::vector<data::DomainRecipe> recipes;
    for (const auto& name : names) recipes.push_back(data::recipe_from_name(name));

    fs::create_directories(out_dir);
    json cfg{{"domains", names}, {"n", n},       {"classes", classes},
             {"size", size},     {"seed", seed}, {"test_n", test_n}};
    std::vector<std::string> outputs;

    auto datasets = data::generate_synthetic(recipes, n, classes, size, seed);
    for (const auto& ds : datasets) {
        std::string path = out_dir + "/" + ds.name + ".dacd";
        data::save_dataset(path, ds);
        outputs.push_back(path);
    }
    if (test_n > 0) {
        auto test_sets = data::generate_synthetic(recipes, test_n, classes, size,
                                                  mix_seed(seed, hash_tag("test-split")));
        for (const auto& ds : test_sets) {
            std::string path = out_dir + "/" + ds.name + ".test.dacd";
            data::save_dataset(path, ds);
            outputs.push_back(path);
        }
    }
    write_manifest(out_dir, "gen", cfg, {}, outputs);
    for (const auto& path : outputs) std::cout << "wrote " << path << "\n";
    return 0;
}

// ---- train ------------------------------------------------------------

struct TrainArgs {
    std::vector<std::string> sources;
    std::string target;
    std::string target_test;
    std::string out_dir = "runs/train";
    std::string resume;
    bool keep_checkpoints = false;
    int classes_override = 0;
};

int cmd_train(const train::TrainConfig& cfg_in, const TrainArgs& args) {
    if (args.sources.empty()) throw UsageError("train: need at least one --sources dataset");
    if (args.target.empty()) throw UsageError("train: need exactly one --target dataset");

    std::vector<data::DomainDataset> sources;
    for (const auto& path : args.sources) {
        sources.push_back(load_dataset_checked(path));
        sources.back().domain_id = static_cast<int>(sources.size()) - 1;
        sources.back().name = fs::path(path).stem().string();
    }
    data::DomainDataset target = load_dataset_checked(args.target);
    target.domain_id = static_cast<int>(sources.size());
    target.name = fs::path(args.target).stem().string();

    data::DomainDataset target_test;
    if (!args.target_test.empty()) target_test = load_dataset_checked(args.target_test);

    train::TrainConfig cfg = cfg_in;
    if (args.classes_override > 0) {
        cfg.num_classes = args.classes_override;
    } else {
        int classes = 2;
        for (const auto& src : sources) classes = std::max(classes, src.num_classes);
        cfg.num_classes = classes;
    }
    cfg.validate();

    std::vector<std::string> inputs = args.sources;
    inputs.push_back(args.target);
    if (!args.target_test.empty()) inputs.push_back(args.target_test);
    write_manifest(args.out_dir, "train", json::parse(train::config_to_json(cfg)), inputs,
                   {args.out_dir + "/metrics.csv", args.out_dir + "/final.ckpt"});

    train::FitOptions options;
    options.out_dir = args.out_dir;
    options.keep_epoch_checkpoints = args.keep_checkpoints;
    options.resume_from = args.resume;
    options.target_test = args.target_test.empty() ? nullptr : &target_test;

    train::FitResult result = train::fit(cfg, sources, target, options);
    std::cout << "final_checkpoint=" << result.final_checkpoint << "\n";
    if (result.final_accuracy >= 0.0f) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "target_accuracy=%.6f", result.final_accuracy);
        std::cout << buf << "\n";
    }
    return 0;
}

// ---- eval -------------------------------------------------------------

int cmd_eval(const std::string& checkpoint, const std::string& dataset_path, std::string csv) {
    if (!fs::exists(checkpoint)) throw IoError("missing file: " + checkpoint);
    train::TrainSession session = train::load_checkpoint(checkpoint);
    data::DomainDataset ds = load_dataset_checked(dataset_path);
    if (!ds.labels) throw ValidationError("eval: dataset " + dataset_path + " has no labels");
    if (ds.images.dim(1) != session.in_channels)
        throw FormatError("eval: dataset has " + std::to_string(ds.images.dim(1)) +
                          " channels, checkpoint expects " +
                          std::to_string(session.in_channels));
    float acc;
    try {
        acc = train::evaluate(session.model, ds);
    } catch (const DimensionError& e) {
        throw FormatError(std::string("eval: checkpoint/dataset mismatch: ") + e.what());
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "accuracy=%.6f", static_cast<double>(acc));
    std::cout << buf << "\n";
    if (!csv.empty()) {
        bool header = !fs::exists(csv) || fs::file_size(csv) == 0;
        std::ofstream out(csv, std::ios::app);
        if (!out) throw IoError("cannot open " + csv + " for writing");
        if (header) out << "checkpoint,dataset,accuracy\n";
        out << checkpoint << "," << dataset_path << "," << buf + 9 << "\n";
    }
    return 0;
}

// ---- gradcheck ----------------------------------------------------------

int cmd_gradcheck(uint64_t seed, int repeats, const std::string& only) {
    auto results = gradcheck::run_suite(seed, repeats, only);
    if (results.empty()) throw UsageError("gradcheck: no operation matches '" + only + "'");
    int failures = 0;
    for (const auto& r : results) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%s %-34s frob=%.3e elem=%05.1f%% max=%.3e (tol %.0e)",
                      r.passed ? "PASS" : "FAIL", r.name.c_str(), r.frobenius_rel,
                      100.0 * r.pass_fraction, r.max_rel, r.tol);
        std::cout << buf << "\n";
        if (!r.passed) ++failures;
    }
    std::cout << (failures ? "gradcheck FAILED (" + std::to_string(failures) + "/" +
                                 std::to_string(results.size()) + " checks)"
                           : "gradcheck passed (" + std::to_string(results.size()) + " checks)")
              << "\n";
    return failures ? 5 : 0;
}

// ---- ablate --------------------------------------------------------------

json default_variants() {
    return json::array({
        {{"name", "source-only"}, {"disable_attention", true}, {"disable_lt", true},
         {"disable_lc", true}, {"disable_ld", true}},
        {{"name", "ls+lt"}, {"disable_attention", true}, {"disable_lc", true},
         {"disable_ld", true}},
        {{"name", "ls+lt+attn"}, {"disable_lc", true}, {"disable_ld", true}},
        {{"name", "ls+lt+attn+ld"}, {"disable_lc", true}},
        {{"name", "full"}},
        {{"name", "no-ema"}, {"mode", "dac-batch"}, {"disable_lc", true}},
        {{"name", "mmd-ld"}, {"mode", "mmd-attention"}, {"disable_lc", true}},
    });
}

std::string self_binary() {
    std::error_code ec;
    fs::path p = fs::read_symlink("/proc/self/exe", ec);
    if (ec) throw IoError("cannot resolve own binary path for child runs");
    return p.string();
}

// Runs commands through a small process pool; returns exit codes.
std::vector<int> run_processes(const std::vector<std::vector<std::string>>& commands, int jobs) {
    std::vector<int> codes(commands.size(), -1);
    size_t next = 0;
    struct Child {
        pid_t pid;
        size_t index;
    };
    std::vector<Child> running;
    auto spawn = [&](size_t index) {
        std::vector<char*> argv;
        for (const auto& arg : commands[index])
            argv.push_back(const_cast<char*>(arg.c_str()));
        argv.push_back(nullptr);
        pid_t pid = fork();
        if (pid < 0) throw IoError("fork failed");
        if (pid == 0) {
            execv(argv[0], argv.data());
            std::perror("execv");
            _exit(127);
        }
        running.push_back({pid, index});
    };
    while (next < commands.size() || !running.empty()) {
        while (next < commands.size() && static_cast<int>(running.size()) < jobs)
            spawn(next++);
        int status = 0;
        pid_t done = waitpid(-1, &status, 0);
        if (done < 0) throw IoError("waitpid failed");
        for (size_t i = 0; i < running.size(); ++i) {
            if (running[i].pid == done) {
                codes[running[i].index] =
                    WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
                running.erase(running.begin() + static_cast<long>(i));
                break;
            }
        }
    }
    return codes;
}

float final_accuracy_from_metrics(const std::string& metrics_path) {
    std::ifstream in(metrics_path);
    if (!in) throw IoError("cannot open " + metrics_path);
    std::string line, last_with_acc;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        auto fields = split_list(line);
        if (fields.size() >= 9) {
            // target_acc is the 9th column; split_list drops empties, so
            // parse positionally instead
        }
        std::stringstream ss(line);
        std::string field;
        std::vector<std::string> cols;
        while (std::getline(ss, field, ',')) cols.push_back(field);
        if (cols.size() >= 9 && !cols[8].empty()) last_with_acc = cols[8];
    }
    if (last_with_acc.empty())
        throw FormatError(metrics_path + ": no target accuracy recorded");
    return std::stof(last_with_acc);
}

struct AblateArgs {
    std::vector<std::string> sources;
    std::string target;
    std::string target_test;
    std::string out_dir = "runs/ablate";
    std::string variants_path;
    int seeds = 3;
    uint64_t base_seed = 0;
    int jobs = 1;
};

int cmd_ablate(const train::TrainConfig& base_cfg, const AblateArgs& args) {
    if (args.sources.empty() || args.target.empty() || args.target_test.empty())
        throw UsageError("ablate: --sources, --target and --target-test are required");
    json variants =
        args.variants_path.empty() ? default_variants() : json::parse(read_file(args.variants_path));
    if (!variants.is_array() || variants.empty())
        throw FormatError("ablate: variants file must be a non-empty JSON array");

    fs::create_directories(args.out_dir);
    write_manifest(args.out_dir, "ablate",
                   json{{"base", json::parse(train::config_to_json(base_cfg))},
                        {"variants", variants},
                        {"seeds", args.seeds}},
                   args.sources, {args.out_dir + "/results.csv"});

    std::string self = self_binary();
    std::vector<std::vector<std::string>> commands;
    struct RunInfo {
        std::string variant;
        uint64_t seed;
        std::string run_dir;
    };
    std::vector<RunInfo> runs;
    for (const auto& variant : variants) {
        std::string name = variant.at("name").get<std::string>();
        for (int s = 0; s < args.seeds; ++s) {
            uint64_t seed = args.base_seed + static_cast<uint64_t>(s);
            train::TrainConfig cfg = train::config_from_json(variant.dump(), base_cfg);
            cfg.seed = seed;
            std::string run_dir = args.out_dir + "/" + name + "-s" + std::to_string(seed);
            fs::create_directories(run_dir);
            std::string cfg_path = run_dir + "/config.json";
            std::ofstream(cfg_path) << train::config_to_json(cfg);
            std::vector<std::string> cmd = {self, "train", "--config", cfg_path, "--target",
                                            args.target, "--target-test", args.target_test,
                                            "--out", run_dir};
            for (const auto& src : args.sources) {
                cmd.push_back("--sources");
                cmd.push_back(src);
            }
            commands.push_back(std::move(cmd));
            runs.push_back({name, seed, run_dir});
        }
    }

    std::cout << "ablate: running " << commands.size() << " trainings with " << args.jobs
              << " parallel job(s)\n";
    auto codes = run_processes(commands, std::max(1, args.jobs));
    for (size_t i = 0; i < codes.size(); ++i)
        if (codes[i] != 0)
            throw NumericalError("ablate: run " + runs[i].run_dir + " exited with code " +
                                 std::to_string(codes[i]));

    std::ofstream csv(args.out_dir + "/results.csv");
    csv << "variant,seed,target_acc\n";
    std::cout << "\nvariant             mean    std     per-seed\n";
    for (const auto& variant : variants) {
        std::string name = variant.at("name").get<std::string>();
        std::vector<float> accs;
        std::string per_seed;
        for (const auto& run : runs) {
            if (run.variant != name) continue;
            float acc = final_accuracy_from_metrics(run.run_dir + "/metrics.csv");
            accs.push_back(acc);
            char buf[64];
            std::snprintf(buf, sizeof buf, "%s,%llu,%.6f\n", name.c_str(),
                          static_cast<unsigned long long>(run.seed), static_cast<double>(acc));
            csv << buf;
            std::snprintf(buf, sizeof buf, "%.4f ", static_cast<double>(acc));
            per_seed += buf;
        }
        double mean = 0.0;
        for (float a : accs) mean += a;
        mean /= static_cast<double>(accs.size());
        double var = 0.0;
        for (float a : accs) var += (a - mean) * (a - mean);
        double stddev = accs.size() > 1 ? std::sqrt(var / static_cast<double>(accs.size() - 1)) : 0.0;
        char buf[128];
        std::snprintf(buf, sizeof buf, "%s,mean,%.6f\n%s,std,%.6f\n", name.c_str(), mean,
                      name.c_str(), stddev);
        csv << buf;
        std::snprintf(buf, sizeof buf, "%-18s  %.4f  %.4f  %s", name.c_str(), mean, stddev,
                      per_seed.c_str());
        std::cout << buf << "\n";
    }
    std::cout << "results: " << args.out_dir << "/results.csv\n";
    return 0;
}

// ---- argument wiring --------------------------------------------------------

// Flags override --config which overrides defaults; the config file is read
// in a pre-pass so CLI11 can then write flag values on top.
train::TrainConfig preload_config(int argc, const char* const* argv) {
    for (int i = 1; i < argc; ++i) {
        std::string arg = argv[i];
        std::string path;
        if (arg == "--config" && i + 1 < argc) path = argv[i + 1];
        else if (arg.rfind("--config=", 0) == 0) path = arg.substr(9);
        if (!path.empty()) return train::config_from_json(read_file(path));
    }
    return {};
}

void add_train_flags(CLI::App* app, train::TrainConfig& cfg) {
    app->add_option("--config", "JSON config file; explicit flags win")
        ->check(CLI::ExistingFile);
    app->add_option("--lambda-d", cfg.lambda_d, "weight of the attention consistency loss");
    app->add_option("--lambda-c", cfg.lambda_c, "weight of the class compactness loss");
    app->add_option("--tau", cfg.tau, "pseudo-label confidence threshold");
    app->add_option("--alpha", cfg.alpha, "EMA decay for domain attention statistics");
    app->add_option("--mode", cfg.mode,
                    "alignment mode: dac-ema, dac-batch, mmd-attention, dac-features, "
                    "mmd-features");
    app->add_flag("--no-attention", cfg.disable_attention, "drop the attention modules");
    app->add_flag("--no-lt", cfg.disable_lt, "drop the pseudo-label target loss");
    app->add_flag("--no-lc", cfg.disable_lc, "drop the class compactness loss");
    app->add_flag("--no-ld", cfg.disable_ld, "drop the domain consistency loss");
    app->add_flag("--source-compactness", cfg.include_source_compactness,
                  "apply the compactness loss to source domains too");
    app->add_option("--target-fraction", cfg.target_fraction,
                    "use only this fraction of the target training data");
    app->add_option("--source-subset", cfg.source_subset,
                    "indices into --sources; single index = single-source adaptation");
    app->add_option("--epochs", cfg.epochs);
    app->add_option("--lr", cfg.lr);
    app->add_option("--batch", cfg.batch_size);
    app->add_option("--seed", cfg.seed);
    app->add_option("--optimizer", cfg.optimizer, "sgd-momentum or adam");
    app->add_option("--momentum", cfg.momentum);
    app->add_option("--schedule", cfg.lr_schedule, "cosine or constant");
    app->add_option("--reduction", cfg.reduction, "attention bottleneck reduction ratio");
    app->add_option("--clip-grad", cfg.clip_grad_norm, "global grad-norm clip; 0 disables");
    app->add_option("--log-interval", cfg.log_interval);
    app->add_option("--fc-width", cfg.fc_width);
    app->add_flag("--eval-best", cfg.eval_best, "also keep the best-accuracy checkpoint");
}

}  // namespace

int run(int argc, const char* const* argv) {
    CLI::App app{"DAC-Net: multi-source domain adaptation via attention consistency"};
    app.require_subcommand(1);

    // gen
    auto* gen = app.add_subcommand("gen", "generate synthetic multi-domain digit datasets");
    std::string gen_domains = "clean,inverted,noise,stripes";
    int gen_n = 2000, gen_classes = 10, gen_size = 32, gen_test_n = 0;
    uint64_t gen_seed = 7;
    std::string gen_out = "data";
    gen->add_option("--domains", gen_domains, "comma list of recipes");
    gen->add_option("--n", gen_n, "samples per domain");
    gen->add_option("--classes", gen_classes, "number of digit classes (2-10)");
    gen->add_option("--size", gen_size, "image size (28 or 32)");
    gen->add_option("--seed", gen_seed);
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--test-n", gen_test_n, "also write <name>.test.dacd with this many samples");

    // train
    auto* tr = app.add_subcommand("train", "train DAC-Net on source domains + unlabeled target");
    train::TrainConfig cfg = preload_config(argc, argv);
    TrainArgs targs;
    tr->add_option("--sources", targs.sources, "source dataset files (.dacd)")->expected(-1);
    tr->add_option("--target", targs.target, "target dataset file (labels are ignored)");
    tr->add_option("--target-test", targs.target_test, "labeled target test split for eval");
    tr->add_option("--out", targs.out_dir, "output directory");
    tr->add_option("--resume", targs.resume, "checkpoint to resume from");
    tr->add_flag("--keep-checkpoints", targs.keep_checkpoints, "keep one checkpoint per epoch");
    tr->add_option("--classes", targs.classes_override, "override the class count");
    add_train_flags(tr, cfg);

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a labeled dataset");
    std::string ev_ckpt, ev_data, ev_csv;
    ev->add_option("--checkpoint", ev_ckpt)->required();
    ev->add_option("--data", ev_data)->required();
    ev->add_option("--csv", ev_csv, "append the result to this CSV");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference checks for all operations");
    uint64_t gc_seed = 1;
    int gc_repeats = 3;
    std::string gc_only;
    gc->add_option("--seed", gc_seed);
    gc->add_option("--repeats", gc_repeats, "fixtures per operation");
    gc->add_option("--only", gc_only, "restrict to ops whose name contains this");

    // ablate
    auto* ab = app.add_subcommand("ablate", "run the component-removal study");
    AblateArgs aargs;
    train::TrainConfig acfg = preload_config(argc, argv);
    ab->add_option("--sources", aargs.sources)->expected(-1);
    ab->add_option("--target", aargs.target);
    ab->add_option("--target-test", aargs.target_test);
    ab->add_option("--out", aargs.out_dir);
    ab->add_option("--variants", aargs.variants_path, "JSON list of config overrides");
    ab->add_option("--seeds", aargs.seeds, "seeds per variant");
    ab->add_option("--base-seed", aargs.base_seed);
    ab->add_option("--jobs", aargs.jobs, "parallel child processes");
    add_train_flags(ab, acfg);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed())
            return cmd_gen(gen_domains, gen_n, gen_classes, gen_size, gen_seed, gen_out,
                           gen_test_n);
        if (tr->parsed()) return cmd_train(cfg, targs);
        if (ev->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_csv);
        if (gc->parsed()) return cmd_gradcheck(gc_seed, gc_repeats, gc_only);
        if (ab->parsed()) return cmd_ablate(acfg, aargs);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 3;
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 3;
    } catch (const DimensionError& e) {
        std::cerr << "dimension error: " << e.what() << "\n";
        return 3;
    } catch (const NumericalError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return 4;
    }
    return 0;
}

}  // namespace dacnet::cli
