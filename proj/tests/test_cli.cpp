#include <fcntl.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"

#include "dacnet/cli.hpp"

namespace fs = std::filesystem;

namespace {

int run_cli(const std::vector<std::string>& args) {
    std::vector<const char*> argv = {"dacnet"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return dacnet::cli::run(static_cast<int>(argv.size()), argv.data());
}

// Captures stdout of a callback through a temp file.
template <class F>
std::string capture_stdout(F&& fn, int& exit_code) {
    fflush(stdout);
    int saved = dup(STDOUT_FILENO);
    std::string path = (fs::temp_directory_path() / "dacnet_cli_capture.txt").string();
    int fd = open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    dup2(fd, STDOUT_FILENO);
    close(fd);
    exit_code = fn();
    fflush(stdout);
    dup2(saved, STDOUT_FILENO);
    close(saved);
    std::ifstream in(path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string temp_dir(const std::string& name) {
    auto path = fs::temp_directory_path() / ("dacnet_cli_" + name);
    fs::remove_all(path);
    fs::create_directories(path);
    return path.string();
}

std::vector<char> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("gen writes one file per domain and is re-run identical") {
    std::string dir_a = temp_dir("gen_a");
    int code = run_cli({"gen", "--domains", "clean,inverted,noise,stripes", "--n", "20",
                        "--classes", "10", "--size", "32", "--seed", "7", "--out", dir_a});
    CHECK(code == 0);
    int dacd_files = 0;
    for (const auto& entry : fs::directory_iterator(dir_a))
        if (entry.path().extension() == ".dacd") ++dacd_files;
    CHECK(dacd_files == 4);
    CHECK(fs::exists(dir_a + "/manifest.json"));

    std::string dir_b = temp_dir("gen_b");
    CHECK(run_cli({"gen", "--domains", "clean,inverted,noise,stripes", "--n", "20", "--classes",
                   "10", "--size", "32", "--seed", "7", "--out", dir_b}) == 0);
    CHECK(slurp(dir_a + "/clean.dacd") == slurp(dir_b + "/clean.dacd"));
    CHECK(slurp(dir_a + "/stripes.dacd") == slurp(dir_b + "/stripes.dacd"));
}

TEST_CASE("gen usage errors exit with code 2") {
    std::string dir = temp_dir("gen_bad");
    CHECK(run_cli({"gen", "--domains", "clean,sepia", "--out", dir}) == 2);
    CHECK(run_cli({"gen", "--domains", "clean", "--classes", "11", "--out", dir}) == 2);
}

TEST_CASE("train/eval pipeline through the command surface") {
    std::string data_dir = temp_dir("pipe_data");
    REQUIRE(run_cli({"gen", "--domains", "clean,noise", "--n", "24", "--classes", "4", "--size",
                     "28", "--seed", "3", "--out", data_dir, "--test-n", "16"}) == 0);
    std::string run_dir = temp_dir("pipe_run");
    int code = run_cli({"train", "--sources", data_dir + "/clean.dacd", "--target",
                        data_dir + "/noise.dacd", "--target-test", data_dir + "/noise.test.dacd",
                        "--out", run_dir, "--epochs", "1", "--batch", "8", "--lr", "0.01",
                        "--seed", "1", "--tau", "0.5"});
    CHECK(code == 0);
    CHECK(fs::exists(run_dir + "/metrics.csv"));
    CHECK(fs::exists(run_dir + "/manifest.json"));
    CHECK(fs::exists(run_dir + "/final.ckpt"));
    {
        std::ifstream metrics(run_dir + "/metrics.csv");
        std::string header;
        std::getline(metrics, header);
        CHECK(header == "epoch,step,ls,lt,lc,ld,total,masked_fraction,target_acc,wall_seconds");
    }

    int eval_code = 0;
    std::string out = capture_stdout(
        [&] {
            return run_cli({"eval", "--checkpoint", run_dir + "/final.ckpt", "--data",
                            data_dir + "/noise.test.dacd", "--csv", run_dir + "/eval.csv"});
        },
        eval_code);
    CHECK(eval_code == 0);
    CHECK(out.find("accuracy=") != std::string::npos);
    CHECK(fs::exists(run_dir + "/eval.csv"));
}

TEST_CASE("eval failure modes use exit code 3") {
    std::string dir = temp_dir("eval_bad");
    CHECK(run_cli({"eval", "--checkpoint", dir + "/missing.ckpt", "--data",
                   dir + "/missing.dacd"}) == 3);

    std::ofstream bad(dir + "/corrupt.ckpt", std::ios::binary);
    bad << "XXXXXXXXgarbage";
    bad.close();
    std::string data_dir = temp_dir("eval_bad_data");
    REQUIRE(run_cli({"gen", "--domains", "clean", "--n", "8", "--classes", "4", "--size", "28",
                     "--seed", "2", "--out", data_dir}) == 0);
    CHECK(run_cli({"eval", "--checkpoint", dir + "/corrupt.ckpt", "--data",
                   data_dir + "/clean.dacd"}) == 3);
}

TEST_CASE("conflicting alignment flags exit with a usage error") {
    std::string data_dir = temp_dir("conflict_data");
    REQUIRE(run_cli({"gen", "--domains", "clean,noise", "--n", "8", "--classes", "4", "--size",
                     "28", "--seed", "2", "--out", data_dir}) == 0);
    int code = run_cli({"train", "--sources", data_dir + "/clean.dacd", "--target",
                        data_dir + "/noise.dacd", "--out", temp_dir("conflict_run"),
                        "--no-attention", "--mode", "dac-ema", "--epochs", "1"});
    CHECK(code == 2);
}

TEST_CASE("train honors config files with flag precedence") {
    std::string data_dir = temp_dir("cfg_data");
    REQUIRE(run_cli({"gen", "--domains", "clean,noise", "--n", "16", "--classes", "4", "--size",
                     "28", "--seed", "4", "--out", data_dir}) == 0);
    std::string cfg_path = data_dir + "/cfg.json";
    std::ofstream(cfg_path) << R"({"epochs": 1, "batch_size": 8, "lr": 0.01, "tau": 0.5,)"
                            << R"( "lambda_d": 0.9, "num_classes": 4})";
    std::string run_dir = temp_dir("cfg_run");
    // --lambda-d on the command line overrides the config file value
    int code = run_cli({"train", "--config", cfg_path, "--sources", data_dir + "/clean.dacd",
                        "--target", data_dir + "/noise.dacd", "--out", run_dir, "--lambda-d",
                        "0.25"});
    CHECK(code == 0);
    std::ifstream manifest(run_dir + "/manifest.json");
    std::string text{std::istreambuf_iterator<char>(manifest),
                     std::istreambuf_iterator<char>()};
    CHECK(text.find("\"lambda_d\": 0.25") != std::string::npos);
    CHECK(text.find("\"epochs\": 1") != std::string::npos);
}

TEST_CASE("gradcheck subcommand filters and reports") {
    int code = 0;
    std::string out = capture_stdout(
        [&] { return run_cli({"gradcheck", "--only", "matmul", "--repeats", "1"}); }, code);
    CHECK(code == 0);
    CHECK(out.find("PASS matmul#0") != std::string::npos);
    CHECK(out.find("gradcheck passed") != std::string::npos);

    CHECK(run_cli({"gradcheck", "--only", "no-such-op"}) == 2);
}

TEST_CASE("missing subcommand or unknown flags exit with 2") {
    CHECK(run_cli({}) == 2);
    CHECK(run_cli({"train", "--bogus-flag"}) == 2);
}
