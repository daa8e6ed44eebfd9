// End-to-end CLI tests: staged subcommands against the fused run,
// determinism of artifacts, report structure, exit codes.

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "falcon/evaluation.hpp"
#include "falcon/io.hpp"

namespace fs = std::filesystem;
using falcon::eval::Json;

namespace {

const std::string kCli = FALCON_CLI_PATH;

int run_cli(const std::string& args, const std::string& stdout_path = "/dev/null") {
    const std::string cmd = kCli + " " + args + " > " + stdout_path + " 2> /dev/null";
    const int status = std::system(cmd.c_str());
    if (status == -1) return -1;
    return WEXITSTATUS(status);
}

struct TestDir {
    fs::path root;
    TestDir() {
        root = fs::temp_directory_path() / ("falcon_cli_" + std::to_string(::getpid()));
        fs::remove_all(root);
        fs::create_directories(root);
    }
    ~TestDir() { fs::remove_all(root); }
    std::string path(const std::string& name) const { return (root / name).string(); }
};

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path);
    f << text;
}

std::string tiny_config(const TestDir& dir) {
    const std::string cfg_path = dir.path("tiny.cfg");
    write_text(cfg_path,
               "data.train = " + dir.path("toydata/train.fimg") + "\n" +
               "data.test = " + dir.path("toydata/test.fimg") + "\n" +
               "num_classes = 4\n"
               "hse.global_size = 32\nhse.window = 16\nhse.stride = 16\n"
               "encoder.kind = toy\nencoder.seed = 1\nencoder.intermediate = 8\nencoder.dim = 16\n"
               "partition.kind = dirichlet\npartition.clients = 2\npartition.alpha = 0.3\n"
               "gen.k = 2\ngen.layers = 1\ngen.heads = 2\ngen.hidden = 32\n"
               "gen.epochs = 4\ngen.batch = 32\ngen.lr = 1e-3\ngen.weight_decay = 1e-4\n"
               "cls.epochs = 8\ncls.batch = 32\ncls.lr = 2e-3\n"
               "kd.temperature = 4\nkd.alpha = 0.5\nkd.epochs = 8\nkd.batch = 32\nkd.lr = 2e-3\n"
               "sample.ratio = 1.0\nmmd.bandwidth = median\nmmd.max_samples = 100\n"
               "run.clients_parallel = 1\n");
    return cfg_path;
}

std::vector<uint8_t> slurp(const std::string& path) { return falcon::io::read_file(path); }

std::string first_line(const std::string& path) {
    std::ifstream f(path);
    std::string line;
    std::getline(f, line);
    return line;
}

}  // namespace

TEST_CASE("full CLI pipeline: run, staged equivalence, determinism, reports") {
    TestDir dir;
    REQUIRE(run_cli("gen-toy --out " + dir.path("toydata") +
                    " --train-per-class 40 --test-per-class 15 --seed 3") == 0);
    const std::string cfg = tiny_config(dir);

    // fused run
    REQUIRE(run_cli("run --config " + cfg + " --seed 5 --out " + dir.path("run1")) == 0);

    SECTION("report carries all mandatory fields") {
        auto records = falcon::eval::read_report(dir.path("run1/report.jsonl"));
        bool saw_config = false, saw_global = false, saw_flops = false;
        size_t client_records = 0, mmd_entries = 0, phase_records = 0;
        for (const auto& r : records) {
            const std::string kind = r.at("record");
            if (kind == "run_config") {
                saw_config = true;
                CHECK(r.at("seed") == 5);
                CHECK(r.contains("config"));
            } else if (kind == "client") {
                ++client_records;
                CHECK(r.contains("payload_bytes"));
                CHECK(r.contains("upload_mode"));
                CHECK(r.contains("generator_nll"));
                if (r.contains("mmd_real_vs_synthetic")) ++mmd_entries;
                const double acc = r.at("local_accuracy_global_test");
                CHECK(acc >= 0.0);
                CHECK(acc <= 1.0);
            } else if (kind == "global") {
                saw_global = true;
                const double acc = r.at("accuracy");
                CHECK(acc >= 0.0);
                CHECK(acc <= 1.0);
            } else if (kind == "flops") {
                saw_flops = true;
                CHECK(r.at("per_sample_flops").get<double>() > 0.0);
            } else if (kind == "phase") {
                ++phase_records;
                CHECK(r.contains("wall_ms"));
            }
        }
        CHECK(saw_config);
        CHECK(saw_global);
        CHECK(saw_flops);
        CHECK(client_records == 2);   // one record per client
        CHECK(mmd_entries == 2);      // one MMD entry per client
        CHECK(phase_records >= 4);
    }

    SECTION("staged subcommands reproduce the fused artifacts byte for byte") {
        REQUIRE(run_cli("encode --config " + cfg + " --out " + dir.path("staged")) == 0);
        REQUIRE(run_cli("partition --config " + cfg + " --seed 5 --out " + dir.path("staged")) ==
                0);
        REQUIRE(run_cli("train-client --config " + cfg + " --seed 5 --client-id 0 --out " +
                        dir.path("staged")) == 0);
        REQUIRE(run_cli("train-client --config " + cfg + " --seed 5 --client-id 1 --out " +
                        dir.path("staged")) == 0);
        REQUIRE(run_cli("train-global --config " + cfg + " --seed 5 --out " + dir.path("staged")) ==
                0);

        CHECK(slurp(dir.path("staged/train_sequences.fseq")) ==
              slurp(dir.path("run1/train_sequences.fseq")));
        CHECK(slurp(dir.path("staged/partition.json")) == slurp(dir.path("run1/partition.json")));
        CHECK(slurp(dir.path("staged/payload_0.fpay")) == slurp(dir.path("run1/payload_0.fpay")));
        CHECK(slurp(dir.path("staged/payload_1.fpay")) == slurp(dir.path("run1/payload_1.fpay")));
        CHECK(slurp(dir.path("staged/global.fcls")) == slurp(dir.path("run1/global.fcls")));

        // evaluate prints the same accuracy the report recorded
        const std::string acc_file = dir.path("acc.txt");
        REQUIRE(run_cli("evaluate --out " + dir.path("staged") + " --test " +
                        dir.path("run1/test_sequences.fseq"),
                        acc_file) == 0);
        const double acc = std::stod(first_line(acc_file));
        auto records = falcon::eval::read_report(dir.path("run1/report.jsonl"));
        double reported = -1.0;
        for (const auto& r : records)
            if (r.at("record") == "global") reported = r.at("accuracy");
        CHECK(acc == Catch::Approx(reported).margin(1e-9));
    }

    SECTION("same seed reproduces identical artifacts and report") {
        REQUIRE(run_cli("run --config " + cfg + " --seed 5 --out " + dir.path("run2")) == 0);
        for (const std::string name :
             {"train_sequences.fseq", "test_sequences.fseq", "partition.json", "payload_0.fpay",
              "payload_1.fpay", "synthetic_0.fseq", "synthetic_1.fseq", "local_0.fcls",
              "local_1.fcls", "global.fcls"})
            CHECK(slurp(dir.path("run1/" + name)) == slurp(dir.path("run2/" + name)));
        auto a = falcon::eval::read_report(dir.path("run1/report.jsonl"));
        auto b = falcon::eval::read_report(dir.path("run2/report.jsonl"));
        REQUIRE(a.size() == b.size());
        for (size_t i = 0; i < a.size(); ++i)
            CHECK(falcon::eval::strip_timing(a[i]) == falcon::eval::strip_timing(b[i]));
    }

    SECTION("parallel clients produce the same artifacts as serial") {
        REQUIRE(run_cli("run --config " + cfg + " --seed 5 --clients-parallel 2 --out " +
                        dir.path("runp")) == 0);
        CHECK(slurp(dir.path("runp/payload_0.fpay")) == slurp(dir.path("run1/payload_0.fpay")));
        CHECK(slurp(dir.path("runp/global.fcls")) == slurp(dir.path("run1/global.fcls")));
    }

    SECTION("sample and mmd subcommands operate on run artifacts") {
        // force a generator artifact by sampling from a payload-embedded
        // generator is only possible in generator mode; instead train a
        // standalone sample from synthetic sequences via mmd only
        const std::string mmd_file = dir.path("mmd.txt");
        REQUIRE(run_cli("mmd --a " + dir.path("run1/synthetic_0.fseq") + " --b " +
                        dir.path("run1/synthetic_1.fseq"),
                        mmd_file) == 0);
        CHECK(std::isfinite(std::stod(first_line(mmd_file))));
    }

    SECTION("baseline subcommand writes a report") {
        REQUIRE(run_cli("baseline --config " + cfg + " --seed 5 --out " + dir.path("bl")) == 0);
        auto records = falcon::eval::read_report(dir.path("bl/baseline.jsonl"));
        REQUIRE(records.size() == 1);
        CHECK(records[0].at("record") == "baseline");
        const double acc = records[0].at("accuracy");
        CHECK(acc >= 0.0);
        CHECK(acc <= 1.0);
        CHECK(records[0].at("upload_bytes").size() == 2);
    }
}

TEST_CASE("CLI exit codes distinguish failure classes") {
    TestDir dir;
    // unknown config key -> config error (2); no output produced
    const std::string bad_cfg = dir.path("bad.cfg");
    write_text(bad_cfg, "data.trian = nope.fimg\n");
    CHECK(run_cli("run --config " + bad_cfg + " --out " + dir.path("x")) == 2);
    CHECK_FALSE(fs::exists(dir.path("x/report.jsonl")));

    // missing data file -> format error (3)
    const std::string cfg2 = dir.path("missing.cfg");
    write_text(cfg2, "data.train = /nonexistent.fimg\ndata.test = /nonexistent.fimg\n"
                     "encoder.dim = 16\nencoder.intermediate = 8\n");
    CHECK(run_cli("run --config " + cfg2 + " --out " + dir.path("y")) == 3);

    // bad usage -> 2
    CHECK(run_cli("definitely-not-a-subcommand") == 2);
    CHECK(run_cli("run --config /nonexistent.cfg") == 2);

    // help succeeds
    CHECK(run_cli("--help") == 0);

    // estimate-flops prints the expected full-scale magnitude
    const std::string flops_file = dir.path("flops.txt");
    CHECK(run_cli("estimate-flops --preset paper", flops_file) == 0);
    const double gflops = std::stod(first_line(flops_file));
    CHECK(gflops >= 0.15);
    CHECK(gflops <= 1.5);
}
