// Configuration-driven experiment runner. Every pipeline stage is exposed
// as a subcommand plus a fused end-to-end `run`; staged subcommands and
// `run` derive identical per-phase seeds, so artifacts match byte for
// byte.
//
// Exit codes: 0 success, 2 configuration error (including bad CLI usage),
// 3 file-format error, 4 partition error, 5 runtime failure.
//
// Logging goes to stderr. Query subcommands (mmd, evaluate,
// estimate-flops) print their single result value to stdout; everything
// else writes machine output only to files.

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "falcon/config.hpp"
#include "falcon/experiment.hpp"
#include "falcon/toybench.hpp"

namespace fs = std::filesystem;
using namespace falcon;

namespace {

void log_info(const std::string& msg) { std::fprintf(stderr, "[info] %s\n", msg.c_str()); }
void log_error(const std::string& msg) { std::fprintf(stderr, "[error] %s\n", msg.c_str()); }

struct CommonOpts {
    std::string config_path;
    std::string preset = "desk";
    std::string out = "out";
    uint64_t seed = 1;
    size_t clients_parallel = 0;  // 0 = take the config value
};

void add_common(CLI::App* cmd, CommonOpts& o, bool with_seed = true) {
    cmd->add_option("--config", o.config_path, "experiment config file (key = value lines)");
    cmd->add_option("--preset", o.preset, "baseline preset: desk or paper")
        ->check(CLI::IsMember({"desk", "paper"}));
    cmd->add_option("--out", o.out, "output directory");
    if (with_seed) cmd->add_option("--seed", o.seed, "run seed");
    cmd->add_option("--clients-parallel", o.clients_parallel,
                    "parallel client workers (overrides config)");
}

ExperimentConfig effective_config(const CommonOpts& o) {
    ExperimentConfig cfg = preset_by_name(o.preset);
    if (!o.config_path.empty()) cfg = load_config_file(o.config_path, std::move(cfg));
    if (o.clients_parallel > 0) cfg.clients_parallel = o.clients_parallel;
    cfg.validate();
    return cfg;
}

std::string join_path(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

// Shared by partition/train-client/train-global: the encoded splits these
// stages operate on.
SequenceDataset read_stage_sequences(const std::string& dir, const std::string& name) {
    return read_sequences(join_path(dir, name));
}

std::vector<size_t> assignment_from_json(const eval::Json& j, const char* key) {
    std::vector<size_t> out;
    for (const auto& v : j.at(key)) out.push_back(v.get<size_t>());
    return out;
}

eval::Json read_partition_json(const std::string& dir) {
    const auto bytes = io::read_file(join_path(dir, "partition.json"));
    return eval::Json::parse(std::string(bytes.begin(), bytes.end()));
}

void write_client_artifacts(const std::string& out, const fed::ClientResult& cr) {
    const std::string id = std::to_string(cr.payload.client_id);
    io::write_file(join_path(out, "payload_" + id + ".fpay"),
                   fed::serialize_payload(cr.payload));
    write_sequences(join_path(out, "synthetic_" + id + ".fseq"), cr.synthetic);
    io::write_file(join_path(out, "local_" + id + ".fcls"),
                   cls::serialize_classifier(cr.local_model));
    if (cr.payload.mode == fed::ClientPayload::Mode::Generator)
        io::write_file(join_path(out, "generator_" + id + ".fgen"), cr.payload.block);
}

std::vector<std::pair<uint16_t, uint32_t>> parse_schedule_arg(const std::string& arg) {
    std::vector<std::pair<uint16_t, uint32_t>> sched;
    std::string token;
    std::istringstream ss(arg);
    while (std::getline(ss, token, ',')) {
        const size_t colon = token.find(':');
        if (colon == std::string::npos)
            throw ConfigError("--per-class expects label:count pairs, got '" + token + "'");
        sched.push_back({static_cast<uint16_t>(std::stoul(token.substr(0, colon))),
                         static_cast<uint32_t>(std::stoul(token.substr(colon + 1)))});
    }
    if (sched.empty()) throw ConfigError("--per-class: empty schedule");
    return sched;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"one-shot federated learning simulator over hierarchical token sequences"};
    app.require_subcommand(1);

    // ------------------------------------------------------------ gen-toy
    auto* c_gentoy = app.add_subcommand("gen-toy", "generate the built-in toy image benchmark");
    struct {
        std::string out = "toydata";
        uint64_t seed = 1;
        size_t train_per_class = 600;
        size_t test_per_class = 150;
        size_t classes = 4;
        size_t image_size = 32;
    } gt;
    c_gentoy->add_option("--out", gt.out);
    c_gentoy->add_option("--seed", gt.seed);
    c_gentoy->add_option("--train-per-class", gt.train_per_class);
    c_gentoy->add_option("--test-per-class", gt.test_per_class);
    c_gentoy->add_option("--classes", gt.classes);
    c_gentoy->add_option("--image-size", gt.image_size);
    c_gentoy->callback([&]() {
        fs::create_directories(gt.out);
        toy::ToyImageConfig cfg;
        cfg.num_classes = gt.classes;
        cfg.image_size = gt.image_size;
        Rng train_rng(derive_seed(gt.seed, seed_tag::kDataset, 0));
        Rng test_rng(derive_seed(gt.seed, seed_tag::kDataset, 1));
        write_image_dataset(join_path(gt.out, "train.fimg"),
                            toy::make_toy_dataset(gt.train_per_class, cfg, train_rng));
        write_image_dataset(join_path(gt.out, "test.fimg"),
                            toy::make_toy_dataset(gt.test_per_class, cfg, test_rng));
        log_info("wrote " + gt.out + "/train.fimg and test.fimg");
    });

    // ------------------------------------------------------------- encode
    CommonOpts enc_o;
    auto* c_encode = app.add_subcommand("encode", "encode image datasets into token sequences");
    add_common(c_encode, enc_o, false);
    c_encode->callback([&]() {
        ExperimentConfig cfg = effective_config(enc_o);
        if (cfg.train_path.empty() || cfg.test_path.empty())
            throw ConfigError("encode: data.train and data.test must be set");
        fs::create_directories(enc_o.out);
        write_sequences(join_path(enc_o.out, "train_sequences.fseq"),
                        load_and_encode(cfg.train_path, cfg));
        write_sequences(join_path(enc_o.out, "test_sequences.fseq"),
                        load_and_encode(cfg.test_path, cfg));
        log_info("encoded sequences written to " + enc_o.out);
    });

    // ---------------------------------------------------------- partition
    CommonOpts part_o;
    auto* c_partition =
        app.add_subcommand("partition", "split encoded sequences into non-IID client shards");
    add_common(c_partition, part_o);
    c_partition->callback([&]() {
        ExperimentConfig cfg = effective_config(part_o);
        SequenceDataset train = read_stage_sequences(part_o.out, "train_sequences.fseq");
        SequenceDataset test = read_stage_sequences(part_o.out, "test_sequences.fseq");
        std::vector<uint16_t> train_labels, test_labels;
        for (const auto& s : train.items) train_labels.push_back(s.label);
        for (const auto& s : test.items) test_labels.push_back(s.label);
        fed::PartitionSpec spec = cfg.partition;
        if (spec.kind == fed::PartitionSpec::Kind::ByDomain) {
            const auto doms = read_labels(cfg.domains_path, train_labels.size());
            spec.domain_of_sample.assign(doms.begin(), doms.end());
        }
        Rng rng(derive_seed(part_o.seed, seed_tag::kPartition));
        fed::PartitionResult pr = fed::partition_train_test(spec, train_labels, test_labels, rng);
        write_partition_json(join_path(part_o.out, "partition.json"),
                             make_partition_json(cfg, part_o.seed, pr));
        for (size_t k = 0; k < cfg.partition.num_clients; ++k)
            write_sequences(join_path(part_o.out, "client_" + std::to_string(k) + ".fseq"),
                            fed::subset_by_client(train, pr.train_assignment, k));
        log_info("partitioned into " + std::to_string(cfg.partition.num_clients) + " clients");
    });

    // ------------------------------------------------------- train-client
    CommonOpts tc_o;
    size_t tc_client_id = 0;
    auto* c_trainclient =
        app.add_subcommand("train-client", "run one client pipeline on its shard");
    add_common(c_trainclient, tc_o);
    c_trainclient->add_option("--client-id", tc_client_id)->required();
    c_trainclient->callback([&]() {
        ExperimentConfig cfg = effective_config(tc_o);
        SequenceDataset shard = read_stage_sequences(
            tc_o.out, "client_" + std::to_string(tc_client_id) + ".fseq");
        fed::ClientResult cr = run_client_on_shard(
            cfg, shard, static_cast<uint32_t>(tc_client_id), tc_o.seed, nullptr);
        write_client_artifacts(tc_o.out, cr);
        log_info("client " + std::to_string(tc_client_id) + " payload: " +
                 std::to_string(cr.payload.payload_bytes) + " bytes (" +
                 (cr.payload.mode == fed::ClientPayload::Mode::Sequences ? "sequences"
                                                                         : "generator") +
                 ")");
    });

    // --------------------------------------------------------------- sample
    auto* c_sample = app.add_subcommand("sample", "draw synthetic sequences from a generator file");
    struct {
        std::string gen_path;
        std::string out_path = "synthetic.fseq";
        std::string per_class;
        uint64_t seed = 1;
    } sm;
    c_sample->add_option("--gen", sm.gen_path, "FGEN file")->required();
    c_sample->add_option("--out", sm.out_path, "output FSEQ path");
    c_sample->add_option("--per-class", sm.per_class, "label:count[,label:count...]")->required();
    c_sample->add_option("--seed", sm.seed);
    c_sample->callback([&]() {
        gen::GeneratorModel model = gen::parse_generator(io::read_file(sm.gen_path));
        SequenceDataset out;
        out.region_count = model.cfg.region_count;
        out.dim = model.cfg.token_dim;
        out.num_classes = model.cfg.num_classes;
        Rng rng(sm.seed);
        for (const auto& [label, count] : parse_schedule_arg(sm.per_class)) {
            auto drawn = gen::sample_class(model, label, count, rng);
            for (auto& s : drawn) out.items.push_back(std::move(s));
        }
        write_sequences(sm.out_path, out);
        log_info("sampled " + std::to_string(out.items.size()) + " sequences");
    });

    // -------------------------------------------------------- train-global
    CommonOpts tg_o;
    auto* c_trainglobal = app.add_subcommand(
        "train-global", "distillation-guided global training from client payloads");
    add_common(c_trainglobal, tg_o);
    c_trainglobal->callback([&]() {
        ExperimentConfig cfg = effective_config(tg_o);
        std::vector<fed::ClientPayload> payloads;
        for (size_t k = 0; k < cfg.partition.num_clients; ++k) {
            const std::string p = join_path(tg_o.out, "payload_" + std::to_string(k) + ".fpay");
            payloads.push_back(fed::parse_payload(io::read_file(p)));
        }
        fed::ServerResult sr =
            fed::run_server(payloads, cfg.kd, derive_seed(tg_o.seed, seed_tag::kServer), nullptr);
        io::write_file(join_path(tg_o.out, "global.fcls"),
                       cls::serialize_classifier(sr.global));
        log_info("global classifier written to " + tg_o.out + "/global.fcls");
    });

    // ------------------------------------------------------------ evaluate
    CommonOpts ev_o;
    auto* c_evaluate = app.add_subcommand("evaluate", "accuracy of a global classifier");
    add_common(c_evaluate, ev_o, false);
    std::string ev_model, ev_test;
    c_evaluate->add_option("--model", ev_model, "FCLS path (default <out>/global.fcls)");
    c_evaluate->add_option("--test", ev_test, "FSEQ path (default <out>/test_sequences.fseq)");
    c_evaluate->callback([&]() {
        if (ev_model.empty()) ev_model = join_path(ev_o.out, "global.fcls");
        if (ev_test.empty()) ev_test = join_path(ev_o.out, "test_sequences.fseq");
        cls::ClassifierModel model = cls::parse_classifier(io::read_file(ev_model));
        SequenceDataset test = read_sequences(ev_test);
        std::vector<size_t> assignment;
        size_t n_clients = 0;
        if (fs::exists(join_path(ev_o.out, "partition.json"))) {
            const eval::Json pj = read_partition_json(ev_o.out);
            assignment = assignment_from_json(pj, "test_assignment");
            n_clients = pj.at("clients").get<size_t>();
        }
        fed::EvalResult res = fed::evaluate_global(model, test, assignment, n_clients);
        std::vector<eval::Json> records;
        eval::Json rec = {{"record", "evaluation"},
                          {"accuracy", res.overall},
                          {"test_samples", test.items.size()}};
        if (!res.per_client.empty()) rec["per_client_accuracy"] = res.per_client;
        records.push_back(rec);
        eval::emit_report(join_path(ev_o.out, "eval.jsonl"), records);
        std::printf("%.6f\n", res.overall);
    });

    // ----------------------------------------------------------------- mmd
    auto* c_mmd = app.add_subcommand("mmd", "unbiased RBF MMD^2 between two sequence sets");
    struct {
        std::string a, b;
        std::string config_path, preset = "desk";
    } mm;
    c_mmd->add_option("--a", mm.a)->required();
    c_mmd->add_option("--b", mm.b)->required();
    c_mmd->add_option("--config", mm.config_path);
    c_mmd->add_option("--preset", mm.preset)->check(CLI::IsMember({"desk", "paper"}));
    c_mmd->callback([&]() {
        ExperimentConfig cfg = preset_by_name(mm.preset);
        if (!mm.config_path.empty()) cfg = load_config_file(mm.config_path, std::move(cfg));
        const double v = eval::mmd_between(read_sequences(mm.a), read_sequences(mm.b), cfg.mmd);
        std::printf("%.9g\n", v);
    });

    // ------------------------------------------------------------ baseline
    CommonOpts bl_o;
    auto* c_baseline =
        app.add_subcommand("baseline", "feature-statistics GMM baseline on the same partition");
    add_common(c_baseline, bl_o);
    c_baseline->callback([&]() {
        ExperimentConfig cfg = effective_config(bl_o);
        SequenceDataset train = load_and_encode(cfg.train_path, cfg);
        SequenceDataset test = load_and_encode(cfg.test_path, cfg);
        std::vector<uint16_t> train_labels, test_labels;
        for (const auto& s : train.items) train_labels.push_back(s.label);
        for (const auto& s : test.items) test_labels.push_back(s.label);
        Rng rng(derive_seed(bl_o.seed, seed_tag::kPartition));
        fed::PartitionResult pr =
            fed::partition_train_test(cfg.partition, train_labels, test_labels, rng);
        std::vector<SequenceDataset> shards;
        for (size_t k = 0; k < cfg.partition.num_clients; ++k)
            shards.push_back(fed::subset_by_client(train, pr.train_assignment, k));
        BaselineResult res = run_fedpft_baseline(shards, test, cfg.baseline, cfg.cls_local,
                                                 cfg.num_classes, bl_o.seed);
        fs::create_directories(bl_o.out);
        std::vector<eval::Json> records;
        records.push_back({{"record", "baseline"},
                           {"method", "per-class diagonal GMM upload"},
                           {"accuracy", res.accuracy},
                           {"upload_bytes", res.upload_bytes},
                           {"pseudo_samples", res.pseudo.items.size()},
                           {"seed", bl_o.seed}});
        eval::emit_report(join_path(bl_o.out, "baseline.jsonl"), records);
        log_info("baseline accuracy " + std::to_string(res.accuracy));
    });

    // ----------------------------------------------------------------- run
    CommonOpts run_o;
    auto* c_run = app.add_subcommand("run", "full pipeline: partition -> clients -> server -> report");
    add_common(c_run, run_o);
    c_run->callback([&]() {
        ExperimentConfig cfg = effective_config(run_o);
        ExperimentResult res = run_experiment(cfg, run_o.seed);
        write_run_artifacts(res, cfg, run_o.seed, run_o.out);
        log_info("global accuracy " + std::to_string(res.global_eval.overall) +
                 " (best local " + std::to_string(res.best_local_acc) + ")");
        log_info("report written to " + run_o.out + "/report.jsonl");
    });

    // ------------------------------------------------------ estimate-flops
    auto* c_flops =
        app.add_subcommand("estimate-flops", "per-sample generation cost of the generator");
    struct {
        std::string config_path, preset = "paper";
        size_t regions = 4;
    } fl;
    c_flops->add_option("--config", fl.config_path);
    c_flops->add_option("--preset", fl.preset)->check(CLI::IsMember({"desk", "paper"}));
    c_flops->add_option("--regions", fl.regions, "region-token count L");
    c_flops->callback([&]() {
        ExperimentConfig cfg = preset_by_name(fl.preset);
        if (!fl.config_path.empty()) cfg = load_config_file(fl.config_path, std::move(cfg));
        gen::GenConfig g = cfg.gen;
        g.token_dim = cfg.encoder.dim;
        g.region_count = fl.regions;
        g.num_classes = cfg.num_classes;
        std::printf("%.6f\n", gen::estimate_generation_flops(g) / 1e9);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const ConfigError& e) {
        log_error(e.what());
        return 2;
    } catch (const FormatError& e) {
        log_error(e.what());
        return 3;
    } catch (const PartitionError& e) {
        log_error(e.what());
        return 4;
    } catch (const std::exception& e) {
        log_error(e.what());
        return 5;
    }
    return 0;
}
