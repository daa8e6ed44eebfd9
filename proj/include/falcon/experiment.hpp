#pragma once

// End-to-end experiment orchestration shared by the CLI subcommands and
// the fused `run` path: load -> encode -> partition -> client pipelines ->
// server distillation -> evaluation -> report.
//
// Encoded sequences are quantized through the f32 on-disk representation
// before any training, so the fused path and the staged
// encode/partition/train-client subcommands operate on bit-identical
// inputs and produce byte-identical artifacts for equal seeds.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "falcon/classifier.hpp"
#include "falcon/common.hpp"
#include "falcon/config.hpp"
#include "falcon/encoding.hpp"
#include "falcon/evaluation.hpp"
#include "falcon/federation.hpp"
#include "falcon/generator.hpp"
#include "falcon/image.hpp"
#include "falcon/rng.hpp"

namespace falcon {

// ----------------------------------------------------------- data loading

// f32 round trip; makes in-memory token values identical to what a file
// consumer would see.
inline void quantize_f32(SequenceDataset& ds) {
    for (auto& item : ds.items)
        for (double& v : item.tokens.data) v = static_cast<double>(static_cast<float>(v));
}

inline bool file_has_magic(const std::string& path, const char tag[5]) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open file: " + path);
    char got[4];
    f.read(got, 4);
    return f && std::strncmp(got, tag, 4) == 0;
}

// Loads a dataset file (FIMG container with labels sidecar, or FSEQ) and
// returns encoded, f32-quantized sequences. FSEQ inputs bypass encoding
// entirely (the import path for externally computed embeddings).
inline SequenceDataset load_and_encode(const std::string& path, const ExperimentConfig& cfg) {
    SequenceDataset ds;
    if (file_has_magic(path, "FSEQ")) {
        ds = read_sequences(path);
        if (ds.num_classes == 0) ds.num_classes = cfg.num_classes;
        if (ds.num_classes != cfg.num_classes)
            throw ConfigError("num_classes in config does not match " + path);
        if (ds.dim != cfg.encoder.dim)
            throw ConfigError("encoder.dim does not match token dim in " + path);
    } else if (file_has_magic(path, "FIMG")) {
        if (cfg.encoder.kind != EncoderSpec::Kind::ToyProjection)
            throw ConfigError("image inputs need encoder.kind = toy (imported expects .fseq)");
        ImageDataset images = read_image_dataset(path);
        ToyEncoder encoder(cfg.encoder);
        ds = hse_encode_dataset(images, cfg.hse, encoder, cfg.num_classes);
        quantize_f32(ds);
    } else {
        throw FormatError("unrecognized dataset container (expected FIMG or FSEQ): " + path);
    }
    for (const auto& item : ds.items)
        if (item.label >= cfg.num_classes)
            throw ConfigError("label " + std::to_string(item.label) + " outside num_classes in " +
                              path);
    return ds;
}

// ------------------------------------------------------------ experiment

struct ExperimentResult {
    SequenceDataset train;  // encoded + quantized
    SequenceDataset test;
    fed::PartitionResult partition;
    std::vector<fed::ClientResult> clients;
    std::vector<std::vector<uint8_t>> payload_bytes;  // serialized FPAY per client
    fed::ServerResult server;
    fed::EvalResult global_eval;
    std::vector<double> local_acc_global_test;  // each local model on the full test set
    double best_local_acc = 0.0;
    std::vector<double> client_mmd;  // real vs synthetic per client
    std::vector<fed::InteractionLog::Event> events;
    std::vector<eval::Json> report;
};

namespace detail {

inline double elapsed_ms(std::chrono::steady_clock::time_point from) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - from)
        .count();
}

}  // namespace detail

// Runs the client phase for pre-partitioned sequence data. Used by both
// run_experiment and the staged train-client subcommand (which reads one
// client's FSEQ shard): seeds derive from (run_seed, client_id) only.
inline fed::ClientResult run_client_on_shard(const ExperimentConfig& cfg,
                                             const SequenceDataset& shard, uint32_t client_id,
                                             uint64_t run_seed, fed::InteractionLog* log) {
    fed::ClientData data;
    data.imported = true;
    data.sequences = shard;
    return fed::run_client(client_id, data, cfg.hse, cfg.encoder, cfg.gen, cfg.cls_local,
                           cfg.schedule, cfg.num_classes,
                           derive_seed(run_seed, seed_tag::kClient, client_id), log);
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, uint64_t seed) {
    cfg.validate();
    if (cfg.train_path.empty() || cfg.test_path.empty())
        throw ConfigError("data.train and data.test must be set");

    ExperimentResult res;
    std::vector<eval::Json>& report = res.report;
    const auto t0 = std::chrono::steady_clock::now();

    report.push_back({{"record", "run_config"},
                      {"schema", eval::kReportSchemaVersion},
                      {"seed", seed},
                      {"config", config_to_json(cfg)}});

    // encode (or import) both splits
    auto phase_start = std::chrono::steady_clock::now();
    res.train = load_and_encode(cfg.train_path, cfg);
    res.test = load_and_encode(cfg.test_path, cfg);
    if (res.train.items.empty() || res.test.items.empty())
        throw InvalidInputError("run: empty train or test split");
    if (res.test.dim != res.train.dim || res.test.region_count != res.train.region_count)
        throw InvalidInputError("run: train/test shapes differ");
    report.push_back(
        {{"record", "phase"}, {"name", "encode"}, {"wall_ms", detail::elapsed_ms(phase_start)}});

    // non-IID partition
    phase_start = std::chrono::steady_clock::now();
    std::vector<uint16_t> train_labels, test_labels;
    for (const auto& s : res.train.items) train_labels.push_back(s.label);
    for (const auto& s : res.test.items) test_labels.push_back(s.label);
    fed::PartitionSpec part = cfg.partition;
    if (part.kind == fed::PartitionSpec::Kind::ByDomain) {
        if (cfg.domains_path.empty())
            throw ConfigError("partition.kind = bydomain requires partition.domains");
        const std::vector<uint16_t> doms = read_labels(cfg.domains_path, train_labels.size());
        part.domain_of_sample.assign(doms.begin(), doms.end());
    }
    Rng part_rng(derive_seed(seed, seed_tag::kPartition));
    res.partition = fed::partition_train_test(part, train_labels, test_labels, part_rng);
    report.push_back(
        {{"record", "phase"}, {"name", "partition"}, {"wall_ms", detail::elapsed_ms(phase_start)}});

    // client pipelines (optionally on parallel workers; each client owns an
    // independent stream, so the schedule cannot change results)
    phase_start = std::chrono::steady_clock::now();
    const size_t n_clients = cfg.partition.num_clients;
    fed::InteractionLog log;
    res.clients.resize(n_clients);
    std::vector<SequenceDataset> shards(n_clients);
    for (size_t k = 0; k < n_clients; ++k)
        shards[k] = fed::subset_by_client(res.train, res.partition.train_assignment, k);

    const size_t workers = std::min(cfg.clients_parallel, n_clients);
    if (workers <= 1) {
        for (size_t k = 0; k < n_clients; ++k)
            res.clients[k] = run_client_on_shard(cfg, shards[k], static_cast<uint32_t>(k), seed, &log);
    } else {
        std::vector<std::thread> pool;
        std::atomic<size_t> next{0};
        std::exception_ptr error;
        std::mutex error_mu;
        for (size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&]() {
                for (;;) {
                    const size_t k = next.fetch_add(1);
                    if (k >= n_clients) return;
                    try {
                        res.clients[k] =
                            run_client_on_shard(cfg, shards[k], static_cast<uint32_t>(k), seed, &log);
                    } catch (...) {
                        std::lock_guard<std::mutex> lock(error_mu);
                        if (!error) error = std::current_exception();
                        return;
                    }
                }
            });
        }
        for (auto& th : pool) th.join();
        if (error) std::rethrow_exception(error);
    }
    for (size_t k = 0; k < n_clients; ++k)
        res.payload_bytes.push_back(fed::serialize_payload(res.clients[k].payload));
    report.push_back(
        {{"record", "phase"}, {"name", "clients"}, {"wall_ms", detail::elapsed_ms(phase_start)}});

    // server phase
    phase_start = std::chrono::steady_clock::now();
    std::vector<fed::ClientPayload> payloads;
    for (const auto& bytes : res.payload_bytes) payloads.push_back(fed::parse_payload(bytes));
    res.server = fed::run_server(payloads, cfg.kd, derive_seed(seed, seed_tag::kServer), &log);
    report.push_back(
        {{"record", "phase"}, {"name", "server"}, {"wall_ms", detail::elapsed_ms(phase_start)}});

    // evaluation
    phase_start = std::chrono::steady_clock::now();
    res.global_eval = fed::evaluate_global(res.server.global, res.test,
                                           res.partition.test_assignment, n_clients);
    res.best_local_acc = 0.0;
    for (size_t k = 0; k < n_clients; ++k) {
        const double acc = cls::accuracy(res.clients[k].local_model, res.test);
        res.local_acc_global_test.push_back(acc);
        res.best_local_acc = std::max(res.best_local_acc, acc);
    }
    for (size_t k = 0; k < n_clients; ++k) {
        const auto& real = res.clients[k].real;
        const auto& syn = res.clients[k].synthetic;
        if (real.items.size() >= 2 && syn.items.size() >= 2)
            res.client_mmd.push_back(eval::mmd_between(real, syn, cfg.mmd));
        else
            res.client_mmd.push_back(std::nan(""));
    }
    report.push_back(
        {{"record", "phase"}, {"name", "evaluate"}, {"wall_ms", detail::elapsed_ms(phase_start)}});

    for (size_t k = 0; k < n_clients; ++k) {
        const auto& cr = res.clients[k];
        std::vector<uint16_t> classes;
        for (const auto& [label, count] : [&] {
                 std::map<uint16_t, size_t> m;
                 for (const auto& it : cr.real.items) ++m[it.label];
                 return m;
             }())
            classes.push_back(label);
        report.push_back(
            {{"record", "client"},
             {"id", k},
             {"samples", cr.real.items.size()},
             {"classes", classes},
             {"synthetic_samples", cr.synthetic.items.size()},
             {"upload_mode",
              cr.payload.mode == fed::ClientPayload::Mode::Sequences ? "sequences" : "generator"},
             {"payload_bytes", cr.payload.payload_bytes},
             {"seq_bytes", cr.seq_bytes},
             {"gen_bytes", cr.gen_bytes},
             {"generator_nll", cr.generator_nll},
             {"local_accuracy_global_test", res.local_acc_global_test[k]},
             {"mmd_real_vs_synthetic", res.client_mmd[k]}});
    }
    std::vector<double> per_client;
    for (double a : res.global_eval.per_client) per_client.push_back(a);
    report.push_back({{"record", "global"},
                      {"accuracy", res.global_eval.overall},
                      {"per_client_accuracy", per_client},
                      {"best_local_accuracy", res.best_local_acc}});
    gen::GenConfig flops_cfg = cfg.gen;
    flops_cfg.token_dim = res.train.dim;
    flops_cfg.region_count = res.train.region_count;
    flops_cfg.num_classes = cfg.num_classes;
    const double flops = gen::estimate_generation_flops(flops_cfg);
    report.push_back(
        {{"record", "flops"}, {"per_sample_flops", flops}, {"gflops", flops / 1e9}});
    report.push_back(
        {{"record", "done"}, {"wall_ms", detail::elapsed_ms(t0)}});

    res.events = log.snapshot();
    return res;
}

inline eval::Json make_partition_json(const ExperimentConfig& cfg, uint64_t seed,
                                      const fed::PartitionResult& pr) {
    eval::Json part;
    part["record"] = "partition";
    part["seed"] = seed;
    part["clients"] = cfg.partition.num_clients;
    part["alpha"] = cfg.partition.alpha;
    part["kind"] =
        cfg.partition.kind == fed::PartitionSpec::Kind::DirichletLabel ? "dirichlet" : "bydomain";
    part["train_assignment"] = pr.train_assignment;
    part["test_assignment"] = pr.test_assignment;
    return part;
}

inline void write_partition_json(const std::string& path, const eval::Json& part) {
    const std::string text = part.dump(2) + "\n";
    io::write_file(path, std::vector<uint8_t>(text.begin(), text.end()));
}

// Writes the artifacts a full run leaves behind.
inline void write_run_artifacts(const ExperimentResult& res, const ExperimentConfig& cfg,
                                uint64_t seed, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const auto path = [&](const std::string& name) { return (fs::path(out_dir) / name).string(); };

    write_sequences(path("train_sequences.fseq"), res.train);
    write_sequences(path("test_sequences.fseq"), res.test);
    write_partition_json(path("partition.json"), make_partition_json(cfg, seed, res.partition));

    for (size_t k = 0; k < res.clients.size(); ++k) {
        const std::string id = std::to_string(k);
        io::write_file(path("payload_" + id + ".fpay"), res.payload_bytes[k]);
        write_sequences(path("synthetic_" + id + ".fseq"), res.clients[k].synthetic);
        io::write_file(path("local_" + id + ".fcls"),
                       cls::serialize_classifier(res.clients[k].local_model));
        // the generator travels inside the payload only in Generator mode;
        // persist it unconditionally for inspection and reuse
        if (res.clients[k].payload.mode == fed::ClientPayload::Mode::Generator) {
            io::write_file(path("generator_" + id + ".fgen"), res.clients[k].payload.block);
        }
    }
    io::write_file(path("global.fcls"), cls::serialize_classifier(res.server.global));
    eval::emit_report(path("report.jsonl"), res.report);
}

// ------------------------------------------------------------- baseline

// Feature-statistics baseline: each client uploads per-class diagonal
// GMMs fit on flattened real sequences; the server resamples
// pseudo-sequences and trains the global classifier with plain
// cross-entropy (no distillation).
struct BaselineResult {
    cls::ClassifierModel global;
    double accuracy = 0.0;
    std::vector<uint64_t> upload_bytes;
    SequenceDataset pseudo;
};

inline BaselineResult run_fedpft_baseline(const std::vector<SequenceDataset>& client_real,
                                          const SequenceDataset& test,
                                          const eval::GmmBaselineConfig& gcfg,
                                          const cls::ClsConfig& ccfg, size_t num_classes,
                                          uint64_t seed) {
    if (client_real.empty()) throw InvalidInputError("baseline: no clients");
    BaselineResult res;
    res.pseudo.region_count = client_real[0].region_count;
    res.pseudo.dim = client_real[0].dim;
    res.pseudo.num_classes = num_classes;
    const size_t seq = client_real[0].positions(), d = client_real[0].dim;

    for (size_t n = 0; n < client_real.size(); ++n) {
        const SequenceDataset& real = client_real[n];
        if (real.positions() != seq || real.dim != d)
            throw InvalidInputError("baseline: inconsistent shapes across clients");
        eval::GmmUpload upload;
        upload.client_id = static_cast<uint32_t>(n);
        upload.dim = seq * d;
        Rng fit_rng(derive_seed(seed, seed_tag::kClient, n));
        std::map<uint16_t, std::vector<size_t>> by_class;
        for (size_t i = 0; i < real.items.size(); ++i) by_class[real.items[i].label].push_back(i);
        for (const auto& [label, members] : by_class) {
            Tensor data = Tensor::zeros({members.size(), seq * d});
            for (size_t i = 0; i < members.size(); ++i)
                std::copy(real.items[members[i]].tokens.data.begin(),
                          real.items[members[i]].tokens.data.end(), data.row_ptr(i));
            eval::GmmBaselineConfig class_cfg = gcfg;
            // skewed shards can hold fewer samples than K
            class_cfg.components = std::min(gcfg.components, members.size());
            eval::ClassGmm cg;
            cg.label = label;
            cg.resample_count = static_cast<uint32_t>(members.size());
            cg.gmm = eval::fit_gmm_em(data, class_cfg, fit_rng);
            upload.per_class.push_back(std::move(cg));
        }
        res.upload_bytes.push_back(eval::serialize_gmm_upload(upload).size());

        // server-side resampling from the uploaded statistics
        Rng sample_rng(derive_seed(seed, seed_tag::kServer, n));
        for (const auto& cg : upload.per_class) {
            for (uint32_t i = 0; i < cg.resample_count; ++i) {
                TokenSequence s;
                s.label = cg.label;
                std::vector<double> flat = eval::gmm_sample(cg.gmm, sample_rng);
                s.tokens = Tensor({seq, d}, std::move(flat));
                res.pseudo.items.push_back(std::move(s));
            }
        }
    }

    res.global =
        cls::train_local(res.pseudo, ccfg, derive_seed(seed, seed_tag::kServer, 0xFFFFFFFFULL));
    res.accuracy = cls::accuracy(res.global, test);
    return res;
}

}  // namespace falcon
