#pragma once

// One-shot federation: non-IID partitioning, the per-client pipeline
// (encode -> train generator -> sample synthetics -> train local
// classifier -> build payload), exact payload byte accounting, and the
// server's distillation-guided global training.
//
// Clients are simulated in-process; the "upload" is a serialized FPAY
// buffer, so communication costs are measured on real bytes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "falcon/classifier.hpp"
#include "falcon/common.hpp"
#include "falcon/encoding.hpp"
#include "falcon/generator.hpp"
#include "falcon/image.hpp"
#include "falcon/io.hpp"
#include "falcon/rng.hpp"

namespace falcon::fed {

// ------------------------------------------------------------ partitioning

struct PartitionSpec {
    enum class Kind { DirichletLabel, ByDomain };
    Kind kind = Kind::DirichletLabel;
    size_t num_clients = 3;
    double alpha = 0.1;                    // Dirichlet concentration
    std::vector<size_t> domain_of_sample;  // ByDomain: domain id per sample
};

namespace detail {

// Largest-remainder allocation of each class's samples according to the
// drawn client proportions. Ties go to the lower client id.
inline std::vector<size_t> apply_proportions(const std::vector<uint16_t>& labels,
                                             size_t num_classes,
                                             const std::vector<std::vector<double>>& proportions) {
    const size_t n_clients = proportions.empty() ? 0 : proportions[0].size();
    std::vector<size_t> assignment(labels.size(), 0);
    for (size_t c = 0; c < num_classes; ++c) {
        std::vector<size_t> members;
        for (size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == c) members.push_back(i);
        if (members.empty()) continue;
        const auto& p = proportions[c];
        std::vector<size_t> counts(n_clients, 0);
        std::vector<std::pair<double, size_t>> remainders;  // (-remainder, client)
        size_t assigned = 0;
        for (size_t k = 0; k < n_clients; ++k) {
            const double exact = p[k] * static_cast<double>(members.size());
            counts[k] = static_cast<size_t>(std::floor(exact));
            assigned += counts[k];
            remainders.push_back({-(exact - std::floor(exact)), k});
        }
        std::sort(remainders.begin(), remainders.end());
        for (size_t r = 0; assigned < members.size(); ++r, ++assigned)
            ++counts[remainders[r % n_clients].second];
        size_t cursor = 0;
        for (size_t k = 0; k < n_clients; ++k)
            for (size_t j = 0; j < counts[k]; ++j) assignment[members[cursor++]] = k;
    }
    return assignment;
}

inline size_t max_label(const std::vector<uint16_t>& labels) {
    size_t mx = 0;
    for (uint16_t y : labels) mx = std::max<size_t>(mx, y);
    return mx;
}

}  // namespace detail

// For each class, draws client proportions from Dirichlet(alpha * 1_N) and
// assigns that class's samples by largest-remainder rounding. Resamples
// (bounded retries) until every client is non-empty.
inline std::vector<size_t> dirichlet_partition(const std::vector<uint16_t>& labels,
                                               size_t n_clients, double alpha, Rng& rng,
                                               size_t max_retries = 20) {
    if (n_clients < 1) throw InvalidInputError("dirichlet_partition: need at least one client");
    if (alpha <= 0.0) throw InvalidInputError("dirichlet_partition: alpha must be positive");
    if (labels.empty()) throw InvalidInputError("dirichlet_partition: no samples");
    const size_t num_classes = detail::max_label(labels) + 1;
    for (size_t attempt = 0; attempt < max_retries; ++attempt) {
        std::vector<std::vector<double>> proportions(num_classes);
        for (size_t c = 0; c < num_classes; ++c) proportions[c] = rng.dirichlet(alpha, n_clients);
        std::vector<size_t> assignment = detail::apply_proportions(labels, num_classes, proportions);
        std::vector<size_t> counts(n_clients, 0);
        for (size_t k : assignment) ++counts[k];
        if (std::all_of(counts.begin(), counts.end(), [](size_t c) { return c > 0; }))
            return assignment;
    }
    throw PartitionError("dirichlet_partition: a client stayed empty after bounded retries");
}

// Train and test assigned with the same per-class proportions, so each
// client's test shard mirrors its local label distribution.
struct PartitionResult {
    std::vector<size_t> train_assignment;
    std::vector<size_t> test_assignment;
};

inline PartitionResult partition_train_test(const PartitionSpec& spec,
                                            const std::vector<uint16_t>& train_labels,
                                            const std::vector<uint16_t>& test_labels, Rng& rng,
                                            size_t max_retries = 20) {
    if (spec.num_clients < 1) throw InvalidInputError("partition: need at least one client");
    PartitionResult out;
    if (spec.kind == PartitionSpec::Kind::ByDomain) {
        if (spec.domain_of_sample.size() != train_labels.size())
            throw InvalidInputError("partition: domain assignment size mismatch");
        out.train_assignment = spec.domain_of_sample;
        for (size_t k : out.train_assignment)
            if (k >= spec.num_clients) throw InvalidInputError("partition: domain id out of range");
        // test samples follow a uniform split across clients (round robin)
        out.test_assignment.resize(test_labels.size());
        for (size_t i = 0; i < test_labels.size(); ++i)
            out.test_assignment[i] = i % spec.num_clients;
        return out;
    }
    if (spec.alpha <= 0.0) throw InvalidInputError("partition: alpha must be positive");
    if (train_labels.empty()) throw InvalidInputError("partition: no training samples");
    const size_t num_classes =
        std::max(detail::max_label(train_labels), test_labels.empty() ? 0 : detail::max_label(test_labels)) + 1;
    for (size_t attempt = 0; attempt < max_retries; ++attempt) {
        std::vector<std::vector<double>> proportions(num_classes);
        for (size_t c = 0; c < num_classes; ++c)
            proportions[c] = rng.dirichlet(spec.alpha, spec.num_clients);
        out.train_assignment = detail::apply_proportions(train_labels, num_classes, proportions);
        out.test_assignment = detail::apply_proportions(test_labels, num_classes, proportions);
        std::vector<size_t> train_counts(spec.num_clients, 0), test_counts(spec.num_clients, 0);
        for (size_t k : out.train_assignment) ++train_counts[k];
        for (size_t k : out.test_assignment) ++test_counts[k];
        const bool ok =
            std::all_of(train_counts.begin(), train_counts.end(), [](size_t c) { return c > 0; }) &&
            (test_labels.empty() ||
             std::all_of(test_counts.begin(), test_counts.end(), [](size_t c) { return c > 0; }));
        if (ok) return out;
    }
    throw PartitionError("partition: a client stayed empty after bounded retries");
}

inline SequenceDataset subset_by_client(const SequenceDataset& ds,
                                        const std::vector<size_t>& assignment, size_t client) {
    if (assignment.size() != ds.items.size())
        throw ContractError("subset_by_client: assignment size mismatch");
    SequenceDataset out;
    out.region_count = ds.region_count;
    out.dim = ds.dim;
    out.num_classes = ds.num_classes;
    for (size_t i = 0; i < ds.items.size(); ++i)
        if (assignment[i] == client) out.items.push_back(ds.items[i]);
    return out;
}

// ---------------------------------------------------------- interaction log

// Append-only record of cross-boundary events; tests assert the one-shot
// property (exactly one upload per client, server work strictly after).
class InteractionLog {
public:
    struct Event {
        std::string kind;  // "client_upload", "server_train", "broadcast"
        uint32_t client_id;
    };

    void record(std::string kind, uint32_t client_id) {
        std::lock_guard<std::mutex> lock(mu_);
        events_.push_back({std::move(kind), client_id});
    }

    std::vector<Event> snapshot() const {
        std::lock_guard<std::mutex> lock(mu_);
        return events_;
    }

private:
    mutable std::mutex mu_;
    std::vector<Event> events_;
};

// ------------------------------------------------------------ client phase

struct SampleSchedule {
    double ratio = 1.0;          // synthetic count = ceil(local class count * ratio)
    size_t fixed_per_class = 0;  // overrides ratio when > 0
};

struct ClientPayload {
    enum class Mode : uint8_t { Sequences = 0, Generator = 1 };
    uint32_t client_id = 0;
    Mode mode = Mode::Sequences;
    std::vector<uint8_t> block;  // FSEQ (Sequences) or FGEN (Generator)
    std::vector<std::pair<uint16_t, uint32_t>> resample_schedule;  // Generator mode
    std::vector<uint8_t> classifier;  // FCLS
    uint64_t payload_bytes = 0;       // block + classifier bytes, exact
};

inline ClientPayload::Mode choose_upload(uint64_t seq_bytes, uint64_t gen_bytes) {
    // strict inequality: a tie uploads the generator
    return seq_bytes < gen_bytes ? ClientPayload::Mode::Sequences : ClientPayload::Mode::Generator;
}

inline uint64_t break_even_count(uint64_t gen_bytes, uint64_t per_sequence_bytes) {
    if (per_sequence_bytes == 0) throw InvalidInputError("break_even_count: zero sequence size");
    return gen_bytes / per_sequence_bytes;
}

// ----------------------------------------------------------- FPAY container
// magic "FPAY", u16 version=1, u32 client id, u8 mode,
// [mode==Generator: u16 n_entries, then (u16 class, u32 count) each],
// embedded FSEQ or FGEN block, embedded FCLS block,
// u64 payload_bytes == block bytes + classifier bytes.

constexpr uint16_t kFpayVersion = 1;

inline std::vector<uint8_t> serialize_payload(const ClientPayload& p) {
    io::ByteWriter w;
    w.magic("FPAY");
    w.u16(kFpayVersion);
    w.u32(p.client_id);
    w.u8(static_cast<uint8_t>(p.mode));
    if (p.mode == ClientPayload::Mode::Generator) {
        w.u16(static_cast<uint16_t>(p.resample_schedule.size()));
        for (const auto& [label, count] : p.resample_schedule) {
            w.u16(label);
            w.u32(count);
        }
    }
    w.bytes(p.block);
    w.bytes(p.classifier);
    w.u64(p.payload_bytes);
    return w.buffer();
}

inline ClientPayload parse_payload(const std::vector<uint8_t>& bytes) {
    io::ByteReader r(bytes);
    r.expect_magic("FPAY");
    const uint16_t version = r.u16();
    if (version != kFpayVersion)
        throw FormatError("fpay: unsupported version " + std::to_string(version));
    ClientPayload p;
    p.client_id = r.u32();
    const uint8_t mode = r.u8();
    if (mode > 1) throw FormatError("fpay: unknown upload mode tag");
    p.mode = static_cast<ClientPayload::Mode>(mode);
    if (p.mode == ClientPayload::Mode::Generator) {
        const uint16_t n = r.u16();
        for (uint16_t i = 0; i < n; ++i) {
            const uint16_t label = r.u16();
            const uint32_t count = r.u32();
            p.resample_schedule.push_back({label, count});
        }
    }
    const size_t block_start = r.pos();
    if (p.mode == ClientPayload::Mode::Sequences) {
        (void)parse_sequences(r);  // validates structure, advances the reader
    } else {
        (void)gen::parse_generator(r);
    }
    const size_t block_end = r.pos();
    (void)cls::parse_classifier(r);
    const size_t cls_end = r.pos();
    p.block.assign(bytes.begin() + static_cast<long>(block_start),
                   bytes.begin() + static_cast<long>(block_end));
    p.classifier.assign(bytes.begin() + static_cast<long>(block_end),
                        bytes.begin() + static_cast<long>(cls_end));
    p.payload_bytes = r.u64();
    r.require_done();
    if (p.payload_bytes != p.block.size() + p.classifier.size())
        throw FormatError("fpay: payload_bytes does not match embedded block sizes");
    return p;
}

// -------------------------------------------------------------- run_client

struct ClientData {
    bool imported = false;      // true: sequences already computed externally
    ImageDataset images;        // used when !imported
    SequenceDataset sequences;  // used when imported
};

struct ClientResult {
    ClientPayload payload;
    SequenceDataset real;       // stays on the client
    SequenceDataset synthetic;  // what the payload carries (Sequences mode)
    cls::ClassifierModel local_model;
    double generator_nll = 0.0;
    uint64_t seq_bytes = 0;  // candidate upload sizes, for accounting
    uint64_t gen_bytes = 0;
};

// Full client pipeline. Seed usage order: generator training, classifier
// training, synthetic sampling (one derived stream each).
inline ClientResult run_client(uint32_t client_id, const ClientData& data, const HseConfig& hse,
                               const EncoderSpec& enc_spec, const gen::GenConfig& gen_cfg,
                               const cls::ClsConfig& cls_cfg, const SampleSchedule& schedule,
                               size_t num_classes, uint64_t client_seed,
                               InteractionLog* log = nullptr) {
    if (schedule.fixed_per_class == 0 && schedule.ratio <= 0.0)
        throw ContractError("run_client: synthetic samples per class must be positive");

    ClientResult res;
    if (data.imported) {
        if (data.sequences.items.empty()) throw InvalidInputError("run_client: empty local data");
        res.real = data.sequences;
        res.real.num_classes = num_classes;
    } else {
        if (data.images.images.empty()) throw InvalidInputError("run_client: empty local data");
        ToyEncoder encoder(enc_spec);
        res.real = hse_encode_dataset(data.images, hse, encoder, num_classes);
    }

    Rng root(client_seed);
    const uint64_t gen_seed = root.next_u64();
    const uint64_t cls_seed = root.next_u64();
    const uint64_t sample_seed = root.next_u64();

    gen::GenConfig gcfg = gen_cfg;
    gcfg.token_dim = res.real.dim;
    gcfg.region_count = res.real.region_count;
    gcfg.num_classes = num_classes;
    gen::TrainedGenerator trained = gen::train_generator(res.real, gcfg, gen_seed);
    res.generator_nll = trained.final_nll;

    res.local_model = cls::train_local(res.real, cls_cfg, cls_seed);

    // synthetic sampling restricted to locally present classes, ascending
    std::map<uint16_t, size_t> class_counts;
    for (const auto& item : res.real.items) ++class_counts[item.label];
    res.synthetic.region_count = res.real.region_count;
    res.synthetic.dim = res.real.dim;
    res.synthetic.num_classes = num_classes;
    Rng sample_rng(sample_seed);
    std::vector<std::pair<uint16_t, uint32_t>> sched;
    for (const auto& [label, count] : class_counts) {
        const size_t m = schedule.fixed_per_class > 0
                             ? schedule.fixed_per_class
                             : static_cast<size_t>(
                                   std::ceil(static_cast<double>(count) * schedule.ratio));
        sched.push_back({label, static_cast<uint32_t>(m)});
        std::vector<TokenSequence> drawn = gen::sample_class(trained.model, label, m, sample_rng);
        for (auto& s : drawn) res.synthetic.items.push_back(std::move(s));
    }

    const std::vector<uint8_t> seq_block = serialize_sequences(res.synthetic);
    const std::vector<uint8_t> gen_block = gen::serialize_generator(trained.model);
    res.seq_bytes = seq_block.size();
    res.gen_bytes = gen_block.size();

    ClientPayload& p = res.payload;
    p.client_id = client_id;
    p.mode = choose_upload(res.seq_bytes, res.gen_bytes);
    p.block = (p.mode == ClientPayload::Mode::Sequences) ? seq_block : gen_block;
    if (p.mode == ClientPayload::Mode::Generator) p.resample_schedule = sched;
    p.classifier = cls::serialize_classifier(res.local_model);
    p.payload_bytes = p.block.size() + p.classifier.size();

    if (log) log->record("client_upload", client_id);
    return res;
}

// -------------------------------------------------------------- run_server

struct GlobalModel {
    HseConfig hse;
    EncoderSpec encoder;  // frozen, identical across clients
    cls::ClassifierModel classifier;
};

struct ServerResult {
    cls::ClassifierModel global;
    SequenceDataset combined_synthetic;  // canonical (client id, index) order
    std::vector<cls::ClassifierModel> teachers;
};

// Builds S_syn (sampling server-side from Generator-mode payloads), trains
// the global classifier with every local classifier as a frozen teacher.
// The combined set is canonically sorted by (client id, sample index), so
// payload order does not affect the result.
inline ServerResult run_server(const std::vector<ClientPayload>& payloads,
                               const cls::KdConfig& kd_cfg, uint64_t server_seed,
                               InteractionLog* log = nullptr) {
    if (payloads.empty()) throw InvalidInputError("run_server: no payloads");
    std::vector<const ClientPayload*> ordered;
    for (const auto& p : payloads) ordered.push_back(&p);
    std::sort(ordered.begin(), ordered.end(),
              [](const ClientPayload* a, const ClientPayload* b) {
                  return a->client_id < b->client_id;
              });
    for (size_t i = 1; i < ordered.size(); ++i)
        if (ordered[i]->client_id == ordered[i - 1]->client_id)
            throw ProtocolError("run_server: duplicate client id in payloads");

    ServerResult res;
    bool dims_set = false;
    for (const ClientPayload* p : ordered) {
        SequenceDataset syn;
        if (p->mode == ClientPayload::Mode::Sequences) {
            syn = parse_sequences(p->block);
        } else {
            gen::GeneratorModel model = gen::parse_generator(p->block);
            syn.region_count = model.cfg.region_count;
            syn.dim = model.cfg.token_dim;
            syn.num_classes = model.cfg.num_classes;
            Rng rng(derive_seed(server_seed, seed_tag::kServer, p->client_id));
            for (const auto& [label, count] : p->resample_schedule) {
                std::vector<TokenSequence> drawn = gen::sample_class(model, label, count, rng);
                for (auto& s : drawn) syn.items.push_back(std::move(s));
            }
        }
        cls::ClassifierModel teacher = cls::parse_classifier(p->classifier);
        if (!dims_set) {
            res.combined_synthetic.region_count = syn.region_count;
            res.combined_synthetic.dim = syn.dim;
            res.combined_synthetic.num_classes = syn.num_classes;
            dims_set = true;
        }
        if (syn.region_count != res.combined_synthetic.region_count ||
            syn.dim != res.combined_synthetic.dim ||
            syn.num_classes != res.combined_synthetic.num_classes)
            throw ProtocolError("run_server: inconsistent (L, d, C) across payloads");
        if (teacher.dim != res.combined_synthetic.dim ||
            teacher.num_classes != res.combined_synthetic.num_classes)
            throw ProtocolError("run_server: classifier dims inconsistent with sequences");
        for (auto& s : syn.items) res.combined_synthetic.items.push_back(std::move(s));
        res.teachers.push_back(std::move(teacher));
    }

    if (log) log->record("server_train", 0);
    res.global = cls::train_global(res.combined_synthetic, res.teachers, kd_cfg,
                                   derive_seed(server_seed, seed_tag::kServer, 0xFFFFFFFFULL));
    if (log) log->record("broadcast", 0);
    return res;
}

// ---------------------------------------------------------------- evaluate

struct EvalResult {
    double overall = 0.0;
    std::vector<double> per_client;  // NaN for clients with an empty shard
};

inline EvalResult evaluate_global(const cls::ClassifierModel& model, const SequenceDataset& test,
                                  const std::vector<size_t>& client_of_sample = {},
                                  size_t num_clients = 0) {
    if (test.items.empty()) throw InvalidInputError("evaluate_global: empty test set");
    if (!client_of_sample.empty() && client_of_sample.size() != test.items.size())
        throw ContractError("evaluate_global: assignment size mismatch");
    EvalResult res;
    std::vector<size_t> correct(num_clients, 0), total(num_clients, 0);
    size_t hit = 0;
    for (size_t i = 0; i < test.items.size(); ++i) {
        const bool ok = cls::predict(model, test.items[i].tokens) == test.items[i].label;
        if (ok) ++hit;
        if (!client_of_sample.empty()) {
            const size_t k = client_of_sample[i];
            if (k < num_clients) {
                ++total[k];
                if (ok) ++correct[k];
            }
        }
    }
    res.overall = static_cast<double>(hit) / static_cast<double>(test.items.size());
    for (size_t k = 0; k < num_clients; ++k)
        res.per_client.push_back(total[k] == 0 ? std::nan("")
                                               : static_cast<double>(correct[k]) /
                                                     static_cast<double>(total[k]));
    return res;
}

}  // namespace falcon::fed
