#pragma once

// Experiment configuration: flat key=value text with dotted section
// prefixes. Unknown keys are hard errors so typos cannot silently fall
// back to defaults. Presets provide the baseline; a config file overrides
// preset values; CLI flags override both.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <json.hpp>

#include "falcon/classifier.hpp"
#include "falcon/common.hpp"
#include "falcon/encoding.hpp"
#include "falcon/evaluation.hpp"
#include "falcon/federation.hpp"
#include "falcon/generator.hpp"

namespace falcon {

struct ExperimentConfig {
    std::string train_path;    // data.train: .fimg (+ .labels sidecar) or .fseq
    std::string test_path;     // data.test
    std::string domains_path;  // partition.domains (u16 per train sample, bydomain)
    size_t num_classes = 4;

    HseConfig hse;
    EncoderSpec encoder;
    fed::PartitionSpec partition;
    gen::GenConfig gen;  // architecture + training; (d, L, C) bound to data at run time
    cls::ClsConfig cls_local;
    cls::KdConfig kd;
    fed::SampleSchedule schedule;
    eval::MmdConfig mmd;
    eval::GmmBaselineConfig baseline;
    size_t clients_parallel = 1;

    // Desk-scale defaults: CPU-sized generator, toy encoder over 32px
    // images with a 16px window grid.
    static ExperimentConfig desk() {
        ExperimentConfig c;
        c.hse.global_size = 32;
        c.hse.window = 16;
        c.hse.stride = 16;
        c.hse.token_dim = 64;
        c.encoder.kind = EncoderSpec::Kind::ToyProjection;
        c.encoder.seed = 1;
        c.encoder.intermediate_size = 16;
        c.encoder.dim = 64;
        c.partition.num_clients = 3;
        c.partition.alpha = 0.1;
        c.gen.token_dim = 64;
        c.gen.region_count = 4;
        c.gen.mixture_k = 5;
        c.gen.layers = 2;
        c.gen.heads = 4;
        c.gen.hidden = 128;
        c.gen.epochs = 60;
        c.gen.batch_size = 64;
        c.gen.lr = 1e-3;
        c.gen.weight_decay = 1e-4;
        c.cls_local.epochs = 60;
        c.cls_local.batch_size = 64;
        c.cls_local.lr = 2e-3;
        c.kd.temperature = 4.0;
        c.kd.alpha_kd = 0.5;
        c.kd.epochs = 60;
        c.kd.batch_size = 64;
        c.kd.lr = 2e-3;
        c.baseline.components = 5;
        return c;
    }

    // Full-scale hyperparameters: 448px inputs, 224px window/stride,
    // 768-dim tokens, K=20 mixtures, 4-layer/768-hidden/16-head generator
    // trained 400 epochs (batch 256, AdamW 1e-4/1e-4), classifiers trained
    // 60 epochs (batch 256, Adam 5e-4), T=4, alpha=0.5.
    static ExperimentConfig paper() {
        ExperimentConfig c;
        c.hse.global_size = 224;
        c.hse.window = 224;
        c.hse.stride = 224;
        c.hse.token_dim = 768;
        c.encoder.kind = EncoderSpec::Kind::ToyProjection;
        c.encoder.seed = 1;
        c.encoder.intermediate_size = 32;
        c.encoder.dim = 768;
        c.partition.num_clients = 5;
        c.partition.alpha = 0.1;
        c.gen = gen::GenConfig::paper();
        c.cls_local.epochs = 60;
        c.cls_local.batch_size = 256;
        c.cls_local.lr = 5e-4;
        c.kd.temperature = 4.0;
        c.kd.alpha_kd = 0.5;
        c.kd.epochs = 60;
        c.kd.batch_size = 256;
        c.kd.lr = 5e-4;
        c.baseline.components = 20;
        return c;
    }

    void validate() const {
        if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
        if (encoder.dim < 1 || encoder.intermediate_size < 1)
            throw ConfigError("encoder dims must be positive");
        if (encoder.dim != hse.token_dim)
            throw ConfigError("encoder.dim must equal the HSE token dim");
        if (hse.window < 1 || hse.stride < 1 || hse.global_size < 1)
            throw ConfigError("hse window/stride/global_size must be positive");
        if (gen.hidden % gen.heads != 0)
            throw ConfigError("gen.hidden must be divisible by gen.heads");
        if (gen.mixture_k < 1) throw ConfigError("gen.k must be >= 1");
        if (gen.var_floor <= 0.0) throw ConfigError("gen.var_floor must be positive");
        if (kd.temperature <= 0.0) throw ConfigError("kd.temperature must be positive");
        if (kd.alpha_kd < 0.0 || kd.alpha_kd > 1.0) throw ConfigError("kd.alpha must be in [0,1]");
        if (schedule.fixed_per_class == 0 && schedule.ratio <= 0.0)
            throw ConfigError("sample.ratio must be positive (or set sample.per_class)");
        if (partition.num_clients < 1) throw ConfigError("partition.clients must be >= 1");
        if (partition.kind == fed::PartitionSpec::Kind::DirichletLabel && partition.alpha <= 0.0)
            throw ConfigError("partition.alpha must be positive");
        if (clients_parallel < 1) throw ConfigError("run.clients_parallel must be >= 1");
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
    std::istringstream ss(value);
    T out;
    ss >> out;
    if (ss.fail() || !ss.eof())
        throw ConfigError("config: bad numeric value for '" + key + "': " + value);
    return out;
}

}  // namespace detail

// Applies one key=value pair; unknown keys are hard errors.
inline void apply_config_entry(ExperimentConfig& c, const std::string& key,
                               const std::string& value) {
    using detail::parse_number;
    if (key == "data.train") c.train_path = value;
    else if (key == "data.test") c.test_path = value;
    else if (key == "num_classes") c.num_classes = parse_number<size_t>(key, value);
    else if (key == "hse.global_size") c.hse.global_size = parse_number<size_t>(key, value);
    else if (key == "hse.window") c.hse.window = parse_number<size_t>(key, value);
    else if (key == "hse.stride") c.hse.stride = parse_number<size_t>(key, value);
    else if (key == "encoder.kind") {
        if (value == "toy") c.encoder.kind = EncoderSpec::Kind::ToyProjection;
        else if (value == "imported") c.encoder.kind = EncoderSpec::Kind::Imported;
        else throw ConfigError("config: encoder.kind must be 'toy' or 'imported'");
    } else if (key == "encoder.seed") c.encoder.seed = parse_number<uint64_t>(key, value);
    else if (key == "encoder.intermediate")
        c.encoder.intermediate_size = parse_number<size_t>(key, value);
    else if (key == "encoder.dim") {
        c.encoder.dim = parse_number<size_t>(key, value);
        c.hse.token_dim = c.encoder.dim;
    } else if (key == "partition.kind") {
        if (value == "dirichlet") c.partition.kind = fed::PartitionSpec::Kind::DirichletLabel;
        else if (value == "bydomain") c.partition.kind = fed::PartitionSpec::Kind::ByDomain;
        else throw ConfigError("config: partition.kind must be 'dirichlet' or 'bydomain'");
    } else if (key == "partition.clients")
        c.partition.num_clients = parse_number<size_t>(key, value);
    else if (key == "partition.alpha") c.partition.alpha = parse_number<double>(key, value);
    else if (key == "partition.domains") c.domains_path = value;
    else if (key == "gen.k") c.gen.mixture_k = parse_number<size_t>(key, value);
    else if (key == "gen.layers") c.gen.layers = parse_number<size_t>(key, value);
    else if (key == "gen.heads") c.gen.heads = parse_number<size_t>(key, value);
    else if (key == "gen.hidden") c.gen.hidden = parse_number<size_t>(key, value);
    else if (key == "gen.var_floor") c.gen.var_floor = parse_number<double>(key, value);
    else if (key == "gen.epochs") c.gen.epochs = parse_number<size_t>(key, value);
    else if (key == "gen.batch") c.gen.batch_size = parse_number<size_t>(key, value);
    else if (key == "gen.lr") c.gen.lr = parse_number<double>(key, value);
    else if (key == "gen.weight_decay") c.gen.weight_decay = parse_number<double>(key, value);
    else if (key == "cls.epochs") c.cls_local.epochs = parse_number<size_t>(key, value);
    else if (key == "cls.batch") c.cls_local.batch_size = parse_number<size_t>(key, value);
    else if (key == "cls.lr") c.cls_local.lr = parse_number<double>(key, value);
    else if (key == "kd.temperature") c.kd.temperature = parse_number<double>(key, value);
    else if (key == "kd.alpha") c.kd.alpha_kd = parse_number<double>(key, value);
    else if (key == "kd.epochs") c.kd.epochs = parse_number<size_t>(key, value);
    else if (key == "kd.batch") c.kd.batch_size = parse_number<size_t>(key, value);
    else if (key == "kd.lr") c.kd.lr = parse_number<double>(key, value);
    else if (key == "sample.ratio") c.schedule.ratio = parse_number<double>(key, value);
    else if (key == "sample.per_class")
        c.schedule.fixed_per_class = parse_number<size_t>(key, value);
    else if (key == "mmd.bandwidth") {
        if (value == "median") c.mmd.bandwidth = eval::MmdConfig::Bandwidth::MedianHeuristic;
        else {
            c.mmd.bandwidth = eval::MmdConfig::Bandwidth::Fixed;
            c.mmd.fixed_sigma2 = parse_number<double>(key, value);
        }
    } else if (key == "mmd.max_samples") c.mmd.max_samples = parse_number<size_t>(key, value);
    else if (key == "baseline.k") c.baseline.components = parse_number<size_t>(key, value);
    else if (key == "baseline.max_iters") c.baseline.max_iters = parse_number<size_t>(key, value);
    else if (key == "baseline.tol") c.baseline.tol = parse_number<double>(key, value);
    else if (key == "baseline.var_floor") c.baseline.var_floor = parse_number<double>(key, value);
    else if (key == "run.clients_parallel") c.clients_parallel = parse_number<size_t>(key, value);
    else throw ConfigError("config: unknown key '" + key + "'");
}

inline ExperimentConfig parse_config_text(const std::string& text, ExperimentConfig base) {
    std::istringstream in(text);
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw ConfigError("config line " + std::to_string(lineno) + ": empty key or value");
        apply_config_entry(base, key, value);
    }
    return base;
}

inline ExperimentConfig load_config_file(const std::string& path, ExperimentConfig base) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str(), std::move(base));
}

inline ExperimentConfig preset_by_name(const std::string& name) {
    if (name == "desk") return ExperimentConfig::desk();
    if (name == "paper") return ExperimentConfig::paper();
    throw ConfigError("unknown preset '" + name + "' (expected 'desk' or 'paper')");
}

// Effective-configuration echo for the report.
inline eval::Json config_to_json(const ExperimentConfig& c) {
    eval::Json j;
    j["data"] = {{"train", c.train_path}, {"test", c.test_path}};
    j["num_classes"] = c.num_classes;
    j["hse"] = {{"global_size", c.hse.global_size},
                {"window", c.hse.window},
                {"stride", c.hse.stride},
                {"token_dim", c.hse.token_dim}};
    j["encoder"] = {{"kind", c.encoder.kind == EncoderSpec::Kind::ToyProjection ? "toy" : "imported"},
                    {"seed", c.encoder.seed},
                    {"intermediate", c.encoder.intermediate_size},
                    {"dim", c.encoder.dim}};
    j["partition"] = {{"kind", c.partition.kind == fed::PartitionSpec::Kind::DirichletLabel
                                   ? "dirichlet"
                                   : "bydomain"},
                      {"clients", c.partition.num_clients},
                      {"alpha", c.partition.alpha}};
    j["gen"] = {{"k", c.gen.mixture_k},     {"layers", c.gen.layers},
                {"heads", c.gen.heads},     {"hidden", c.gen.hidden},
                {"var_floor", c.gen.var_floor}, {"epochs", c.gen.epochs},
                {"batch", c.gen.batch_size},    {"lr", c.gen.lr},
                {"weight_decay", c.gen.weight_decay}};
    j["cls"] = {{"epochs", c.cls_local.epochs},
                {"batch", c.cls_local.batch_size},
                {"lr", c.cls_local.lr}};
    j["kd"] = {{"temperature", c.kd.temperature},
               {"alpha", c.kd.alpha_kd},
               {"epochs", c.kd.epochs},
               {"batch", c.kd.batch_size},
               {"lr", c.kd.lr}};
    j["sample"] = {{"ratio", c.schedule.ratio}, {"per_class", c.schedule.fixed_per_class}};
    j["mmd"] = {{"bandwidth", c.mmd.bandwidth == eval::MmdConfig::Bandwidth::MedianHeuristic
                                  ? eval::Json("median")
                                  : eval::Json(c.mmd.fixed_sigma2)},
                {"max_samples", c.mmd.max_samples}};
    j["baseline"] = {{"k", c.baseline.components},
                     {"max_iters", c.baseline.max_iters},
                     {"tol", c.baseline.tol}};
    j["run"] = {{"clients_parallel", c.clients_parallel}};
    return j;
}

}  // namespace falcon
