#pragma once

// Attention-pooling classifier over token sequences and its two training
// paths: local cross-entropy training on real sequences, and the server's
// distillation-guided training on synthetic sequences against an ensemble
// of frozen local classifiers.
//
// Pooling: K = sW_k, V = sW_v, alpha = softmax(q K^T / sqrt(d)),
// s_sem = alpha V; a 2-layer GELU perceptron maps s_sem to C logits.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "falcon/autodiff.hpp"
#include "falcon/common.hpp"
#include "falcon/encoding.hpp"
#include "falcon/io.hpp"
#include "falcon/optim.hpp"
#include "falcon/rng.hpp"
#include "falcon/tensor.hpp"

namespace falcon::cls {

struct ClsConfig {
    size_t epochs = 60;
    size_t batch_size = 256;
    double lr = 5e-4;

    void validate() const {
        if (batch_size < 1) throw InvalidInputError("ClsConfig: batch size must be >= 1");
    }
};

struct KdConfig {
    double temperature = 4.0;
    double alpha_kd = 0.5;
    size_t epochs = 60;
    size_t batch_size = 256;
    double lr = 5e-4;

    void validate() const {
        if (temperature <= 0.0) throw InvalidInputError("KdConfig: temperature must be > 0");
        if (alpha_kd < 0.0 || alpha_kd > 1.0)
            throw InvalidInputError("KdConfig: alpha must be in [0, 1]");
        if (batch_size < 1) throw InvalidInputError("KdConfig: batch size must be >= 1");
    }
};

struct ClassifierModel {
    size_t dim = 0;          // d
    size_t num_classes = 0;  // C
    Tensor w_key;            // d x d
    Tensor w_value;          // d x d
    Tensor query;            // d x 1
    Tensor w1, b1;           // d x d, d
    Tensor w2, b2;           // d x C, C

    std::vector<const Tensor*> parameters() const {
        return {&w_key, &w_value, &query, &w1, &b1, &w2, &b2};
    }
    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> ps;
        for (const Tensor* t : std::as_const(*this).parameters())
            ps.push_back(const_cast<Tensor*>(t));
        return ps;
    }

    static ClassifierModel init(size_t dim, size_t num_classes, Rng& rng) {
        if (dim < 1 || num_classes < 1) throw InvalidInputError("ClassifierModel: bad dims");
        ClassifierModel m;
        m.dim = dim;
        m.num_classes = num_classes;
        auto weight = [&rng](std::vector<size_t> shape) {
            Tensor t = Tensor::zeros(std::move(shape));
            for (double& v : t.data) v = rng.truncated_normal(0.02);
            return t;
        };
        m.w_key = weight({dim, dim});
        m.w_value = weight({dim, dim});
        m.query = weight({dim, 1});
        m.w1 = weight({dim, dim});
        m.b1 = Tensor::zeros({dim});
        m.w2 = weight({dim, num_classes});
        m.b2 = Tensor::zeros({num_classes});
        return m;
    }

    static ClassifierModel init(size_t dim, size_t num_classes, uint64_t seed) {
        Rng rng(seed);
        return init(dim, num_classes, rng);
    }
};

// ------------------------------------------------------------- inference

// Semantic summary of one sequence (any number of rows >= 1).
inline std::vector<double> attention_pool(const ClassifierModel& m, const Tensor& seq) {
    if (seq.ndim() != 2 || seq.cols() != m.dim)
        throw ContractError("attention_pool: sequence must be (1+L, d)");
    const size_t rows = seq.rows(), d = m.dim;
    const Tensor keys = matmul(seq, m.w_key);
    const Tensor values = matmul(seq, m.w_value);
    std::vector<double> scores(rows);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d));
    for (size_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (size_t j = 0; j < d; ++j) s += m.query.data[j] * keys.at(i, j);
        scores[i] = s * inv_sqrt;
    }
    const Tensor alpha = softmax_stable(Tensor::row_vector(scores));
    std::vector<double> pooled(d, 0.0);
    for (size_t i = 0; i < rows; ++i)
        for (size_t j = 0; j < d; ++j) pooled[j] += alpha.data[i] * values.at(i, j);
    return pooled;
}

inline std::vector<double> classify(const ClassifierModel& m, const Tensor& seq) {
    const std::vector<double> pooled = attention_pool(m, seq);
    std::vector<double> h(m.dim);
    for (size_t i = 0; i < m.dim; ++i) {
        double acc = m.b1.data[i];
        for (size_t j = 0; j < m.dim; ++j) acc += pooled[j] * m.w1.at(j, i);
        h[i] = gelu_scalar(acc);
    }
    std::vector<double> logits(m.num_classes);
    for (size_t c = 0; c < m.num_classes; ++c) {
        double acc = m.b2.data[c];
        for (size_t j = 0; j < m.dim; ++j) acc += h[j] * m.w2.at(j, c);
        logits[c] = acc;
    }
    return logits;
}

// Ties break toward the lowest class index.
inline size_t argmax_class(const std::vector<double>& logits) {
    size_t best = 0;
    for (size_t c = 1; c < logits.size(); ++c)
        if (logits[c] > logits[best]) best = c;
    return best;
}

inline size_t predict(const ClassifierModel& m, const Tensor& seq) {
    return argmax_class(classify(m, seq));
}

inline double accuracy(const ClassifierModel& m, const SequenceDataset& data) {
    if (data.items.empty()) throw InvalidInputError("accuracy: empty dataset");
    size_t correct = 0;
    for (const auto& item : data.items)
        if (predict(m, item.tokens) == item.label) ++correct;
    return static_cast<double>(correct) / static_cast<double>(data.items.size());
}

// --------------------------------------------------------- loss functions

// Average of temperature-scaled softmaxes of the local classifiers' logits.
inline std::vector<double> ensemble_teacher(const std::vector<std::vector<double>>& local_logits,
                                            double temperature) {
    if (local_logits.empty()) throw ContractError("ensemble_teacher: no teachers");
    if (temperature <= 0.0) throw ContractError("ensemble_teacher: temperature must be > 0");
    const size_t c = local_logits[0].size();
    std::vector<double> p(c, 0.0);
    for (const auto& z : local_logits) {
        if (z.size() != c) throw ContractError("ensemble_teacher: logit size mismatch");
        Tensor tempered = Tensor::row_vector(z);
        for (double& v : tempered.data) v /= temperature;
        const Tensor sm = softmax_stable(tempered);
        for (size_t i = 0; i < c; ++i) p[i] += sm.data[i];
    }
    for (double& v : p) v /= static_cast<double>(local_logits.size());
    return p;
}

// T^2 * KL(p_T || softmax(z_S / T)); zero-probability teacher entries
// contribute 0.
inline double kd_loss(const std::vector<double>& teacher, const std::vector<double>& student_logits,
                      double temperature) {
    if (temperature <= 0.0) throw ContractError("kd_loss: temperature must be > 0");
    if (teacher.size() != student_logits.size()) throw ContractError("kd_loss: size mismatch");
    Tensor tempered = Tensor::row_vector(student_logits);
    for (double& v : tempered.data) v /= temperature;
    const size_t c = teacher.size();
    std::vector<double> z(tempered.data);
    const double lse = log_sum_exp(z.data(), c);
    double kl = 0.0;
    for (size_t i = 0; i < c; ++i) {
        if (teacher[i] <= 0.0) continue;
        kl += teacher[i] * (std::log(teacher[i]) - (z[i] - lse));
    }
    return temperature * temperature * kl;
}

// (1 - alpha) * ce + alpha * kd.
inline double total_loss(double ce, double kd, double alpha_kd) {
    if (alpha_kd < 0.0 || alpha_kd > 1.0) throw ContractError("total_loss: alpha outside [0, 1]");
    return (1.0 - alpha_kd) * ce + alpha_kd * kd;
}

// ------------------------------------------------------------- training

struct ClsVars {
    std::vector<num::Var> all;
    num::Var w_key, w_value, query, w1, b1, w2, b2;
};

inline ClsVars register_params(num::Tape& t, const ClassifierModel& m) {
    ClsVars v;
    auto reg = [&](const Tensor& p) {
        num::Var var = t.param(p);
        v.all.push_back(var);
        return var;
    };
    v.w_key = reg(m.w_key);
    v.w_value = reg(m.w_value);
    v.query = reg(m.query);
    v.w1 = reg(m.w1);
    v.b1 = reg(m.b1);
    v.w2 = reg(m.w2);
    v.b2 = reg(m.b2);
    return v;
}

// Batched logits for B sequences stacked into (B*S, d).
inline num::Var classifier_forward(num::Tape& t, const ClassifierModel& m, const ClsVars& v,
                                   const Tensor& stacked, size_t batch, size_t seq) {
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(m.dim));
    num::Var x = t.leaf(stacked);
    num::Var keys = num::matmul(t, x, v.w_key);
    num::Var values = num::matmul(t, x, v.w_value);
    num::Var scores = num::scale(t, num::matmul(t, keys, v.query), inv_sqrt);
    num::Var alpha = num::softmax_rows(t, num::reshape(t, scores, {batch, seq}));
    num::Var pooled = num::segment_weighted_sum(t, values, alpha, batch, seq);
    num::Var h1 = num::gelu(t, num::add_row_broadcast(t, num::matmul(t, pooled, v.w1), v.b1));
    return num::add_row_broadcast(t, num::matmul(t, h1, v.w2), v.b2);
}

namespace detail {

// Shared CE/KD trainer. Local training is the no-teacher, alpha = 0 case,
// so "alpha_kd = 0 behaves exactly like local training" holds by
// construction. Teacher logits are computed once up front (teachers are
// frozen; caching changes nothing numerically).
inline ClassifierModel train_classifier(const SequenceDataset& data,
                                        const std::vector<ClassifierModel>& teachers,
                                        double alpha_kd, double temperature, size_t epochs,
                                        size_t batch_size, double lr, uint64_t seed) {
    if (data.items.empty()) throw InvalidInputError("train_classifier: empty dataset");
    if (alpha_kd > 0.0 && teachers.empty())
        throw InvalidInputError("train_classifier: distillation requires teachers");
    const size_t d = data.dim, c = data.num_classes, seq = data.positions();
    for (const auto& item : data.items) {
        data.validate_item(item);
        if (item.label >= c) throw InvalidInputError("train_classifier: label outside classes");
    }
    for (const auto& teacher : teachers)
        if (teacher.dim != d || teacher.num_classes != c)
            throw InvalidInputError("train_classifier: teacher dims mismatch dataset");

    Rng rng(seed);
    ClassifierModel model = ClassifierModel::init(d, c, rng);
    std::vector<Tensor*> params = model.parameters();
    num::OptimizerState opt = num::OptimizerState::adam(lr);
    opt.init(params);

    const size_t n = data.items.size();
    Tensor teacher_probs;  // n x C ensemble distributions
    if (alpha_kd > 0.0) {
        teacher_probs = Tensor::zeros({n, c});
        for (size_t i = 0; i < n; ++i) {
            std::vector<std::vector<double>> zs;
            zs.reserve(teachers.size());
            for (const auto& teacher : teachers) zs.push_back(classify(teacher, data.items[i].tokens));
            const std::vector<double> pt = ensemble_teacher(zs, temperature);
            std::copy(pt.begin(), pt.end(), teacher_probs.row_ptr(i));
        }
    }

    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;

    for (size_t epoch = 0; epoch < epochs; ++epoch) {
        rng.shuffle(order);
        for (size_t start = 0; start < n; start += batch_size) {
            const size_t bsz = std::min(batch_size, n - start);
            Tensor stacked = Tensor::zeros({bsz * seq, d});
            std::vector<uint16_t> labels(bsz);
            Tensor pt = alpha_kd > 0.0 ? Tensor::zeros({bsz, c}) : Tensor{};
            for (size_t b = 0; b < bsz; ++b) {
                const size_t idx = order[start + b];
                const TokenSequence& item = data.items[idx];
                std::copy(item.tokens.data.begin(), item.tokens.data.end(),
                          stacked.row_ptr(b * seq));
                labels[b] = item.label;
                if (alpha_kd > 0.0)
                    std::copy(teacher_probs.row_ptr(idx), teacher_probs.row_ptr(idx) + c,
                              pt.row_ptr(b));
            }
            num::Tape t;
            ClsVars v = register_params(t, model);
            num::Var logits = classifier_forward(t, model, v, stacked, bsz, seq);
            num::Var loss;
            if (alpha_kd <= 0.0) {
                loss = num::cross_entropy_mean(t, logits, labels);
            } else if (alpha_kd >= 1.0) {
                loss = num::kd_loss_mean(t, logits, pt, temperature);
            } else {
                num::Var ce = num::cross_entropy_mean(t, logits, labels);
                num::Var kd = num::kd_loss_mean(t, logits, pt, temperature);
                loss = num::linear_combination(t, ce, 1.0 - alpha_kd, kd, alpha_kd);
            }
            t.backward(loss);
            std::vector<Tensor> grads = t.param_grads();
            opt.step(params, grads);
        }
    }
    return model;
}

}  // namespace detail

// Cross-entropy training on real sequences (each client's local model).
inline ClassifierModel train_local(const SequenceDataset& real, const ClsConfig& cfg,
                                   uint64_t seed) {
    cfg.validate();
    return detail::train_classifier(real, {}, 0.0, 1.0, cfg.epochs, cfg.batch_size, cfg.lr, seed);
}

// Distillation-guided training on the combined synthetic set against
// frozen local classifiers.
inline ClassifierModel train_global(const SequenceDataset& synthetic,
                                    const std::vector<ClassifierModel>& teachers,
                                    const KdConfig& cfg, uint64_t seed) {
    cfg.validate();
    if (teachers.empty()) throw InvalidInputError("train_global: at least one teacher required");
    return detail::train_classifier(synthetic, teachers, cfg.alpha_kd, cfg.temperature, cfg.epochs,
                                    cfg.batch_size, cfg.lr, seed);
}

// --------------------------------------------------------- FCLS container
// magic "FCLS", u16 version=1, u16 d, u16 C, then parameters as f32 in
// canonical order (w_key, w_value, query, w1, b1, w2, b2).

constexpr uint16_t kFclsVersion = 1;

inline std::vector<uint8_t> serialize_classifier(const ClassifierModel& m) {
    io::ByteWriter w;
    w.magic("FCLS");
    w.u16(kFclsVersion);
    w.u16(static_cast<uint16_t>(m.dim));
    w.u16(static_cast<uint16_t>(m.num_classes));
    for (const Tensor* p : m.parameters())
        for (double v : p->data) w.f32(static_cast<float>(v));
    return w.buffer();
}

inline ClassifierModel parse_classifier(io::ByteReader& r) {
    r.expect_magic("FCLS");
    const uint16_t version = r.u16();
    if (version != kFclsVersion)
        throw FormatError("fcls: unsupported version " + std::to_string(version));
    const size_t d = r.u16(), c = r.u16();
    if (d < 1 || c < 1) throw FormatError("fcls: bad dimensions");
    ClassifierModel m = ClassifierModel::init(d, c, 0);
    for (Tensor* p : m.parameters())
        for (double& v : p->data) v = static_cast<double>(r.f32());
    return m;
}

inline ClassifierModel parse_classifier(const std::vector<uint8_t>& bytes) {
    io::ByteReader r(bytes);
    ClassifierModel m = parse_classifier(r);
    r.require_done();
    return m;
}

}  // namespace falcon::cls
