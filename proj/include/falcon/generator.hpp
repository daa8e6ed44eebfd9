#pragma once

// Multi-scale autoregressive transformer generator over hierarchical token
// sequences. The class-conditional sequence density factorizes as
// p(s|y) = p(s0|y) * prod_l p(sl|y, s0), each factor a diagonal-covariance
// Gaussian mixture emitted by a shared mixture-density head.
//
// Region tokens are prediction targets only, never transformer inputs:
// position 0 carries the class embedding, positions 1..L carry a broadcast
// projection of s0 plus positional embeddings. A block mask keeps position
// 0 blind to the region positions, so the image-level mixture is invariant
// to s0 by construction.

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

namespace falcon::gen {

struct GenConfig {
    size_t token_dim = 64;    // d
    size_t region_count = 4;  // L
    size_t num_classes = 4;   // C
    size_t mixture_k = 5;     // K
    size_t layers = 2;
    size_t heads = 4;
    size_t hidden = 128;
    double var_floor = 1e-4;
    size_t epochs = 60;
    size_t batch_size = 64;
    double lr = 1e-3;
    double weight_decay = 1e-4;

    size_t positions() const { return 1 + region_count; }
    size_t head_out() const { return mixture_k * (1 + 2 * token_dim); }

    void validate() const {
        if (token_dim < 1 || region_count < 1 || num_classes < 1)
            throw InvalidInputError("GenConfig: dims must be positive");
        if (mixture_k < 1) throw InvalidInputError("GenConfig: K must be >= 1");
        if (var_floor <= 0.0) throw InvalidInputError("GenConfig: variance floor must be > 0");
        if (hidden % heads != 0)
            throw InvalidInputError("GenConfig: hidden must be divisible by heads");
        if (layers < 1 || batch_size < 1) throw InvalidInputError("GenConfig: bad training dims");
    }

    static GenConfig desk() { return GenConfig{}; }

    static GenConfig paper() {
        GenConfig c;
        c.token_dim = 768;
        c.region_count = 4;
        c.mixture_k = 20;
        c.layers = 4;
        c.heads = 16;
        c.hidden = 768;
        c.epochs = 400;
        c.batch_size = 256;
        c.lr = 1e-4;
        c.weight_decay = 1e-4;
        return c;
    }
};

// One position's mixture: weights sum to 1, exp(log_vars) >= var_floor.
struct MdnParams {
    std::vector<double> weights;  // K
    Tensor means;                 // K x d
    Tensor log_vars;              // K x d, already floored
};

// Attention-permission matrix: position 0 sees only itself, region
// positions see the whole sequence. Depends only on L.
inline Tensor build_block_mask(size_t region_count) {
    if (region_count < 1) throw InvalidInputError("build_block_mask: L must be >= 1");
    const size_t s = 1 + region_count;
    Tensor mask = Tensor::full({s, s}, 1.0);
    for (size_t j = 1; j < s; ++j) mask.at(0, j) = 0.0;
    return mask;
}

struct GeneratorModel {
    GenConfig cfg;
    Tensor class_emb;  // C x H
    Tensor in_proj_w;  // d x H
    Tensor in_proj_b;  // H
    Tensor pos_emb;    // S x H

    struct Block {
        Tensor ln1_g, ln1_b;
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor ln2_g, ln2_b;
        Tensor w1, b1, w2, b2;  // feed-forward, 4x expansion
    };
    std::vector<Block> blocks;
    Tensor final_ln_g, final_ln_b;
    Tensor head_w;  // H x K(1+2d)
    Tensor head_b;
    Tensor block_mask;  // S x S, fixed, not trainable

    // Canonical parameter order; serialization, optimizer state and tape
    // registration all follow it.
    std::vector<const Tensor*> parameters() const {
        std::vector<const Tensor*> ps = {&class_emb, &in_proj_w, &in_proj_b, &pos_emb};
        for (const auto& b : blocks) {
            for (const Tensor* t : {&b.ln1_g, &b.ln1_b, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv,
                                    &b.wo, &b.bo, &b.ln2_g, &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2})
                ps.push_back(t);
        }
        for (const Tensor* t : {&final_ln_g, &final_ln_b, &head_w, &head_b}) ps.push_back(t);
        return ps;
    }
    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> ps;
        for (const Tensor* t : std::as_const(*this).parameters())
            ps.push_back(const_cast<Tensor*>(t));
        return ps;
    }

    size_t param_count() const {
        size_t n = 0;
        for (const Tensor* p : parameters()) n += p->numel();
        return n;
    }

    static GeneratorModel init(const GenConfig& cfg, Rng& rng) {
        cfg.validate();
        const size_t h = cfg.hidden, d = cfg.token_dim, s = cfg.positions();
        GeneratorModel m;
        m.cfg = cfg;
        auto weight = [&rng](std::vector<size_t> shape) {
            Tensor t = Tensor::zeros(std::move(shape));
            for (double& v : t.data) v = rng.truncated_normal(0.02);
            return t;
        };
        m.class_emb = weight({cfg.num_classes, h});
        m.in_proj_w = weight({d, h});
        m.in_proj_b = Tensor::zeros({h});
        m.pos_emb = weight({s, h});
        m.blocks.resize(cfg.layers);
        for (auto& b : m.blocks) {
            b.ln1_g = Tensor::full({h}, 1.0);
            b.ln1_b = Tensor::zeros({h});
            b.wq = weight({h, h});
            b.bq = Tensor::zeros({h});
            b.wk = weight({h, h});
            b.bk = Tensor::zeros({h});
            b.wv = weight({h, h});
            b.bv = Tensor::zeros({h});
            b.wo = weight({h, h});
            b.bo = Tensor::zeros({h});
            b.ln2_g = Tensor::full({h}, 1.0);
            b.ln2_b = Tensor::zeros({h});
            b.w1 = weight({h, 4 * h});
            b.b1 = Tensor::zeros({4 * h});
            b.w2 = weight({4 * h, h});
            b.b2 = Tensor::zeros({h});
        }
        m.final_ln_g = Tensor::full({h}, 1.0);
        m.final_ln_b = Tensor::zeros({h});
        m.head_w = weight({h, cfg.head_out()});
        m.head_b = Tensor::zeros({cfg.head_out()});
        m.block_mask = build_block_mask(cfg.region_count);
        return m;
    }

    static GeneratorModel init(const GenConfig& cfg, uint64_t seed) {
        Rng rng(seed);
        return init(cfg, rng);
    }
};

// ------------------------------------------------------- input assembly

// Builds the (B*S) x H transformer input: per sample b,
// row (b,0) = class_emb(y_b) + pos(0); row (b,l) = proj(s0_b) + pos(l).
// Ground-truth region tokens never appear here.
inline num::Var assemble_inputs(num::Tape& t, num::Var class_rows, num::Var s0_proj,
                                num::Var pos_emb, size_t batch, size_t seq) {
    const Tensor& cv = t.value(class_rows);
    const Tensor& sv = t.value(s0_proj);
    const Tensor& pv = t.value(pos_emb);
    const size_t h = cv.cols();
    if (cv.rows() != batch || sv.rows() != batch || sv.cols() != h || pv.rows() != seq ||
        pv.cols() != h)
        throw ContractError("assemble_inputs: shape mismatch");
    Tensor out = Tensor::zeros({batch * seq, h});
    for (size_t b = 0; b < batch; ++b) {
        for (size_t s = 0; s < seq; ++s) {
            const double* src = (s == 0) ? cv.row_ptr(b) : sv.row_ptr(b);
            const double* pos = pv.row_ptr(s);
            double* dst = out.row_ptr(b * seq + s);
            for (size_t j = 0; j < h; ++j) dst[j] = src[j] + pos[j];
        }
    }
    return num::Var{t.make_node(std::move(out), {class_rows.id, s0_proj.id, pos_emb.id},
                                [batch, seq](num::Tape& tp, int self) {
        num::Node& n = tp.node(self);
        Tensor& gc = tp.grad_ref(n.parents[0]);
        Tensor& gs = tp.grad_ref(n.parents[1]);
        Tensor& gp = tp.grad_ref(n.parents[2]);
        const size_t h = gc.cols();
        for (size_t b = 0; b < batch; ++b)
            for (size_t s = 0; s < seq; ++s) {
                const double* g = n.grad.row_ptr(b * seq + s);
                double* dsrc = (s == 0) ? gc.row_ptr(b) : gs.row_ptr(b);
                double* dpos = gp.row_ptr(s);
                for (size_t j = 0; j < h; ++j) {
                    dsrc[j] += g[j];
                    dpos[j] += g[j];
                }
            }
    })};
}

// ----------------------------------------------------------- MDN head math

// Raw head row layout: [K logits | K*d means | K*d raw log-vars].
inline MdnParams mdn_params_from_raw(const double* row, size_t k, size_t d, double var_floor) {
    MdnParams p;
    p.weights.resize(k);
    const Tensor logits({k}, std::vector<double>(row, row + k));
    const Tensor pi = softmax_stable(logits);
    p.weights.assign(pi.data.begin(), pi.data.end());
    p.means = Tensor({k, d}, std::vector<double>(row + k, row + k + k * d));
    const double lfloor = std::log(var_floor);
    std::vector<double> lv(row + k + k * d, row + k + 2 * k * d);
    for (double& v : lv) v = std::max(v, lfloor);
    p.log_vars = Tensor({k, d}, std::move(lv));
    return p;
}

constexpr double kLog2Pi = 1.8378770664093453;

// -log sum_k pi_k N(x; mu_k, diag exp(lv_k)), evaluated in the log domain.
inline double mdn_nll(const MdnParams& p, const std::vector<double>& x) {
    const size_t k = p.weights.size();
    const size_t d = p.means.cols();
    if (x.size() != d) throw ContractError("mdn_nll: dimension mismatch");
    std::vector<double> comp(k);
    for (size_t i = 0; i < k; ++i) {
        double g = 0.0;
        const double* mu = p.means.row_ptr(i);
        const double* lv = p.log_vars.row_ptr(i);
        for (size_t j = 0; j < d; ++j) {
            const double diff = x[j] - mu[j];
            g -= 0.5 * (kLog2Pi + lv[j] + diff * diff * std::exp(-lv[j]));
        }
        comp[i] = std::log(p.weights[i]) + g;  // -inf for zero-weight components
    }
    return -log_sum_exp(comp.data(), k);
}

// Fused tape node: per-row negative log-likelihood of the mixture given raw
// head outputs. Gradient is the standard MDN gradient; the variance floor
// blocks gradient flow on floored dimensions.
inline num::Var mdn_nll_rows(num::Tape& t, num::Var raw, const Tensor& targets, size_t k,
                             size_t d, double var_floor) {
    const Tensor& rv = t.value(raw);
    const size_t out_cols = k * (1 + 2 * d);
    if (rv.ndim() != 2 || rv.cols() != out_cols)
        throw ContractError("mdn_nll_rows: raw width != K(1+2d)");
    if (targets.ndim() != 2 || targets.rows() != rv.rows() || targets.cols() != d)
        throw ContractError("mdn_nll_rows: target shape mismatch");
    const size_t rows = rv.rows();
    const double lfloor = std::log(var_floor);

    Tensor out = Tensor::zeros({rows});
    auto resp = std::make_shared<std::vector<double>>(rows * k);  // posterior responsibilities
    auto pi = std::make_shared<std::vector<double>>(rows * k);
    std::vector<double> comp(k);
    for (size_t r = 0; r < rows; ++r) {
        const double* row = rv.row_ptr(r);
        const double* x = targets.row_ptr(r);
        const double lse_logits = log_sum_exp(row, k);
        for (size_t i = 0; i < k; ++i) {
            const double lp = row[i] - lse_logits;
            (*pi)[r * k + i] = std::exp(lp);
            double g = 0.0;
            const double* mu = row + k + i * d;
            const double* lvr = row + k + k * d + i * d;
            for (size_t j = 0; j < d; ++j) {
                const double lv = std::max(lvr[j], lfloor);
                const double diff = x[j] - mu[j];
                g -= 0.5 * (kLog2Pi + lv + diff * diff * std::exp(-lv));
            }
            comp[i] = lp + g;
        }
        const double lse_comp = log_sum_exp(comp.data(), k);
        out.data[r] = -lse_comp;
        for (size_t i = 0; i < k; ++i) (*resp)[r * k + i] = std::exp(comp[i] - lse_comp);
    }

    auto targets_copy = std::make_shared<Tensor>(targets);
    return num::Var{t.make_node(std::move(out), {raw.id},
                                [resp, pi, targets_copy, k, d, lfloor](num::Tape& tp, int self) {
        num::Node& n = tp.node(self);
        const Tensor& rv2 = tp.node(n.parents[0]).value;
        Tensor& graw = tp.grad_ref(n.parents[0]);
        const size_t rows = rv2.rows();
        for (size_t r = 0; r < rows; ++r) {
            const double g = n.grad.data[r];
            if (g == 0.0) continue;
            const double* row = rv2.row_ptr(r);
            const double* x = targets_copy->row_ptr(r);
            double* grow = graw.row_ptr(r);
            for (size_t i = 0; i < k; ++i) {
                const double ri = (*resp)[r * k + i];
                const double pii = (*pi)[r * k + i];
                grow[i] += g * (pii - ri);  // d nll / d logit_i
                const double* mu = row + k + i * d;
                const double* lvr = row + k + k * d + i * d;
                double* gmu = grow + k + i * d;
                double* glv = grow + k + k * d + i * d;
                for (size_t j = 0; j < d; ++j) {
                    const double lv = std::max(lvr[j], lfloor);
                    const double diff = x[j] - mu[j];
                    const double inv_var = std::exp(-lv);
                    gmu[j] += g * (-ri * diff * inv_var);
                    if (lvr[j] > lfloor)
                        glv[j] += g * ri * 0.5 * (1.0 - diff * diff * inv_var);
                }
            }
        }
    })};
}

// ----------------------------------------------------------- forward pass

struct GenVars {
    std::vector<num::Var> all;  // parameters() order
    num::Var class_emb, in_proj_w, in_proj_b, pos_emb;
    struct BlockVars {
        num::Var ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
    };
    std::vector<BlockVars> blocks;
    num::Var final_ln_g, final_ln_b, head_w, head_b;
};

inline GenVars register_params(num::Tape& t, const GeneratorModel& m) {
    GenVars v;
    auto reg = [&](const Tensor& p) {
        num::Var var = t.param(p);
        v.all.push_back(var);
        return var;
    };
    v.class_emb = reg(m.class_emb);
    v.in_proj_w = reg(m.in_proj_w);
    v.in_proj_b = reg(m.in_proj_b);
    v.pos_emb = reg(m.pos_emb);
    for (const auto& b : m.blocks) {
        GenVars::BlockVars bv;
        bv.ln1_g = reg(b.ln1_g);
        bv.ln1_b = reg(b.ln1_b);
        bv.wq = reg(b.wq);
        bv.bq = reg(b.bq);
        bv.wk = reg(b.wk);
        bv.bk = reg(b.bk);
        bv.wv = reg(b.wv);
        bv.bv = reg(b.bv);
        bv.wo = reg(b.wo);
        bv.bo = reg(b.bo);
        bv.ln2_g = reg(b.ln2_g);
        bv.ln2_b = reg(b.ln2_b);
        bv.w1 = reg(b.w1);
        bv.b1 = reg(b.b1);
        bv.w2 = reg(b.w2);
        bv.b2 = reg(b.b2);
        v.blocks.push_back(bv);
    }
    v.final_ln_g = reg(m.final_ln_g);
    v.final_ln_b = reg(m.final_ln_b);
    v.head_w = reg(m.head_w);
    v.head_b = reg(m.head_b);
    return v;
}

// Raw MDN head outputs for a batch: labels (B), s0 (B x d) -> (B*S) x K(1+2d).
inline num::Var generator_forward(num::Tape& t, const GeneratorModel& m, const GenVars& v,
                                  const std::vector<uint16_t>& labels, const Tensor& s0) {
    const GenConfig& cfg = m.cfg;
    const size_t batch = labels.size();
    if (batch == 0) throw ContractError("generator_forward: empty batch");
    if (s0.ndim() != 2 || s0.rows() != batch || s0.cols() != cfg.token_dim)
        throw ContractError("generator_forward: s0 must be (batch, d)");
    for (uint16_t y : labels)
        if (y >= cfg.num_classes) throw ContractError("generator_forward: class index out of range");
    const size_t seq = cfg.positions();

    std::vector<size_t> ids(labels.begin(), labels.end());
    num::Var cls = num::gather_rows(t, v.class_emb, ids);
    num::Var s0p = num::add_row_broadcast(t, num::matmul(t, t.leaf(s0), v.in_proj_w), v.in_proj_b);
    num::Var x = assemble_inputs(t, cls, s0p, v.pos_emb, batch, seq);

    auto ln_affine = [&](num::Var in, num::Var g, num::Var b) {
        return num::add_row_broadcast(t, num::mul_row_broadcast(t, num::layer_norm(t, in), g), b);
    };
    for (const auto& bv : v.blocks) {
        num::Var a = ln_affine(x, bv.ln1_g, bv.ln1_b);
        num::Var q = num::add_row_broadcast(t, num::matmul(t, a, bv.wq), bv.bq);
        num::Var k = num::add_row_broadcast(t, num::matmul(t, a, bv.wk), bv.bk);
        num::Var val = num::add_row_broadcast(t, num::matmul(t, a, bv.wv), bv.bv);
        num::Var att =
            num::masked_multihead_attention(t, q, k, val, m.block_mask, batch, seq, cfg.heads);
        num::Var proj = num::add_row_broadcast(t, num::matmul(t, att, bv.wo), bv.bo);
        x = num::add(t, x, proj);
        num::Var f = ln_affine(x, bv.ln2_g, bv.ln2_b);
        num::Var h1 = num::gelu(t, num::add_row_broadcast(t, num::matmul(t, f, bv.w1), bv.b1));
        num::Var h2 = num::add_row_broadcast(t, num::matmul(t, h1, bv.w2), bv.b2);
        x = num::add(t, x, h2);
    }
    num::Var xf = ln_affine(x, v.final_ln_g, v.final_ln_b);
    return num::add_row_broadcast(t, num::matmul(t, xf, v.head_w), v.head_b);
}

// Per-position mixture parameters for one (y, s0) pair. Region-token values
// are not inputs anywhere in this path.
inline std::vector<MdnParams> forward(const GeneratorModel& m, uint16_t label,
                                      const std::vector<double>& s0) {
    if (s0.size() != m.cfg.token_dim) throw ContractError("forward: s0 dimension mismatch");
    num::Tape t;
    GenVars v = register_params(t, m);
    Tensor s0m({1, m.cfg.token_dim}, std::vector<double>(s0));
    num::Var raw = generator_forward(t, m, v, {label}, s0m);
    const Tensor& rv = t.value(raw);
    std::vector<MdnParams> out;
    out.reserve(m.cfg.positions());
    for (size_t p = 0; p < m.cfg.positions(); ++p)
        out.push_back(
            mdn_params_from_raw(rv.row_ptr(p), m.cfg.mixture_k, m.cfg.token_dim, m.cfg.var_floor));
    return out;
}

// Negative log of the factorized sequence density: sum over positions of
// each position's mixture NLL.
inline double sequence_nll(const GeneratorModel& m, const TokenSequence& seq) {
    if (seq.tokens.ndim() != 2 || seq.tokens.rows() != m.cfg.positions() ||
        seq.tokens.cols() != m.cfg.token_dim)
        throw ContractError("sequence_nll: sequence shape mismatch");
    std::vector<double> s0(seq.tokens.row_ptr(0), seq.tokens.row_ptr(0) + m.cfg.token_dim);
    std::vector<MdnParams> params = forward(m, seq.label, s0);
    double total = 0.0;
    for (size_t p = 0; p < m.cfg.positions(); ++p) {
        std::vector<double> x(seq.tokens.row_ptr(p), seq.tokens.row_ptr(p) + m.cfg.token_dim);
        total += mdn_nll(params[p], x);
    }
    return total;
}

// ------------------------------------------------------------- training

struct TrainedGenerator {
    GeneratorModel model;
    double final_nll = 0.0;  // mean sequence NLL over the last epoch
};

inline TrainedGenerator train_generator(const SequenceDataset& data, const GenConfig& cfg,
                                        uint64_t seed) {
    cfg.validate();
    if (data.items.empty()) throw InvalidInputError("train_generator: empty dataset");
    if (data.dim != cfg.token_dim || data.region_count != cfg.region_count)
        throw InvalidInputError("train_generator: dataset (L, d) does not match config");
    for (const auto& s : data.items) {
        data.validate_item(s);
        if (s.label >= cfg.num_classes)
            throw InvalidInputError("train_generator: label outside num_classes");
    }

    Rng rng(seed);
    GeneratorModel model = GeneratorModel::init(cfg, rng);
    std::vector<Tensor*> params = model.parameters();
    num::OptimizerState opt = num::OptimizerState::adamw(cfg.lr, cfg.weight_decay);
    opt.init(params);

    const size_t n = data.items.size();
    const size_t seq = cfg.positions(), d = cfg.token_dim;
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;

    double epoch_nll = 0.0;
    for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        // cosine step-size decay to a tenth of the base rate; settles the
        // mixture parameters instead of oscillating around the optimum
        const double progress =
            cfg.epochs > 1 ? static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1) : 0.0;
        opt.lr = cfg.lr * (0.1 + 0.45 * (1.0 + std::cos(M_PI * progress)));
        rng.shuffle(order);
        double loss_sum = 0.0;
        for (size_t start = 0; start < n; start += cfg.batch_size) {
            const size_t bsz = std::min(cfg.batch_size, n - start);
            std::vector<uint16_t> labels(bsz);
            Tensor s0 = Tensor::zeros({bsz, d});
            Tensor targets = Tensor::zeros({bsz * seq, d});
            for (size_t b = 0; b < bsz; ++b) {
                const TokenSequence& item = data.items[order[start + b]];
                labels[b] = item.label;
                std::copy(item.tokens.row_ptr(0), item.tokens.row_ptr(0) + d, s0.row_ptr(b));
                std::copy(item.tokens.data.begin(), item.tokens.data.end(),
                          targets.row_ptr(b * seq));
            }
            num::Tape t;
            GenVars v = register_params(t, model);
            num::Var raw = generator_forward(t, model, v, labels, s0);
            num::Var nll = mdn_nll_rows(t, raw, targets, cfg.mixture_k, d, cfg.var_floor);
            num::Var loss = num::scale(t, num::sum_all(t, nll), 1.0 / static_cast<double>(bsz));
            loss_sum += t.value(loss).item() * static_cast<double>(bsz);
            t.backward(loss);
            std::vector<Tensor> grads = t.param_grads();
            opt.step(params, grads);
        }
        epoch_nll = loss_sum / static_cast<double>(n);
    }
    return TrainedGenerator{std::move(model), epoch_nll};
}

// ------------------------------------------------------------- sampling

inline std::vector<double> sample_from_mdn(const MdnParams& p, Rng& rng) {
    const size_t k = rng.categorical(p.weights);
    const size_t d = p.means.cols();
    std::vector<double> x(d);
    const double* mu = p.means.row_ptr(k);
    const double* lv = p.log_vars.row_ptr(k);
    for (size_t j = 0; j < d; ++j) x[j] = mu[j] + std::exp(0.5 * lv[j]) * rng.normal();
    return x;
}

namespace detail {
// Pass-2 forward in fixed-size chunks keeps tape memory bounded while
// preserving the documented draw order (all s0 first, then regions chunk
// by chunk in sample order).
constexpr size_t kSampleChunk = 128;
}  // namespace detail

// Ancestral sampling: draw s0 from the position-0 mixture (conditioning
// pass), re-run the transformer on the sampled s0, then draw each region
// token from its position's mixture (second pass).
inline std::vector<TokenSequence> sample_class(const GeneratorModel& m, uint16_t label,
                                               size_t count, Rng& rng) {
    if (label >= m.cfg.num_classes) throw ContractError("sample_class: class index out of range");
    const size_t d = m.cfg.token_dim, seq = m.cfg.positions();
    std::vector<TokenSequence> out(count);
    if (count == 0) return out;

    // conditioning pass: position-0 params are invariant to s0
    std::vector<MdnParams> cond = forward(m, label, std::vector<double>(d, 0.0));
    const MdnParams& p0 = cond[0];
    Tensor s0s = Tensor::zeros({count, d});
    for (size_t i = 0; i < count; ++i) {
        std::vector<double> s0 = sample_from_mdn(p0, rng);
        std::copy(s0.begin(), s0.end(), s0s.row_ptr(i));
        out[i].label = label;
        out[i].tokens = Tensor::zeros({seq, d});
        std::copy(s0.begin(), s0.end(), out[i].tokens.row_ptr(0));
    }

    for (size_t start = 0; start < count; start += detail::kSampleChunk) {
        const size_t bsz = std::min(detail::kSampleChunk, count - start);
        Tensor s0_chunk = Tensor::zeros({bsz, d});
        for (size_t b = 0; b < bsz; ++b)
            std::copy(s0s.row_ptr(start + b), s0s.row_ptr(start + b) + d, s0_chunk.row_ptr(b));
        num::Tape t;
        GenVars v = register_params(t, m);
        num::Var raw =
            generator_forward(t, m, v, std::vector<uint16_t>(bsz, label), s0_chunk);
        const Tensor& rv = t.value(raw);
        for (size_t b = 0; b < bsz; ++b) {
            for (size_t l = 1; l < seq; ++l) {
                MdnParams pl = mdn_params_from_raw(rv.row_ptr(b * seq + l), m.cfg.mixture_k, d,
                                                   m.cfg.var_floor);
                std::vector<double> x = sample_from_mdn(pl, rng);
                std::copy(x.begin(), x.end(), out[start + b].tokens.row_ptr(l));
            }
        }
    }
    return out;
}

inline TokenSequence sample_sequence(const GeneratorModel& m, uint16_t label, Rng& rng) {
    return sample_class(m, label, 1, rng)[0];
}

// --------------------------------------------------------- FGEN container
// magic "FGEN", u16 version=1, config (u16 d, u16 L, u16 C, u16 K,
// u16 layers, u16 heads, u16 hidden, f64 var_floor, u32 epochs, u32 batch,
// f64 lr, f64 weight_decay), then parameters as f32 in canonical order.

constexpr uint16_t kFgenVersion = 1;

inline std::vector<uint8_t> serialize_generator(const GeneratorModel& m) {
    io::ByteWriter w;
    w.magic("FGEN");
    w.u16(kFgenVersion);
    w.u16(static_cast<uint16_t>(m.cfg.token_dim));
    w.u16(static_cast<uint16_t>(m.cfg.region_count));
    w.u16(static_cast<uint16_t>(m.cfg.num_classes));
    w.u16(static_cast<uint16_t>(m.cfg.mixture_k));
    w.u16(static_cast<uint16_t>(m.cfg.layers));
    w.u16(static_cast<uint16_t>(m.cfg.heads));
    w.u16(static_cast<uint16_t>(m.cfg.hidden));
    w.f64(m.cfg.var_floor);
    w.u32(static_cast<uint32_t>(m.cfg.epochs));
    w.u32(static_cast<uint32_t>(m.cfg.batch_size));
    w.f64(m.cfg.lr);
    w.f64(m.cfg.weight_decay);
    for (const Tensor* p : m.parameters())
        for (double v : p->data) w.f32(static_cast<float>(v));
    return w.buffer();
}

inline GeneratorModel parse_generator(io::ByteReader& r) {
    r.expect_magic("FGEN");
    const uint16_t version = r.u16();
    if (version != kFgenVersion)
        throw FormatError("fgen: unsupported version " + std::to_string(version));
    GenConfig cfg;
    cfg.token_dim = r.u16();
    cfg.region_count = r.u16();
    cfg.num_classes = r.u16();
    cfg.mixture_k = r.u16();
    cfg.layers = r.u16();
    cfg.heads = r.u16();
    cfg.hidden = r.u16();
    cfg.var_floor = r.f64();
    cfg.epochs = r.u32();
    cfg.batch_size = r.u32();
    cfg.lr = r.f64();
    cfg.weight_decay = r.f64();
    try {
        cfg.validate();
    } catch (const InvalidInputError& e) {
        throw FormatError(std::string("fgen: invalid config: ") + e.what());
    }
    GeneratorModel m = GeneratorModel::init(cfg, 0);
    for (Tensor* p : m.parameters())
        for (double& v : p->data) v = static_cast<double>(r.f32());
    return m;
}

inline GeneratorModel parse_generator(const std::vector<uint8_t>& bytes) {
    io::ByteReader r(bytes);
    GeneratorModel m = parse_generator(r);
    r.require_done();
    return m;
}

// --------------------------------------------------------- FLOP estimate

// Analytic per-sampled-sequence cost, counting each multiply-add as 2
// FLOPs. Two full forward passes over 1+L positions (conditioning pass and
// post-s0 pass). Per pass, with S = 1+L, H = hidden, O = K(1+2d):
//   attention projections: layers * 4 * S * H * H * 2
//   attention scores+mix:  layers * 2 * S^2 * H * 2
//   feed-forward:          layers * 2 * S * 4H * H * 2
//   MDN head:              S * H * O * 2
// Normalization, GELU and softmax are omitted (lower-order terms).
inline double estimate_generation_flops(const GenConfig& cfg) {
    cfg.validate();
    const double s = static_cast<double>(cfg.positions());
    const double h = static_cast<double>(cfg.hidden);
    const double layers = static_cast<double>(cfg.layers);
    const double head_out = static_cast<double>(cfg.head_out());
    const double attn_proj = layers * 4.0 * s * h * h * 2.0;
    const double attn_scores = layers * 2.0 * s * s * h * 2.0;
    const double ffn = layers * 2.0 * s * (4.0 * h) * h * 2.0;
    const double head = s * h * head_out * 2.0;
    const double per_pass = attn_proj + attn_scores + ffn + head;
    return 2.0 * per_pass;
}

}  // namespace falcon::gen
