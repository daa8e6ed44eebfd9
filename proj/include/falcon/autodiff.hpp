#pragma once

// Reverse-mode automatic differentiation over dense f64 tensors.
//
// A Tape records primitive nodes in creation order, which is already a
// topological order (an op's inputs must exist before the op). backward()
// seeds the scalar loss with gradient 1 and walks the tape once in reverse,
// so every node is visited exactly once per pass. Parameters are leaves
// flagged trainable; parameters that do not participate in the loss keep
// their zero gradient.
//
// Module-specific fused nodes (e.g. the mixture-density NLL) are built on
// Tape::make_node from their own headers; everything here is generic.

#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "falcon/common.hpp"
#include "falcon/tensor.hpp"

namespace falcon::num {

class Tape;

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

using BackwardFn = std::function<void(Tape&, int)>;

struct Node {
    Tensor value;
    Tensor grad;
    std::vector<int> parents;
    BackwardFn backward;
    bool trainable = false;
};

// Additive surrogate for -inf on forbidden attention logits; exp() of a
// shifted logit at this magnitude underflows to exactly 0.
constexpr double kMaskNegInf = -1e30;

class Tape {
public:
    Var leaf(Tensor v) { return Var{make_node(std::move(v), {}, nullptr)}; }

    Var param(Tensor v) {
        Var p{make_node(std::move(v), {}, nullptr)};
        nodes_[static_cast<size_t>(p.id)].trainable = true;
        params_.push_back(p.id);
        return p;
    }

    Var constant(double v) { return leaf(Tensor::scalar(v)); }

    int make_node(Tensor value, std::vector<int> parents, BackwardFn fn) {
        for (int pid : parents) check_id(pid, "make_node parent");
        nodes_.push_back(Node{std::move(value), Tensor{}, std::move(parents), std::move(fn), false});
        return static_cast<int>(nodes_.size()) - 1;
    }

    const Tensor& value(Var v) const { return node(v.id).value; }
    const Tensor& grad(Var v) const {
        const Node& n = node(v.id);
        if (n.grad.numel() == 0) throw ContractError("grad requested before backward()");
        return n.grad;
    }

    Node& node(int id) {
        check_id(id, "node");
        return nodes_[static_cast<size_t>(id)];
    }
    const Node& node(int id) const {
        check_id(id, "node");
        return nodes_[static_cast<size_t>(id)];
    }

    Tensor& grad_ref(int id) { return node(id).grad; }

    void backward(Var loss) {
        check_id(loss.id, "backward loss");
        const Node& ln = nodes_[static_cast<size_t>(loss.id)];
        if (ln.value.numel() != 1) throw ContractError("backward: loss must be a scalar");
        for (auto& n : nodes_) {
            n.grad = Tensor::zeros(n.value.shape);
        }
        nodes_[static_cast<size_t>(loss.id)].grad.data[0] = 1.0;
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (n.backward) n.backward(*this, id);
        }
    }

    const std::vector<int>& params() const { return params_; }

    // Gradients of the registered parameters, in registration order.
    std::vector<Tensor> param_grads() const {
        std::vector<Tensor> out;
        out.reserve(params_.size());
        for (int id : params_) {
            const Node& n = nodes_[static_cast<size_t>(id)];
            if (n.grad.numel() == 0)
                throw ContractError("param_grads requested before backward()");
            out.push_back(n.grad);
        }
        return out;
    }

    size_t size() const { return nodes_.size(); }

private:
    void check_id(int id, const char* where) const {
        if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
            throw ContractError(std::string(where) + ": var is not on this tape");
    }
    std::vector<Node> nodes_;
    std::vector<int> params_;
};

// ------------------------------------------------------------- primitives

inline Var add(Tape& t, Var a, Var b) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (!av.same_shape(bv)) throw ContractError("add: shape mismatch");
    Tensor out = av;
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] += bv.data[i];
    return Var{t.make_node(std::move(out), {a.id, b.id}, [](Tape& tp, int self) {
        Node& n = tp.node(self);
        Tensor& ga = tp.grad_ref(n.parents[0]);
        Tensor& gb = tp.grad_ref(n.parents[1]);
        for (size_t i = 0; i < n.grad.numel(); ++i) {
            ga.data[i] += n.grad.data[i];
            gb.data[i] += n.grad.data[i];
        }
    })};
}

inline Var sub(Tape& t, Var a, Var b) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (!av.same_shape(bv)) throw ContractError("sub: shape mismatch");
    Tensor out = av;
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] -= bv.data[i];
    return Var{t.make_node(std::move(out), {a.id, b.id}, [](Tape& tp, int self) {
        Node& n = tp.node(self);
        Tensor& ga = tp.grad_ref(n.parents[0]);
        Tensor& gb = tp.grad_ref(n.parents[1]);
        for (size_t i = 0; i < n.grad.numel(); ++i) {
            ga.data[i] += n.grad.data[i];
            gb.data[i] -= n.grad.data[i];
        }
    })};
}

inline Var mul(Tape& t, Var a, Var b) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (!av.same_shape(bv)) throw ContractError("mul: shape mismatch");
    Tensor out = av;
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] *= bv.data[i];
    return Var{t.make_node(std::move(out), {a.id, b.id}, [](Tape& tp, int self) {
        Node& n = tp.node(self);
        const Tensor& av2 = tp.node(n.parents[0]).value;
        const Tensor& bv2 = tp.node(n.parents[1]).value;
        Tensor& ga = tp.grad_ref(n.parents[0]);
        Tensor& gb = tp.grad_ref(n.parents[1]);
        for (size_t i = 0; i < n.grad.numel(); ++i) {
            ga.data[i] += n.grad.data[i] * bv2.data[i];
            gb.data[i] += n.grad.data[i] * av2.data[i];
        }
    })};
}

inline Var scale(Tape& t, Var a, double c) {
    Tensor out = t.value(a);
    for (double& v : out.data) v *= c;
    return Var{t.make_node(std::move(out), {a.id}, [c](Tape& tp, int self) {
        Node& n = tp.node(self);
        Tensor& ga = tp.grad_ref(n.parents[0]);
        for (size_t i = 0; i < n.grad.numel(); ++i) ga.data[i] += c * n.grad.data[i];
    })};
}

inline Var add_scalar(Tape& t, Var a, double c) {
    Tensor out = t.value(a);
    for (double& v : out.data) v += c;
    return Var{t.make_node(std::move(out), {a.id}, [](Tape& tp, int self) {
        Node& n = tp.node(self);
        Tensor& ga = tp.grad_ref(n.parents[0]);
        for (size_t i = 0; i < n.grad.numel(); ++i) ga.data[i] += n.grad.data[i];
    })};
}

// ca*a + cb*b with fixed coefficients (Eq.-13-style convex combinations).
inline Var linear_combination(Tape& t, Var a, double ca, Var b, double cb) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (!av.same_shape(bv)) throw ContractError("linear_combination: shape mismatch");
    Tensor out = av;
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] = ca * av.data[i] + cb * bv.data[i];
    return Var{t.make_node(std::move(out), {a.id, b.id}, [ca, cb](Tape& tp, int self) {
        Node& n = tp.node(self);
        Tensor& ga = tp.grad_ref(n.parents[0]);
        Tensor& gb = tp.grad_ref(n.parents[1]);
        for (size_t i = 0; i < n.grad.numel(); ++i) {
            ga.data[i] += ca * n.grad.data[i];
            gb.data[i] += cb * n.grad.data[i];
        }
    })};
}

inline Var matmul(Tape& t, Var a, Var b) {
    Tensor out = falcon::matmul(t.value(a), t.value(b));
    return Var{t.make_node(std::move(out), {a.id, b.id}, [](Tape& tp, int self) {
        Node& n = tp.node(self);
        const Tensor& av = tp.node(n.parents[0]).value;
        const Tensor& bv = tp.node(n.parents[1]).value;
        Tensor da = falcon::matmul(n.grad, transpose(bv));
        Tensor db = falcon::matmul(transpose(av), n.grad);
        Tensor& ga = tp.grad_ref(n.parents[0]);
        Tensor& gb = tp.grad_ref(n.parents[1]);
        for (size_t i = 0; i < ga.numel(); ++i) ga.data[i] += da.data[i];
        for (size_t i = 0; i < gb.numel(); ++i) gb.data[i] += db.data[i];
    })};
}

// m[i,:] + row (bias add).
inline Var add_row_broadcast(Tape& t, Var m, Var row) {
    const Tensor& mv = t.value(m);
    const Tensor& rv = t.value(row);
    if (mv.ndim() != 2 || rv.numel() != mv.cols())
        throw ContractError("add_row_broadcast: shape mismatch");
    Tensor out = mv;
    for (size_t i = 0; i < mv.rows(); ++i)
        for (size_t j = 0; j < mv.cols(); ++j) out.at(i, j) += rv.data[j];
    return Var{t.make_node(std::move(out), {m.id, row.id}, [](Tape& tp, int self) {
        Node& n = tp.node(self);
        Tensor& gm = tp.grad_ref(n.parents[0]);
        Tensor& gr = tp.grad_ref(n.parents[1]);
        const size_t rows = n.grad.rows(), cols = n.grad.cols();
        for (size_t i = 0; i < rows; ++i)
            for (size_t j = 0; j < cols; ++j) {
                gm.at(i, j) += n.grad.at(i, j);
                gr.data[j] += n.grad.at(i, j);
            }
    })};
}

// m[i,:] * row (per-column gain, used for layer-norm affine).
inline Var mul_row_broadcast(Tape& t, Var m, Var row) {
    const Tensor& mv = t.value(m);
    const Tensor& rv = t.value(row);
    if (mv.ndim() != 2 || rv.numel() != mv.cols())
        throw ContractError("mul_row_broadcast: shape mismatch");
    Tensor out = mv;
    for (size_t i = 0; i < mv.rows(); ++i)
        for (size_t j = 0; j < mv.cols(); ++j) out.at(i, j) *= rv.data[j];
    return Var{t.make_node(std::move(out), {m.id, row.id}, [](Tape& tp, int self) {
        Node& n = tp.node(self);
        const Tensor& mv2 = tp.node(n.parents[0]).value;
        const Tensor& rv2 = tp.node(n.parents[1]).value;
        Tensor& gm = tp.grad_ref(n.parents[0]);
        Tensor& gr = tp.grad_ref(n.parents[1]);
        const size_t rows = n.grad.rows(), cols = n.grad.cols();
        for (size_t i = 0; i < rows; ++i)
            for (size_t j = 0; j < cols; ++j) {
                gm.at(i, j) += n.grad.at(i, j) * rv2.data[j];
                gr.data[j] += n.grad.at(i, j) * mv2.at(i, j);
            }
    })};
}

inline Var gelu(Tape& t, Var a) {
    Tensor out = t.value(a);
    for (double& v : out.data) v = gelu_scalar(v);
    return Var{t.make_node(std::move(out), {a.id}, [](Tape& tp, int self) {
        Node& n = tp.node(self);
        const Tensor& av = tp.node(n.parents[0]).value;
        Tensor& ga = tp.grad_ref(n.parents[0]);
        for (size_t i = 0; i < n.grad.numel(); ++i)
            ga.data[i] += n.grad.data[i] * gelu_grad_scalar(av.data[i]);
    })};
}

inline Var exp_op(Tape& t, Var a) {
    Tensor out = t.value(a);
    for (double& v : out.data) v = std::exp(v);
    return Var{t.make_node(std::move(out), {a.id}, [](Tape& tp, int self) {
        Node& n = tp.node(self);
        Tensor& ga = tp.grad_ref(n.parents[0]);
        for (size_t i = 0; i < n.grad.numel(); ++i)
            ga.data[i] += n.grad.data[i] * n.value.data[i];
    })};
}

inline Var log_op(Tape& t, Var a) {
    Tensor out = t.value(a);
    for (double& v : out.data) v = std::log(v);
    return Var{t.make_node(std::move(out), {a.id}, [](Tape& tp, int self) {
        Node& n = tp.node(self);
        const Tensor& av = tp.node(n.parents[0]).value;
        Tensor& ga = tp.grad_ref(n.parents[0]);
        for (size_t i = 0; i < n.grad.numel(); ++i)
            ga.data[i] += n.grad.data[i] / av.data[i];
    })};
}

inline Var tanh_op(Tape& t, Var a) {
    Tensor out = t.value(a);
    for (double& v : out.data) v = std::tanh(v);
    return Var{t.make_node(std::move(out), {a.id}, [](Tape& tp, int self) {
        Node& n = tp.node(self);
        Tensor& ga = tp.grad_ref(n.parents[0]);
        for (size_t i = 0; i < n.grad.numel(); ++i)
            ga.data[i] += n.grad.data[i] * (1.0 - n.value.data[i] * n.value.data[i]);
    })};
}

// Row-wise layer norm, population variance, no affine. Compose with
// mul_row_broadcast/add_row_broadcast for gain and bias.
inline Var layer_norm(Tape& t, Var a, double eps = kLayerNormEps) {
    Tensor out = layer_norm_plain(t.value(a), eps);
    return Var{t.make_node(std::move(out), {a.id}, [eps](Tape& tp, int self) {
        Node& n = tp.node(self);
        const Tensor& av = tp.node(n.parents[0]).value;
        Tensor& ga = tp.grad_ref(n.parents[0]);
        const size_t cols = av.ndim() == 1 ? av.shape[0] : av.shape[1];
        const size_t rows = av.numel() / cols;
        for (size_t i = 0; i < rows; ++i) {
            const double* x = av.data.data() + i * cols;
            const double* y = n.value.data.data() + i * cols;
            const double* dy = n.grad.data.data() + i * cols;
            double* dx = ga.data.data() + i * cols;
            double mean = 0.0, var = 0.0;
            for (size_t j = 0; j < cols; ++j) mean += x[j];
            mean /= static_cast<double>(cols);
            for (size_t j = 0; j < cols; ++j) var += (x[j] - mean) * (x[j] - mean);
            var /= static_cast<double>(cols);
            const double inv = 1.0 / std::sqrt(var + eps);
            double mean_dy = 0.0, mean_dyy = 0.0;
            for (size_t j = 0; j < cols; ++j) {
                mean_dy += dy[j];
                mean_dyy += dy[j] * y[j];
            }
            mean_dy /= static_cast<double>(cols);
            mean_dyy /= static_cast<double>(cols);
            for (size_t j = 0; j < cols; ++j)
                dx[j] += inv * (dy[j] - mean_dy - y[j] * mean_dyy);
        }
    })};
}

inline Var softmax_rows(Tape& t, Var a) {
    Tensor out = softmax_stable(t.value(a));
    return Var{t.make_node(std::move(out), {a.id}, [](Tape& tp, int self) {
        Node& n = tp.node(self);
        Tensor& ga = tp.grad_ref(n.parents[0]);
        const size_t cols = n.value.ndim() == 1 ? n.value.shape[0] : n.value.shape[1];
        const size_t rows = n.value.numel() / cols;
        for (size_t i = 0; i < rows; ++i) {
            const double* p = n.value.data.data() + i * cols;
            const double* dy = n.grad.data.data() + i * cols;
            double* dx = ga.data.data() + i * cols;
            double dot = 0.0;
            for (size_t j = 0; j < cols; ++j) dot += dy[j] * p[j];
            for (size_t j = 0; j < cols; ++j) dx[j] += p[j] * (dy[j] - dot);
        }
    })};
}

inline Var log_softmax_rows(Tape& t, Var a) {
    const Tensor& av = t.value(a);
    if (!av.all_finite()) throw InvalidInputError("log_softmax: non-finite input");
    const size_t cols = av.ndim() == 1 ? av.shape[0] : av.shape[1];
    const size_t rows = av.numel() / cols;
    Tensor out = av;
    for (size_t i = 0; i < rows; ++i) {
        double* o = out.data.data() + i * cols;
        const double lse = log_sum_exp(o, cols);
        for (size_t j = 0; j < cols; ++j) o[j] -= lse;
    }
    return Var{t.make_node(std::move(out), {a.id}, [](Tape& tp, int self) {
        Node& n = tp.node(self);
        Tensor& ga = tp.grad_ref(n.parents[0]);
        const size_t cols = n.value.ndim() == 1 ? n.value.shape[0] : n.value.shape[1];
        const size_t rows = n.value.numel() / cols;
        for (size_t i = 0; i < rows; ++i) {
            const double* lp = n.value.data.data() + i * cols;
            const double* dy = n.grad.data.data() + i * cols;
            double* dx = ga.data.data() + i * cols;
            double sum_dy = 0.0;
            for (size_t j = 0; j < cols; ++j) sum_dy += dy[j];
            for (size_t j = 0; j < cols; ++j) dx[j] += dy[j] - std::exp(lp[j]) * sum_dy;
        }
    })};
}

inline Var sum_all(Tape& t, Var a) {
    double s = 0.0;
    for (double v : t.value(a).data) s += v;
    return Var{t.make_node(Tensor::scalar(s), {a.id}, [](Tape& tp, int self) {
        Node& n = tp.node(self);
        Tensor& ga = tp.grad_ref(n.parents[0]);
        const double g = n.grad.data[0];
        for (double& v : ga.data) v += g;
    })};
}

inline Var mean_all(Tape& t, Var a) {
    const size_t n = t.value(a).numel();
    return scale(t, sum_all(t, a), 1.0 / static_cast<double>(n));
}

inline Var reshape(Tape& t, Var a, std::vector<size_t> shape) {
    const Tensor& av = t.value(a);
    if (Tensor::numel_of(shape) != av.numel()) throw ContractError("reshape: numel mismatch");
    Tensor out(std::move(shape), av.data);
    return Var{t.make_node(std::move(out), {a.id}, [](Tape& tp, int self) {
        Node& n = tp.node(self);
        Tensor& ga = tp.grad_ref(n.parents[0]);
        for (size_t i = 0; i < n.grad.numel(); ++i) ga.data[i] += n.grad.data[i];
    })};
}

// Embedding lookup: rows of `table` selected by ids.
inline Var gather_rows(Tape& t, Var table, std::vector<size_t> ids) {
    const Tensor& tv = t.value(table);
    if (tv.ndim() != 2) throw ContractError("gather_rows: table must be 2-D");
    for (size_t id : ids)
        if (id >= tv.rows()) throw ContractError("gather_rows: index out of range");
    Tensor out = Tensor::zeros({ids.size(), tv.cols()});
    for (size_t r = 0; r < ids.size(); ++r)
        std::copy(tv.row_ptr(ids[r]), tv.row_ptr(ids[r]) + tv.cols(), out.row_ptr(r));
    auto ids_ptr = std::make_shared<std::vector<size_t>>(std::move(ids));
    return Var{t.make_node(std::move(out), {table.id}, [ids_ptr](Tape& tp, int self) {
        Node& n = tp.node(self);
        Tensor& gt = tp.grad_ref(n.parents[0]);
        const size_t cols = n.grad.cols();
        for (size_t r = 0; r < ids_ptr->size(); ++r) {
            const double* g = n.grad.row_ptr(r);
            double* dst = gt.row_ptr((*ids_ptr)[r]);
            for (size_t j = 0; j < cols; ++j) dst[j] += g[j];
        }
    })};
}

// --------------------------------------------------------------- attention

namespace detail {

// Shared forward/backward core for masked attention. Operates on one
// (batch, head) slice at a time through raw pointers with row strides.
// Weights for masked-out positions are exactly 0: forbidden logits get
// kMaskNegInf added, and exp() underflows after max subtraction.
inline void attention_forward_slice(const double* q, const double* k, const double* v,
                                    const Tensor& mask, size_t sq, size_t sk, size_t dk,
                                    size_t dv, size_t stride_q, size_t stride_k, size_t stride_v,
                                    double* out, size_t stride_out,
                                    double* weights /* sq*sk */) {
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
    for (size_t i = 0; i < sq; ++i) {
        double* w = weights + i * sk;
        double mx = -HUGE_VAL;
        for (size_t j = 0; j < sk; ++j) {
            double logit = 0.0;
            const double* qi = q + i * stride_q;
            const double* kj = k + j * stride_k;
            for (size_t c = 0; c < dk; ++c) logit += qi[c] * kj[c];
            logit *= inv_sqrt;
            if (mask.at(i, j) == 0.0) logit += kMaskNegInf;
            w[j] = logit;
            mx = std::max(mx, logit);
        }
        double sum = 0.0;
        for (size_t j = 0; j < sk; ++j) {
            w[j] = std::exp(w[j] - mx);
            sum += w[j];
        }
        for (size_t j = 0; j < sk; ++j) w[j] /= sum;
        double* oi = out + i * stride_out;
        for (size_t c = 0; c < dv; ++c) oi[c] = 0.0;
        for (size_t j = 0; j < sk; ++j) {
            const double wj = w[j];
            if (wj == 0.0) continue;
            const double* vj = v + j * stride_v;
            for (size_t c = 0; c < dv; ++c) oi[c] += wj * vj[c];
        }
    }
}

inline void attention_backward_slice(const double* q, const double* k, const double* v,
                                     const double* weights, const double* dout,
                                     size_t sq, size_t sk, size_t dk, size_t dv,
                                     size_t stride_q, size_t stride_k, size_t stride_v,
                                     size_t stride_out, double* dq, double* dk_out,
                                     double* dv_out) {
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
    std::vector<double> dlogit(sk);
    for (size_t i = 0; i < sq; ++i) {
        const double* w = weights + i * sk;
        const double* doi = dout + i * stride_out;
        // dV and dW
        double dot = 0.0;
        for (size_t j = 0; j < sk; ++j) {
            double dwj = 0.0;
            const double* vj = v + j * stride_v;
            for (size_t c = 0; c < dv; ++c) dwj += doi[c] * vj[c];
            dlogit[j] = dwj;
            dot += w[j] * dwj;
            double* dvj = dv_out + j * stride_v;
            const double wj = w[j];
            if (wj != 0.0)
                for (size_t c = 0; c < dv; ++c) dvj[c] += wj * doi[c];
        }
        // softmax backward, then into Q and K
        const double* qi = q + i * stride_q;
        double* dqi = dq + i * stride_q;
        for (size_t j = 0; j < sk; ++j) {
            const double dl = w[j] * (dlogit[j] - dot) * inv_sqrt;
            if (dl == 0.0) continue;
            const double* kj = k + j * stride_k;
            double* dkj = dk_out + j * stride_k;
            for (size_t c = 0; c < dk; ++c) {
                dqi[c] += dl * kj[c];
                dkj[c] += dl * qi[c];
            }
        }
    }
}

inline void check_mask(const Tensor& mask, size_t sq, size_t sk) {
    if (mask.ndim() != 2 || mask.rows() != sq || mask.cols() != sk)
        throw ContractError("attention: mask shape mismatch");
    for (size_t i = 0; i < sq; ++i) {
        bool any = false;
        for (size_t j = 0; j < sk; ++j)
            if (mask.at(i, j) != 0.0) {
                any = true;
                break;
            }
        if (!any) throw ContractError("attention: mask row with all positions forbidden");
    }
}

}  // namespace detail

// Single-head scaled dot-product attention, Q:(Sq,dk) K:(Sk,dk) V:(Sk,dv),
// mask entries 1=allowed 0=forbidden.
inline Var scaled_dot_product_attention(Tape& t, Var q, Var k, Var v, const Tensor& mask) {
    const Tensor& qv = t.value(q);
    const Tensor& kv = t.value(k);
    const Tensor& vv = t.value(v);
    if (qv.ndim() != 2 || kv.ndim() != 2 || vv.ndim() != 2)
        throw ContractError("attention: inputs must be 2-D");
    if (qv.cols() != kv.cols() || kv.rows() != vv.rows())
        throw ContractError("attention: incompatible shapes");
    const size_t sq = qv.rows(), sk = kv.rows(), dk = qv.cols(), dv = vv.cols();
    detail::check_mask(mask, sq, sk);

    Tensor out = Tensor::zeros({sq, dv});
    auto weights = std::make_shared<std::vector<double>>(sq * sk);
    detail::attention_forward_slice(qv.data.data(), kv.data.data(), vv.data.data(), mask, sq, sk,
                                    dk, dv, dk, dk, dv, out.data.data(), dv, weights->data());
    return Var{t.make_node(std::move(out), {q.id, k.id, v.id},
                           [weights, sq, sk, dk, dv](Tape& tp, int self) {
        Node& n = tp.node(self);
        const Tensor& qv2 = tp.node(n.parents[0]).value;
        const Tensor& kv2 = tp.node(n.parents[1]).value;
        const Tensor& vv2 = tp.node(n.parents[2]).value;
        detail::attention_backward_slice(
            qv2.data.data(), kv2.data.data(), vv2.data.data(), weights->data(),
            n.grad.data.data(), sq, sk, dk, dv, dk, dk, dv, dv,
            tp.grad_ref(n.parents[0]).data.data(), tp.grad_ref(n.parents[1]).data.data(),
            tp.grad_ref(n.parents[2]).data.data());
    })};
}

// Exposes the attention weights of a single-head pass without a tape
// (inference / tests).
inline Tensor attention_weights_plain(const Tensor& q, const Tensor& k, const Tensor& mask) {
    const size_t sq = q.rows(), sk = k.rows(), dk = q.cols();
    detail::check_mask(mask, sq, sk);
    std::vector<double> w(sq * sk);
    Tensor dummy_v = Tensor::zeros({sk, 1});
    Tensor dummy_out = Tensor::zeros({sq, 1});
    detail::attention_forward_slice(q.data.data(), k.data.data(), dummy_v.data.data(), mask, sq,
                                    sk, dk, 1, dk, dk, 1, dummy_out.data.data(), 1, w.data());
    return Tensor({sq, sk}, std::move(w));
}

// Multi-head self-attention over a flattened batch: q,k,v are (B*S, H) with
// H = heads*head_dim; the same (S,S) mask applies to every sample.
inline Var masked_multihead_attention(Tape& t, Var q, Var k, Var v, const Tensor& mask,
                                      size_t batch, size_t seq, size_t heads) {
    const Tensor& qv = t.value(q);
    if (qv.ndim() != 2 || qv.rows() != batch * seq)
        throw ContractError("mha: q must be (batch*seq, hidden)");
    const size_t hidden = qv.cols();
    if (hidden % heads != 0) throw ContractError("mha: hidden not divisible by heads");
    const size_t hd = hidden / heads;
    detail::check_mask(mask, seq, seq);
    if (!t.value(k).same_shape(qv) || !t.value(v).same_shape(qv))
        throw ContractError("mha: q/k/v shape mismatch");

    Tensor out = Tensor::zeros({batch * seq, hidden});
    auto weights = std::make_shared<std::vector<double>>(batch * heads * seq * seq);
    const Tensor& kv = t.value(k);
    const Tensor& vv = t.value(v);
    for (size_t b = 0; b < batch; ++b) {
        for (size_t h = 0; h < heads; ++h) {
            const size_t base = b * seq * hidden + h * hd;
            detail::attention_forward_slice(
                qv.data.data() + base, kv.data.data() + base, vv.data.data() + base, mask, seq,
                seq, hd, hd, hidden, hidden, hidden, out.data.data() + base, hidden,
                weights->data() + (b * heads + h) * seq * seq);
        }
    }
    return Var{t.make_node(std::move(out), {q.id, k.id, v.id},
                           [weights, batch, seq, heads, hd, hidden](Tape& tp, int self) {
        Node& n = tp.node(self);
        const Tensor& qv2 = tp.node(n.parents[0]).value;
        const Tensor& kv2 = tp.node(n.parents[1]).value;
        const Tensor& vv2 = tp.node(n.parents[2]).value;
        Tensor& gq = tp.grad_ref(n.parents[0]);
        Tensor& gk = tp.grad_ref(n.parents[1]);
        Tensor& gv = tp.grad_ref(n.parents[2]);
        for (size_t b = 0; b < batch; ++b) {
            for (size_t h = 0; h < heads; ++h) {
                const size_t base = b * seq * hidden + h * hd;
                detail::attention_backward_slice(
                    qv2.data.data() + base, kv2.data.data() + base, vv2.data.data() + base,
                    weights->data() + (b * heads + h) * seq * seq, n.grad.data.data() + base,
                    seq, seq, hd, hd, hidden, hidden, hidden, hidden, gq.data.data() + base,
                    gk.data.data() + base, gv.data.data() + base);
            }
        }
    })};
}

// Per-sample weighted sum of rows: v is (B*S, d), w is (B, S), out is (B, d).
inline Var segment_weighted_sum(Tape& t, Var v, Var w, size_t batch, size_t seq) {
    const Tensor& vv = t.value(v);
    const Tensor& wv = t.value(w);
    if (vv.ndim() != 2 || vv.rows() != batch * seq)
        throw ContractError("segment_weighted_sum: v must be (batch*seq, d)");
    if (wv.ndim() != 2 || wv.rows() != batch || wv.cols() != seq)
        throw ContractError("segment_weighted_sum: w must be (batch, seq)");
    const size_t d = vv.cols();
    Tensor out = Tensor::zeros({batch, d});
    for (size_t b = 0; b < batch; ++b)
        for (size_t s = 0; s < seq; ++s) {
            const double wbs = wv.at(b, s);
            const double* vr = vv.row_ptr(b * seq + s);
            double* o = out.row_ptr(b);
            for (size_t j = 0; j < d; ++j) o[j] += wbs * vr[j];
        }
    return Var{t.make_node(std::move(out), {v.id, w.id}, [batch, seq](Tape& tp, int self) {
        Node& n = tp.node(self);
        const Tensor& vv2 = tp.node(n.parents[0]).value;
        const Tensor& wv2 = tp.node(n.parents[1]).value;
        Tensor& gv = tp.grad_ref(n.parents[0]);
        Tensor& gw = tp.grad_ref(n.parents[1]);
        const size_t d = vv2.cols();
        for (size_t b = 0; b < batch; ++b)
            for (size_t s = 0; s < seq; ++s) {
                const double* g = n.grad.row_ptr(b);
                const double* vr = vv2.row_ptr(b * seq + s);
                double* gvr = gv.row_ptr(b * seq + s);
                double dw = 0.0;
                const double wbs = wv2.at(b, s);
                for (size_t j = 0; j < d; ++j) {
                    gvr[j] += wbs * g[j];
                    dw += vr[j] * g[j];
                }
                gw.at(b, s) += dw;
            }
    })};
}

// Mean cross-entropy of softmax(logits) against integer labels.
inline Var cross_entropy_mean(Tape& t, Var logits, std::vector<uint16_t> labels) {
    const Tensor& lv = t.value(logits);
    if (lv.ndim() != 2 || lv.rows() != labels.size())
        throw ContractError("cross_entropy: logits/labels mismatch");
    const size_t bsz = lv.rows(), classes = lv.cols();
    for (uint16_t y : labels)
        if (y >= classes) throw ContractError("cross_entropy: label out of range");
    auto probs = std::make_shared<Tensor>(softmax_stable(lv));
    double loss = 0.0;
    for (size_t b = 0; b < bsz; ++b) {
        const double* row = lv.row_ptr(b);
        loss -= row[labels[b]] - log_sum_exp(row, classes);
    }
    loss /= static_cast<double>(bsz);
    auto labels_ptr = std::make_shared<std::vector<uint16_t>>(std::move(labels));
    return Var{t.make_node(Tensor::scalar(loss), {logits.id},
                           [probs, labels_ptr](Tape& tp, int self) {
        Node& n = tp.node(self);
        Tensor& gl = tp.grad_ref(n.parents[0]);
        const double g = n.grad.data[0];
        const size_t bsz2 = probs->rows(), classes2 = probs->cols();
        const double inv_b = 1.0 / static_cast<double>(bsz2);
        for (size_t b = 0; b < bsz2; ++b)
            for (size_t c = 0; c < classes2; ++c) {
                double d = probs->at(b, c);
                if (c == (*labels_ptr)[b]) d -= 1.0;
                gl.at(b, c) += g * d * inv_b;
            }
    })};
}

// Mean temperature-scaled distillation loss:
//   T^2 * mean_b KL(p_T(b) || softmax(logits(b)/T)),
// teacher rows are fixed distributions; zero teacher entries contribute 0.
inline Var kd_loss_mean(Tape& t, Var logits, const Tensor& teacher, double temperature) {
    const Tensor& lv = t.value(logits);
    if (temperature <= 0.0) throw ContractError("kd_loss: temperature must be positive");
    if (!lv.same_shape(teacher)) throw ContractError("kd_loss: teacher/logits shape mismatch");
    const size_t bsz = lv.rows(), classes = lv.cols();
    Tensor tempered = lv;
    for (double& v : tempered.data) v /= temperature;
    auto student = std::make_shared<Tensor>(softmax_stable(tempered));
    double loss = 0.0;
    for (size_t b = 0; b < bsz; ++b) {
        const double* pt = teacher.row_ptr(b);
        const double* z = tempered.row_ptr(b);
        const double lse = log_sum_exp(z, classes);
        for (size_t c = 0; c < classes; ++c) {
            if (pt[c] <= 0.0) continue;
            loss += pt[c] * (std::log(pt[c]) - (z[c] - lse));
        }
    }
    loss *= temperature * temperature / static_cast<double>(bsz);
    auto teacher_copy = std::make_shared<Tensor>(teacher);
    return Var{t.make_node(Tensor::scalar(loss), {logits.id},
                           [student, teacher_copy, temperature](Tape& tp, int self) {
        Node& n = tp.node(self);
        Tensor& gl = tp.grad_ref(n.parents[0]);
        const double g = n.grad.data[0];
        const size_t bsz2 = student->rows(), classes2 = student->cols();
        const double coef = g * temperature / static_cast<double>(bsz2);
        for (size_t b = 0; b < bsz2; ++b) {
            const double* pt = teacher_copy->row_ptr(b);
            double sum_pt = 0.0;
            for (size_t c = 0; c < classes2; ++c) sum_pt += pt[c];
            for (size_t c = 0; c < classes2; ++c)
                gl.at(b, c) += coef * (student->at(b, c) * sum_pt - pt[c]);
        }
    })};
}

}  // namespace falcon::num
