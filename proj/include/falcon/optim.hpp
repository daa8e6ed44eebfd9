#pragma once

// Adam / AdamW with bias correction. AdamW applies decoupled weight decay
// (p -= lr * wd * p) on top of the moment update.

#include <cmath>
#include <vector>

#include "falcon/common.hpp"
#include "falcon/tensor.hpp"

namespace falcon::num {

enum class OptKind { Adam, AdamW };

struct OptimizerState {
    OptKind kind = OptKind::Adam;
    size_t step_count = 0;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // AdamW only
    std::vector<Tensor> m;
    std::vector<Tensor> v;

    static OptimizerState adam(double lr) {
        OptimizerState s;
        s.kind = OptKind::Adam;
        s.lr = lr;
        return s;
    }

    static OptimizerState adamw(double lr, double weight_decay) {
        OptimizerState s;
        s.kind = OptKind::AdamW;
        s.lr = lr;
        s.weight_decay = weight_decay;
        return s;
    }

    void init(const std::vector<Tensor*>& params) {
        m.clear();
        v.clear();
        for (const Tensor* p : params) {
            m.push_back(Tensor::zeros(p->shape));
            v.push_back(Tensor::zeros(p->shape));
        }
        step_count = 0;
    }

    void step(std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
        if (params.size() != grads.size() || params.size() != m.size())
            throw ContractError("optimizer_step: params/grads/state size mismatch");
        ++step_count;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
        for (size_t i = 0; i < params.size(); ++i) {
            Tensor& p = *params[i];
            const Tensor& g = grads[i];
            if (!p.same_shape(g) || !p.same_shape(m[i]))
                throw ContractError("optimizer_step: gradient shape mismatch");
            for (size_t j = 0; j < p.numel(); ++j) {
                m[i].data[j] = beta1 * m[i].data[j] + (1.0 - beta1) * g.data[j];
                v[i].data[j] = beta2 * v[i].data[j] + (1.0 - beta2) * g.data[j] * g.data[j];
                const double mhat = m[i].data[j] / bc1;
                const double vhat = v[i].data[j] / bc2;
                double update = lr * mhat / (std::sqrt(vhat) + eps);
                if (kind == OptKind::AdamW) update += lr * weight_decay * p.data[j];
                p.data[j] -= update;
            }
        }
    }
};

}  // namespace falcon::num
