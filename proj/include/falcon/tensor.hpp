#pragma once

// Dense row-major f64 tensors plus the plain (non-differentiable) math
// kernels. The autodiff layer reuses these kernels inside its nodes so the
// tape path and the inference path cannot diverge numerically.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "falcon/common.hpp"

namespace falcon {

struct Tensor {
    std::vector<size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<size_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel_of(shape) != data.size())
            throw ContractError("Tensor: shape/data size mismatch");
    }

    static size_t numel_of(const std::vector<size_t>& s) {
        size_t n = 1;
        for (size_t dim : s) n *= dim;
        return n;
    }

    static Tensor zeros(std::vector<size_t> s) {
        Tensor t;
        t.shape = std::move(s);
        t.data.assign(numel_of(t.shape), 0.0);
        return t;
    }

    static Tensor full(std::vector<size_t> s, double v) {
        Tensor t = zeros(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor row_vector(std::vector<double> v) {
        const size_t n = v.size();
        return Tensor({n}, std::move(v));
    }

    size_t numel() const { return data.size(); }
    size_t ndim() const { return shape.size(); }

    size_t rows() const {
        if (shape.size() != 2) throw ContractError("Tensor::rows: not 2-D");
        return shape[0];
    }
    size_t cols() const {
        if (shape.size() != 2) throw ContractError("Tensor::cols: not 2-D");
        return shape[1];
    }

    double& at(size_t i) { return data[i]; }
    double at(size_t i) const { return data[i]; }
    double& at(size_t i, size_t j) { return data[i * shape[1] + j]; }
    double at(size_t i, size_t j) const { return data[i * shape[1] + j]; }

    const double* row_ptr(size_t i) const { return data.data() + i * shape[1]; }
    double* row_ptr(size_t i) { return data.data() + i * shape[1]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double item() const {
        if (numel() != 1) throw ContractError("Tensor::item: not a scalar");
        return data[0];
    }
};

inline std::string shape_str(const Tensor& t) {
    std::string s = "(";
    for (size_t i = 0; i < t.shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(t.shape[i]);
    }
    return s + ")";
}

// ---------------------------------------------------------------- kernels

// C = A·B for 2-D inputs. ikj loop order keeps both streams contiguous.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2) throw ContractError("matmul: inputs must be 2-D");
    if (a.cols() != b.rows())
        throw ContractError("matmul: inner dims differ: " + shape_str(a) + " x " + shape_str(b));
    const size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor c = Tensor::zeros({m, n});
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a.row_ptr(i);
        double* crow = c.row_ptr(i);
        for (size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b.row_ptr(p);
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

inline Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) throw ContractError("transpose: input must be 2-D");
    const size_t m = a.rows(), n = a.cols();
    Tensor t = Tensor::zeros({n, m});
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) t.at(j, i) = a.at(i, j);
    return t;
}

// Numerically stable softmax over the last axis (max subtraction).
// Rejects non-finite input; output rows sum to 1.
inline Tensor softmax_stable(const Tensor& x) {
    if (!x.all_finite()) throw InvalidInputError("softmax_stable: non-finite input");
    if (x.ndim() != 1 && x.ndim() != 2)
        throw ContractError("softmax_stable: input must be 1-D or 2-D");
    const size_t cols = x.ndim() == 1 ? x.shape[0] : x.shape[1];
    const size_t rows = x.numel() / cols;
    if (cols == 0) throw ContractError("softmax_stable: empty axis");
    Tensor out = Tensor::zeros(x.shape);
    for (size_t i = 0; i < rows; ++i) {
        const double* in = x.data.data() + i * cols;
        double* o = out.data.data() + i * cols;
        double mx = in[0];
        for (size_t j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (size_t j = 0; j < cols; ++j) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        for (size_t j = 0; j < cols; ++j) o[j] /= sum;
    }
    return out;
}

// log(sum(exp(v))) over a contiguous range.
inline double log_sum_exp(const double* v, size_t n) {
    double mx = v[0];
    for (size_t i = 1; i < n; ++i) mx = std::max(mx, v[i]);
    double sum = 0.0;
    for (size_t i = 0; i < n; ++i) sum += std::exp(v[i] - mx);
    return mx + std::log(sum);
}

// GELU, tanh approximation: 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715 x^3))).
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

inline double gelu_scalar(double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

inline double gelu_grad_scalar(double x) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    const double t = std::tanh(u);
    const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

// Row-wise layer norm with population variance: (x - mean) / sqrt(var + eps).
constexpr double kLayerNormEps = 1e-5;

inline Tensor layer_norm_plain(const Tensor& x, double eps = kLayerNormEps) {
    if (x.ndim() != 2 && x.ndim() != 1) throw ContractError("layer_norm: input must be 1-D or 2-D");
    const size_t cols = x.ndim() == 1 ? x.shape[0] : x.shape[1];
    const size_t rows = x.numel() / cols;
    Tensor out = Tensor::zeros(x.shape);
    for (size_t i = 0; i < rows; ++i) {
        const double* in = x.data.data() + i * cols;
        double* o = out.data.data() + i * cols;
        double mean = 0.0;
        for (size_t j = 0; j < cols; ++j) mean += in[j];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (size_t j = 0; j < cols; ++j) var += (in[j] - mean) * (in[j] - mean);
        var /= static_cast<double>(cols);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (size_t j = 0; j < cols; ++j) o[j] = (in[j] - mean) * inv;
    }
    return out;
}

inline double squared_distance(const double* a, const double* b, size_t n) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

}  // namespace falcon
