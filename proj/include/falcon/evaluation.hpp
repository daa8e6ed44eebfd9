#pragma once

// Quantitative evaluation: unbiased RBF-kernel MMD^2 between sequence
// sets, a diagonal-covariance EM-GMM (k-means++ initialized) backing the
// feature-statistics baseline, and the line-delimited metrics report.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "falcon/classifier.hpp"
#include "falcon/common.hpp"
#include "falcon/encoding.hpp"
#include "falcon/io.hpp"
#include "falcon/rng.hpp"
#include "falcon/tensor.hpp"

namespace falcon::eval {

// ------------------------------------------------------------------- MMD

struct MmdConfig {
    enum class Bandwidth { MedianHeuristic, Fixed };
    Bandwidth bandwidth = Bandwidth::MedianHeuristic;
    double fixed_sigma2 = 1.0;  // sigma^2 when Fixed
    size_t max_samples = 0;     // 0 = use every sample; otherwise first n per side
};

// Rows of a (1+L) x d sequence concatenated into one vector per sample.
inline Tensor flatten_sequences(const SequenceDataset& ds, size_t limit = 0) {
    const size_t n = (limit == 0) ? ds.items.size() : std::min(limit, ds.items.size());
    const size_t dim = ds.positions() * ds.dim;
    Tensor out = Tensor::zeros({n, dim});
    for (size_t i = 0; i < n; ++i)
        std::copy(ds.items[i].tokens.data.begin(), ds.items[i].tokens.data.end(), out.row_ptr(i));
    return out;
}

// Median of pooled pairwise squared distances over the union of X and Y
// (all i < j pairs). Deterministic: lower middle element of the sorted
// pair list.
inline double median_heuristic_sigma2(const Tensor& x, const Tensor& y) {
    const size_t dim = x.cols();
    std::vector<const double*> rows;
    for (size_t i = 0; i < x.rows(); ++i) rows.push_back(x.row_ptr(i));
    for (size_t i = 0; i < y.rows(); ++i) rows.push_back(y.row_ptr(i));
    std::vector<double> d2;
    d2.reserve(rows.size() * (rows.size() - 1) / 2);
    for (size_t i = 0; i < rows.size(); ++i)
        for (size_t j = i + 1; j < rows.size(); ++j)
            d2.push_back(squared_distance(rows[i], rows[j], dim));
    const size_t mid = d2.size() / 2;
    std::nth_element(d2.begin(), d2.begin() + static_cast<long>(mid), d2.end());
    return std::max(d2[mid], 1e-12);
}

// Unbiased MMD^2 U-statistic with k(a,b) = exp(-|a-b|^2 / (2 sigma^2)).
// May be slightly negative under the null; reported as-is. Arguments are
// canonicalized by content first, so mmd_rbf(X, Y) == mmd_rbf(Y, X)
// bitwise despite floating-point summation order.
inline double mmd_rbf(const Tensor& x_in, const Tensor& y_in, const MmdConfig& cfg = {}) {
    if (x_in.ndim() != 2 || y_in.ndim() != 2 || x_in.cols() != y_in.cols())
        throw InvalidInputError("mmd_rbf: sample sets must share dimensionality");
    if (x_in.rows() < 2 || y_in.rows() < 2)
        throw InvalidInputError("mmd_rbf: need at least 2 samples per side");
    const bool swap =
        y_in.rows() < x_in.rows() ||
        (y_in.rows() == x_in.rows() &&
         std::lexicographical_compare(y_in.data.begin(), y_in.data.end(), x_in.data.begin(),
                                      x_in.data.end()));
    const Tensor& x = swap ? y_in : x_in;
    const Tensor& y = swap ? x_in : y_in;
    const size_t m = x.rows(), n = y.rows(), dim = x.cols();

    const double sigma2 = cfg.bandwidth == MmdConfig::Bandwidth::Fixed
                              ? cfg.fixed_sigma2
                              : median_heuristic_sigma2(x, y);
    if (sigma2 <= 0.0) throw InvalidInputError("mmd_rbf: bandwidth must be positive");
    const double inv = 1.0 / (2.0 * sigma2);

    double kxx = 0.0;
    for (size_t i = 0; i < m; ++i)
        for (size_t j = i + 1; j < m; ++j)
            kxx += std::exp(-squared_distance(x.row_ptr(i), x.row_ptr(j), dim) * inv);
    kxx = 2.0 * kxx / (static_cast<double>(m) * static_cast<double>(m - 1));

    double kyy = 0.0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j)
            kyy += std::exp(-squared_distance(y.row_ptr(i), y.row_ptr(j), dim) * inv);
    kyy = 2.0 * kyy / (static_cast<double>(n) * static_cast<double>(n - 1));

    double kxy = 0.0;
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j)
            kxy += std::exp(-squared_distance(x.row_ptr(i), y.row_ptr(j), dim) * inv);
    kxy /= static_cast<double>(m) * static_cast<double>(n);

    return kxx + kyy - 2.0 * kxy;
}

inline double mmd_between(const SequenceDataset& a, const SequenceDataset& b,
                          const MmdConfig& cfg = {}) {
    return mmd_rbf(flatten_sequences(a, cfg.max_samples), flatten_sequences(b, cfg.max_samples),
                   cfg);
}

// ---------------------------------------------------------------- EM-GMM

struct GmmBaselineConfig {
    size_t components = 20;  // K
    size_t max_iters = 100;
    double tol = 1e-6;       // stop when mean log-likelihood improves less
    double var_floor = 1e-6;
    size_t kmeans_iters = 10;

    void validate() const {
        if (components < 1) throw InvalidInputError("GmmBaselineConfig: K must be >= 1");
        if (tol <= 0.0) throw InvalidInputError("GmmBaselineConfig: tolerance must be > 0");
        if (var_floor <= 0.0) throw InvalidInputError("GmmBaselineConfig: variance floor > 0");
    }
};

struct DiagGmm {
    std::vector<double> weights;  // K
    Tensor means;                 // K x dim
    Tensor vars;                  // K x dim
};

namespace detail {

// k-means++ seeding followed by Lloyd iterations; empty clusters are
// re-seeded at the point farthest from its current center.
inline std::vector<size_t> kmeans(const Tensor& data, size_t k, size_t iters, Rng& rng,
                                  Tensor& centers) {
    const size_t n = data.rows(), dim = data.cols();
    centers = Tensor::zeros({k, dim});
    std::vector<double> min_d2(n, HUGE_VAL);
    size_t first = static_cast<size_t>(rng.below(n));
    std::copy(data.row_ptr(first), data.row_ptr(first) + dim, centers.row_ptr(0));
    for (size_t c = 1; c < k; ++c) {
        for (size_t i = 0; i < n; ++i)
            min_d2[i] = std::min(min_d2[i],
                                 squared_distance(data.row_ptr(i), centers.row_ptr(c - 1), dim));
        double total = 0.0;
        for (double v : min_d2) total += v;
        size_t pick = 0;
        if (total > 0.0) {
            double r = rng.uniform() * total;
            for (size_t i = 0; i < n; ++i) {
                r -= min_d2[i];
                if (r < 0.0) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = static_cast<size_t>(rng.below(n));
        }
        std::copy(data.row_ptr(pick), data.row_ptr(pick) + dim, centers.row_ptr(c));
    }

    std::vector<size_t> assign(n, 0);
    for (size_t it = 0; it < iters; ++it) {
        bool changed = false;
        for (size_t i = 0; i < n; ++i) {
            size_t best = 0;
            double best_d = HUGE_VAL;
            for (size_t c = 0; c < k; ++c) {
                const double d2 = squared_distance(data.row_ptr(i), centers.row_ptr(c), dim);
                if (d2 < best_d) {
                    best_d = d2;
                    best = c;
                }
            }
            if (assign[i] != best) changed = true;
            assign[i] = best;
        }
        std::vector<size_t> counts(k, 0);
        Tensor sums = Tensor::zeros({k, dim});
        for (size_t i = 0; i < n; ++i) {
            ++counts[assign[i]];
            for (size_t jd = 0; jd < dim; ++jd) sums.at(assign[i], jd) += data.at(i, jd);
        }
        for (size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) {
                // farthest point from its own center takes over this cluster
                size_t far = 0;
                double far_d = -1.0;
                for (size_t i = 0; i < n; ++i) {
                    const double d2 =
                        squared_distance(data.row_ptr(i), centers.row_ptr(assign[i]), dim);
                    if (d2 > far_d) {
                        far_d = d2;
                        far = i;
                    }
                }
                std::copy(data.row_ptr(far), data.row_ptr(far) + dim, centers.row_ptr(c));
                assign[far] = c;
                changed = true;
                continue;
            }
            for (size_t jd = 0; jd < dim; ++jd)
                centers.at(c, jd) = sums.at(c, jd) / static_cast<double>(counts[c]);
        }
        if (!changed) break;
    }
    return assign;
}

}  // namespace detail

// Diagonal-covariance EM. The per-iteration log-likelihood is asserted
// non-decreasing (1e-9 slack); returns after convergence or max_iters.
inline DiagGmm fit_gmm_em(const Tensor& data, const GmmBaselineConfig& cfg, Rng& rng,
                          std::vector<double>* loglik_trace = nullptr) {
    cfg.validate();
    if (data.ndim() != 2) throw InvalidInputError("fit_gmm_em: data must be 2-D");
    const size_t n = data.rows(), dim = data.cols(), k = cfg.components;
    if (n < k) throw InvalidInputError("fit_gmm_em: need at least K samples");

    DiagGmm g;
    g.weights.assign(k, 0.0);
    g.vars = Tensor::zeros({k, dim});
    std::vector<size_t> assign = detail::kmeans(data, k, cfg.kmeans_iters, rng, g.means);
    std::vector<size_t> counts(k, 0);
    for (size_t i = 0; i < n; ++i) ++counts[assign[i]];
    for (size_t c = 0; c < k; ++c) {
        g.weights[c] = static_cast<double>(counts[c]) / static_cast<double>(n);
        for (size_t i = 0; i < n; ++i) {
            if (assign[i] != c) continue;
            for (size_t jd = 0; jd < dim; ++jd) {
                const double diff = data.at(i, jd) - g.means.at(c, jd);
                g.vars.at(c, jd) += diff * diff;
            }
        }
        for (size_t jd = 0; jd < dim; ++jd)
            g.vars.at(c, jd) =
                std::max(counts[c] > 0 ? g.vars.at(c, jd) / static_cast<double>(counts[c]) : 1.0,
                         cfg.var_floor);
    }

    Tensor resp = Tensor::zeros({n, k});
    std::vector<double> comp(k);
    double prev_ll = -HUGE_VAL;
    for (size_t iter = 0; iter < cfg.max_iters; ++iter) {
        // E-step in the log domain
        double ll = 0.0;
        for (size_t i = 0; i < n; ++i) {
            for (size_t c = 0; c < k; ++c) {
                double lp = g.weights[c] > 0.0 ? std::log(g.weights[c]) : -HUGE_VAL;
                for (size_t jd = 0; jd < dim; ++jd) {
                    const double var = g.vars.at(c, jd);
                    const double diff = data.at(i, jd) - g.means.at(c, jd);
                    lp -= 0.5 * (std::log(2.0 * M_PI * var) + diff * diff / var);
                }
                comp[c] = lp;
            }
            const double lse = log_sum_exp(comp.data(), k);
            ll += lse;
            for (size_t c = 0; c < k; ++c) resp.at(i, c) = std::exp(comp[c] - lse);
        }
        if (loglik_trace) loglik_trace->push_back(ll);
        if (ll < prev_ll - 1e-9)
            throw ContractError("fit_gmm_em: log-likelihood decreased");
        const bool converged =
            iter > 0 && (ll - prev_ll) / static_cast<double>(n) < cfg.tol;
        prev_ll = ll;

        // M-step
        for (size_t c = 0; c < k; ++c) {
            double nc = 0.0;
            for (size_t i = 0; i < n; ++i) nc += resp.at(i, c);
            if (nc < 1e-12) {
                g.weights[c] = 0.0;
                continue;
            }
            g.weights[c] = nc / static_cast<double>(n);
            for (size_t jd = 0; jd < dim; ++jd) {
                double mean = 0.0;
                for (size_t i = 0; i < n; ++i) mean += resp.at(i, c) * data.at(i, jd);
                mean /= nc;
                double var = 0.0;
                for (size_t i = 0; i < n; ++i) {
                    const double diff = data.at(i, jd) - mean;
                    var += resp.at(i, c) * diff * diff;
                }
                g.means.at(c, jd) = mean;
                g.vars.at(c, jd) = std::max(var / nc, cfg.var_floor);
            }
        }
        if (converged) break;
    }
    return g;
}

inline std::vector<double> gmm_sample(const DiagGmm& g, Rng& rng) {
    const size_t c = rng.categorical(g.weights);
    const size_t dim = g.means.cols();
    std::vector<double> x(dim);
    for (size_t jd = 0; jd < dim; ++jd)
        x[jd] = g.means.at(c, jd) + std::sqrt(g.vars.at(c, jd)) * rng.normal();
    return x;
}

// ------------------------------------------------------ baseline uploads
// Per-class GMMs over flattened sequences, serialized as the FGMM block:
// magic "FGMM", u16 version=1, u32 client id, u16 dim, u16 n_classes,
// then per class: u16 label, u16 K, u32 resample count,
// K f32 weights, K*dim f32 means, K*dim f32 vars.

constexpr uint16_t kFgmmVersion = 1;

struct ClassGmm {
    uint16_t label = 0;
    uint32_t resample_count = 0;
    DiagGmm gmm;
};

struct GmmUpload {
    uint32_t client_id = 0;
    size_t dim = 0;  // flattened (1+L)*d
    std::vector<ClassGmm> per_class;
};

inline std::vector<uint8_t> serialize_gmm_upload(const GmmUpload& up) {
    io::ByteWriter w;
    w.magic("FGMM");
    w.u16(kFgmmVersion);
    w.u32(up.client_id);
    w.u16(static_cast<uint16_t>(up.dim));
    w.u16(static_cast<uint16_t>(up.per_class.size()));
    for (const auto& cg : up.per_class) {
        w.u16(cg.label);
        w.u16(static_cast<uint16_t>(cg.gmm.weights.size()));
        w.u32(cg.resample_count);
        for (double v : cg.gmm.weights) w.f32(static_cast<float>(v));
        for (double v : cg.gmm.means.data) w.f32(static_cast<float>(v));
        for (double v : cg.gmm.vars.data) w.f32(static_cast<float>(v));
    }
    return w.buffer();
}

// ------------------------------------------------------------- reporting
// Line-delimited JSON records; schema_version pins the field layout.
// Timing fields are always named "wall_ms" so deterministic comparisons
// can strip them.

constexpr int kReportSchemaVersion = 1;

using Json = nlohmann::json;

inline void emit_report(const std::string& path, const std::vector<Json>& records) {
    std::string text;
    for (const auto& r : records) text += r.dump() + "\n";
    io::write_file(path, std::vector<uint8_t>(text.begin(), text.end()));
}

inline std::vector<Json> read_report(const std::string& path) {
    const std::vector<uint8_t> bytes = io::read_file(path);
    std::vector<Json> out;
    std::string line;
    for (uint8_t b : bytes) {
        if (b == '\n') {
            if (!line.empty()) out.push_back(Json::parse(line));
            line.clear();
        } else {
            line += static_cast<char>(b);
        }
    }
    if (!line.empty()) out.push_back(Json::parse(line));
    return out;
}

// Strips volatile timing fields for determinism comparisons.
inline Json strip_timing(Json j) {
    j.erase("wall_ms");
    if (j.contains("phases")) j.erase("phases");
    return j;
}

}  // namespace falcon::eval
