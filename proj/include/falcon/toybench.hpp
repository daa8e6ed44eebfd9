#pragma once

// Built-in synthetic benchmarks.
//
// Image benchmark: four grayscale pattern families (horizontal gradient,
// vertical gradient, bright disk, checkerboard) with per-image jitter and
// pixel noise. Paired with the toy encoder it gives a classification task
// that is learnable from full data but hard for a client that only saw a
// label-skewed slice.
//
// Sequence task: a known ground-truth generative process over token
// sequences (per-class GMM for the image-level token, class-specific
// linear maps plus noise for region tokens) used to measure distribution
// recovery.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "falcon/encoding.hpp"
#include "falcon/image.hpp"
#include "falcon/rng.hpp"
#include "falcon/tensor.hpp"

namespace falcon::toy {

struct ToyImageConfig {
    size_t image_size = 32;
    size_t num_classes = 4;
    double pixel_noise = 18.0;
    double brightness_jitter = 25.0;
};

inline ImageTensor make_toy_image(uint16_t label, const ToyImageConfig& cfg, Rng& rng) {
    const size_t s = cfg.image_size;
    ImageTensor img = ImageTensor::create(s, s, 1);
    const double brightness = rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter);
    const double phase = rng.uniform(0.0, 1.0);
    const double cx = (0.5 + 0.12 * (rng.uniform() - 0.5)) * static_cast<double>(s);
    const double cy = (0.5 + 0.12 * (rng.uniform() - 0.5)) * static_cast<double>(s);
    const double radius = (0.28 + 0.08 * rng.uniform()) * static_cast<double>(s);
    const size_t cell = s / 4;
    const size_t shift = rng.below(cell);

    for (size_t y = 0; y < s; ++y) {
        for (size_t x = 0; x < s; ++x) {
            double v = 0.0;
            switch (label % 4) {
                case 0:  // horizontal ramp with random phase
                    v = 255.0 * std::fmod(phase + static_cast<double>(x) / static_cast<double>(s),
                                          1.0);
                    break;
                case 1:  // vertical ramp
                    v = 255.0 * std::fmod(phase + static_cast<double>(y) / static_cast<double>(s),
                                          1.0);
                    break;
                case 2: {  // bright disk on dark background
                    const double dx = static_cast<double>(x) - cx;
                    const double dy = static_cast<double>(y) - cy;
                    v = (dx * dx + dy * dy <= radius * radius) ? 220.0 : 45.0;
                    break;
                }
                default: {  // checkerboard with shifted phase
                    const size_t bx = ((x + shift) / cell) % 2;
                    const size_t by = ((y + shift) / cell) % 2;
                    v = (bx ^ by) ? 210.0 : 50.0;
                    break;
                }
            }
            v += brightness + cfg.pixel_noise * rng.normal();
            img.at(y, x, 0) = static_cast<uint8_t>(std::min(255.0, std::max(0.0, std::round(v))));
        }
    }
    return img;
}

// Balanced dataset: per_class images of each class, grouped by class in
// label order (partitioning shuffles ownership anyway).
inline ImageDataset make_toy_dataset(size_t per_class, const ToyImageConfig& cfg, Rng& rng) {
    ImageDataset ds;
    for (uint16_t c = 0; c < cfg.num_classes; ++c) {
        for (size_t i = 0; i < per_class; ++i) {
            ds.images.push_back(make_toy_image(c, cfg, rng));
            ds.labels.push_back(c);
        }
    }
    return ds;
}

// ------------------------------------------------- ground-truth sequences

struct SequenceTaskConfig {
    size_t num_classes = 4;
    size_t components = 3;   // GMM components per class for s0
    size_t token_dim = 8;    // d
    size_t region_count = 4; // L
    double region_noise = 0.15;
    uint64_t seed = 77;      // fixes the ground-truth parameters
};

// The known generative process. Parameters are drawn once from cfg.seed;
// sampling consumes the caller's stream.
class SequenceTask {
public:
    explicit SequenceTask(const SequenceTaskConfig& cfg) : cfg_(cfg) {
        Rng rng(cfg.seed);
        const size_t c = cfg.num_classes, k = cfg.components, d = cfg.token_dim;
        for (size_t ci = 0; ci < c; ++ci) {
            ClassParams p;
            p.weights = rng.dirichlet(5.0, k);
            p.means = Tensor::zeros({k, d});
            p.sigmas = Tensor::zeros({k, d});
            // modes a few component-sigmas apart, close enough to the
            // origin for small-init heads to reach
            for (double& v : p.means.data) v = rng.normal() * 1.2;
            for (double& v : p.sigmas.data) v = 0.2 + std::fabs(rng.normal()) * 0.3;
            for (size_t l = 0; l < cfg.region_count; ++l) {
                Tensor a = Tensor::zeros({d, d});
                for (double& v : a.data) v = rng.normal() / std::sqrt(static_cast<double>(d));
                Tensor b = Tensor::zeros({d});
                for (double& v : b.data) v = rng.normal() * 0.5;
                p.region_maps.push_back(std::move(a));
                p.region_biases.push_back(std::move(b));
            }
            classes_.push_back(std::move(p));
        }
    }

    TokenSequence sample(uint16_t label, Rng& rng) const {
        const ClassParams& p = classes_[label];
        const size_t d = cfg_.token_dim;
        TokenSequence s;
        s.label = label;
        s.tokens = Tensor::zeros({1 + cfg_.region_count, d});
        const size_t comp = rng.categorical(p.weights);
        for (size_t j = 0; j < d; ++j)
            s.tokens.at(0, j) = p.means.at(comp, j) + p.sigmas.at(comp, j) * rng.normal();
        for (size_t l = 0; l < cfg_.region_count; ++l) {
            const Tensor& a = p.region_maps[l];
            const Tensor& b = p.region_biases[l];
            for (size_t j = 0; j < d; ++j) {
                double acc = b.data[j];
                for (size_t i = 0; i < d; ++i) acc += s.tokens.at(0, i) * a.at(i, j);
                s.tokens.at(1 + l, j) = acc + cfg_.region_noise * rng.normal();
            }
        }
        return s;
    }

    SequenceDataset sample_dataset(size_t per_class, Rng& rng) const {
        SequenceDataset ds;
        ds.region_count = cfg_.region_count;
        ds.dim = cfg_.token_dim;
        ds.num_classes = cfg_.num_classes;
        for (uint16_t c = 0; c < cfg_.num_classes; ++c)
            for (size_t i = 0; i < per_class; ++i) ds.items.push_back(sample(c, rng));
        return ds;
    }

    // i.i.d. draws from the joint (label uniform, then sequence). Exact
    // class balance would make two-sample U-statistics systematically
    // negative; use this sampler wherever unbiasedness matters.
    SequenceDataset sample_dataset_iid(size_t count, Rng& rng) const {
        SequenceDataset ds;
        ds.region_count = cfg_.region_count;
        ds.dim = cfg_.token_dim;
        ds.num_classes = cfg_.num_classes;
        for (size_t i = 0; i < count; ++i)
            ds.items.push_back(sample(static_cast<uint16_t>(rng.below(cfg_.num_classes)), rng));
        return ds;
    }

    const SequenceTaskConfig& config() const { return cfg_; }

private:
    struct ClassParams {
        std::vector<double> weights;
        Tensor means, sigmas;  // K x d
        std::vector<Tensor> region_maps;    // L of d x d
        std::vector<Tensor> region_biases;  // L of d
    };
    SequenceTaskConfig cfg_;
    std::vector<ClassParams> classes_;
};

}  // namespace falcon::toy
