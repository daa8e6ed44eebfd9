#pragma once

// Hierarchical scale encoding: one global-view token plus L sliding-window
// region tokens per image, through a frozen encoder. The encoder is
// pluggable: a deterministic toy projection, or tokens imported from files
// (precomputed by a real pretrained encoder elsewhere). Also defines the
// FSEQ token-sequence container.

#include <cstdint>
#include <string>
#include <vector>

#include "falcon/common.hpp"
#include "falcon/image.hpp"
#include "falcon/io.hpp"
#include "falcon/rng.hpp"
#include "falcon/tensor.hpp"

namespace falcon {

struct HseConfig {
    size_t global_size = 224;
    size_t window = 224;
    size_t stride = 224;
    size_t token_dim = 768;
};

struct EncoderSpec {
    enum class Kind { ToyProjection, Imported };
    Kind kind = Kind::ToyProjection;
    uint64_t seed = 1;
    size_t intermediate_size = 32;
    size_t dim = 768;
};

// Label plus the (1+L) x d token matrix; row 0 is the image-level token,
// rows 1..L are region tokens in raster window order.
struct TokenSequence {
    uint16_t label = 0;
    Tensor tokens;

    size_t positions() const { return tokens.rows(); }
    size_t dim() const { return tokens.cols(); }
};

struct SequenceDataset {
    size_t region_count = 0;  // L
    size_t dim = 0;           // d
    size_t num_classes = 0;
    std::vector<TokenSequence> items;

    size_t positions() const { return 1 + region_count; }

    void validate_item(const TokenSequence& s) const {
        if (s.tokens.ndim() != 2 || s.tokens.rows() != positions() || s.tokens.cols() != dim)
            throw InvalidInputError("sequence shape inconsistent with dataset (L, d)");
    }
};

// Deterministic stand-in for a frozen pretrained encoder: grayscale the
// patch, bilinear-resize to intermediate_size^2, scale to [0,1], apply a
// fixed random projection, L2-normalize. Identical patches always map to
// identical tokens.
class ToyEncoder {
public:
    explicit ToyEncoder(const EncoderSpec& spec) : spec_(spec) {
        if (spec.kind != EncoderSpec::Kind::ToyProjection)
            throw ContractError("ToyEncoder requires a ToyProjection spec");
        if (spec.dim < 1 || spec.intermediate_size < 1)
            throw InvalidInputError("ToyEncoder: bad spec dimensions");
        const size_t flat = spec.intermediate_size * spec.intermediate_size;
        proj_ = Tensor::zeros({spec.dim, flat});
        Rng rng(spec.seed);
        const double stddev = 1.0 / static_cast<double>(spec.intermediate_size);
        for (double& w : proj_.data) w = rng.normal() * stddev;
    }

    std::vector<double> encode(const ImageTensor& patch) const {
        if (!patch.valid()) throw InvalidInputError("toy_encode: invalid patch");
        const size_t inter = spec_.intermediate_size;
        std::vector<double> gray = to_grayscale(patch);
        std::vector<double> small =
            resize_bilinear_plane(gray, patch.height, patch.width, inter, inter);
        for (double& v : small) v /= 255.0;
        std::vector<double> out(spec_.dim, 0.0);
        for (size_t i = 0; i < spec_.dim; ++i) {
            const double* row = proj_.row_ptr(i);
            double acc = 0.0;
            for (size_t j = 0; j < small.size(); ++j) acc += row[j] * small[j];
            out[i] = acc;
        }
        double norm = 0.0;
        for (double v : out) norm += v * v;
        norm = std::sqrt(norm);
        if (norm < 1e-12) return std::vector<double>(spec_.dim, 0.0);
        for (double& v : out) v /= norm;
        return out;
    }

    const EncoderSpec& spec() const { return spec_; }

private:
    EncoderSpec spec_;
    Tensor proj_;
};

inline TokenSequence hse_encode(const ImageTensor& image, const HseConfig& cfg,
                                const ToyEncoder& encoder, uint16_t label) {
    if (!image.valid()) throw InvalidInputError("hse_encode: invalid image");
    if (cfg.window > image.height || cfg.window > image.width)
        throw InvalidInputError("hse_encode: window larger than image");
    const ImageTensor global = resize_global(image, cfg.global_size);
    const std::vector<ImageTensor> patches = partition_windows(image, cfg.window, cfg.stride);
    const size_t L = patches.size();
    TokenSequence seq;
    seq.label = label;
    seq.tokens = Tensor::zeros({1 + L, cfg.token_dim});
    const std::vector<double> g = encoder.encode(global);
    std::copy(g.begin(), g.end(), seq.tokens.row_ptr(0));
    for (size_t l = 0; l < L; ++l) {
        const std::vector<double> t = encoder.encode(patches[l]);
        std::copy(t.begin(), t.end(), seq.tokens.row_ptr(1 + l));
    }
    return seq;
}

inline SequenceDataset hse_encode_dataset(const ImageDataset& ds, const HseConfig& cfg,
                                          const ToyEncoder& encoder, size_t num_classes) {
    if (ds.images.empty()) throw InvalidInputError("hse_encode_dataset: empty dataset");
    SequenceDataset out;
    out.dim = cfg.token_dim;
    out.num_classes = num_classes;
    out.region_count =
        window_count(ds.images[0].height, ds.images[0].width, cfg.window, cfg.stride);
    out.items.reserve(ds.images.size());
    for (size_t i = 0; i < ds.images.size(); ++i) {
        TokenSequence s = hse_encode(ds.images[i], cfg, encoder, ds.labels[i]);
        out.validate_item(s);
        out.items.push_back(std::move(s));
    }
    return out;
}

// ------------------------------------------------------------- FSEQ format
// magic "FSEQ", u16 version=1, u32 count, u16 L, u16 d, u16 num_classes,
// then per record: u16 label, (1+L)*d f32 values (row-major).

constexpr uint16_t kFseqVersion = 1;

inline std::vector<uint8_t> serialize_sequences(const SequenceDataset& ds) {
    io::ByteWriter w;
    w.magic("FSEQ");
    w.u16(kFseqVersion);
    w.u32(static_cast<uint32_t>(ds.items.size()));
    w.u16(static_cast<uint16_t>(ds.region_count));
    w.u16(static_cast<uint16_t>(ds.dim));
    w.u16(static_cast<uint16_t>(ds.num_classes));
    for (const auto& s : ds.items) {
        ds.validate_item(s);
        w.u16(s.label);
        for (double v : s.tokens.data) w.f32(static_cast<float>(v));
    }
    return w.buffer();
}

inline SequenceDataset parse_sequences(io::ByteReader& r) {
    r.expect_magic("FSEQ");
    const uint16_t version = r.u16();
    if (version != kFseqVersion)
        throw FormatError("fseq: unsupported version " + std::to_string(version));
    const uint32_t count = r.u32();
    SequenceDataset ds;
    ds.region_count = r.u16();
    ds.dim = r.u16();
    ds.num_classes = r.u16();
    if (ds.dim == 0) throw FormatError("fseq: token dim must be positive");
    ds.items.reserve(count);
    const size_t numel = ds.positions() * ds.dim;
    for (uint32_t i = 0; i < count; ++i) {
        TokenSequence s;
        s.label = r.u16();
        s.tokens = Tensor::zeros({ds.positions(), ds.dim});
        for (size_t j = 0; j < numel; ++j) s.tokens.data[j] = static_cast<double>(r.f32());
        ds.items.push_back(std::move(s));
    }
    return ds;
}

inline SequenceDataset parse_sequences(const std::vector<uint8_t>& bytes) {
    io::ByteReader r(bytes);
    SequenceDataset ds = parse_sequences(r);
    r.require_done();
    return ds;
}

inline void write_sequences(const std::string& path, const SequenceDataset& ds) {
    io::write_file(path, serialize_sequences(ds));
}

inline SequenceDataset read_sequences(const std::string& path) {
    return parse_sequences(io::read_file(path));
}

}  // namespace falcon
