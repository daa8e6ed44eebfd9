#pragma once

// 8-bit images, bilinear resizing, sliding-window partitioning, and the
// image ingestion formats (binary PPM/PGM plus the FIMG raw container with
// a u16 labels sidecar).

#include <cctype>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "falcon/common.hpp"
#include "falcon/io.hpp"

namespace falcon {

struct ImageTensor {
    size_t height = 0;
    size_t width = 0;
    size_t channels = 0;  // 1 or 3
    std::vector<uint8_t> pixels;  // row-major, interleaved channels

    static ImageTensor create(size_t h, size_t w, size_t c) {
        if (h < 1 || w < 1 || (c != 1 && c != 3))
            throw InvalidInputError("ImageTensor: invalid dimensions");
        ImageTensor img;
        img.height = h;
        img.width = w;
        img.channels = c;
        img.pixels.assign(h * w * c, 0);
        return img;
    }

    uint8_t at(size_t y, size_t x, size_t c) const {
        return pixels[(y * width + x) * channels + c];
    }
    uint8_t& at(size_t y, size_t x, size_t c) {
        return pixels[(y * width + x) * channels + c];
    }

    bool valid() const {
        return height >= 1 && width >= 1 && (channels == 1 || channels == 3) &&
               pixels.size() == height * width * channels;
    }
};

namespace detail {

// Bilinear sample of one channel at fractional (y, x) with half-pixel
// (corner-aligned-false) source coordinates already applied by the caller.
template <class GetFn>
inline double bilinear_at(GetFn get, size_t h, size_t w, double sy, double sx) {
    sy = std::min(std::max(sy, 0.0), static_cast<double>(h - 1));
    sx = std::min(std::max(sx, 0.0), static_cast<double>(w - 1));
    const size_t y0 = static_cast<size_t>(sy);
    const size_t x0 = static_cast<size_t>(sx);
    const size_t y1 = std::min(y0 + 1, h - 1);
    const size_t x1 = std::min(x0 + 1, w - 1);
    const double fy = sy - static_cast<double>(y0);
    const double fx = sx - static_cast<double>(x0);
    const double top = get(y0, x0) * (1.0 - fx) + get(y0, x1) * fx;
    const double bot = get(y1, x0) * (1.0 - fx) + get(y1, x1) * fx;
    return top * (1.0 - fy) + bot * fy;
}

}  // namespace detail

// Bilinear resize with the corner-aligned-false convention:
// src = (dst + 0.5) * scale - 0.5. Resizing to the same size is an exact
// copy (integer source coordinates).
inline ImageTensor resize_bilinear(const ImageTensor& img, size_t out_h, size_t out_w) {
    if (!img.valid()) throw InvalidInputError("resize: degenerate input image");
    if (out_h < 1 || out_w < 1) throw InvalidInputError("resize: output size must be >= 1");
    ImageTensor out = ImageTensor::create(out_h, out_w, img.channels);
    const double sy_scale = static_cast<double>(img.height) / static_cast<double>(out_h);
    const double sx_scale = static_cast<double>(img.width) / static_cast<double>(out_w);
    for (size_t y = 0; y < out_h; ++y) {
        const double sy = (static_cast<double>(y) + 0.5) * sy_scale - 0.5;
        for (size_t x = 0; x < out_w; ++x) {
            const double sx = (static_cast<double>(x) + 0.5) * sx_scale - 0.5;
            for (size_t c = 0; c < img.channels; ++c) {
                const double v = detail::bilinear_at(
                    [&](size_t yy, size_t xx) {
                        return static_cast<double>(img.at(yy, xx, c));
                    },
                    img.height, img.width, sy, sx);
                const double r = std::llround(v);
                out.at(y, x, c) = static_cast<uint8_t>(std::min(255.0, std::max(0.0, r)));
            }
        }
    }
    return out;
}

// Square global view used by hierarchical scale encoding.
inline ImageTensor resize_global(const ImageTensor& img, size_t size) {
    return resize_bilinear(img, size, size);
}

// Float-valued bilinear resize of a single-channel plane (used by the toy
// encoder, which works in floating point after grayscale conversion).
inline std::vector<double> resize_bilinear_plane(const std::vector<double>& plane, size_t h,
                                                 size_t w, size_t out_h, size_t out_w) {
    std::vector<double> out(out_h * out_w);
    const double sy_scale = static_cast<double>(h) / static_cast<double>(out_h);
    const double sx_scale = static_cast<double>(w) / static_cast<double>(out_w);
    for (size_t y = 0; y < out_h; ++y) {
        const double sy = (static_cast<double>(y) + 0.5) * sy_scale - 0.5;
        for (size_t x = 0; x < out_w; ++x) {
            const double sx = (static_cast<double>(x) + 0.5) * sx_scale - 0.5;
            out[y * out_w + x] = detail::bilinear_at(
                [&](size_t yy, size_t xx) { return plane[yy * w + xx]; }, h, w, sy, sx);
        }
    }
    return out;
}

// Rec.601 luma.
inline std::vector<double> to_grayscale(const ImageTensor& img) {
    std::vector<double> plane(img.height * img.width);
    for (size_t y = 0; y < img.height; ++y)
        for (size_t x = 0; x < img.width; ++x) {
            if (img.channels == 1) {
                plane[y * img.width + x] = static_cast<double>(img.at(y, x, 0));
            } else {
                plane[y * img.width + x] = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) +
                                           0.114 * img.at(y, x, 2);
            }
        }
    return plane;
}

// Sliding-window patches in raster order (top-to-bottom, left-to-right).
// Trailing pixels that do not fit a full window are dropped.
inline std::vector<ImageTensor> partition_windows(const ImageTensor& img, size_t window,
                                                  size_t stride) {
    if (!img.valid()) throw InvalidInputError("partition_windows: degenerate image");
    if (stride < 1) throw InvalidInputError("partition_windows: stride must be >= 1");
    if (window < 1 || window > img.height || window > img.width)
        throw InvalidInputError("partition_windows: window larger than image");
    const size_t ny = (img.height - window) / stride + 1;
    const size_t nx = (img.width - window) / stride + 1;
    std::vector<ImageTensor> patches;
    patches.reserve(ny * nx);
    for (size_t ty = 0; ty < ny; ++ty) {
        for (size_t tx = 0; tx < nx; ++tx) {
            ImageTensor p = ImageTensor::create(window, window, img.channels);
            const size_t oy = ty * stride, ox = tx * stride;
            for (size_t y = 0; y < window; ++y)
                for (size_t x = 0; x < window; ++x)
                    for (size_t c = 0; c < img.channels; ++c)
                        p.at(y, x, c) = img.at(oy + y, ox + x, c);
            patches.push_back(std::move(p));
        }
    }
    return patches;
}

inline size_t window_count(size_t h, size_t w, size_t window, size_t stride) {
    if (window > h || window > w) throw InvalidInputError("window_count: window larger than image");
    return ((h - window) / stride + 1) * ((w - window) / stride + 1);
}

// ----------------------------------------------------------- PPM / PGM

namespace detail {

inline int next_pnm_token(io::ByteReader& r) {
    // skips whitespace and '#' comments, returns a non-negative integer
    std::string tok;
    for (;;) {
        if (r.remaining() == 0) throw FormatError("pnm: truncated header");
        char c = static_cast<char>(r.u8());
        if (c == '#') {
            while (r.remaining() > 0 && static_cast<char>(r.u8()) != '\n') {
            }
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!tok.empty()) break;
            continue;
        }
        if (!std::isdigit(static_cast<unsigned char>(c))) throw FormatError("pnm: bad header token");
        tok += c;
    }
    return std::stoi(tok);
}

}  // namespace detail

// Binary PPM (P6) / PGM (P5), maxval 255.
inline ImageTensor read_pnm(const std::string& path) {
    io::ByteReader r(io::read_file(path));
    if (r.remaining() < 2) throw FormatError("pnm: too short");
    const char p = static_cast<char>(r.u8());
    const char n = static_cast<char>(r.u8());
    if (p != 'P' || (n != '5' && n != '6')) throw FormatError("pnm: expected P5 or P6");
    const size_t channels = (n == '6') ? 3 : 1;
    const int w = detail::next_pnm_token(r);
    const int h = detail::next_pnm_token(r);
    const int maxval = detail::next_pnm_token(r);
    if (w < 1 || h < 1) throw FormatError("pnm: bad dimensions");
    if (maxval != 255) throw FormatError("pnm: only maxval 255 supported");
    ImageTensor img = ImageTensor::create(static_cast<size_t>(h), static_cast<size_t>(w), channels);
    if (r.remaining() < img.pixels.size()) throw FormatError("pnm: truncated pixel data");
    for (auto& px : img.pixels) px = r.u8();
    return img;
}

inline void write_pnm(const std::string& path, const ImageTensor& img) {
    if (!img.valid()) throw InvalidInputError("write_pnm: invalid image");
    std::string header = (img.channels == 3 ? "P6\n" : "P5\n") + std::to_string(img.width) + " " +
                         std::to_string(img.height) + "\n255\n";
    std::vector<uint8_t> bytes(header.begin(), header.end());
    bytes.insert(bytes.end(), img.pixels.begin(), img.pixels.end());
    io::write_file(path, bytes);
}

// --------------------------------------------------------- FIMG container
// magic "FIMG", u32 count, u16 H, u16 W, u8 C, then count*H*W*C u8 pixels.
// Labels live in a sidecar file of count little-endian u16 values.

struct ImageDataset {
    std::vector<ImageTensor> images;
    std::vector<uint16_t> labels;
};

inline std::vector<uint8_t> serialize_fimg(const std::vector<ImageTensor>& images) {
    if (images.empty()) throw InvalidInputError("serialize_fimg: empty dataset");
    const size_t h = images[0].height, w = images[0].width, c = images[0].channels;
    io::ByteWriter wr;
    wr.magic("FIMG");
    wr.u32(static_cast<uint32_t>(images.size()));
    wr.u16(static_cast<uint16_t>(h));
    wr.u16(static_cast<uint16_t>(w));
    wr.u8(static_cast<uint8_t>(c));
    for (const auto& img : images) {
        if (img.height != h || img.width != w || img.channels != c)
            throw InvalidInputError("serialize_fimg: inconsistent image shapes");
        wr.bytes(img.pixels);
    }
    return wr.buffer();
}

inline std::vector<ImageTensor> parse_fimg(const std::vector<uint8_t>& bytes) {
    io::ByteReader r(bytes);
    r.expect_magic("FIMG");
    const uint32_t count = r.u32();
    const size_t h = r.u16(), w = r.u16(), c = r.u8();
    if (h < 1 || w < 1 || (c != 1 && c != 3)) throw FormatError("fimg: bad dimensions");
    std::vector<ImageTensor> images;
    images.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        ImageTensor img = ImageTensor::create(h, w, c);
        if (r.remaining() < img.pixels.size()) throw FormatError("fimg: truncated pixel data");
        for (auto& px : img.pixels) px = r.u8();
        images.push_back(std::move(img));
    }
    r.require_done();
    return images;
}

inline void write_labels(const std::string& path, const std::vector<uint16_t>& labels) {
    io::ByteWriter wr;
    for (uint16_t v : labels) wr.u16(v);
    io::write_file(path, wr.buffer());
}

inline std::vector<uint16_t> read_labels(const std::string& path, size_t expected_count) {
    io::ByteReader r(io::read_file(path));
    if (r.remaining() != expected_count * 2)
        throw FormatError("labels sidecar: expected " + std::to_string(expected_count) +
                          " u16 entries");
    std::vector<uint16_t> labels(expected_count);
    for (auto& v : labels) v = r.u16();
    return labels;
}

inline ImageDataset read_image_dataset(const std::string& fimg_path) {
    ImageDataset ds;
    ds.images = parse_fimg(io::read_file(fimg_path));
    ds.labels = read_labels(fimg_path + ".labels", ds.images.size());
    return ds;
}

inline void write_image_dataset(const std::string& fimg_path, const ImageDataset& ds) {
    if (ds.images.size() != ds.labels.size())
        throw InvalidInputError("write_image_dataset: images/labels count mismatch");
    io::write_file(fimg_path, serialize_fimg(ds.images));
    write_labels(fimg_path + ".labels", ds.labels);
}

}  // namespace falcon
