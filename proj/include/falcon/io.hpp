#pragma once

// Little-endian binary readers/writers for the on-disk containers
// (FSEQ/FIMG/FGEN/FCLS/FPAY). Writers buffer in memory so callers can take
// exact byte counts before anything touches the filesystem.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "falcon/common.hpp"

namespace falcon::io {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; big-endian hosts are unsupported");

class ByteWriter {
public:
    void u8(uint8_t v) { push(&v, 1); }
    void u16(uint16_t v) { push(&v, 2); }
    void u32(uint32_t v) { push(&v, 4); }
    void u64(uint64_t v) { push(&v, 8); }
    void f32(float v) { push(&v, 4); }
    void f64(double v) { push(&v, 8); }
    void magic(const char tag[5]) { push(tag, 4); }
    void bytes(const std::vector<uint8_t>& b) { push(b.data(), b.size()); }

    const std::vector<uint8_t>& buffer() const { return buf_; }
    size_t size() const { return buf_.size(); }

private:
    void push(const void* p, size_t n) {
        const auto* c = static_cast<const uint8_t*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    std::vector<uint8_t> buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::vector<uint8_t> buf) : buf_(std::move(buf)) {}

    uint8_t u8() { return take<uint8_t>(); }
    uint16_t u16() { return take<uint16_t>(); }
    uint32_t u32() { return take<uint32_t>(); }
    uint64_t u64() { return take<uint64_t>(); }
    float f32() { return take<float>(); }
    double f64() { return take<double>(); }

    void expect_magic(const char tag[5]) {
        char got[5] = {0, 0, 0, 0, 0};
        if (pos_ + 4 > buf_.size()) throw FormatError("truncated file: missing magic");
        std::memcpy(got, buf_.data() + pos_, 4);
        pos_ += 4;
        if (std::strncmp(got, tag, 4) != 0)
            throw FormatError(std::string("bad magic: expected '") + tag + "', got '" + got + "'");
    }

    size_t pos() const { return pos_; }
    size_t remaining() const { return buf_.size() - pos_; }
    bool done() const { return pos_ == buf_.size(); }
    void require_done() const {
        if (!done()) throw FormatError("trailing bytes after end of container");
    }

private:
    template <class T>
    T take() {
        if (pos_ + sizeof(T) > buf_.size()) throw FormatError("truncated file");
        T v;
        std::memcpy(&v, buf_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::vector<uint8_t> buf_;
    size_t pos_ = 0;
};

inline std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open file: " + path);
    f.seekg(0, std::ios::end);
    const auto n = static_cast<size_t>(f.tellg());
    f.seekg(0, std::ios::beg);
    std::vector<uint8_t> buf(n);
    if (n > 0) f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
    if (!f) throw FormatError("failed reading file: " + path);
    return buf;
}

// Writes via a temp file and renames into place; a half-written artifact is
// removed instead of left behind.
inline void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw FormatError("cannot open file for writing: " + path);
        if (!bytes.empty())
            f.write(reinterpret_cast<const char*>(bytes.data()),
                    static_cast<std::streamsize>(bytes.size()));
        if (!f) {
            f.close();
            std::filesystem::remove(tmp);
            throw FormatError("failed writing file: " + path);
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw FormatError("failed to finalize file: " + path + " (" + ec.message() + ")");
    }
}

}  // namespace falcon::io
