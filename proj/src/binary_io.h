#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mim/error.h"

namespace mim::io {

// Little-endian byte writer shared by the tensor and corpus formats.
class Writer {
public:
    explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw UserError("cannot open for writing: " + path);
    }
    void bytes(const void* p, std::size_t n) {
        out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    }
    void u32(std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
        bytes(b, 4);
    }
    void u64(std::uint64_t v) {
        unsigned char b[8];
        for (int k = 0; k < 8; ++k) b[k] = static_cast<unsigned char>(v >> (8 * k));
        bytes(b, 8);
    }
    void f32_payload(const float* p, std::size_t n) {
        // f32 values are stored bit for bit as little-endian u32.
        std::vector<unsigned char> buf(n * 4);
        for (std::size_t i = 0; i < n; ++i) {
            std::uint32_t bits;
            std::memcpy(&bits, p + i, 4);
            buf[4 * i + 0] = static_cast<unsigned char>(bits);
            buf[4 * i + 1] = static_cast<unsigned char>(bits >> 8);
            buf[4 * i + 2] = static_cast<unsigned char>(bits >> 16);
            buf[4 * i + 3] = static_cast<unsigned char>(bits >> 24);
        }
        bytes(buf.data(), buf.size());
    }
    bool good() const { return static_cast<bool>(out_); }

private:
    std::ofstream out_;
};

// Counterpart reader; `what` names the format in truncation errors
// ("tensor", "corpus").
class Reader {
public:
    Reader(const std::string& path, std::string what)
        : in_(path, std::ios::binary), path_(path), what_(std::move(what)) {
        if (!in_) throw UserError("cannot open for reading: " + path);
    }
    void bytes(void* p, std::size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n)
            throw FormatError("truncated " + what_ + " file " + path_,
                              offset_ + static_cast<std::uint64_t>(in_.gcount()));
        offset_ += n;
    }
    std::uint32_t u32() {
        unsigned char b[4];
        bytes(b, 4);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }
    std::uint64_t u64() {
        unsigned char b[8];
        bytes(b, 8);
        std::uint64_t v = 0;
        for (int k = 7; k >= 0; --k) v = (v << 8) | b[k];
        return v;
    }
    void f32_payload(float* dst, std::size_t n) {
        std::vector<unsigned char> raw(n * 4);
        if (n) bytes(raw.data(), raw.size());
        for (std::size_t i = 0; i < n; ++i) {
            const std::uint32_t bits = static_cast<std::uint32_t>(raw[4 * i]) |
                                       (static_cast<std::uint32_t>(raw[4 * i + 1]) << 8) |
                                       (static_cast<std::uint32_t>(raw[4 * i + 2]) << 16) |
                                       (static_cast<std::uint32_t>(raw[4 * i + 3]) << 24);
            std::memcpy(dst + i, &bits, 4);
        }
    }
    std::uint64_t offset() const { return offset_; }
    const std::string& path() const { return path_; }

private:
    std::ifstream in_;
    std::string path_;
    std::string what_;
    std::uint64_t offset_ = 0;
};

}  // namespace mim::io
