#pragma once

// Little-endian binary IO helpers shared by the snapshot and dataset
// containers. Readers track their byte offset so parse errors can point at
// the failing position.

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "sdlora/errors.hpp"
#include "sdlora/matrix.hpp"

static_assert(std::endian::native == std::endian::little,
              "binary containers assume a little-endian host");

namespace sdlora::binio {

inline void write_bytes(std::ofstream& out, const void* p, std::size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}
inline void write_u32(std::ofstream& out, std::uint32_t v) { write_bytes(out, &v, 4); }
inline void write_u64(std::ofstream& out, std::uint64_t v) { write_bytes(out, &v, 8); }
inline void write_i32(std::ofstream& out, std::int32_t v) { write_bytes(out, &v, 4); }
inline void write_u8(std::ofstream& out, std::uint8_t v) { write_bytes(out, &v, 1); }
inline void write_f64(std::ofstream& out, double v) { write_bytes(out, &v, 8); }

inline void write_matrix(std::ofstream& out, const Matrix& m) {
    write_u32(out, static_cast<std::uint32_t>(m.rows()));
    write_u32(out, static_cast<std::uint32_t>(m.cols()));
    if (!m.empty()) write_bytes(out, m.data(), m.size() * sizeof(double));
}

struct Reader {
    std::ifstream in;
    std::size_t offset = 0;

    explicit Reader(const std::string& path) : in(path, std::ios::binary) {}

    void read(void* p, std::size_t n, const char* what) {
        in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in.gcount()) != n) {
            throw ParseError(std::string("truncated while reading ") + what, offset);
        }
        offset += n;
    }
    std::uint32_t u32(const char* what) {
        std::uint32_t v;
        read(&v, 4, what);
        return v;
    }
    std::uint64_t u64(const char* what) {
        std::uint64_t v;
        read(&v, 8, what);
        return v;
    }
    std::int32_t i32(const char* what) {
        std::int32_t v;
        read(&v, 4, what);
        return v;
    }
    std::uint8_t u8(const char* what) {
        std::uint8_t v;
        read(&v, 1, what);
        return v;
    }
    double f64(const char* what) {
        double v;
        read(&v, 8, what);
        return v;
    }
    Matrix matrix(const char* what) {
        const std::uint32_t r = u32(what);
        const std::uint32_t c = u32(what);
        if (r == 0 && c == 0) return Matrix();
        if (r == 0 || c == 0 || r > (1u << 24) || c > (1u << 24)) {
            throw ParseError(std::string("bad matrix header for ") + what, offset);
        }
        std::vector<double> data(static_cast<std::size_t>(r) * c);
        read(data.data(), data.size() * sizeof(double), what);
        return Matrix(static_cast<int>(r), static_cast<int>(c), std::move(data));
    }
};

} // namespace sdlora::binio
