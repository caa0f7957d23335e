#pragma once

// Little-endian primitives shared by the dataset and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "dsp/errors.hpp"

namespace dsp::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// Raised for malformed or truncated binary files.
class FormatError : public DataError {
public:
    using DataError::DataError;
};

template <typename T>
void put(std::ostream& os, T value) {
    os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& what) {
    T value{};
    is.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (is.gcount() != static_cast<std::streamsize>(sizeof(T))) {
        throw FormatError("truncated file while reading " + what);
    }
    return value;
}

inline void get_bytes(std::istream& is, char* dst, std::size_t n, const std::string& what) {
    is.read(dst, static_cast<std::streamsize>(n));
    if (is.gcount() != static_cast<std::streamsize>(n)) throw FormatError("truncated file while reading " + what);
}

}  // namespace dsp::io
