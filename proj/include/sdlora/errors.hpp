#pragma once

#include <stdexcept>
#include <string>

namespace sdlora {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& what) : Error(what) {}
};

/// A factor pair whose product norm fell below the configured epsilon.
/// The caller is expected to reinitialize the factors.
class DegenerateDirectionError : public Error {
public:
    explicit DegenerateDirectionError(const std::string& what) : Error(what) {}
};

/// Iterative method failed to converge; carries the last iterate value.
class ConvergenceError : public Error {
public:
    ConvergenceError(const std::string& what, double last)
        : Error(what), last_estimate(last) {}
    double last_estimate;
};

/// Gram system not solvable as posed (typically ridge = 0 on a rank-deficient basis).
class SingularSystemError : public Error {
public:
    explicit SingularSystemError(const std::string& what) : Error(what) {}
};

/// Malformed serialized data; byte_offset points at the failing read.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t offset)
        : Error(what + " (byte offset " + std::to_string(offset) + ")"),
          byte_offset(offset) {}
    std::size_t byte_offset;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(what) {}
};

/// Training loss became NaN/Inf.
class DivergenceError : public Error {
public:
    explicit DivergenceError(const std::string& what) : Error(what) {}
};

} // namespace sdlora
