#pragma once

#include <stdexcept>
#include <string>

namespace dseg {

// Base class for all errors thrown by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad value passed to an operation (empty input, zero size, out-of-range level).
class ArgumentError : public Error {
public:
    explicit ArgumentError(const std::string& msg) : Error(msg) {}
};

// Inconsistent configuration: shape mismatches, duplicate names, contradictory
// settings. CLI maps this family to exit code 2.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Bad data encountered at runtime: label ids out of range, size mismatches
// between paired maps, missing files. CLI maps this family to exit code 1.
class DataError : public Error {
public:
    explicit DataError(const std::string& msg) : Error(msg) {}
};

// Malformed file content; message carries the byte offset where parsing failed.
class ParseError : public DataError {
public:
    ParseError(const std::string& msg, std::size_t offset)
        : DataError(msg + " (byte offset " + std::to_string(offset) + ")"),
          offset_(offset) {}
    std::size_t offset() const { return offset_; }

private:
    std::size_t offset_;
};

// A vector with (near) zero norm where a direction is required.
class DegenerateVectorError : public ArgumentError {
public:
    explicit DegenerateVectorError(const std::string& msg) : ArgumentError(msg) {}
};

// Planted-encoder construction failed verification.
class PlantingError : public Error {
public:
    explicit PlantingError(const std::string& msg) : Error(msg) {}
};

// A metric was requested over a subset with no present class / no pixels.
class UndefinedMetricError : public DataError {
public:
    explicit UndefinedMetricError(const std::string& msg) : DataError(msg) {}
};

}  // namespace dseg
