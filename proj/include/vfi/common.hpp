#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace vfi {

constexpr const char* kVersion = "0.1.0";

// Error taxonomy. The CLI maps these onto process exit codes:
//   ConfigError/IoError/ShapeError -> 2, CheckpointError -> 3, NumericError -> 4.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error("shape: " + msg) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error("config: " + msg) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error("io: " + msg) {}
};

class CheckpointError : public Error {
public:
    explicit CheckpointError(const std::string& msg) : Error("checkpoint: " + msg) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error("numeric: " + msg) {}
};

#define VFI_CHECK(cond, ExcType, msg)      \
    do {                                   \
        if (!(cond)) throw ExcType((msg)); \
    } while (0)

} // namespace vfi
