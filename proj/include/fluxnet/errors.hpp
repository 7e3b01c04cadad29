#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace fluxnet {

// Error hierarchy shared by the library and the CLI.
// Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric/training error.
class Error : public std::runtime_error {
public:
    Error(std::string msg, int exit_code)
        : std::runtime_error(std::move(msg)), exit_code_(exit_code) {}
    int exit_code() const noexcept { return exit_code_; }

private:
    int exit_code_;
};

// Invalid parameters, out-of-range arguments, malformed configuration.
class ConfigError : public Error {
public:
    explicit ConfigError(std::string msg) : Error(std::move(msg), 2) {}
};

// Unusable input data, schema mismatches, missing artifacts.
class DataError : public Error {
public:
    explicit DataError(std::string msg) : Error(std::move(msg), 3) {}
};

// Non-finite values, divergence during training or optimization.
class NumericError : public Error {
public:
    explicit NumericError(std::string msg) : Error(std::move(msg), 4) {}
};

}  // namespace fluxnet
