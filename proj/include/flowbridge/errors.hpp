#pragma once

#include <stdexcept>
#include <string>

namespace flowbridge {

// All failures carry a short machine-parseable class name; the CLI prints
// "error:<error_class()>: <what()>" on a single line and exits nonzero.
class Error : public std::runtime_error {
public:
    Error(std::string cls, const std::string& msg)
        : std::runtime_error(msg), cls_(std::move(cls)) {}
    const std::string& error_class() const noexcept { return cls_; }

private:
    std::string cls_;
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error("dimension_error", msg) {}
};

struct ContractViolation : Error {
    explicit ContractViolation(const std::string& msg) : Error("contract_violation", msg) {}
};

struct OovError : Error {
    explicit OovError(const std::string& msg) : Error("oov_error", msg) {}
};

struct SequenceLengthError : Error {
    explicit SequenceLengthError(const std::string& msg) : Error("sequence_length_error", msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error("io_error", msg) {}
};

struct IntegrityError : Error {
    explicit IntegrityError(const std::string& msg) : Error("integrity_error", msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error("config_error", msg) {}
};

}  // namespace flowbridge
