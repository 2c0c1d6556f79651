#ifndef DPE_ERRORS_HPP
#define DPE_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace dpe {

// Bad shapes, bad hyperparameters, inconsistent schedules.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf escaping an engine operation.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse, e.g. backward before forward.
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed input files (IDX, CIFAR, PPM/PGM, checkpoints).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Semantically invalid data (label out of range, unpaired mask, ...).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Active-learning protocol violations (double query etc).
struct ProtocolError : std::runtime_error {
    explicit ProtocolError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace dpe

#endif
