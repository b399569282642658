#pragma once

#include <stdexcept>
#include <string>

namespace tpnet {

// Error classes map onto distinct CLI exit codes (see exit_code()).
enum class ErrorKind {
    config,       // invalid configuration or architecture mismatch
    shape,        // tensor shape / resolution contract violated
    numeric,      // non-finite values
    integrity,    // missing / extra / mis-shaped tensors, bad checksums
    data,         // manifests, images, joins
    io,           // filesystem failures
    unsupported,  // operation not available for this configuration
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config: return "config";
        case ErrorKind::shape: return "shape";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::integrity: return "integrity";
        case ErrorKind::data: return "data";
        case ErrorKind::io: return "io";
        case ErrorKind::unsupported: return "unsupported";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(to_string(kind)) + " error: " + message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

inline int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config: return 2;
        case ErrorKind::data: return 3;
        case ErrorKind::io: return 3;
        case ErrorKind::numeric: return 4;
        case ErrorKind::shape: return 5;
        case ErrorKind::integrity: return 6;
        case ErrorKind::unsupported: return 7;
    }
    return 1;
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

}  // namespace tpnet
