#pragma once

#include <stdexcept>
#include <string>

namespace dsrpgo {

// Base of every error thrown by the library. `kind()` is a stable short tag
// used by the CLI to pick an exit code and by tests to discriminate causes.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

// Operand shapes do not conform for an operation.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& message) : Error("shape", message) {}
};

// Numerical domain violation (log of a nonpositive value, overflowing exp, ...).
class DomainError : public Error {
public:
    explicit DomainError(const std::string& message) : Error("domain", message) {}
};

// Invalid user-supplied configuration or arguments.
class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& message) : Error("validation", message) {}
};

// Training produced a non-finite loss or gradient.
class DivergenceError : public Error {
public:
    explicit DivergenceError(const std::string& message) : Error("divergence", message) {}
};

// Filesystem or serialization failure.
class IoError : public Error {
public:
    explicit IoError(const std::string& message) : Error("io", message) {}
};

}  // namespace dsrpgo
