#pragma once

#include <stdexcept>
#include <string>

namespace upscale {

enum class ErrorKind {
    Dimension,
    Parameter,
    Contract,
    Validation,
    Format,
    Id,
    Context,
    Io,
    Numeric,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& m) : Error(ErrorKind::Dimension, m) {}
};

class ParameterError : public Error {
public:
    explicit ParameterError(const std::string& m) : Error(ErrorKind::Parameter, m) {}
};

class ContractError : public Error {
public:
    explicit ContractError(const std::string& m) : Error(ErrorKind::Contract, m) {}
};

class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& m) : Error(ErrorKind::Validation, m) {}
};

class IdError : public Error {
public:
    explicit IdError(const std::string& m) : Error(ErrorKind::Id, m) {}
};

class ContextError : public Error {
public:
    explicit ContextError(const std::string& m) : Error(ErrorKind::Context, m) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& m) : Error(ErrorKind::Io, m) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& m) : Error(ErrorKind::Numeric, m) {}
};

// Malformed container files. Each corruption class has its own code so
// callers (and tests) can tell them apart.
enum class FormatCode {
    BadMagic,
    BadHeaderLength,
    BadJson,
    BadEntry,
    SizeMismatch,
    Overlap,
    Gap,
    Truncated,
    TrailingBytes,
};

const char* to_string(FormatCode code);

class FormatError : public Error {
public:
    FormatError(FormatCode code, const std::string& m)
        : Error(ErrorKind::Format, std::string(to_string(code)) + ": " + m), code_(code) {}

    FormatCode code() const noexcept { return code_; }

private:
    FormatCode code_;
};

}  // namespace upscale
