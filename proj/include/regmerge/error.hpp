#pragma once

#include <stdexcept>
#include <string>

namespace regmerge {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes/dimensions do not agree.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// An argument violates a documented precondition (range, symmetry, sign, ...).
class ValidationError : public Error {
public:
    using Error::Error;
};

/// A linear system stayed singular after the whole jitter ladder.
class SingularSystemError : public Error {
public:
    using Error::Error;
};

/// Stats required by a merge algorithm are missing.
class MissingStatsError : public Error {
public:
    using Error::Error;
};

enum class ParseErrorKind {
    io,
    malformed_header,
    duplicate_key,
    truncated_payload,
    shape_mismatch,
    unknown_dtype,
    wrong_kind,
};

const char* to_string(ParseErrorKind kind);

/// A checkpoint/stats file could not be decoded.
class ParseError : public Error {
public:
    ParseError(ParseErrorKind kind, const std::string& what)
        : Error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ParseErrorKind kind() const noexcept { return kind_; }

private:
    ParseErrorKind kind_;
};

}  // namespace regmerge
