#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace trajweaver {

/// Argument or configuration rejected before any work was done.
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Index or timestamp outside its permitted range.
class OutOfRange : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

/// Array blocks whose lengths or widths disagree.
class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input file; carries the 1-based line number.
class ParseError : public std::runtime_error {
public:
    ParseError(std::size_t line, const std::string& what)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Well-formed data violating a domain invariant (e.g. non-monotone timestamps).
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Checkpoint and task disagree on condition layout or embedders.
class CompatibilityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// NaN / Inf encountered in a rollout or training loss.
class NumericError : public std::runtime_error {
public:
    NumericError(long step, const std::string& what)
        : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
    long step() const noexcept { return step_; }

private:
    long step_;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace trajweaver
