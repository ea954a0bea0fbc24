#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mim {

// Problems the user can fix: bad config values, unknown keys, malformed
// input files. The CLI maps these to exit code 1.
class UserError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed on-disk data; carries the byte offset where parsing stopped.
class FormatError : public UserError {
public:
    FormatError(const std::string& msg, std::uint64_t byte_offset)
        : UserError(msg + " (at byte " + std::to_string(byte_offset) + ")"),
          offset_(byte_offset) {}
    explicit FormatError(const std::string& msg) : UserError(msg), offset_(0) {}
    std::uint64_t offset() const { return offset_; }

private:
    std::uint64_t offset_;
};

// Argument outside its documented range.
class RangeError : public UserError {
public:
    using UserError::UserError;
};

// Violated API precondition: shape mismatch, missing parameter, duplicate name.
class ContractError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Non-finite values where the contract requires finite ones; names the
// offending tensor or layer.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace mim
