#pragma once

#include <stdexcept>
#include <string>

namespace hcseg {

// Shape or grid contract violated by an operand.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Argument outside the mathematical domain of an operation (e.g. scale <= 0).
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

// Misuse of an API contract (non-scalar loss, consumed tape, non-finite data...).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Malformed file content. The message always carries the byte offset.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
          offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace hcseg
