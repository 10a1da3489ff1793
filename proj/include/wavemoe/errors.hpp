#pragma once

#include <stdexcept>
#include <string>

namespace wavemoe {

/// Violated precondition or shape/alignment contract on a library call.
class ContractError : public std::invalid_argument {
public:
  explicit ContractError(const std::string& msg) : std::invalid_argument(msg) {}
};

/// Input data cannot be used: degenerate window, empty corpus, unparseable row.
class DataError : public std::runtime_error {
public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Non-finite value where the numeric contract requires a finite one.
class NumericError : public std::runtime_error {
public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

/// File-level failure: missing, truncated, bad magic/version/checksum.
class IoError : public std::runtime_error {
public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace wavemoe
