#pragma once

#include <stdexcept>
#include <string>

namespace gmat {

/// Broken precondition: wrong shapes, empty inputs, out-of-range arguments.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Non-finite value produced during a forward or backward pass.
class NumericFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid experiment or generator configuration.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed binary or text input (IDX, CSV, checkpoint).
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Missing or unreadable/unwritable file.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool ok, const std::string& what) {
    if (!ok) throw ContractError(what);
}

} // namespace gmat
