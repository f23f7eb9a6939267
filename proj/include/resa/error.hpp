#pragma once

#include <stdexcept>
#include <string>

namespace resa {

// Runtime failure inside a kernel or a decode session.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid user-facing configuration (bad flags, bad files). Maps to exit code 2.
class ConfigError : public Error {
public:
    using Error::Error;
};

} // namespace resa
