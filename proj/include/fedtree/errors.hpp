#pragma once

#include <stdexcept>
#include <string>

namespace fedtree {

// Invalid or inconsistent configuration values.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values encountered during training; aborts the current run.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A client/server exchange was incomplete or malformed.
struct ProtocolError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace fedtree
