#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace sdg {

// Production scalar. Tests instantiate the templated cores with double where
// tight tolerances are required.
using real = float;

// Invalid user input (bad flags, bad config, violated preconditions).
// The CLI maps this to exit code 1.
struct ValidationError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Internal failure at runtime (non-finite loss, corrupt checkpoint, io error).
// The CLI maps this to exit code 2.
struct RuntimeFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void validate(bool cond, const std::string& msg) {
    if (!cond) throw ValidationError(msg);
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw RuntimeFailure(msg);
}

} // namespace sdg
