#pragma once

#include <stdexcept>
#include <string>

namespace speechlm {

// Error taxonomy used across the library. Callers that violate a precondition
// get InvalidArgument; data that parses but breaks an invariant gets
// MalformedInput; context-window overflow is CapacityError.
struct InvalidArgument : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct MalformedInput : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CapacityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CorruptFile : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InvalidBatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace speechlm
