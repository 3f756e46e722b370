#pragma once

#include <stdexcept>
#include <string>

namespace synth {

// Error taxonomy mapped to CLI exit codes: validation-class errors exit 2,
// dependency errors 3, I/O errors 4.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LookupError : ValidationError {
    using ValidationError::ValidationError;
};

struct DependencyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InsufficientSamplesError : ValidationError {
    using ValidationError::ValidationError;
};

struct CompatibilityError : ValidationError {
    using ValidationError::ValidationError;
};

}  // namespace synth
