#pragma once

#include <stdexcept>
#include <string>

namespace ctrlora {

// Error taxonomy mirrors the CLI exit codes:
//   config 2, data 3, divergence 4, compatibility 5.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
    using Error::Error;
};

// Shape / range misuse of an API surfaces as a config-class failure.
struct ShapeError : ConfigError {
    using ConfigError::ConfigError;
};

struct DataError : Error {
    using Error::Error;
};

struct DivergenceError : Error {
    using Error::Error;
};

struct CompatibilityError : Error {
    using Error::Error;
};

}  // namespace ctrlora
