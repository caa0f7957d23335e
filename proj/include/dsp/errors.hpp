#pragma once

#include <stdexcept>

namespace dsp {

/// Bad or inconsistent input data (dataset files, checkpoints). CLI exit 2.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration value or config file. CLI exit 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A loss or parameter went non-finite during training. CLI exit 3.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace dsp
