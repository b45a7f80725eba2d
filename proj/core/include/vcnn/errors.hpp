#pragma once

#include <stdexcept>
#include <string>

namespace vcnn {

// Error taxonomy mirrors the CLI exit codes: usage/config -> 1,
// data/format -> 2, numeric divergence -> 3.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace vcnn
