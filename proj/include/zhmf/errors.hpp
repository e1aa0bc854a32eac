#pragma once

#include <stdexcept>
#include <string>

namespace zhmf {

// Error classes map 1:1 onto CLI exit codes (see tools/zhmf_main.cpp).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct BackendError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Transport-level backend failure; the only kind the client retries.
struct TransportError : BackendError {
  using BackendError::BackendError;
};

// Checkpoint / schema-version / store-lifecycle mismatches.
struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace zhmf
