#pragma once

#include <stdexcept>
#include <string>

namespace mqret {

// Error categories used across the library. Tests and the CLI dispatch on
// the kind, so every throw site picks the one named in its contract.
enum class ErrorKind {
  Dimension,   // operand shapes do not conform
  Parameter,   // invalid argument value (k >= N, q outside (0,1), ...)
  Data,        // malformed or missing input data (channels, windows)
  Format,      // file format violations (magic, version, truncation)
  Retrieval,   // empty attention support after self-exclusion
  Alignment,   // time-index mismatch between query and database rows
  Training,    // non-finite loss/gradients during optimization
  Access,      // read outside a view's permitted window
  Staleness,   // artifact fingerprint does not match its input
  Dependency,  // pipeline stage invoked before its inputs exist
  Reporting,   // inconsistent or missing rows when rendering reports
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + message), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace mqret
