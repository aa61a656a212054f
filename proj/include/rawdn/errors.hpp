#pragma once

#include <stdexcept>
#include <string>

namespace rawdn {

/// Broad failure category; the CLI maps it onto an exit code.
enum class ErrorKind {
  usage,    // bad arguments, configuration or shapes supplied by the caller
  format,   // malformed files, truncated payloads, unknown tensors
  numeric,  // divergence, singular matrices, gradient check failures
};

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, std::string code, const std::string& what)
      : std::runtime_error(what), kind_(kind), code_(std::move(code)) {}

  ErrorKind kind() const noexcept { return kind_; }
  /// Short machine-readable identifier, e.g. "bad_magic" or "shape_mismatch".
  const std::string& code() const noexcept { return code_; }

private:
  ErrorKind kind_;
  std::string code_;
};

inline Error usage_error(const std::string& code, const std::string& what) {
  return Error(ErrorKind::usage, code, what);
}
inline Error format_error(const std::string& code, const std::string& what) {
  return Error(ErrorKind::format, code, what);
}
inline Error numeric_error(const std::string& code, const std::string& what) {
  return Error(ErrorKind::numeric, code, what);
}

}  // namespace rawdn
