#pragma once

#include <stdexcept>
#include <string>

namespace layertracer {

enum class ErrorCode {
  InvalidInput = 1,
  InvalidConfig = 2,
  InvalidLayer = 3,
  UnknownToken = 4,
  UnsupportedVersion = 5,
  CorruptTrace = 6,
  Io = 7,
  Diverged = 8,
  Internal = 9,
};

const char* error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) {
    fail(code, message);
  }
}

}  // namespace layertracer
