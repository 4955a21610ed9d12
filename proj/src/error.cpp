#include "layertracer/error.hpp"

namespace layertracer {

const char* error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidInput: return "InvalidInput";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::InvalidLayer: return "InvalidLayer";
    case ErrorCode::UnknownToken: return "UnknownToken";
    case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::CorruptTrace: return "CorruptTrace";
    case ErrorCode::Io: return "Io";
    case ErrorCode::Diverged: return "Diverged";
    case ErrorCode::Internal: return "Internal";
  }
  return "Unknown";
}

}  // namespace layertracer
