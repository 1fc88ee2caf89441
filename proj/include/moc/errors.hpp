#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace moc {

enum class ErrorCode {
  EmptyStream,
  NonMonotonicStream,
  InvalidStream,
  InvalidPartition,
  IndexOutOfRange,
  ShapeMismatch,
  NonFiniteInput,
  InvalidArgument,
  DropDisabled,
  SpecInvalid,
  UnknownPreset,
  ParseError,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::EmptyStream: return "EmptyStream";
    case ErrorCode::NonMonotonicStream: return "NonMonotonicStream";
    case ErrorCode::InvalidStream: return "InvalidStream";
    case ErrorCode::InvalidPartition: return "InvalidPartition";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteInput: return "NonFiniteInput";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::DropDisabled: return "DropDisabled";
    case ErrorCode::SpecInvalid: return "SpecInvalid";
    case ErrorCode::UnknownPreset: return "UnknownPreset";
    case ErrorCode::ParseError: return "ParseError";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a machine-checkable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace moc
