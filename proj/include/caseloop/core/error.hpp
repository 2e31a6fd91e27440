#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace caseloop {

enum class ErrorCode {
  kInvalidArgument,
  kEmptySample,
  kInvalidConfig,
  kUnknownEntity,
  kUnknownTool,
  kInvalidQuery,
  kToolUnavailable,
  kDegenerateCorpus,
  kInvalidK,
  kDegenerateData,
  kPolicyFailure,
  kEmptyReference,
  kInsufficientWorld,
  kEmptySet,
  kUnresolvedInput,
  kCaseNotAwaiting,
  kAnnotatorUnavailable,
  kAlreadyDecided,
  kCorruptRecord,
  kIo,
};

std::string_view to_string(ErrorCode code);

// Single exception type; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace caseloop
