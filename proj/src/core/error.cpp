#include "caseloop/core/error.hpp"

namespace caseloop {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kEmptySample: return "EmptySample";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
    case ErrorCode::kUnknownEntity: return "UnknownEntity";
    case ErrorCode::kUnknownTool: return "UnknownTool";
    case ErrorCode::kInvalidQuery: return "InvalidQuery";
    case ErrorCode::kToolUnavailable: return "ToolUnavailable";
    case ErrorCode::kDegenerateCorpus: return "DegenerateCorpus";
    case ErrorCode::kInvalidK: return "InvalidK";
    case ErrorCode::kDegenerateData: return "DegenerateData";
    case ErrorCode::kPolicyFailure: return "PolicyFailure";
    case ErrorCode::kEmptyReference: return "EmptyReference";
    case ErrorCode::kInsufficientWorld: return "InsufficientWorld";
    case ErrorCode::kEmptySet: return "EmptySet";
    case ErrorCode::kUnresolvedInput: return "UnresolvedInput";
    case ErrorCode::kCaseNotAwaiting: return "CaseNotAwaiting";
    case ErrorCode::kAnnotatorUnavailable: return "AnnotatorUnavailable";
    case ErrorCode::kAlreadyDecided: return "AlreadyDecided";
    case ErrorCode::kCorruptRecord: return "CorruptRecord";
    case ErrorCode::kIo: return "Io";
  }
  return "Unknown";
}

}  // namespace caseloop
