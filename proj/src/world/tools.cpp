#include "caseloop/world/tools.hpp"

#include "caseloop/core/error.hpp"

namespace caseloop::world {

std::string_view to_string(ToolName t) {
  switch (t) {
    case ToolName::kEcomSearch: return "ecom_search";
    case ToolName::kWebSearch: return "web_search";
    case ToolName::kImageSearch: return "image_search";
  }
  return "ecom_search";
}

ToolName tool_from(std::string_view name) {
  if (name == "ecom_search") return ToolName::kEcomSearch;
  if (name == "web_search") return ToolName::kWebSearch;
  if (name == "image_search") return ToolName::kImageSearch;
  throw Error(ErrorCode::kUnknownTool, "unknown tool '" + std::string(name) + "'");
}

}  // namespace caseloop::world
