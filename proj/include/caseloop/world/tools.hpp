#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "caseloop/core/types.hpp"

namespace caseloop::world {

enum class ToolName { kEcomSearch, kWebSearch, kImageSearch };

std::string_view to_string(ToolName t);
// Throws kUnknownTool.
ToolName tool_from(std::string_view name);

struct ToolCall {
  std::string tool_name;
  std::map<std::string, std::string> parameters;  // "query" | "image_ref", optional "top_n"

  bool operator==(const ToolCall&) const = default;
};

struct ToolHit {
  std::string ref;  // product id for catalog tools, entity for web_search
  double score = 0.0;
  std::string snippet;
  std::vector<std::string> image_refs;
  std::vector<std::string> visual_tags;
  std::string category_hint;
  AttributeMap attributes;  // facts implied by a web hit

  bool operator==(const ToolHit&) const = default;
};

struct ToolResult {
  ToolName tool = ToolName::kEcomSearch;
  std::vector<ToolHit> hits;

  bool operator==(const ToolResult&) const = default;
};

}  // namespace caseloop::world
