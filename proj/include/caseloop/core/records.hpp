#pragma once

// Line-delimited record format: one JSON object per line, keys sorted.

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "caseloop/core/sample.hpp"
#include "caseloop/core/types.hpp"

namespace caseloop {

using Json = nlohmann::json;

void to_json(Json& j, const RelevanceLabel& v);
void from_json(const Json& j, RelevanceLabel& v);
void to_json(Json& j, const QueryStructure& v);
void from_json(const Json& j, QueryStructure& v);
void to_json(Json& j, const Query& v);
void from_json(const Json& j, Query& v);
void to_json(Json& j, const Product& v);
void from_json(const Json& j, Product& v);
void to_json(Json& j, const Clause& v);
void from_json(const Json& j, Clause& v);
void to_json(Json& j, const StandardsDoc& v);
void from_json(const Json& j, StandardsDoc& v);
void to_json(Json& j, const QueryScope& v);
void from_json(const Json& j, QueryScope& v);
void to_json(Json& j, const ProductMatch& v);
void from_json(const Json& j, ProductMatch& v);
void to_json(Json& j, const RuleAction& v);
void from_json(const Json& j, RuleAction& v);
void to_json(Json& j, const Rule& v);
void from_json(const Json& j, Rule& v);
void to_json(Json& j, const TimeWindow& v);
void from_json(const Json& j, TimeWindow& v);
void to_json(Json& j, const Directive& v);
void from_json(const Json& j, Directive& v);
void to_json(Json& j, const Prediction& v);
void from_json(const Json& j, Prediction& v);
void to_json(Json& j, const Case& v);
Case case_from_json(const Json& j);
void to_json(Json& j, const Sample& v);
void from_json(const Json& j, Sample& v);

// Record files. Writers create parent directories and emit '\n'-terminated lines.
void write_records(const std::filesystem::path& path, const std::vector<Json>& records);
std::vector<Json> read_records(const std::filesystem::path& path);
void append_record(const std::filesystem::path& path, const Json& record);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

template <typename T>
std::vector<Json> to_records(const std::vector<T>& items) {
  std::vector<Json> out;
  out.reserve(items.size());
  for (const auto& item : items) out.emplace_back(item);
  return out;
}

template <typename T>
std::vector<T> from_records(const std::vector<Json>& records) {
  std::vector<T> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.template get<T>());
  return out;
}

}  // namespace caseloop
