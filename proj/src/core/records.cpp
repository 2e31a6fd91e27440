#include "caseloop/core/records.hpp"

#include <fstream>
#include <sstream>

#include "caseloop/core/error.hpp"

namespace caseloop {
namespace {

template <typename T>
void put_optional(Json& j, const char* key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

template <typename T>
std::optional<T> get_optional(const Json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return it->template get<T>();
}

}  // namespace

void to_json(Json& j, const RelevanceLabel& v) { j = v.value(); }
void from_json(const Json& j, RelevanceLabel& v) { v = RelevanceLabel::of(j.get<int>()); }

void to_json(Json& j, const QueryStructure& v) {
  j = Json{{"category_intent", v.category_intent}, {"attributes", v.attributes}};
  put_optional(j, "brand", v.brand);
  put_optional(j, "corrected_text", v.corrected_text);
  if (!v.residual_terms.empty()) j["residual_terms"] = v.residual_terms;
}

void from_json(const Json& j, QueryStructure& v) {
  v.category_intent = j.value("category_intent", std::vector<std::string>{});
  v.attributes = j.value("attributes", AttributeMap{});
  v.brand = get_optional<std::string>(j, "brand");
  v.corrected_text = get_optional<std::string>(j, "corrected_text");
  v.residual_terms = j.value("residual_terms", std::vector<std::string>{});
}

void to_json(Json& j, const Query& v) {
  j = Json{{"id", v.id}, {"text", v.text}, {"language", v.language}};
  put_optional(j, "structure", v.structure);
}

void from_json(const Json& j, Query& v) {
  v.id = j.at("id").get<std::string>();
  v.text = j.at("text").get<std::string>();
  v.language = j.value("language", std::string("en"));
  v.structure = get_optional<QueryStructure>(j, "structure");
  if (v.text.empty()) throw Error(ErrorCode::kCorruptRecord, "query " + v.id + " has empty text");
}

void to_json(Json& j, const Product& v) {
  j = Json{{"id", v.id}, {"title", v.title}, {"category_path", v.category_path}, {"attributes", v.attributes}};
  put_optional(j, "brand", v.brand);
}

void from_json(const Json& j, Product& v) {
  v.id = j.at("id").get<std::string>();
  v.title = j.at("title").get<std::string>();
  v.category_path = j.at("category_path").get<std::vector<std::string>>();
  v.attributes = j.value("attributes", AttributeMap{});
  v.brand = get_optional<std::string>(j, "brand");
  if (v.category_path.empty()) throw Error(ErrorCode::kCorruptRecord, "product " + v.id + " has empty category path");
}

void to_json(Json& j, const Clause& v) {
  j = Json{{"id", v.id}, {"text", v.text}, {"predicate", v.predicate}};
}

void from_json(const Json& j, Clause& v) {
  v.id = j.at("id").get<std::string>();
  v.text = j.at("text").get<std::string>();
  v.predicate = j.at("predicate").get<std::string>();
}

void to_json(Json& j, const StandardsDoc& v) {
  j = Json{{"version", v.version}, {"clauses", v.clauses}};
}

void from_json(const Json& j, StandardsDoc& v) {
  v.version = j.at("version").get<int>();
  v.clauses = j.at("clauses").get<std::vector<Clause>>();
  v.validate();
}

void to_json(Json& j, const QueryScope& v) {
  j = Json{{"categories", v.categories}, {"attributes", v.attributes}};
  put_optional(j, "brand", v.brand);
}

void from_json(const Json& j, QueryScope& v) {
  v.categories = j.value("categories", std::vector<std::string>{});
  v.attributes = j.value("attributes", AttributeMap{});
  v.brand = get_optional<std::string>(j, "brand");
}

void to_json(Json& j, const ProductMatch& v) {
  j = Json{{"categories", v.categories}, {"attributes", v.attributes}};
  put_optional(j, "brand", v.brand);
}

void from_json(const Json& j, ProductMatch& v) {
  v.categories = j.value("categories", std::vector<std::string>{});
  v.attributes = j.value("attributes", AttributeMap{});
  v.brand = get_optional<std::string>(j, "brand");
}

void to_json(Json& j, const RuleAction& v) {
  const char* kind = v.kind == ActionKind::kAssign ? "assign" : v.kind == ActionKind::kFloor ? "floor" : "ceiling";
  j = Json{{"kind", kind}, {"label", v.label}};
}

void from_json(const Json& j, RuleAction& v) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "assign") {
    v.kind = ActionKind::kAssign;
  } else if (kind == "floor") {
    v.kind = ActionKind::kFloor;
  } else if (kind == "ceiling") {
    v.kind = ActionKind::kCeiling;
  } else {
    throw Error(ErrorCode::kCorruptRecord, "unknown action kind " + kind);
  }
  v.label = j.at("label").get<RelevanceLabel>();
}

void to_json(Json& j, const Rule& v) {
  j = Json{{"id", v.id},
           {"primitive", to_string(v.primitive)},
           {"query_scope", v.query_scope},
           {"product_match", v.product_match},
           {"action", v.action},
           {"human_text", v.human_text}};
}

void from_json(const Json& j, Rule& v) {
  v.id = j.at("id").get<std::string>();
  v.primitive = rule_primitive_from(j.at("primitive").get<std::string>());
  v.query_scope = j.value("query_scope", QueryScope{});
  v.product_match = j.value("product_match", ProductMatch{});
  if (auto it = j.find("action"); it != j.end()) {
    v.action = it->get<RuleAction>();
  } else {
    v.action = Rule::canonical_action(v.primitive);
  }
  v.human_text = j.value("human_text", std::string{});
  v.validate();
}

void to_json(Json& j, const TimeWindow& v) { j = Json{{"start", v.start}, {"end", v.end}}; }

void from_json(const Json& j, TimeWindow& v) {
  v.start = j.value("start", std::int64_t{0});
  v.end = j.value("end", TimeWindow{}.end);
}

void to_json(Json& j, const Directive& v) {
  j = Json{{"id", v.id}, {"rule", v.rule}, {"priority", v.priority}, {"active_window", v.active_window}};
}

void from_json(const Json& j, Directive& v) {
  v.id = j.at("id").get<std::string>();
  v.rule = j.at("rule").get<Rule>();
  v.priority = j.value("priority", 0);
  v.active_window = j.value("active_window", TimeWindow{});
}

void to_json(Json& j, const Prediction& v) {
  j = Json{{"label", v.label},
           {"scores", v.scores},
           {"source_stage", to_string(v.source_stage)},
           {"tie_broken", v.tie_broken}};
}

void from_json(const Json& j, Prediction& v) {
  v.label = j.at("label").get<RelevanceLabel>();
  v.scores = j.at("scores").get<LabelScores>();
  v.source_stage = stage_from(j.at("source_stage").get<std::string>());
  v.tie_broken = j.value("tie_broken", false);
}

void to_json(Json& j, const Case& v) {
  j = Json{{"id", v.id},
           {"query", v.query},
           {"product", v.product},
           {"online_prediction", v.online_prediction},
           {"provenance", to_string(v.provenance)},
           {"standards_version", v.standards_version}};
  put_optional(j, "reference_label", v.reference);
}

Case case_from_json(const Json& j) {
  return Case(j.at("id").get<std::string>(), j.at("query").get<Query>(), j.at("product").get<Product>(),
              get_optional<RelevanceLabel>(j, "reference_label"), j.at("online_prediction").get<Prediction>(),
              provenance_from(j.at("provenance").get<std::string>()), j.value("standards_version", 1));
}

void to_json(Json& j, const Sample& v) {
  j = Json{{"id", v.id}, {"query", v.query}, {"product_id", v.product_id}, {"label", v.label},
           {"provenance", v.provenance}};
}

void from_json(const Json& j, Sample& v) {
  v.id = j.at("id").get<std::string>();
  v.query = j.at("query").get<Query>();
  v.product_id = j.at("product_id").get<std::string>();
  v.label = j.at("label").get<RelevanceLabel>();
  v.provenance = j.value("provenance", std::string{});
}

void write_records(const std::filesystem::path& path, const std::vector<Json>& records) {
  std::string out;
  for (const auto& r : records) {
    out += r.dump();
    out += '\n';
  }
  write_text(path, out);
}

std::vector<Json> read_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::vector<Json> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(Json::parse(line));
    } catch (const Json::parse_error& e) {
      throw Error(ErrorCode::kCorruptRecord, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void append_record(const std::filesystem::path& path, const Json& record) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot append to " + path.string());
  out << record.dump() << '\n';
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << text;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace caseloop
