#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "caseloop/core/label.hpp"

namespace caseloop {

using AttributeMap = std::map<std::string, std::string>;

// Structured reading of a query: category intent, brand, attributes.
struct QueryStructure {
  std::vector<std::string> category_intent;
  std::optional<std::string> brand;
  AttributeMap attributes;
  std::optional<std::string> corrected_text;
  // Tokens that matched no lexicon entry.
  std::vector<std::string> residual_terms;

  bool empty() const {
    return category_intent.empty() && !brand && attributes.empty();
  }
  bool operator==(const QueryStructure&) const = default;
};

struct Query {
  std::string id;
  std::string text;
  std::string language = "en";
  std::optional<QueryStructure> structure;

  bool operator==(const Query&) const = default;
};

struct Product {
  std::string id;
  std::string title;
  std::vector<std::string> category_path;  // root .. leaf
  std::optional<std::string> brand;
  AttributeMap attributes;

  const std::string& leaf() const { return category_path.back(); }
  bool in_category(std::string_view category) const;
  bool operator==(const Product&) const = default;
};

struct Clause {
  std::string id;
  std::string text;
  std::string predicate;  // machine-readable tag evaluated by judges

  bool operator==(const Clause&) const = default;
};

struct StandardsDoc {
  int version = 1;
  std::vector<Clause> clauses;

  bool has_predicate(std::string_view predicate) const;
  const Clause* find_predicate(std::string_view predicate) const;
  std::vector<std::string> predicates() const;

  // Throws kInvalidArgument on duplicate clause ids.
  void validate() const;
};

// ---------------------------------------------------------------------------
// Rules (intervention context I)

enum class RulePrimitive { kInclusion, kExclusion, kScoping };

std::string_view to_string(RulePrimitive p);
RulePrimitive rule_primitive_from(std::string_view s);

// Empty fields are wildcards, so both predicates are total.
struct QueryScope {
  std::vector<std::string> categories;  // any-of over category_intent
  std::optional<std::string> brand;
  AttributeMap attributes;

  bool matches(const QueryStructure& q) const;
  bool operator==(const QueryScope&) const = default;
};

struct ProductMatch {
  std::vector<std::string> categories;  // any-of over category_path
  std::optional<std::string> brand;
  AttributeMap attributes;

  bool matches(const Product& d) const;
  bool operator==(const ProductMatch&) const = default;
};

enum class ActionKind { kAssign, kFloor, kCeiling };

struct RuleAction {
  ActionKind kind = ActionKind::kAssign;
  RelevanceLabel label;

  RelevanceLabel apply(RelevanceLabel base) const;
  bool operator==(const RuleAction&) const = default;
};

// For scoping rules product_match describes the allowed scope; the rule fires
// on products outside it.
struct Rule {
  std::string id;
  RulePrimitive primitive = RulePrimitive::kExclusion;
  QueryScope query_scope;
  ProductMatch product_match;
  RuleAction action;
  std::string human_text;

  // Canonical action for a primitive: exclusion/scoping assign 0, inclusion floors at 2.
  static RuleAction canonical_action(RulePrimitive p);
  // Throws kInvalidArgument when the action contradicts the primitive.
  void validate() const;
  bool operator==(const Rule&) const = default;
};

struct TimeWindow {
  std::int64_t start = 0;
  std::int64_t end = std::numeric_limits<std::int64_t>::max();

  bool contains(std::int64_t t) const { return start <= t && t < end; }
  bool operator==(const TimeWindow&) const = default;
};

struct Directive {
  std::string id;
  Rule rule;
  int priority = 0;
  TimeWindow active_window;

  bool operator==(const Directive&) const = default;
};

// ---------------------------------------------------------------------------
// Predictions and cases

enum class Stage { kRetrieval, kCoarse, kFine, kCached, kRuleAdjusted };

std::string_view to_string(Stage s);
Stage stage_from(std::string_view s);

struct Prediction {
  RelevanceLabel label;
  LabelScores scores{1.0, 0.0, 0.0, 0.0};
  Stage source_stage = Stage::kFine;
  // argmax had an exact tie; resolved toward the lower label.
  bool tie_broken = false;

  // Normalizes non-negative raw scores; an all-zero vector becomes uniform.
  static Prediction from_scores(const LabelScores& raw, Stage stage);
  // One-hot with `smoothing` mass spread over the other labels.
  static Prediction smoothed(RelevanceLabel label, Stage stage, double smoothing = 0.01);

  // Sum to 1 within 1e-9, non-negative, argmax consistent with label.
  bool is_consistent() const;
  bool operator==(const Prediction&) const = default;
};

enum class Provenance { kUserReport, kDialectic, kProbe, kEvaluation };

std::string_view to_string(Provenance p);
Provenance provenance_from(std::string_view s);

struct Case {
  Case(std::string id, Query query, Product product, std::optional<RelevanceLabel> reference,
       Prediction online_prediction, Provenance provenance, int standards_version = 1)
      : id(std::move(id)),
        query(std::move(query)),
        product(std::move(product)),
        reference(reference),
        online_prediction(online_prediction),
        provenance(provenance),
        standards_version(standards_version) {}

  std::string id;
  Query query;
  Product product;
  std::optional<RelevanceLabel> reference;  // y*, frozen at standards_version
  Prediction online_prediction;
  Provenance provenance;
  int standards_version;

  bool operator==(const Case&) const = default;
};

bool is_bad_case(const Prediction& prediction, RelevanceLabel reference);

// Mean of is_bad_case. Throws kEmptySample on an empty list and
// kInvalidArgument when a case has no reference label.
double bad_case_rate(std::span<const Case> cases);

}  // namespace caseloop
