#include "caseloop/core/types.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "caseloop/core/error.hpp"

namespace caseloop {

RelevanceLabel RelevanceLabel::of(int value) {
  if (value < 0 || value >= kLevels) {
    throw Error(ErrorCode::kInvalidArgument, "relevance label out of range: " + std::to_string(value));
  }
  return RelevanceLabel(value);
}

std::string_view RelevanceLabel::name() const {
  static constexpr std::array<std::string_view, kLevels> kNames{
      "Irrelevant", "Weakly Relevant", "Relevant", "Strongly Relevant"};
  return kNames[value_];
}

bool Product::in_category(std::string_view category) const {
  return std::find(category_path.begin(), category_path.end(), category) != category_path.end();
}

bool StandardsDoc::has_predicate(std::string_view predicate) const {
  return find_predicate(predicate) != nullptr;
}

const Clause* StandardsDoc::find_predicate(std::string_view predicate) const {
  for (const auto& c : clauses) {
    if (c.predicate == predicate) return &c;
  }
  return nullptr;
}

std::vector<std::string> StandardsDoc::predicates() const {
  std::vector<std::string> out;
  out.reserve(clauses.size());
  for (const auto& c : clauses) out.push_back(c.predicate);
  return out;
}

void StandardsDoc::validate() const {
  std::set<std::string> seen;
  for (const auto& c : clauses) {
    if (!seen.insert(c.id).second) {
      throw Error(ErrorCode::kInvalidArgument, "duplicate clause id " + c.id);
    }
  }
}

std::string_view to_string(RulePrimitive p) {
  switch (p) {
    case RulePrimitive::kInclusion: return "inclusion";
    case RulePrimitive::kExclusion: return "exclusion";
    case RulePrimitive::kScoping: return "scoping";
  }
  return "exclusion";
}

RulePrimitive rule_primitive_from(std::string_view s) {
  if (s == "inclusion") return RulePrimitive::kInclusion;
  if (s == "exclusion") return RulePrimitive::kExclusion;
  if (s == "scoping") return RulePrimitive::kScoping;
  throw Error(ErrorCode::kInvalidArgument, "unknown rule primitive " + std::string(s));
}

namespace {

bool attributes_subset(const AttributeMap& required, const AttributeMap& have) {
  for (const auto& [k, v] : required) {
    auto it = have.find(k);
    if (it == have.end() || it->second != v) return false;
  }
  return true;
}

}  // namespace

bool QueryScope::matches(const QueryStructure& q) const {
  if (!categories.empty()) {
    bool any = std::any_of(q.category_intent.begin(), q.category_intent.end(), [&](const auto& c) {
      return std::find(categories.begin(), categories.end(), c) != categories.end();
    });
    if (!any) return false;
  }
  if (brand && q.brand != brand) return false;
  return attributes_subset(attributes, q.attributes);
}

bool ProductMatch::matches(const Product& d) const {
  if (!categories.empty()) {
    bool any = std::any_of(categories.begin(), categories.end(),
                           [&](const auto& c) { return d.in_category(c); });
    if (!any) return false;
  }
  if (brand && d.brand != brand) return false;
  return attributes_subset(attributes, d.attributes);
}

RelevanceLabel RuleAction::apply(RelevanceLabel base) const {
  switch (kind) {
    case ActionKind::kAssign: return label;
    case ActionKind::kFloor: return std::max(base, label);
    case ActionKind::kCeiling: return std::min(base, label);
  }
  return base;
}

RuleAction Rule::canonical_action(RulePrimitive p) {
  switch (p) {
    case RulePrimitive::kInclusion: return {ActionKind::kFloor, RelevanceLabel::relevant()};
    case RulePrimitive::kExclusion:
    case RulePrimitive::kScoping: return {ActionKind::kAssign, RelevanceLabel::irrelevant()};
  }
  return {};
}

void Rule::validate() const {
  bool ok = false;
  switch (primitive) {
    case RulePrimitive::kInclusion:
      ok = action.kind == ActionKind::kFloor && action.label >= RelevanceLabel::relevant();
      break;
    case RulePrimitive::kExclusion:
    case RulePrimitive::kScoping:
      ok = action.kind == ActionKind::kAssign && action.label == RelevanceLabel::irrelevant();
      break;
  }
  if (!ok) {
    throw Error(ErrorCode::kInvalidArgument,
                "rule " + id + ": action inconsistent with " + std::string(to_string(primitive)));
  }
  if (id.empty()) throw Error(ErrorCode::kInvalidArgument, "rule id empty");
}

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::kRetrieval: return "retrieval";
    case Stage::kCoarse: return "coarse";
    case Stage::kFine: return "fine";
    case Stage::kCached: return "cached";
    case Stage::kRuleAdjusted: return "rule-adjusted";
  }
  return "fine";
}

Stage stage_from(std::string_view s) {
  if (s == "retrieval") return Stage::kRetrieval;
  if (s == "coarse") return Stage::kCoarse;
  if (s == "fine") return Stage::kFine;
  if (s == "cached") return Stage::kCached;
  if (s == "rule-adjusted") return Stage::kRuleAdjusted;
  throw Error(ErrorCode::kInvalidArgument, "unknown stage " + std::string(s));
}

Prediction Prediction::from_scores(const LabelScores& raw, Stage stage) {
  Prediction p;
  p.source_stage = stage;
  double total = 0.0;
  for (double v : raw) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw Error(ErrorCode::kInvalidArgument, "prediction scores must be finite and non-negative");
    }
    total += v;
  }
  for (std::size_t i = 0; i < raw.size(); ++i) {
    p.scores[i] = total > 0.0 ? raw[i] / total : 1.0 / RelevanceLabel::kLevels;
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < p.scores.size(); ++i) {
    if (p.scores[i] > p.scores[best]) best = i;
  }
  for (std::size_t i = best + 1; i < p.scores.size(); ++i) {
    if (p.scores[i] == p.scores[best]) p.tie_broken = true;
  }
  p.label = RelevanceLabel::of(static_cast<int>(best));
  return p;
}

Prediction Prediction::smoothed(RelevanceLabel label, Stage stage, double smoothing) {
  Prediction p;
  p.label = label;
  p.source_stage = stage;
  const double other = smoothing / (RelevanceLabel::kLevels - 1);
  for (int i = 0; i < RelevanceLabel::kLevels; ++i) {
    p.scores[static_cast<std::size_t>(i)] = i == label.value() ? 1.0 - smoothing : other;
  }
  return p;
}

bool Prediction::is_consistent() const {
  double total = 0.0;
  std::size_t best = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!(scores[i] >= 0.0)) return false;
    total += scores[i];
    if (scores[i] > scores[best]) best = i;
  }
  return std::abs(total - 1.0) <= 1e-9 && static_cast<int>(best) == label.value();
}

std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::kUserReport: return "user-report";
    case Provenance::kDialectic: return "dialectic";
    case Provenance::kProbe: return "probe";
    case Provenance::kEvaluation: return "evaluation";
  }
  return "evaluation";
}

Provenance provenance_from(std::string_view s) {
  if (s == "user-report") return Provenance::kUserReport;
  if (s == "dialectic") return Provenance::kDialectic;
  if (s == "probe") return Provenance::kProbe;
  if (s == "evaluation") return Provenance::kEvaluation;
  throw Error(ErrorCode::kInvalidArgument, "unknown provenance " + std::string(s));
}

bool is_bad_case(const Prediction& prediction, RelevanceLabel reference) {
  return prediction.label != reference;
}

double bad_case_rate(std::span<const Case> cases) {
  if (cases.empty()) throw Error(ErrorCode::kEmptySample, "bad-case rate of an empty sample is undefined");
  std::size_t bad = 0;
  for (const auto& c : cases) {
    if (!c.reference) throw Error(ErrorCode::kInvalidArgument, "case " + c.id + " has no reference label");
    if (is_bad_case(c.online_prediction, *c.reference)) ++bad;
  }
  return static_cast<double>(bad) / static_cast<double>(cases.size());
}

}  // namespace caseloop
