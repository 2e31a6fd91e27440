#include "caseloop/world/standard.hpp"

#include <algorithm>

#include "caseloop/core/text.hpp"

namespace caseloop::world {
namespace {

bool enabled_in(const std::vector<std::string>& enabled, std::string_view p) {
  return std::find(enabled.begin(), enabled.end(), p) != enabled.end();
}

}  // namespace

QueryStructure to_structure(const QueryIntent& intent) {
  QueryStructure s;
  if (intent.category) s.category_intent.push_back(*intent.category);
  s.brand = intent.brand;
  s.attributes = intent.attributes;
  return s;
}

PairConflicts compare(const QueryIntent& intent, const Product& product) {
  PairConflicts c;
  c.category_match = intent.category && product.in_category(*intent.category);
  if (intent.brand) {
    if (!product.brand) {
      c.brand_unknown = true;
    } else if (*product.brand != *intent.brand) {
      c.brand_conflict = true;
    }
  }
  for (const auto& [key, want] : intent.attributes) {
    auto it = product.attributes.find(key);
    if (it == product.attributes.end()) {
      c.unknown_attributes.push_back(key);
    } else if (it->second != want) {
      c.conflicting_attributes.push_back(key);
    } else {
      ++c.matched_attributes;
    }
  }
  return c;
}

ClauseVerdict evaluate_clauses(const QueryIntent& intent, const Product& product,
                               const std::vector<std::string>& enabled) {
  auto on = [&](std::string_view p) { return enabled_in(enabled, p); };

  if (!intent.category) {
    if (on(predicate::kLexicalFallback)) {
      const auto title = tokenize(product.title);
      bool overlap = std::any_of(intent.tokens.begin(), intent.tokens.end(), [&](const auto& t) {
        return std::find(title.begin(), title.end(), t) != title.end();
      });
      return {overlap ? RelevanceLabel::weak() : RelevanceLabel::irrelevant(),
              std::string(predicate::kLexicalFallback)};
    }
    return {RelevanceLabel::irrelevant(), ""};
  }

  const PairConflicts c = compare(intent, product);
  if (!c.category_match && on(predicate::kCategoryMismatch)) {
    return {RelevanceLabel::irrelevant(), std::string(predicate::kCategoryMismatch)};
  }
  const bool gender_conflict = std::find(c.conflicting_attributes.begin(), c.conflicting_attributes.end(),
                                         "gender") != c.conflicting_attributes.end();
  if (gender_conflict && on(predicate::kGenderConflict)) {
    return {RelevanceLabel::irrelevant(), std::string(predicate::kGenderConflict)};
  }
  if (c.brand_conflict && on(predicate::kBrandConflict)) {
    return {RelevanceLabel::weak(), std::string(predicate::kBrandConflict)};
  }
  if (!c.conflicting_attributes.empty() && on(predicate::kAttributeConflict)) {
    return {RelevanceLabel::weak(), std::string(predicate::kAttributeConflict)};
  }
  if (c.category_match && !c.brand_unknown && c.unknown_attributes.empty() && on(predicate::kFullMatch)) {
    return {RelevanceLabel::strong(), std::string(predicate::kFullMatch)};
  }
  if (on(predicate::kPartialMatch)) {
    return {RelevanceLabel::relevant(), std::string(predicate::kPartialMatch)};
  }
  return {RelevanceLabel::irrelevant(), ""};
}

StandardsDoc default_published_standards() {
  StandardsDoc doc;
  doc.version = 1;
  doc.clauses = {
      {"S1-01", "If the product does not belong to the category the query asks for, it is irrelevant.",
       std::string(predicate::kCategoryMismatch)},
      {"S1-02", "A product from a different brand than the one requested is at most weakly relevant.",
       std::string(predicate::kBrandConflict)},
      {"S1-03", "A product that contradicts a requested attribute (color, material, style, fit, gender, "
                "connectivity) is at most weakly relevant.",
       std::string(predicate::kAttributeConflict)},
      {"S1-04", "A product matching the category, brand and every requested attribute is strongly relevant.",
       std::string(predicate::kFullMatch)},
      {"S1-05", "A product in the requested category whose brand or attributes cannot be verified is relevant.",
       std::string(predicate::kPartialMatch)},
      {"S1-06", "When the query names no recognizable category, judge by textual overlap: overlap is weakly "
                "relevant, no overlap is irrelevant.",
       std::string(predicate::kLexicalFallback)},
  };
  return doc;
}

std::vector<Clause> default_hidden_clauses() {
  return {{"H-01", "A product made for a different gender than the one requested is irrelevant.",
           std::string(predicate::kGenderConflict)}};
}

}  // namespace caseloop::world
