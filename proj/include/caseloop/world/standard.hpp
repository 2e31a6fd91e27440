#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "caseloop/core/types.hpp"

namespace caseloop::world {

// What a query asks for, as seen by some judge (or the ground truth).
struct QueryIntent {
  std::optional<std::string> category;  // leaf id
  std::optional<std::string> brand;
  AttributeMap attributes;
  std::optional<std::string> entity;  // external-knowledge entity the query names
  std::vector<std::string> tokens;    // normalized query tokens, for the lexical fallback

  bool operator==(const QueryIntent&) const = default;
};

namespace predicate {
inline constexpr std::string_view kCategoryMismatch = "category_mismatch_zero";
inline constexpr std::string_view kGenderConflict = "gender_conflict_zero";
inline constexpr std::string_view kBrandConflict = "brand_conflict_weak";
inline constexpr std::string_view kAttributeConflict = "attribute_conflict_weak";
inline constexpr std::string_view kFullMatch = "full_match_strong";
inline constexpr std::string_view kPartialMatch = "partial_match_relevant";
inline constexpr std::string_view kLexicalFallback = "lexical_fallback";
}  // namespace predicate

struct ClauseVerdict {
  RelevanceLabel label;
  std::string predicate;  // the clause that decided the label
};

// Evaluates clause predicates in fixed precedence order (zero rules, weak
// rules, then match rules). Predicates absent from `enabled` are skipped.
ClauseVerdict evaluate_clauses(const QueryIntent& intent, const Product& product,
                               const std::vector<std::string>& enabled);

// Counts used by several modules to describe a (intent, product) pair.
struct PairConflicts {
  bool category_match = false;
  bool brand_conflict = false;
  bool brand_unknown = false;
  std::vector<std::string> conflicting_attributes;
  std::vector<std::string> unknown_attributes;
  std::size_t matched_attributes = 0;
};

// Ground-truth structure of an intent, as a perfect parser would emit it.
QueryStructure to_structure(const QueryIntent& intent);

PairConflicts compare(const QueryIntent& intent, const Product& product);

StandardsDoc default_published_standards();
std::vector<Clause> default_hidden_clauses();

}  // namespace caseloop::world
