#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "caseloop/core/sample.hpp"
#include "caseloop/core/types.hpp"
#include "caseloop/world/lexicon.hpp"

namespace caseloop::model {

// Longest-match query understanding over category/brand/attribute lexicons,
// with typo correction applied first.
class QueryParser {
 public:
  QueryParser() = default;
  QueryParser(world::Lexicon lexicon, std::map<std::string, std::string> typo_table);

  QueryStructure parse(const Query& q) const;
  // Query with `structure` filled in.
  Query understand(const Query& q) const;
  const std::map<std::string, std::string>& typo_table() const { return typo_table_; }

 private:
  world::Lexicon lexicon_;
  std::map<std::string, std::string> typo_table_;
};

// For each sample whose query text has a correction, appends a copy with the
// corrected text and the same product and label.
Corpus augment_corrections(const Corpus& corpus, const std::map<std::string, std::string>& typo_table);

inline constexpr std::size_t kHashDim = 4096;
inline constexpr std::size_t kCrossDim = 32;

using FeatureIds = std::vector<std::uint32_t>;
using CrossFeatures = std::array<double, kCrossDim>;

std::uint32_t feature_id(std::string_view name);

// Shared namespace: "t:" tokens, "c:" leaf, "p:" department, "b:" brand,
// "a:key=value", "lang:" tag. Query structure is injected as features.
std::vector<std::string> query_feature_names(const Query& q, const QueryStructure& s);
std::vector<std::string> product_feature_names(const Product& d);
FeatureIds hash_features(const std::vector<std::string>& names);

// Explicit query-product agreement features for the fine head.
CrossFeatures cross_features(const Query& q, const QueryStructure& s, const Product& d);

}  // namespace caseloop::model
