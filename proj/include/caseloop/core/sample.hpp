#pragma once

#include <string>
#include <vector>

#include "caseloop/core/types.hpp"

namespace caseloop {

// One supervised (q, d, y) training record.
struct Sample {
  std::string id;
  Query query;
  std::string product_id;
  RelevanceLabel label;
  std::string provenance;

  bool operator==(const Sample&) const = default;
};

// Exact-key deduplication: (query text, product id, label).
std::string dedup_key(const Sample& s);

using Corpus = std::vector<Sample>;

}  // namespace caseloop
