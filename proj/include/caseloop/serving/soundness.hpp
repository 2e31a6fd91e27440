#pragma once

#include <cstddef>

#include "caseloop/model/features.hpp"
#include "caseloop/serving/serving.hpp"

namespace caseloop::world {
class World;
}

namespace caseloop::serving {

struct SoundnessReport {
  std::size_t cached = 0;             // oracle-labeled entries inserted
  std::size_t specialized_queries = 0;
  std::size_t lookups = 0;
  std::size_t inferred_zeros = 0;
  std::size_t false_zeros = 0;  // inferred 0 where the oracle says otherwise
  std::size_t exact_hits = 0;
};

// Fills a cache with oracle labels for every (world query, product), then looks
// up every product for every one-step specialization of each query (extra brand
// or extra attribute value) and checks each inferred zero against oracle_label.
SoundnessReport check_zero_soundness(const world::World& w, const model::QueryParser& parser);

}  // namespace caseloop::serving
