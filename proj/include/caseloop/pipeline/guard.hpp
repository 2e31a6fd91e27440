#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "caseloop/core/records.hpp"
#include "caseloop/core/sample.hpp"
#include "caseloop/model/model.hpp"

namespace caseloop::pipeline {

enum class Decision { kPromoted, kSkippedAnomaly, kBreakerTripped };

std::string_view to_string(Decision d);
Decision decision_from(std::string_view s);

struct GuardConfig {
  double max_regression = 0.02;  // accuracy, absolute
  int breaker_limit = 3;
};

struct GuardState {
  int consecutive_skips = 0;
  bool tripped = false;

  bool operator==(const GuardState&) const = default;
};

void to_json(Json& j, const GuardState& g);
void from_json(const Json& j, GuardState& g);

struct CheckpointScore {
  std::string version;
  double accuracy = 0.0;
};

struct Selection {
  Decision decision = Decision::kPromoted;
  std::string version;  // serving after the decision
  double incumbent_accuracy = 0.0;
  double candidate_accuracy = 0.0;
};

// Best candidate by accuracy (first on ties). Skips when it drops more than
// max_regression below the incumbent; the breaker_limit-th consecutive skip trips
// the breaker. While tripped nothing is promoted. Throws kInvalidArgument on an
// empty candidate list.
Selection select_checkpoint(const CheckpointScore& incumbent, const std::vector<CheckpointScore>& candidates,
                            const GuardConfig& config, GuardState& state);

void release_breaker(GuardState& state);

// Fraction of samples where the fine head (with directives) matches the label.
double eval_accuracy(const model::RelevanceModel& m, const Corpus& eval_set, const model::ProductLookup& products,
                     const std::vector<Directive>& active);

}  // namespace caseloop::pipeline
