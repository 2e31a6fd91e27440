#include "caseloop/pipeline/guard.hpp"

#include "caseloop/core/error.hpp"

namespace caseloop::pipeline {

std::string_view to_string(Decision d) {
  switch (d) {
    case Decision::kPromoted:
      return "promoted";
    case Decision::kSkippedAnomaly:
      return "skipped_anomaly";
    case Decision::kBreakerTripped:
      return "breaker_tripped";
  }
  return "promoted";
}

Decision decision_from(std::string_view s) {
  if (s == "promoted") return Decision::kPromoted;
  if (s == "skipped_anomaly") return Decision::kSkippedAnomaly;
  if (s == "breaker_tripped") return Decision::kBreakerTripped;
  throw Error(ErrorCode::kCorruptRecord, "unknown decision '" + std::string(s) + "'");
}

void to_json(Json& j, const GuardState& g) {
  j = Json{{"consecutive_skips", g.consecutive_skips}, {"tripped", g.tripped}};
}

void from_json(const Json& j, GuardState& g) {
  g.consecutive_skips = j.at("consecutive_skips").get<int>();
  g.tripped = j.at("tripped").get<bool>();
}

Selection select_checkpoint(const CheckpointScore& incumbent, const std::vector<CheckpointScore>& candidates,
                            const GuardConfig& config, GuardState& state) {
  if (candidates.empty()) throw Error(ErrorCode::kInvalidArgument, "no candidate checkpoints");
  const CheckpointScore* best = &candidates.front();
  for (const auto& c : candidates) {
    if (c.accuracy > best->accuracy) best = &c;
  }
  Selection s;
  s.incumbent_accuracy = incumbent.accuracy;
  s.candidate_accuracy = best->accuracy;
  s.version = incumbent.version;
  if (state.tripped) {
    s.decision = Decision::kBreakerTripped;
    return s;
  }
  if (best->accuracy < incumbent.accuracy - config.max_regression) {
    ++state.consecutive_skips;
    if (state.consecutive_skips >= config.breaker_limit) {
      state.tripped = true;
      s.decision = Decision::kBreakerTripped;
    } else {
      s.decision = Decision::kSkippedAnomaly;
    }
    return s;
  }
  state.consecutive_skips = 0;
  s.decision = Decision::kPromoted;
  s.version = best->version;
  return s;
}

void release_breaker(GuardState& state) {
  state.tripped = false;
  state.consecutive_skips = 0;
}

double eval_accuracy(const model::RelevanceModel& m, const Corpus& eval_set, const model::ProductLookup& products,
                     const std::vector<Directive>& active) {
  if (eval_set.empty()) throw Error(ErrorCode::kEmptySample, "empty eval set");
  std::size_t correct = 0;
  for (const auto& s : eval_set) {
    correct += m.fine_score(s.query, products(s.product_id), active).label == s.label ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(eval_set.size());
}

}  // namespace caseloop::pipeline
