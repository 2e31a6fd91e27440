#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "caseloop/core/types.hpp"

namespace caseloop::world {
class World;
}

namespace caseloop::rules {

enum class Verdict { kApplies, kObjectMismatch, kScenarioMismatch };

std::string_view to_string(Verdict v);

struct Applicability {
  Verdict verdict = Verdict::kScenarioMismatch;
  // Justification record: which scope components matched.
  std::vector<std::string> matched_clauses;
};

Applicability applies(const Rule& rule, const QueryStructure& q, const Product& d);

struct RuleOutcome {
  Prediction prediction;
  std::optional<std::string> applied_rule;
  // Other applicable rules sharing the winning priority.
  std::vector<std::string> same_priority_conflicts;
  std::vector<std::string> justification;
};

// Directives sorted by priority descending, id ascending.
void sort_by_priority(std::vector<Directive>& directives);

// Highest-priority applicable rule transforms the base label. Same-priority
// conflicts resolve to the smallest rule id.
RuleOutcome apply_rules(const Prediction& base, const std::vector<Directive>& active, const QueryStructure& q,
                        const Product& d);

// Active directive registry. Snapshot reads, serialized writes.
class DirectiveSet {
 public:
  // Throws kInvalidArgument on a duplicate id or when another directive with the
  // same query scope and priority overlaps in time.
  void add(const Directive& d);
  // Returns false when the id is unknown.
  bool remove(const std::string& id);
  std::vector<Directive> active_at(std::int64_t t) const;
  std::vector<Directive> all() const;
  std::optional<Directive> find(const std::string& id) const;

 private:
  mutable std::shared_mutex mu_;
  std::vector<Directive> directives_;
};

// ---------------------------------------------------------------------------
// Contrastive instruction-following set

enum class Scenario { kUp, kDown, kNeutral };

std::string_view to_string(Scenario s);

struct InstructionItem {
  Scenario scenario = Scenario::kNeutral;
  Query query;
  QueryStructure structure;
  Product product;
  Rule rule;
  RelevanceLabel base_label;
  RelevanceLabel expected_label;
  Verdict construction = Verdict::kApplies;
};

struct ContrastiveCounts {
  int up = 200;
  int down = 200;
  int neutral = 1000;
};

// Up: inclusion lifting a base below 2. Down: exclusion or scoping removing a
// base above 0. Neutral: half object mismatch, half scenario mismatch.
// Base labels are oracle labels. Throws kInsufficientWorld.
std::vector<InstructionItem> generate_contrastive_set(const world::World& w, const ContrastiveCounts& counts,
                                                      std::uint64_t seed);

using RuleScorer = std::function<RelevanceLabel(const InstructionItem&)>;

struct InstructionMetrics {
  double acc_total = 0.0;
  std::optional<double> acc_up;
  std::optional<double> acc_down;
  std::optional<double> acc_neutral;
};

// Throws kEmptySet.
InstructionMetrics evaluate_instruction_following(const RuleScorer& scorer, const std::vector<InstructionItem>& set);

// Exact interpreter: apply_rules over the item's base label.
RelevanceLabel interpreter_score(const InstructionItem& item);

// Softmax classifier over rule-match features and the base label.
class RuleClassifier {
 public:
  // Base label one-hot, per-primitive {present, query match, product match,
  // both}, bias, scaled base, any query match, any product match.
  static constexpr int kFeatures = 20;

  struct Config {
    int epochs = 400;
    double learning_rate = 0.5;
    double l2 = 1e-4;
  };

  // Full-batch gradient descent on softmax cross-entropy against expected labels.
  static RuleClassifier train(const std::vector<InstructionItem>& items, const Config& config);
  static RuleClassifier train(const std::vector<InstructionItem>& items) { return train(items, Config{}); }

  RelevanceLabel predict(const InstructionItem& item) const;
  static std::array<double, kFeatures> features(const InstructionItem& item);

 private:
  std::array<std::array<double, kFeatures>, RelevanceLabel::kLevels> w_{};
};

}  // namespace caseloop::rules
