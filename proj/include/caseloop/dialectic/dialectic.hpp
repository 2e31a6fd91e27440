#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "caseloop/annotator/annotator.hpp"
#include "caseloop/core/records.hpp"
#include "caseloop/core/types.hpp"
#include "caseloop/memory/memory.hpp"

namespace caseloop::world {
class World;
}

namespace caseloop::dialectic {

enum class Speaker { kUser, kAnnotator };

std::string_view to_string(Speaker s);

struct Argument {
  RelevanceLabel label;
  std::string reason;  // predicate or clause cited; "intuition" when none
  std::string text;
  std::vector<std::string> precedent_ids;
  bool justified_by_s = false;  // annotator only

  bool operator==(const Argument&) const = default;
};

struct Turn {
  int round = 0;
  Speaker speaker = Speaker::kUser;
  Argument argument;

  bool operator==(const Turn&) const = default;
};

enum class OutcomeKind { kConsensus, kNoConsensus };

struct ConsensusOutcome {
  OutcomeKind kind = OutcomeKind::kNoConsensus;
  std::optional<RelevanceLabel> label;
  bool justified_by_s = false;

  bool operator==(const ConsensusOutcome&) const = default;
};

struct Transcript {
  std::string case_id;
  std::vector<Turn> turns;  // user, annotator, user, ...
  int round_count = 0;
  ConsensusOutcome outcome;

  bool operator==(const Transcript&) const = default;
};

void to_json(Json& j, const Argument& a);
void from_json(const Json& j, Argument& a);
void to_json(Json& j, const Transcript& t);
void from_json(const Json& j, Transcript& t);

// The user side never receives S. Precedents are offered to both sides.
class UserPolicy {
 public:
  virtual ~UserPolicy() = default;
  virtual Argument open(const Query& q, const Product& d) const = 0;
  virtual Argument respond(const Query& q, const Product& d, const Argument& mine, const Argument& theirs,
                           const std::vector<memory::MemoryEntry>& precedents, int round) const = 0;
};

class AnnotatorPolicy {
 public:
  virtual ~AnnotatorPolicy() = default;
  virtual Argument open(const Query& q, const Product& d, const StandardsDoc& s, const std::vector<Directive>& i,
                        const std::vector<memory::MemoryEntry>& precedents) const = 0;
  virtual Argument respond(const Query& q, const Product& d, const StandardsDoc& s, const std::vector<Directive>& i,
                           const Argument& mine, const Argument& theirs,
                           const std::vector<memory::MemoryEntry>& precedents, int round) const = 0;
};

struct MockUserConfig {
  double epsilon = 0.1;
  std::uint64_t seed = 11;
  bool stubborn = false;
};

// Shopper view of the oracle: hidden and published clauses over the listing as
// shown, with label noise on the opening position. Concedes when the other
// side names its own noise-free label; otherwise falls back to it.
class MockUser : public UserPolicy {
 public:
  MockUser(const world::World& world, MockUserConfig config = {});
  Argument open(const Query& q, const Product& d) const override;
  Argument respond(const Query& q, const Product& d, const Argument& mine, const Argument& theirs,
                   const std::vector<memory::MemoryEntry>& precedents, int round) const override;
  Argument clean(const Query& q, const Product& d) const;

 private:
  const world::World& world_;
  MockUserConfig config_;
};

struct MockAnnotatorConfig {
  bool stubborn = false;
};

// Opens with the GRM-selected annotation. On response: exact-pair precedent
// first, then concede to a label derivable from S (+I), then concede unjustified
// to a verifiable clause outside S, otherwise hold the clean S reading.
class MockAnnotatorAgent : public AnnotatorPolicy {
 public:
  MockAnnotatorAgent(std::shared_ptr<const annotator::Annotator> annotator,
                     std::shared_ptr<const annotator::MockJudge> judge, MockAnnotatorConfig config = {});
  Argument open(const Query& q, const Product& d, const StandardsDoc& s, const std::vector<Directive>& i,
                const std::vector<memory::MemoryEntry>& precedents) const override;
  Argument respond(const Query& q, const Product& d, const StandardsDoc& s, const std::vector<Directive>& i,
                   const Argument& mine, const Argument& theirs, const std::vector<memory::MemoryEntry>& precedents,
                   int round) const override;

 private:
  annotator::Judgment clean(const Query& q, const Product& d, const StandardsDoc& s,
                            const std::vector<Directive>& i) const;

  std::shared_ptr<const annotator::Annotator> annotator_;
  std::shared_ptr<const annotator::MockJudge> judge_;
  MockAnnotatorConfig config_;
};

struct Candidate {
  Product product;
  Prediction online;
};

struct DialecticConfig {
  int max_rounds = 5;
  std::size_t precedents_k = 5;
  std::string case_prefix = "case";
  int standards_version = 1;
};

struct DialecticResult {
  Case case_record;
  Transcript transcript;
};

struct DialecticFailure {
  std::string case_id;
  std::string product_id;
  std::string message;
};

struct DialecticBatch {
  std::vector<DialecticResult> results;
  std::vector<DialecticFailure> failures;
};

// One bounded negotiation per candidate. A policy error aborts that candidate only.
DialecticBatch run_dialectic(const Query& q, const std::vector<Candidate>& candidates, const StandardsDoc& s,
                             const std::vector<Directive>& i, const memory::MemoryStore* memory,
                             const UserPolicy& user, const AnnotatorPolicy& annotator,
                             const DialecticConfig& config = {});

// Single negotiation; throws whatever the policies throw.
Transcript negotiate(const std::string& case_id, const Query& q, const Product& d, const StandardsDoc& s,
                     const std::vector<Directive>& i, const std::vector<memory::MemoryEntry>& precedents,
                     const UserPolicy& user, const AnnotatorPolicy& annotator, int max_rounds);

enum class RouteKind { kStandardEvolution, kModelError, kExempt };

std::string_view to_string(RouteKind k);
RouteKind route_kind_from(std::string_view s);

struct RoutedAction {
  RouteKind kind = RouteKind::kExempt;
  bool low_confidence = false;

  bool operator==(const RoutedAction&) const = default;
};

RoutedAction route_outcome(const ConsensusOutcome& outcome, const Prediction& online);

struct MiningMetrics {
  std::optional<double> precision;  // null when nothing was emitted
  double recall = 0.0;
  std::size_t emitted = 0;
  std::size_t true_positives = 0;
  std::size_t reference = 0;
};

// model_error emissions against the reference bad-case ids. Throws kEmptyReference.
MiningMetrics mining_metrics(const std::map<std::string, RoutedAction>& routed,
                             const std::set<std::string>& reference_bad);

}  // namespace caseloop::dialectic
