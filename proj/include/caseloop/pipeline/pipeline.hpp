#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "caseloop/annotator/annotator.hpp"
#include "caseloop/core/records.hpp"
#include "caseloop/core/sample.hpp"
#include "caseloop/core/types.hpp"
#include "caseloop/deep_search/deep_search.hpp"
#include "caseloop/dialectic/dialectic.hpp"
#include "caseloop/memory/memory.hpp"
#include "caseloop/model/index.hpp"
#include "caseloop/model/model.hpp"
#include "caseloop/optimizer/optimizer.hpp"
#include "caseloop/pipeline/guard.hpp"
#include "caseloop/serving/serving.hpp"
#include "caseloop/world/world.hpp"

namespace caseloop::pipeline {

struct PipelineConfig {
  world::WorldConfig world;
  std::uint64_t seed = 1;
  std::size_t queries_per_cycle = 40;
  double judge_epsilon = 0.1;
  int annotator_k = 5;
  double user_epsilon = 0.1;
  int max_rounds = 5;
  model::TrainConfig train;
  GuardConfig guard;
  serving::ServingConfig serving;
  optimizer::RefineConfig refine;
  bool probe = true;
  optimizer::ProbeConfig probe_config;
  bool deep_search = true;
  int search_budget = 6;
  double search_threshold = 0.9;
  std::size_t search_top_k = 5;
};

void to_json(Json& j, const PipelineConfig& c);
void from_json(const Json& j, PipelineConfig& c);

struct CycleReport {
  int cycle_id = 0;
  std::size_t d_full_before = 0;
  std::size_t d_inc = 0;
  std::size_t dedup_count = 0;
  std::size_t d_full = 0;
  std::size_t crawled = 0;
  std::size_t flagged = 0;  // annotator disagrees with online, sent to dialectic
  std::size_t discovered = 0;  // routed model_error_case
  std::size_t resolved = 0;    // discovered cases the deployed model now gets right
  double discovery_rate = 0.0;
  std::optional<double> resolution_rate;
  std::size_t exempt = 0;
  std::size_t standard_evolution = 0;
  std::size_t no_consensus = 0;
  std::size_t corrections = 0;
  std::size_t additions = 0;
  std::size_t probe_cases = 0;
  std::size_t feature_side = 0;
  dialectic::MiningMetrics mining;
  Decision decision = Decision::kPromoted;
  std::string candidate_version;
  std::string deployed_version;
  double incumbent_accuracy = 0.0;
  double candidate_accuracy = 0.0;
  double bad_case_rate_before = 0.0;
  double bad_case_rate_after = 0.0;
  std::size_t associations = 0;
  std::size_t fine_calls = 0;
  double downgrade_fraction = 0.0;
};

void to_json(Json& j, const CycleReport& r);
void from_json(const Json& j, CycleReport& r);

enum class CaseStatus { kQueuedForRetrain, kRetrained, kExempt, kAwaitingHuman, kResolved };

std::string_view to_string(CaseStatus s);
CaseStatus case_status_from(std::string_view s);

struct CaseRecord {
  Case record;
  dialectic::Transcript transcript;
  dialectic::RoutedAction route;
  CaseStatus status = CaseStatus::kQueuedForRetrain;
  std::string complaint;
  std::vector<std::string> citations;  // clause ids backing an exempt verdict
  std::string proposal_id;
  std::optional<RelevanceLabel> verdict;  // human adjudication
  std::string justification;
  int cycle = 0;  // 0 for reported cases
};

void to_json(Json& j, const CaseRecord& c);
CaseRecord case_record_from(const Json& j);

enum class ProposalStatus { kOpen, kApproved, kRejected };

std::string_view to_string(ProposalStatus s);

struct Proposal {
  std::string id;
  std::string predicate;
  std::string clause_text;
  RelevanceLabel proposed_label;
  std::vector<std::string> supporting_cases;
  ProposalStatus status = ProposalStatus::kOpen;
  std::string reason;
  std::string clause_id;  // set on approval

  bool operator==(const Proposal&) const = default;
};

void to_json(Json& j, const Proposal& p);
void from_json(const Json& j, Proposal& p);

struct CaseSubmission {
  std::string query;  // world query id or free text
  std::string product_id;
  std::string complaint;
};

// One crawled pair of a cycle, kept for recounts.
struct CrawledPair {
  std::string query_id;
  std::string query_text;
  std::string product_id;
  RelevanceLabel online;
  RelevanceLabel annotated;
  RelevanceLabel oracle;
  std::string case_id;  // empty when not flagged
  std::string route;    // empty when not flagged
};

void to_json(Json& j, const CrawledPair& p);
void from_json(const Json& j, CrawledPair& p);

struct ServedLabel {
  Prediction prediction;
  std::optional<std::string> applied_rule;
};

// Orchestrates cycles and case workflows over one state directory. All
// mutating calls are serialized.
class Pipeline {
 public:
  // Fresh state: world, D_0, cycle-0 checkpoint (also the frozen memory encoder).
  static std::unique_ptr<Pipeline> init(const std::filesystem::path& dir, const PipelineConfig& config);
  static std::unique_ptr<Pipeline> open(const std::filesystem::path& dir);
  ~Pipeline();

  // Atomic: on failure the state directory is restored and the error rethrown.
  CycleReport run_cycle();

  CaseRecord handle_case_report(const CaseSubmission& submission);
  CaseRecord handle_adjudication(const std::string& case_id, RelevanceLabel verdict, const std::string& justification);

  Directive add_directive(const Directive& d);
  void retire_directive(const std::string& id);
  Proposal decide_proposal(const std::string& id, bool approve, const std::string& reason);
  void release_breaker();

  ServedLabel score(const std::string& query, const std::string& product_id);

  std::vector<CaseRecord> cases() const;
  std::optional<CaseRecord> find_case(const std::string& id) const;
  std::vector<Proposal> proposals() const;
  std::vector<Directive> directives() const;
  StandardsDoc standards() const;
  std::vector<CycleReport> reports() const;
  GuardState guard() const;
  int cycle() const;
  Json metrics() const;
  const PipelineConfig& config() const { return config_; }
  const world::World& world() const { return *world_; }
  const std::filesystem::path& dir() const { return dir_; }
  std::string deployed_version() const;
  std::shared_ptr<const model::RelevanceModel> deployed_model() const;
  std::size_t memory_size() const;
  std::vector<memory::MemoryEntry> memory_entries() const;
  std::size_t corpus_size() const;
  std::int64_t clock() const;

  // Test hook: called with each stage name inside run_cycle; may throw.
  void set_fault_hook(std::function<void(std::string_view)> hook) { fault_hook_ = std::move(hook); }

 private:
  Pipeline(std::filesystem::path dir, PipelineConfig config);
  void build_runtime();
  void load_state();
  void persist() const;
  void persist_small() const;
  CycleReport cycle_body();
  Query resolve_query(const std::string& q) const;
  std::vector<Directive> active() const;
  void load_model(const std::string& version);
  CaseRecord finish_case(Case c, dialectic::Transcript t, int cycle, const std::string& complaint);
  void route_side_effects(CaseRecord& rec);
  // Rows go to heldout/<out_name> when out_name is set.
  double heldout_bad_rate(const model::RelevanceModel& m, const std::string& out_name) const;

  std::filesystem::path dir_;
  PipelineConfig config_;
  mutable std::recursive_mutex mu_;

  std::unique_ptr<world::World> world_;
  std::shared_ptr<const model::QueryParser> parser_;
  std::shared_ptr<const annotator::MockJudge> judge_;
  std::shared_ptr<const annotator::Annotator> annotator_;
  std::unique_ptr<dialectic::MockUser> user_;
  std::unique_ptr<dialectic::MockAnnotatorAgent> agent_;
  std::shared_ptr<const model::RelevanceModel> encoder_;  // frozen cycle-0 model
  std::unique_ptr<memory::MemoryStore> memory_;
  std::shared_ptr<const model::RelevanceModel> model_;
  std::unique_ptr<serving::ServingEngine> engine_;
  search::AssociationStore associations_;

  int cycle_ = 0;
  std::int64_t clock_ = 0;
  int checkpoint_counter_ = 0;
  std::string deployed_;
  GuardState guard_;
  Corpus corpus_;
  Corpus eval_set_;
  StandardsDoc standards_;
  std::vector<Directive> directives_;
  std::vector<Proposal> proposals_;
  std::vector<CaseRecord> cases_;
  std::vector<CycleReport> reports_;
  int report_counter_ = 0;
  std::function<void(std::string_view)> fault_hook_;
};

}  // namespace caseloop::pipeline
