#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "caseloop/core/rng.hpp"
#include "caseloop/core/types.hpp"
#include "caseloop/model/features.hpp"
#include "caseloop/world/standard.hpp"
#include "caseloop/world/tools.hpp"

namespace caseloop::world {
class World;
}

namespace caseloop::annotator {

using ToolFn = std::function<world::ToolResult(const world::ToolCall&)>;

struct Citation {
  std::string tool;
  std::string ref;
  std::string snippet;

  bool operator==(const Citation&) const = default;
};

// Structured facts lifted from web hits.
struct GroundedFact {
  std::string entity;
  std::string category;
  AttributeMap attributes;
  std::vector<std::string> image_refs;

  bool operator==(const GroundedFact&) const = default;
};

struct QuerySummary {
  std::string query_id;
  std::string summary_text;
  std::vector<Citation> evidence;
  std::vector<GroundedFact> facts;
  bool degraded = false;

  bool operator==(const QuerySummary&) const = default;
};

// Web grounding. Tool failure or no hits gives summary = query text, degraded.
QuerySummary ground_query(const Query& q, const ToolFn& web_tool);

// Intent as the annotator reads it: lexicon parse (typo-corrected) plus grounded facts.
world::QueryIntent grounded_intent(const model::QueryParser& parser, const Query& q, const QuerySummary& summary);

struct JudgeRequest {
  Query query;
  Product product;
  QuerySummary summary;
  StandardsDoc standards;
  std::vector<Directive> directives;
  int sample_index = 0;
};

struct Judgment {
  RelevanceLabel label;
  std::string rationale;
  std::string clause_id;  // empty when no clause decided
};

// Pluggable standard-grounded judge.
class JudgePolicy {
 public:
  virtual ~JudgePolicy() = default;
  virtual Judgment judge(const JudgeRequest& request) const = 0;
  virtual std::string name() const = 0;
};

// World-backed judge. Reads the published clauses in the request, applies
// directives, then perturbs to an adjacent label with probability epsilon.
class MockJudge : public JudgePolicy {
 public:
  MockJudge(const world::World& world, std::shared_ptr<const model::QueryParser> parser, double epsilon,
            std::uint64_t seed);

  Judgment judge(const JudgeRequest& request) const override;
  std::string name() const override { return "mock"; }
  // Noise-free judgment under the request's clauses and directives.
  Judgment clean(const JudgeRequest& request) const;

 private:
  const world::World& world_;
  std::shared_ptr<const model::QueryParser> parser_;
  double epsilon_;
  std::uint64_t seed_;
};

// Label-adjacent perturbation: 0 -> 1, 3 -> 2, otherwise +-1.
RelevanceLabel perturb(RelevanceLabel label, Rng& rng);

// Prompt-in / judgment-out client. Request body: {"prompt", "sample_index"};
// response body: {"label", "rationale"}. Transport failure -> kAnnotatorUnavailable.
class RemoteJudge : public JudgePolicy {
 public:
  RemoteJudge(std::string host, int port, std::string path = "/judge", int timeout_seconds = 30);

  Judgment judge(const JudgeRequest& request) const override;
  std::string name() const override { return "remote"; }
  static std::string render_prompt(const JudgeRequest& request);

 private:
  std::string host_;
  int port_;
  std::string path_;
  int timeout_seconds_;
};

struct CandidateJudgment {
  RelevanceLabel label;
  std::string rationale;
  std::string clause_id;
  int sample_index = 0;

  bool operator==(const CandidateJudgment&) const = default;
};

// k samples from the judge. Throws kInvalidK when k < 1.
std::vector<CandidateJudgment> generate_candidates(const JudgePolicy& judge, const QuerySummary& summary,
                                                   const Query& q, const Product& d, const StandardsDoc& s,
                                                   const std::vector<Directive>& directives, int k);

// ---------------------------------------------------------------------------
// GRM

inline constexpr std::size_t kGrmFeatures = 11;
using GrmFeatures = std::array<double, kGrmFeatures>;

const char* grm_feature_name(std::size_t i);

struct GrmParams {
  GrmFeatures weights{};
  double lambda = 1.0;
  double margin = 0.5;

  static GrmParams defaults();
  bool operator==(const GrmParams&) const = default;
};

// Everything the features see about one (S, I, q, d) item.
struct GrmContext {
  world::QueryIntent intent;
  Product product;
  StandardsDoc standards;
  std::vector<Directive> directives;
  std::array<double, 4> vote_share{};  // fraction of C1 holding each label
};

GrmContext make_context(const model::QueryParser& parser, const QuerySummary& summary, const Query& q,
                        const Product& d, const StandardsDoc& s, const std::vector<Directive>& directives,
                        const std::vector<CandidateJudgment>& candidates);

GrmFeatures grm_features(const GrmContext& ctx, RelevanceLabel candidate);
double grm_raw(const GrmParams& p, const GrmFeatures& f);
double sigmoid(double x);
// sigmoid of the linear feature score.
double grm_score(const GrmParams& p, const GrmContext& ctx, RelevanceLabel candidate);

// log(1 + exp(-(score_p - score_n - margin)))
double pairwise_loss(double score_p, double score_n, double margin);

struct GrmPair {
  GrmFeatures positive{};
  GrmFeatures negative{};
};

struct GrmLabeled {
  GrmFeatures features{};
  double target = 0.0;  // 1 when the candidate is correct
};

struct GrmLoss {
  double total = 0.0;
  double ce = 0.0;
  double pairwise = 0.0;
};

// L = mean CE + lambda * mean pairwise. Gradient w.r.t. weights when grad != nullptr.
GrmLoss grm_loss(const GrmParams& p, const std::vector<GrmPair>& pairs, const std::vector<GrmLabeled>& ce,
                 GrmFeatures* grad);

struct GrmTrainConfig {
  double lambda = 1.0;
  double margin = 0.5;
  int epochs = 300;
  double learning_rate = 0.5;
};

// Full-batch gradient descent from zero weights. Throws kDegenerateData when
// there are no pairs or every pair has identical sides.
GrmParams grm_train(const std::vector<GrmPair>& pairs, const std::vector<GrmLabeled>& ce,
                    const GrmTrainConfig& config);

// Argmax; ties go to the lowest sample_index.
std::size_t select_label(const std::vector<CandidateJudgment>& candidates, const std::vector<double>& scores);

struct AnnotationResult {
  RelevanceLabel label;
  std::string rationale;
  std::string clause_id;
  std::vector<CandidateJudgment> candidates;
  std::vector<double> scores;
  std::size_t selected = 0;
  QuerySummary summary;
};

struct AnnotatorConfig {
  int k = 5;
};

// ground -> generate -> score -> select, then directives.
class Annotator {
 public:
  Annotator(ToolFn web_tool, std::shared_ptr<const JudgePolicy> judge, std::shared_ptr<const model::QueryParser> parser,
            GrmParams grm, AnnotatorConfig config = {});

  AnnotationResult annotate(const Query& q, const Product& d, const StandardsDoc& s,
                            const std::vector<Directive>& directives) const;
  QuerySummary ground(const Query& q) const { return ground_query(q, web_tool_); }

  const GrmParams& grm() const { return grm_; }
  const model::QueryParser& parser() const { return *parser_; }
  const JudgePolicy& judge() const { return *judge_; }

 private:
  ToolFn web_tool_;
  std::shared_ptr<const JudgePolicy> judge_;
  std::shared_ptr<const model::QueryParser> parser_;
  GrmParams grm_;
  AnnotatorConfig config_;
};

// GRM training data from seeded annotation of world pairs against the oracle:
// CE items for every candidate, pairs for (correct, incorrect) candidates.
struct GrmTrainingSet {
  std::vector<GrmPair> pairs;
  std::vector<GrmLabeled> ce;
};

GrmTrainingSet build_grm_training_set(const world::World& world, const JudgePolicy& judge,
                                      const model::QueryParser& parser, const std::vector<std::pair<std::string, std::string>>& pairs,
                                      int k);

}  // namespace caseloop::annotator
