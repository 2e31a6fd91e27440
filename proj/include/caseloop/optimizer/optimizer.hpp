#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "caseloop/annotator/annotator.hpp"
#include "caseloop/core/records.hpp"
#include "caseloop/core/sample.hpp"
#include "caseloop/core/types.hpp"
#include "caseloop/memory/memory.hpp"
#include "caseloop/model/model.hpp"
#include "caseloop/world/standard.hpp"

namespace caseloop::world {
class Taxonomy;
}

namespace caseloop::optimizer {

// missing_attribute | semantic_confusion | head_word_shift | feature_defect:<kind> | unattributed
struct RootCause {
  std::string tag;
  double confidence = 0.0;

  bool operator==(const RootCause&) const = default;
};

// Pattern a model-side failure belongs to: department + tag + key.
struct PatternKey {
  std::string department;
  std::string tag;
  std::string key;  // brand, attribute key, query category, or empty

  std::string str() const { return department + "/" + tag + "/" + key; }
  bool operator==(const PatternKey&) const = default;
  auto operator<=>(const PatternKey&) const = default;
};

enum class Bucket { kFeatureSide, kModelSide };

struct CaseDiagnosis {
  std::string case_id;
  Bucket bucket = Bucket::kModelSide;
  RootCause cause;
  std::optional<PatternKey> pattern;  // model side only
};

struct DiagnosisReport {
  std::vector<CaseDiagnosis> cases;
  std::vector<PatternKey> patterns() const;  // distinct model-side patterns, sorted
};

void to_json(Json& j, const DiagnosisReport& r);

struct DiagnoseContext {
  model::ProductLookup serving;     // model view
  model::ProductLookup evaluation;  // pristine view
  std::shared_ptr<const model::QueryParser> parser;
};

struct DiagnoseOutput {
  std::vector<Case> feature_side;
  std::vector<Case> model_side;
  DiagnosisReport report;
};

// Stage 1 compares serving vs pristine product fields; stage 2 tags the rest.
// Case.reference holds the target label (y* or consensus); without one the case
// is tagged unattributed.
DiagnoseOutput diagnose(const std::vector<Case>& cases, const StandardsDoc& s, const std::vector<Directive>& i,
                        const memory::MemoryStore* k, const DiagnoseContext& ctx);

// Intent as read by the parser.
world::QueryIntent parsed_intent(const model::QueryParser& parser, const Query& q);
// Does (q, d) sit inside the pattern?
bool in_pattern(const PatternKey& p, const world::QueryIntent& intent, const Product& d);

struct Correction {
  std::string sample_id;
  RelevanceLabel old_label;
  RelevanceLabel new_label;
  std::string cause;

  bool operator==(const Correction&) const = default;
};

struct DatasetDelta {
  std::vector<Correction> corrections;
  std::vector<Sample> additions;
  bool augmentation_aborted = false;

  bool empty() const { return corrections.empty() && additions.empty(); }
};

void to_json(Json& j, const DatasetDelta& d);

struct RefineConfig {
  // Upper bound on re-annotated corpus samples per pattern.
  std::size_t max_per_pattern = 400;
};

// (a) re-annotates corpus samples inside the report's model-side patterns and
// corrects differing labels; (b) adds the cases themselves with their target
// labels, and probe cases labeled by the annotator. Never deletes.
DatasetDelta refine(const std::vector<Case>& model_side, const DiagnosisReport& report, const Corpus& d,
                    const StandardsDoc& s, const std::vector<Directive>& i, const annotator::Annotator& annotator,
                    const DiagnoseContext& ctx, const std::vector<Case>& probe_cases = {},
                    const RefineConfig& config = {});

// D' = D with corrections applied in place and new additions appended. Idempotent.
Corpus apply_delta(const Corpus& d, const DatasetDelta& delta);

// ---------------------------------------------------------------------------
// probe

enum class Verdict { kReplicated, kRejected, kPending };

std::string_view to_string(Verdict v);

struct ProbeHypothesis {
  std::string abstraction;
  std::vector<std::string> probes;  // 3..5 query texts
  Verdict verdict = Verdict::kPending;
  int round = 1;  // 1..3

  bool operator==(const ProbeHypothesis&) const = default;
};

enum class ConceptVerdict { kIndividual, kUniversal };

struct ConceptResult {
  std::string case_id;
  ConceptVerdict verdict = ConceptVerdict::kIndividual;
  std::vector<std::string> perturbations;  // query texts tried
  int persisted = 0;
};

struct ProbeEnv {
  std::function<Prediction(const Query&, const Product&)> online;
  std::function<std::vector<Product>(const Query&, std::size_t)> search;
  std::function<RelevanceLabel(const Query&, const Product&)> label;
  std::function<std::string(const world::QueryIntent&, std::string_view language)> compose;
  std::shared_ptr<const model::QueryParser> parser;
  model::ProductLookup evaluation;
};

struct ProbeConfig {
  int max_rounds = 3;
  int probes_per_round = 4;  // clamped to [3, 5]
  std::size_t results_per_probe = 3;
  std::size_t label_budget = 400;
  std::vector<std::string> languages{"en", "es"};
  std::uint64_t seed = 1;
};

struct ProbeResult {
  std::vector<Case> new_cases;  // deduped by (query text, product id)
  std::vector<ProbeHypothesis> hypotheses;
  std::vector<ConceptResult> concept_results;
  std::vector<memory::Content> memory_candidates;
  bool budget_exhausted = false;
};

// Throws kInvalidArgument when the report has no model-side tag.
ProbeResult probe(const DiagnosisReport& report, const std::vector<Case>& model_side, const StandardsDoc& s,
                  const std::vector<Directive>& i, const memory::MemoryStore* k, const ProbeEnv& env,
                  const ProbeConfig& config = {});

}  // namespace caseloop::optimizer
