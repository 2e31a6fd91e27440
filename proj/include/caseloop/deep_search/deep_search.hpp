#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <vector>

#include "caseloop/annotator/annotator.hpp"
#include "caseloop/core/records.hpp"
#include "caseloop/core/types.hpp"
#include "caseloop/memory/memory.hpp"
#include "caseloop/model/model.hpp"
#include "caseloop/world/tools.hpp"

namespace caseloop::search {

// Fixed source reliabilities.
inline constexpr double kEcomReliability = 0.9;
inline constexpr double kImageReliability = 0.7;
inline constexpr double kWebReliability = 0.5;

double reliability(std::string_view tool);

struct PathStep {
  std::string tool;   // rewrite | ecom_search | web_search | image_search
  std::string input;  // query text or image ref

  bool operator==(const PathStep&) const = default;
};

std::string path_string(const std::vector<PathStep>& path);  // "web_search>image_search"

struct Evidence {
  int step = 0;
  std::vector<PathStep> path;  // full chain, last step is this call
  std::optional<world::ToolResult> result;
  std::string error;  // set when the tool failed

  bool failed() const { return !error.empty(); }
};

struct SearchState {
  std::vector<std::string> intent_hypotheses;
  std::set<std::string> attempted_rewrites;
  std::vector<Evidence> evidence;
  std::map<std::string, double> candidate_confidence;
  std::map<std::string, std::vector<PathStep>> candidate_path;  // path of the best evidence
  int step = 0;
};

struct AssociationCandidate {
  std::string product_id;
  double weight = 0.0;
  std::vector<PathStep> meta;

  bool operator==(const AssociationCandidate&) const = default;
};

struct AssociationRecord {
  std::string query_id;
  std::string query_text;
  std::vector<AssociationCandidate> candidates;  // weight desc, then id

  bool operator==(const AssociationRecord&) const = default;
};

void to_json(Json& j, const AssociationRecord& r);
void from_json(const Json& j, AssociationRecord& r);

struct Action {
  enum class Kind { kRewrite, kToolCall };
  Kind kind = Kind::kRewrite;
  std::string rewrite;  // kRewrite
  world::ToolCall call;  // kToolCall
  std::vector<PathStep> path;
};

class SearchPolicy {
 public:
  virtual ~SearchPolicy() = default;
  // nullopt = nothing left to try.
  virtual std::optional<Action> next(const Query& q, const SearchState& state) const = 0;
};

// rewrite -> ecom_search -> web_search on low confidence -> image_search on image evidence.
class ScriptedPlanner : public SearchPolicy {
 public:
  explicit ScriptedPlanner(std::shared_ptr<const model::QueryParser> parser = nullptr, double low_confidence = 0.6,
                           std::size_t top_n = 10);
  std::optional<Action> next(const Query& q, const SearchState& state) const override;

 private:
  std::shared_ptr<const model::QueryParser> parser_;
  double low_confidence_;
  std::size_t top_n_;
};

using ToolFn = std::function<world::ToolResult(const world::ToolCall&)>;

struct SearchOutput {
  SearchState state;
  AssociationRecord record;
};

// Throws kInvalidArgument on budget < 0 or top_k == 0.
SearchOutput deep_search(const Query& q, const SearchPolicy& policy, const ToolFn& tools, int budget,
                         double confidence_threshold, std::size_t top_k);

// Current top candidates: weight desc, then id, at most top_k.
std::vector<AssociationCandidate> ranked_candidates(const SearchState& state, std::size_t top_k);

// C_base followed by association products not already present.
std::vector<std::string> augment_pool(const std::vector<std::string>& base, const AssociationRecord& associations);

struct GateResult {
  AssociationRecord record;
  std::size_t annotated = 0;
  std::size_t from_memory = 0;
};

// Keeps label-3 candidates. A memory precedent for (query text, product) settles
// the label without annotation.
GateResult gate_associations(const AssociationRecord& record, const Query& q, const annotator::Annotator& annotator,
                             const StandardsDoc& s, const std::vector<Directive>& i, const memory::MemoryStore* k,
                             const model::ProductLookup& products);

// Query id -> gated associations. Persists as one jsonl file.
class AssociationStore {
 public:
  AssociationStore() = default;
  AssociationStore(AssociationStore&& other) noexcept : records_(std::move(other.records_)) {}
  AssociationStore& operator=(AssociationStore&& other) noexcept {
    records_ = std::move(other.records_);
    return *this;
  }

  void put(AssociationRecord record);
  std::optional<AssociationRecord> get(const std::string& query_id) const;
  std::size_t size() const;
  std::vector<AssociationRecord> records() const;

  void save(const std::filesystem::path& path) const;
  static AssociationStore load(const std::filesystem::path& path);

 private:
  mutable std::shared_mutex mu_;
  std::map<std::string, AssociationRecord> records_;
};

}  // namespace caseloop::search
