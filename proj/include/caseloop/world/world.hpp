#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "caseloop/core/sample.hpp"
#include "caseloop/core/types.hpp"
#include "caseloop/world/catalog.hpp"
#include "caseloop/world/lexicon.hpp"
#include "caseloop/world/standard.hpp"
#include "caseloop/world/tools.hpp"

namespace caseloop::world {

struct WorldConfig {
  std::uint64_t seed = 7;
  int num_products = 2000;
  int num_queries = 200;
  // Fraction of the initial corpus whose labels are corrupted.
  double noise_rate = 0.2;
  // Fraction of queries that form the head of the traffic distribution.
  double head_fraction = 0.2;
  double head_weight = 8.0;
  double typo_fraction = 0.08;
  double spanish_fraction = 0.1;
  // Fraction of products whose serving features are corrupted.
  double defect_rate = 0.02;
  int corpus_pairs_per_query = 20;
  int heldout_pairs = 1000;
  int guard_pairs = 600;
  int noise_patterns = 4;

  void validate() const;
};

enum class FeatureDefect { kSeoCheat, kWrongCategory, kMissingBrand };

std::string_view to_string(FeatureDefect d);
FeatureDefect feature_defect_from(std::string_view s);

struct WorldQuery {
  Query query;
  QueryIntent intent;
  double weight = 1.0;
  bool head = false;
};

struct KnowledgeFact {
  std::string entity;
  std::string text;
  std::vector<std::string> visual_tags;
  std::string image_ref;
  std::string category;
  AttributeMap attributes;
};

// A systematic labeling error baked into the initial corpus.
struct NoisePattern {
  std::string scope;  // department id
  std::string kind;   // "brand_conflict" | "attribute_conflict:<key>" | "sibling_category"
  RelevanceLabel corrupted_label;

  bool operator==(const NoisePattern&) const = default;
};

struct PairRef {
  std::string query_id;
  std::string product_id;

  bool operator==(const PairRef&) const = default;
};

// Hidden ground truth: published clauses plus clauses absent from S.
struct OracleStandard {
  StandardsDoc published;
  std::vector<Clause> hidden_clauses;

  std::vector<std::string> all_predicates() const;
};

// Seeded micro-world. Read-only after generation except for the oracle cost counter.
class World {
 public:
  static World generate(const WorldConfig& config);
  static World import_from(const std::filesystem::path& dir);

  World(const World& other);
  World& operator=(const World& other);
  World(World&&) noexcept = default;
  World& operator=(World&&) noexcept = default;
  ~World() = default;

  const WorldConfig& config() const { return config_; }
  const Taxonomy& taxonomy() const { return Taxonomy::builtin(); }
  const Lexicon& lexicon() const { return lexicon_; }

  // Evaluation (pristine) view.
  std::span<const Product> products() const { return products_; }
  const Product& product(std::string_view id) const;
  bool has_product(std::string_view id) const;
  // Serving feature-store view; may carry injected defects.
  const Product& serving_product(std::string_view id) const;
  std::optional<FeatureDefect> defect(std::string_view id) const;
  const std::map<std::string, FeatureDefect>& defects() const { return defects_; }

  std::span<const WorldQuery> queries() const { return queries_; }
  const WorldQuery* find_query(std::string_view id) const;
  const WorldQuery& query(std::string_view id) const;

  const std::map<std::string, std::string>& typo_table() const { return typo_table_; }
  const std::map<std::string, KnowledgeFact>& knowledge() const { return knowledge_; }
  const std::map<std::string, std::vector<std::string>>& images() const { return images_; }
  const OracleStandard& oracle_standard() const { return oracle_; }
  const StandardsDoc& published_standards() const { return oracle_.published; }

  // Ground-truth intent. World queries use their generated intent; any other
  // query is read from its text with the full lexicon and knowledge map.
  QueryIntent intent_of(const Query& q) const;

  // y* from the hidden standard. Counts one oracle access. Throws kUnknownEntity
  // for products outside the world.
  RelevanceLabel oracle_label(const Query& q, const Product& d) const;
  RelevanceLabel oracle_label(const Query& q, std::string_view product_id) const;
  // Label under an explicit clause set, without touching the cost counter.
  ClauseVerdict judge(const QueryIntent& intent, std::string_view product_id,
                      const std::vector<std::string>& predicates) const;
  std::uint64_t oracle_calls() const { return oracle_calls_->load(); }

  std::vector<std::string> visual_tags(const Product& d) const;
  ToolResult simulate_tool(const ToolCall& call) const;

  const Corpus& initial_corpus() const { return initial_corpus_; }
  const std::vector<NoisePattern>& noise_patterns() const { return noise_patterns_; }
  const std::vector<PairRef>& heldout_pairs() const { return heldout_; }
  const std::vector<PairRef>& guard_pairs() const { return guard_; }

  // Query text composed from an intent in the given language.
  std::string compose_query_text(const QueryIntent& intent, std::string_view language) const;

  // Hex digest over the canonical export.
  std::string digest() const;
  void export_to(const std::filesystem::path& dir) const;

 private:
  World() = default;
  void rebuild_indexes();

  WorldConfig config_;
  Lexicon lexicon_;
  std::vector<Product> products_;
  std::vector<Product> serving_products_;
  std::map<std::string, FeatureDefect> defects_;
  std::vector<WorldQuery> queries_;
  std::map<std::string, std::string> typo_table_;
  std::map<std::string, KnowledgeFact> knowledge_;
  std::map<std::string, std::vector<std::string>> images_;
  OracleStandard oracle_;
  Corpus initial_corpus_;
  std::vector<NoisePattern> noise_patterns_;
  std::vector<PairRef> heldout_;
  std::vector<PairRef> guard_;

  std::map<std::string, std::size_t, std::less<>> product_index_;
  std::map<std::string, std::size_t, std::less<>> query_index_;
  std::shared_ptr<std::atomic<std::uint64_t>> oracle_calls_ = std::make_shared<std::atomic<std::uint64_t>>(0);
};

}  // namespace caseloop::world
