#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "caseloop/core/records.hpp"
#include "caseloop/core/types.hpp"
#include "caseloop/model/index.hpp"
#include "caseloop/model/model.hpp"

namespace caseloop::serving {

// One (q, d) scored by both heads.
struct LogEntry {
  std::string query_id;
  std::string product_id;
  RelevanceLabel coarse_bin;
  RelevanceLabel fine_bin;
  int window_id = 0;

  bool operator==(const LogEntry&) const = default;
};

void to_json(Json& j, const LogEntry& e);
void from_json(const Json& j, LogEntry& e);

struct ConsistencyStat {
  std::string query_id;
  std::size_t support = 0;    // distinct logged products
  std::size_t agreement = 0;  // products with bin_c == bin_f
  double c = 0.0;
  int window_id = 0;

  bool operator==(const ConsistencyStat&) const = default;
};

void to_json(Json& j, const ConsistencyStat& s);
void from_json(const Json& j, ConsistencyStat& s);

inline constexpr std::size_t kDefaultMinSupport = 20;

// Later log lines for the same product replace earlier ones. nullopt below min_support.
std::optional<ConsistencyStat> consistency_score(const std::string& query_id, const std::vector<LogEntry>& logs,
                                                 std::size_t min_support = kDefaultMinSupport);
using StatTable = std::map<std::string, ConsistencyStat>;
StatTable consistency_table(const std::vector<LogEntry>& logs, std::size_t min_support = kDefaultMinSupport);

enum class RoutePath { kCoarseOnly, kFull };
std::string_view to_string(RoutePath p);

RoutePath route_inference(const std::string& query_id, const StatTable& stats, double tau);

// ---------------------------------------------------------------------------
// hypernym cache

struct CacheKey {
  std::string category;
  std::optional<std::string> brand;
  AttributeMap attributes;
  std::string residual;  // unmatched terms, sorted; keeps entity queries apart
  std::string product_id;

  auto operator<=>(const CacheKey&) const = default;
  bool operator==(const CacheKey&) const = default;
};

struct CacheEntry {
  RelevanceLabel label;
  int checkpoint_version = 0;
  std::int64_t timestamp = 0;

  bool operator==(const CacheEntry&) const = default;
};

// nullopt when the structure has no category.
std::optional<CacheKey> cache_key(const QueryStructure& s, const std::string& product_id);
// Most-specific-first: residual dropped, then attribute subsets by size desc,
// then the same without brand. Category is never dropped. Excludes the key itself.
std::vector<CacheKey> hypernym_keys(const CacheKey& key);

struct CacheHit {
  RelevanceLabel label;
  bool inferred = false;  // zero taken from a hypernym
  CacheKey source;
};

struct CacheMetrics {
  std::uint64_t lookups = 0;
  std::uint64_t exact_hits = 0;
  std::uint64_t inferred_hits = 0;
  double hit_rate() const {
    return lookups == 0 ? 0.0 : static_cast<double>(exact_hits + inferred_hits) / static_cast<double>(lookups);
  }
};

// Concurrent reads, serialized writes. Entries from another checkpoint version
// are invisible.
class HypernymCache {
 public:
  explicit HypernymCache(int checkpoint_version = 0) : version_(checkpoint_version) {}
  HypernymCache(HypernymCache&& other) noexcept;
  HypernymCache& operator=(HypernymCache&& other) noexcept;

  std::optional<CacheHit> lookup(const QueryStructure& s, const std::string& product_id) const;
  void insert(const QueryStructure& s, const std::string& product_id, RelevanceLabel label, int checkpoint_version,
              std::int64_t timestamp = 0);

  void set_version(int v);
  int version() const;
  std::size_t size() const;  // live entries
  CacheMetrics metrics() const;

  void save(const std::filesystem::path& path) const;
  static HypernymCache load(const std::filesystem::path& path, int checkpoint_version);

 private:
  mutable std::shared_mutex mu_;
  std::map<CacheKey, CacheEntry> entries_;
  int version_;
  mutable std::atomic<std::uint64_t> lookups_{0};
  mutable std::atomic<std::uint64_t> exact_{0};
  mutable std::atomic<std::uint64_t> inferred_{0};
};

// ---------------------------------------------------------------------------
// engine

struct ServingConfig {
  double tau = 0.95;
  std::size_t min_support = kDefaultMinSupport;
  bool use_cache = true;
  // Fine-score a small share of downgraded pairs for drift logs. Off by default.
  bool shadow_sampling = false;
  double shadow_rate = 0.01;
  int window_id = 0;
  // Funnel for search(): retrieval pool, then fine on the coarse top.
  std::size_t retrieval_k = 100;
  std::size_t fine_k = 20;
};

struct ServedItem {
  std::string product_id;
  Prediction prediction;
  double coarse_score = 0.0;
  bool from_cache = false;
};

struct ServeResult {
  std::string query_id;
  RoutePath path = RoutePath::kFull;
  std::vector<ServedItem> items;  // candidate order
};

struct ServingMetrics {
  std::uint64_t queries = 0;
  std::uint64_t downgraded = 0;
  std::uint64_t fine_calls = 0;
  std::uint64_t shadow_calls = 0;
  CacheMetrics cache;
  double downgrade_fraction() const {
    return queries == 0 ? 0.0 : static_cast<double>(downgraded) / static_cast<double>(queries);
  }
};

void to_json(Json& j, const ServingMetrics& m);

class ServingEngine {
 public:
  ServingEngine(std::shared_ptr<const model::RelevanceModel> model, model::ProductLookup products,
                int checkpoint_version, ServingConfig config = {});

  // Coarse for every candidate; fine (or cache) for every candidate on the
  // full path; directives are applied last on both paths.
  ServeResult serve(const Query& q, const std::vector<std::string>& candidates, const std::vector<Directive>& active);

  // Retrieve retrieval_k (plus extra ids), rank by coarse, serve the top fine_k. Needs an index.
  ServeResult search(const Query& q, const std::vector<Directive>& active, const std::vector<std::string>& extra = {});
  void set_index(std::shared_ptr<const model::ProductIndex> index) { index_ = std::move(index); }

  void set_stats(StatTable stats);
  const StatTable& stats() const { return stats_; }
  // New checkpoint: cache entries of the old version stop being readable.
  void swap_model(std::shared_ptr<const model::RelevanceModel> model, int checkpoint_version,
                  std::shared_ptr<const model::ProductIndex> index = nullptr);
  const model::RelevanceModel& model() const { return *model_; }

  std::vector<LogEntry> logs() const;
  void clear_logs();
  ServingMetrics metrics() const;
  const HypernymCache& cache() const { return cache_; }
  HypernymCache& cache() { return cache_; }
  const ServingConfig& config() const { return config_; }
  ServingConfig& config() { return config_; }

 private:
  std::shared_ptr<const model::RelevanceModel> model_;
  std::shared_ptr<const model::ProductIndex> index_;
  model::ProductLookup products_;
  ServingConfig config_;
  HypernymCache cache_;
  StatTable stats_;
  mutable std::mutex log_mu_;
  std::vector<LogEntry> logs_;
  ServingMetrics counters_;
  std::int64_t clock_ = 0;
};

}  // namespace caseloop::serving
