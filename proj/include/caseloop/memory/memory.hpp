#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "caseloop/core/records.hpp"
#include "caseloop/core/types.hpp"

namespace caseloop::memory {

enum class Source { kExpertCurated, kDeepSearchArtifact, kDistilledTrace };

std::string_view to_string(Source s);
Source source_from(std::string_view s);
// expert 1.0, artifact 0.7, trace 0.5
double default_authority(Source s);

enum class ContentKind { kPrecedent, kMapping, kRuleSuggestion };

std::string_view to_string(ContentKind k);
ContentKind content_kind_from(std::string_view s);

struct Content {
  ContentKind kind = ContentKind::kPrecedent;
  std::string query_text;
  std::string product_id;       // empty for pattern-level entries
  std::string product_pattern;  // e.g. category leaf
  std::optional<RelevanceLabel> label;
  std::string citation;  // case id, clause id or tool path
  std::string text;

  bool operator==(const Content&) const = default;
};

struct MemoryEntry {
  std::string id;
  Source source = Source::kDistilledTrace;
  Content content;
  std::vector<double> embedding;
  std::int64_t created_at = 0;
  double authority = 0.5;

  bool operator==(const MemoryEntry&) const = default;
};

void to_json(Json& j, const Content& c);
void from_json(const Json& j, Content& c);
void to_json(Json& j, const MemoryEntry& e);
void from_json(const Json& j, MemoryEntry& e);

using Embedder = std::function<std::vector<double>(const std::string& text)>;

struct Scored {
  MemoryEntry entry;
  double score = 0.0;
};

// Append-only store. Concurrent readers, serialized writers.
class MemoryStore {
 public:
  explicit MemoryStore(Embedder embedder);

  // Returns the id of an existing entry when the (source, content) pair is
  // already stored. Authority defaults by source when negative.
  std::string write(Source source, const Content& content, std::int64_t created_at, double authority = -1.0);
  std::optional<MemoryEntry> get(const std::string& id) const;
  // Cosine over embeddings of content.query_text; ties by id. Empty store -> empty.
  std::vector<Scored> retrieve(const std::string& query_text, std::size_t k) const;
  std::size_t size() const;
  std::vector<MemoryEntry> entries() const;

  // One line per entry.
  static std::string one_liner(const MemoryEntry& e);
  // Clusters keyed by (kind, product pattern, label); members in id order.
  std::map<std::string, std::string> cluster_digests() const;

  // Drops entries whose (source, content) repeats an earlier one; returns how many.
  std::size_t compact();

  // memory.jsonl plus memory_embeddings.jsonl.
  void save(const std::filesystem::path& dir) const;
  void load(const std::filesystem::path& dir);

 private:
  Embedder embedder_;
  mutable std::shared_mutex mu_;
  std::vector<MemoryEntry> entries_;
  std::map<std::string, std::string> by_key_;
};

enum class ResolutionKind { kExempt, kModelErrorRetrained, kStandardEvolution, kHumanAdjudication };

std::string_view to_string(ResolutionKind k);

// A finalized (or not) case resolution handed to distill().
struct Resolution {
  std::string case_id;
  Query query;
  Product product;
  ResolutionKind kind = ResolutionKind::kExempt;
  std::optional<RelevanceLabel> settled_label;
  std::string citation;
  bool finalized = false;
};

struct Distilled {
  Source source = Source::kDistilledTrace;
  Content content;
  double authority = 0.5;
};

// Exempt -> nothing. Unfinalized or label-less -> kUnresolvedInput.
std::vector<Distilled> distill(const Resolution& r);

}  // namespace caseloop::memory
