#include "caseloop/memory/memory.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>

#include "caseloop/core/error.hpp"
#include "caseloop/core/text.hpp"

namespace caseloop::memory {

std::string_view to_string(Source s) {
  switch (s) {
    case Source::kExpertCurated:
      return "expert_curated";
    case Source::kDeepSearchArtifact:
      return "deep_search_artifact";
    case Source::kDistilledTrace:
      return "distilled_trace";
  }
  return "distilled_trace";
}

Source source_from(std::string_view s) {
  if (s == "expert_curated") return Source::kExpertCurated;
  if (s == "deep_search_artifact") return Source::kDeepSearchArtifact;
  if (s == "distilled_trace") return Source::kDistilledTrace;
  throw Error(ErrorCode::kCorruptRecord, "unknown memory source '" + std::string(s) + "'");
}

double default_authority(Source s) {
  switch (s) {
    case Source::kExpertCurated:
      return 1.0;
    case Source::kDeepSearchArtifact:
      return 0.7;
    case Source::kDistilledTrace:
      return 0.5;
  }
  return 0.5;
}

std::string_view to_string(ContentKind k) {
  switch (k) {
    case ContentKind::kPrecedent:
      return "precedent";
    case ContentKind::kMapping:
      return "mapping";
    case ContentKind::kRuleSuggestion:
      return "rule_suggestion";
  }
  return "precedent";
}

ContentKind content_kind_from(std::string_view s) {
  if (s == "precedent") return ContentKind::kPrecedent;
  if (s == "mapping") return ContentKind::kMapping;
  if (s == "rule_suggestion") return ContentKind::kRuleSuggestion;
  throw Error(ErrorCode::kCorruptRecord, "unknown content kind '" + std::string(s) + "'");
}

std::string_view to_string(ResolutionKind k) {
  switch (k) {
    case ResolutionKind::kExempt:
      return "exempt";
    case ResolutionKind::kModelErrorRetrained:
      return "model_error_retrained";
    case ResolutionKind::kStandardEvolution:
      return "standard_evolution";
    case ResolutionKind::kHumanAdjudication:
      return "human_adjudication";
  }
  return "exempt";
}

void to_json(Json& j, const Content& c) {
  j = Json{{"kind", to_string(c.kind)},
           {"query_text", c.query_text},
           {"product_id", c.product_id},
           {"product_pattern", c.product_pattern},
           {"label", c.label ? Json(c.label->value()) : Json(nullptr)},
           {"citation", c.citation},
           {"text", c.text}};
}

void from_json(const Json& j, Content& c) {
  c.kind = content_kind_from(j.at("kind").get<std::string>());
  c.query_text = j.at("query_text").get<std::string>();
  c.product_id = j.at("product_id").get<std::string>();
  c.product_pattern = j.at("product_pattern").get<std::string>();
  c.label = j.at("label").is_null() ? std::nullopt : std::optional(RelevanceLabel::of(j.at("label").get<int>()));
  c.citation = j.at("citation").get<std::string>();
  c.text = j.at("text").get<std::string>();
}

void to_json(Json& j, const MemoryEntry& e) {
  j = Json{{"id", e.id},
           {"source", to_string(e.source)},
           {"content", e.content},
           {"created_at", e.created_at},
           {"authority", e.authority}};
}

void from_json(const Json& j, MemoryEntry& e) {
  e.id = j.at("id").get<std::string>();
  e.source = source_from(j.at("source").get<std::string>());
  e.content = j.at("content").get<Content>();
  e.created_at = j.at("created_at").get<std::int64_t>();
  e.authority = j.at("authority").get<double>();
}

namespace {

std::string content_key(Source s, const Content& c) {
  return std::string(to_string(s)) + "|" + Json(c).dump();
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) {
    s += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return 0.0;
  return s / std::sqrt(na * nb);
}

}  // namespace

MemoryStore::MemoryStore(Embedder embedder) : embedder_(std::move(embedder)) {}

std::string MemoryStore::write(Source source, const Content& content, std::int64_t created_at, double authority) {
  if (content.query_text.empty()) throw Error(ErrorCode::kInvalidArgument, "memory content needs a query text");
  if (content.kind == ContentKind::kPrecedent && !content.label) {
    throw Error(ErrorCode::kInvalidArgument, "precedent needs a settled label");
  }
  const std::string key = content_key(source, content);
  {
    std::shared_lock lock(mu_);
    if (auto it = by_key_.find(key); it != by_key_.end()) return it->second;
  }
  std::vector<double> embedding = embedder_(content.query_text);
  std::unique_lock lock(mu_);
  if (auto it = by_key_.find(key); it != by_key_.end()) return it->second;
  MemoryEntry e;
  e.id = "m-" + zero_pad(static_cast<long long>(entries_.size()) + 1, 6);
  e.source = source;
  e.content = content;
  e.embedding = std::move(embedding);
  e.created_at = created_at;
  e.authority = authority < 0 ? default_authority(source) : std::min(1.0, authority);
  by_key_.emplace(key, e.id);
  entries_.push_back(std::move(e));
  return entries_.back().id;
}

std::optional<MemoryEntry> MemoryStore::get(const std::string& id) const {
  std::shared_lock lock(mu_);
  for (const auto& e : entries_) {
    if (e.id == id) return e;
  }
  return std::nullopt;
}

std::vector<Scored> MemoryStore::retrieve(const std::string& query_text, std::size_t k) const {
  std::vector<MemoryEntry> snapshot = entries();
  if (snapshot.empty() || k == 0) return {};
  const auto q = embedder_(query_text);
  std::vector<Scored> out;
  out.reserve(snapshot.size());
  for (auto& e : snapshot) {
    const double s = cosine(q, e.embedding);
    out.push_back({std::move(e), s});
  }
  std::stable_sort(out.begin(), out.end(), [](const Scored& a, const Scored& b) {
    return a.score != b.score ? a.score > b.score : a.entry.id < b.entry.id;
  });
  if (out.size() > k) out.resize(k);
  return out;
}

std::size_t MemoryStore::size() const {
  std::shared_lock lock(mu_);
  return entries_.size();
}

std::vector<MemoryEntry> MemoryStore::entries() const {
  std::shared_lock lock(mu_);
  return entries_;
}

std::string MemoryStore::one_liner(const MemoryEntry& e) {
  std::string s = "[" + std::string(to_string(e.source)) + "] " + std::string(to_string(e.content.kind)) + ": \"" +
                  e.content.query_text + "\"";
  if (!e.content.product_id.empty()) s += " x " + e.content.product_id;
  if (!e.content.product_pattern.empty()) s += " (" + e.content.product_pattern + ")";
  if (e.content.label) s += " -> " + std::to_string(e.content.label->value());
  if (!e.content.citation.empty()) s += " per " + e.content.citation;
  return s;
}

std::map<std::string, std::string> MemoryStore::cluster_digests() const {
  std::map<std::string, std::vector<const MemoryEntry*>> clusters;
  const auto snapshot = entries();
  for (const auto& e : snapshot) {
    const std::string key = std::string(to_string(e.content.kind)) + "/" + e.content.product_pattern + "/" +
                            (e.content.label ? std::to_string(e.content.label->value()) : "-");
    clusters[key].push_back(&e);
  }
  std::map<std::string, std::string> out;
  for (const auto& [key, members] : clusters) {
    std::string d = std::to_string(members.size()) + " entries:";
    for (const auto* m : members) d += " " + m->id;
    d += "; e.g. " + one_liner(*members.front());
    out.emplace(key, std::move(d));
  }
  return out;
}

std::size_t MemoryStore::compact() {
  std::unique_lock lock(mu_);
  std::vector<MemoryEntry> kept;
  std::map<std::string, std::string> keys;
  for (auto& e : entries_) {
    if (keys.emplace(content_key(e.source, e.content), e.id).second) kept.push_back(std::move(e));
  }
  const std::size_t dropped = entries_.size() - kept.size();
  entries_ = std::move(kept);
  by_key_ = std::move(keys);
  return dropped;
}

void MemoryStore::save(const std::filesystem::path& dir) const {
  const auto snapshot = entries();
  std::vector<Json> recs, emb;
  for (const auto& e : snapshot) {
    recs.emplace_back(e);
    emb.push_back(Json{{"id", e.id}, {"embedding", e.embedding}});
  }
  write_records(dir / "memory.jsonl", recs);
  write_records(dir / "memory_embeddings.jsonl", emb);
}

void MemoryStore::load(const std::filesystem::path& dir) {
  std::vector<MemoryEntry> loaded;
  std::map<std::string, std::string> keys;
  if (std::filesystem::exists(dir / "memory.jsonl")) {
    const auto recs = read_records(dir / "memory.jsonl");
    const auto emb = read_records(dir / "memory_embeddings.jsonl");
    if (emb.size() != recs.size()) throw Error(ErrorCode::kCorruptRecord, "memory embedding sidecar out of sync");
    for (std::size_t i = 0; i < recs.size(); ++i) {
      MemoryEntry e = recs[i].get<MemoryEntry>();
      if (emb[i].at("id").get<std::string>() != e.id) throw Error(ErrorCode::kCorruptRecord, "sidecar id mismatch");
      e.embedding = emb[i].at("embedding").get<std::vector<double>>();
      keys.emplace(content_key(e.source, e.content), e.id);
      loaded.push_back(std::move(e));
    }
  }
  std::unique_lock lock(mu_);
  entries_ = std::move(loaded);
  by_key_ = std::move(keys);
}

std::vector<Distilled> distill(const Resolution& r) {
  if (!r.finalized) throw Error(ErrorCode::kUnresolvedInput, "resolution for " + r.case_id + " is not final");
  if (r.kind == ResolutionKind::kExempt) return {};
  if (!r.settled_label) throw Error(ErrorCode::kUnresolvedInput, "resolution for " + r.case_id + " has no label");
  Content c;
  c.query_text = r.query.text;
  c.product_id = r.product.id;
  c.product_pattern = r.product.leaf();
  c.label = r.settled_label;
  c.citation = r.citation.empty() ? r.case_id : r.citation;
  Distilled d;
  d.source = Source::kDistilledTrace;
  switch (r.kind) {
    case ResolutionKind::kModelErrorRetrained:
      c.kind = ContentKind::kPrecedent;
      c.text = "settled at " + std::to_string(r.settled_label->value()) + " after retraining";
      d.authority = default_authority(Source::kDistilledTrace);
      break;
    case ResolutionKind::kHumanAdjudication:
      c.kind = ContentKind::kPrecedent;
      c.text = "expert adjudication: " + std::to_string(r.settled_label->value());
      d.authority = 1.0;
      break;
    case ResolutionKind::kStandardEvolution:
      c.kind = ContentKind::kRuleSuggestion;
      c.text = "standards do not cover this pair; shoppers expect " + std::to_string(r.settled_label->value());
      d.authority = default_authority(Source::kDistilledTrace);
      break;
    case ResolutionKind::kExempt:
      break;
  }
  d.content = std::move(c);
  return {d};
}

}  // namespace caseloop::memory
