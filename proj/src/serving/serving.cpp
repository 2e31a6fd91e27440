#include "caseloop/serving/serving.hpp"

#include <algorithm>
#include <set>

#include "caseloop/core/error.hpp"
#include "caseloop/core/hash.hpp"
#include "caseloop/core/text.hpp"
#include "caseloop/rules/rules.hpp"

namespace caseloop::serving {

void to_json(Json& j, const LogEntry& e) {
  j = Json{{"query_id", e.query_id},
           {"product_id", e.product_id},
           {"coarse_bin", e.coarse_bin.value()},
           {"fine_bin", e.fine_bin.value()},
           {"window_id", e.window_id}};
}

void from_json(const Json& j, LogEntry& e) {
  e.query_id = j.at("query_id").get<std::string>();
  e.product_id = j.at("product_id").get<std::string>();
  e.coarse_bin = RelevanceLabel::of(j.at("coarse_bin").get<int>());
  e.fine_bin = RelevanceLabel::of(j.at("fine_bin").get<int>());
  e.window_id = j.value("window_id", 0);
}

void to_json(Json& j, const ConsistencyStat& s) {
  j = Json{{"query_id", s.query_id}, {"support", s.support}, {"agreement", s.agreement}, {"c", s.c},
           {"window_id", s.window_id}};
}

void from_json(const Json& j, ConsistencyStat& s) {
  s.query_id = j.at("query_id").get<std::string>();
  s.support = j.at("support").get<std::size_t>();
  s.agreement = j.at("agreement").get<std::size_t>();
  s.c = j.at("c").get<double>();
  s.window_id = j.value("window_id", 0);
}

namespace {

StatTable build_table(const std::vector<LogEntry>& logs, std::size_t min_support, const std::string* only) {
  // query -> product -> agrees (last line wins)
  std::map<std::string, std::map<std::string, bool>> per;
  std::map<std::string, int> window;
  for (const auto& e : logs) {
    if (only && e.query_id != *only) continue;
    per[e.query_id][e.product_id] = e.coarse_bin == e.fine_bin;
    window[e.query_id] = std::max(window[e.query_id], e.window_id);
  }
  StatTable out;
  for (const auto& [qid, products] : per) {
    if (products.size() < min_support || products.empty()) continue;
    ConsistencyStat s;
    s.query_id = qid;
    s.support = products.size();
    for (const auto& [pid, agree] : products) s.agreement += agree ? 1 : 0;
    s.c = static_cast<double>(s.agreement) / static_cast<double>(s.support);
    s.window_id = window[qid];
    out.emplace(qid, s);
  }
  return out;
}

}  // namespace

std::optional<ConsistencyStat> consistency_score(const std::string& query_id, const std::vector<LogEntry>& logs,
                                                 std::size_t min_support) {
  auto t = build_table(logs, min_support, &query_id);
  auto it = t.find(query_id);
  if (it == t.end()) return std::nullopt;
  return it->second;
}

StatTable consistency_table(const std::vector<LogEntry>& logs, std::size_t min_support) {
  return build_table(logs, min_support, nullptr);
}

std::string_view to_string(RoutePath p) { return p == RoutePath::kCoarseOnly ? "coarse_only" : "full"; }

RoutePath route_inference(const std::string& query_id, const StatTable& stats, double tau) {
  if (tau < 0.0 || tau > 1.0) throw Error(ErrorCode::kInvalidArgument, "tau must be in [0, 1]");
  auto it = stats.find(query_id);
  if (it != stats.end() && it->second.c >= tau) return RoutePath::kCoarseOnly;
  return RoutePath::kFull;
}

// ---------------------------------------------------------------------------

std::optional<CacheKey> cache_key(const QueryStructure& s, const std::string& product_id) {
  if (s.category_intent.empty()) return std::nullopt;
  CacheKey k;
  k.category = s.category_intent.front();
  k.brand = s.brand;
  k.attributes = s.attributes;
  std::vector<std::string> residual = s.residual_terms;
  std::sort(residual.begin(), residual.end());
  residual.erase(std::unique(residual.begin(), residual.end()), residual.end());
  k.residual = join(residual, " ");
  k.product_id = product_id;
  return k;
}

std::vector<CacheKey> hypernym_keys(const CacheKey& key) {
  std::vector<std::pair<std::string, std::string>> attrs(key.attributes.begin(), key.attributes.end());
  const std::size_t n = attrs.size();
  std::vector<CacheKey> out;
  std::set<CacheKey> seen{key};
  auto emit = [&](const std::optional<std::string>& brand, std::size_t size) {
    std::vector<AttributeMap> subsets;
    for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
      if (static_cast<std::size_t>(__builtin_popcount(mask)) != size) continue;
      AttributeMap m;
      for (std::size_t b = 0; b < n; ++b) {
        if (mask & (1u << b)) m.insert(attrs[b]);
      }
      subsets.push_back(std::move(m));
    }
    std::sort(subsets.begin(), subsets.end());
    for (auto& m : subsets) {
      CacheKey h{key.category, brand, std::move(m), "", key.product_id};
      if (seen.insert(h).second) out.push_back(std::move(h));
    }
  };
  for (std::size_t size = n + 1; size-- > 0;) emit(key.brand, size);
  if (key.brand) {
    for (std::size_t size = n + 1; size-- > 0;) emit(std::nullopt, size);
  }
  return out;
}

HypernymCache::HypernymCache(HypernymCache&& other) noexcept
    : entries_(std::move(other.entries_)),
      version_(other.version_),
      lookups_(other.lookups_.load()),
      exact_(other.exact_.load()),
      inferred_(other.inferred_.load()) {}

HypernymCache& HypernymCache::operator=(HypernymCache&& other) noexcept {
  if (this == &other) return *this;
  std::unique_lock lock(mu_);
  entries_ = std::move(other.entries_);
  version_ = other.version_;
  lookups_ = other.lookups_.load();
  exact_ = other.exact_.load();
  inferred_ = other.inferred_.load();
  return *this;
}

std::optional<CacheHit> HypernymCache::lookup(const QueryStructure& s, const std::string& product_id) const {
  lookups_.fetch_add(1);
  auto key = cache_key(s, product_id);
  if (!key) return std::nullopt;
  std::shared_lock lock(mu_);
  auto live = [&](const CacheKey& k) -> const CacheEntry* {
    auto it = entries_.find(k);
    if (it == entries_.end() || it->second.checkpoint_version != version_) return nullptr;
    return &it->second;
  };
  if (const CacheEntry* e = live(*key)) {
    exact_.fetch_add(1);
    return CacheHit{e->label, false, *key};
  }
  for (const auto& h : hypernym_keys(*key)) {
    const CacheEntry* e = live(h);
    if (e && e->label.value() == 0) {
      inferred_.fetch_add(1);
      return CacheHit{e->label, true, h};
    }
  }
  return std::nullopt;
}

void HypernymCache::insert(const QueryStructure& s, const std::string& product_id, RelevanceLabel label,
                           int checkpoint_version, std::int64_t timestamp) {
  auto key = cache_key(s, product_id);
  if (!key) return;
  std::unique_lock lock(mu_);
  entries_[*key] = CacheEntry{label, checkpoint_version, timestamp};
}

void HypernymCache::set_version(int v) {
  std::unique_lock lock(mu_);
  version_ = v;
  std::erase_if(entries_, [v](const auto& kv) { return kv.second.checkpoint_version != v; });
}

int HypernymCache::version() const {
  std::shared_lock lock(mu_);
  return version_;
}

std::size_t HypernymCache::size() const {
  std::shared_lock lock(mu_);
  return static_cast<std::size_t>(std::count_if(
      entries_.begin(), entries_.end(), [this](const auto& kv) { return kv.second.checkpoint_version == version_; }));
}

CacheMetrics HypernymCache::metrics() const { return {lookups_.load(), exact_.load(), inferred_.load()}; }

void HypernymCache::save(const std::filesystem::path& path) const {
  std::vector<Json> rows;
  std::shared_lock lock(mu_);
  for (const auto& [k, e] : entries_) {
    Json j{{"category", k.category},
           {"attributes", k.attributes},
           {"residual", k.residual},
           {"product_id", k.product_id},
           {"label", e.label.value()},
           {"checkpoint_version", e.checkpoint_version},
           {"timestamp", e.timestamp}};
    if (k.brand) j["brand"] = *k.brand;
    rows.push_back(std::move(j));
  }
  write_records(path, rows);
}

HypernymCache HypernymCache::load(const std::filesystem::path& path, int checkpoint_version) {
  HypernymCache c(checkpoint_version);
  for (const auto& j : read_records(path)) {
    CacheKey k;
    k.category = j.at("category").get<std::string>();
    if (j.contains("brand")) k.brand = j["brand"].get<std::string>();
    k.attributes = j.value("attributes", AttributeMap{});
    k.residual = j.value("residual", std::string());
    k.product_id = j.at("product_id").get<std::string>();
    c.entries_[k] = CacheEntry{RelevanceLabel::of(j.at("label").get<int>()), j.at("checkpoint_version").get<int>(),
                               j.value("timestamp", std::int64_t{0})};
  }
  return c;
}

// ---------------------------------------------------------------------------

void to_json(Json& j, const ServingMetrics& m) {
  j = Json{{"queries", m.queries},
           {"downgraded", m.downgraded},
           {"downgrade_fraction", m.downgrade_fraction()},
           {"fine_calls", m.fine_calls},
           {"shadow_calls", m.shadow_calls},
           {"cache_lookups", m.cache.lookups},
           {"cache_exact_hits", m.cache.exact_hits},
           {"cache_inferred_hits", m.cache.inferred_hits},
           {"cache_hit_rate", m.cache.hit_rate()}};
}

ServingEngine::ServingEngine(std::shared_ptr<const model::RelevanceModel> model, model::ProductLookup products,
                             int checkpoint_version, ServingConfig config)
    : model_(std::move(model)), products_(std::move(products)), config_(config), cache_(checkpoint_version) {}

ServeResult ServingEngine::serve(const Query& q, const std::vector<std::string>& candidates,
                                 const std::vector<Directive>& active) {
  ServeResult out;
  out.query_id = q.id;
  out.path = route_inference(q.id, stats_, config_.tau);
  const QueryStructure s = model_->structure_of(q);
  std::vector<Product> products;
  products.reserve(candidates.size());
  for (const auto& id : candidates) products.push_back(products_(id));
  const std::vector<double> coarse = model_->coarse_score(q, products);

  std::vector<LogEntry> fresh;
  std::uint64_t fine = 0, shadow = 0;
  for (std::size_t n = 0; n < products.size(); ++n) {
    const Product& d = products[n];
    const RelevanceLabel cbin = model_->coarse_bin(coarse[n]);
    ServedItem item;
    item.product_id = d.id;
    item.coarse_score = coarse[n];
    Prediction base;
    if (out.path == RoutePath::kCoarseOnly) {
      base = Prediction::smoothed(cbin, Stage::kCoarse);
      const double u = static_cast<double>(fnv1a(q.id + "|" + d.id) % 10000) / 10000.0;
      if (config_.shadow_sampling && u < config_.shadow_rate) {
        const Prediction f = model_->fine_base(q, d);
        ++shadow;
        fresh.push_back({q.id, d.id, cbin, f.label, config_.window_id});
      }
    } else {
      std::optional<CacheHit> hit;
      if (config_.use_cache) hit = cache_.lookup(s, d.id);
      if (hit) {
        base = Prediction::smoothed(hit->label, Stage::kCached);
        item.from_cache = true;
      } else {
        base = model_->fine_base(q, d);
        ++fine;
        fresh.push_back({q.id, d.id, cbin, base.label, config_.window_id});
        if (config_.use_cache) cache_.insert(s, d.id, base.label, cache_.version(), clock_);
      }
    }
    item.prediction = active.empty() ? base : rules::apply_rules(base, active, s, d).prediction;
    out.items.push_back(std::move(item));
  }
  std::lock_guard lock(log_mu_);
  ++clock_;
  ++counters_.queries;
  if (out.path == RoutePath::kCoarseOnly) ++counters_.downgraded;
  counters_.fine_calls += fine;
  counters_.shadow_calls += shadow;
  logs_.insert(logs_.end(), fresh.begin(), fresh.end());
  return out;
}

ServeResult ServingEngine::search(const Query& q, const std::vector<Directive>& active,
                                  const std::vector<std::string>& extra) {
  if (!index_) throw Error(ErrorCode::kInvalidArgument, "search needs a product index");
  std::vector<Product> pool;
  for (const auto& h : index_->retrieve(*model_, q, config_.retrieval_k).hits) pool.push_back(products_(h.product_id));
  const std::vector<double> coarse = model_->coarse_score(q, pool);
  std::vector<std::size_t> order(pool.size());
  for (std::size_t n = 0; n < order.size(); ++n) order[n] = n;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return coarse[a] > coarse[b]; });
  std::vector<std::string> top;
  for (std::size_t n = 0; n < order.size() && n < config_.fine_k; ++n) top.push_back(pool[order[n]].id);
  for (const auto& id : extra) {
    if (std::find(top.begin(), top.end(), id) == top.end()) top.push_back(id);
  }
  return serve(q, top, active);
}

void ServingEngine::set_stats(StatTable stats) { stats_ = std::move(stats); }

void ServingEngine::swap_model(std::shared_ptr<const model::RelevanceModel> model, int checkpoint_version,
                               std::shared_ptr<const model::ProductIndex> index) {
  model_ = std::move(model);
  if (index) index_ = std::move(index);
  cache_.set_version(checkpoint_version);
}

std::vector<LogEntry> ServingEngine::logs() const {
  std::lock_guard lock(log_mu_);
  return logs_;
}

void ServingEngine::clear_logs() {
  std::lock_guard lock(log_mu_);
  logs_.clear();
}

ServingMetrics ServingEngine::metrics() const {
  std::lock_guard lock(log_mu_);
  ServingMetrics m = counters_;
  m.cache = cache_.metrics();
  return m;
}

}  // namespace caseloop::serving
