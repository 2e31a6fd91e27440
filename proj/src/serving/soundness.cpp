#include "caseloop/serving/soundness.hpp"

#include <set>

#include "caseloop/world/catalog.hpp"
#include "caseloop/world/world.hpp"

namespace caseloop::serving {

SoundnessReport check_zero_soundness(const world::World& w, const model::QueryParser& parser) {
  SoundnessReport r;
  HypernymCache cache(1);
  std::set<std::string> seen_text;
  for (const auto& wq : w.queries()) {
    seen_text.insert(wq.query.text);
    const QueryStructure s = parser.parse(wq.query);
    if (s.category_intent.empty()) continue;
    for (const auto& d : w.products()) {
      cache.insert(s, d.id, w.oracle_label(wq.query, d.id), 1);
      ++r.cached;
    }
  }
  const world::Taxonomy& tax = w.taxonomy();
  int n = 0;
  for (const auto& wq : w.queries()) {
    const world::QueryIntent& base = wq.intent;
    if (!base.category || base.entity || wq.query.language != "en") continue;
    const world::CategoryNode& dept = tax.department(*base.category);
    std::vector<world::QueryIntent> variants;
    if (!base.brand) {
      for (const auto& b : dept.brands) {
        auto v = base;
        v.brand = b;
        variants.push_back(std::move(v));
      }
    }
    for (const auto& key : dept.attribute_keys) {
      if (base.attributes.count(key)) continue;
      for (const auto* val : tax.values_of(key)) {
        auto v = base;
        v.attributes[key] = val->value;
        variants.push_back(std::move(v));
      }
    }
    for (const auto& v : variants) {
      Query q;
      q.text = w.compose_query_text(v, "en");
      if (!seen_text.insert(q.text).second) continue;
      q.id = "spec-" + std::to_string(++n);
      const QueryStructure s = parser.parse(q);
      ++r.specialized_queries;
      for (const auto& d : w.products()) {
        ++r.lookups;
        auto hit = cache.lookup(s, d.id);
        if (!hit) continue;
        if (!hit->inferred) {
          ++r.exact_hits;
          continue;
        }
        ++r.inferred_zeros;
        if (w.oracle_label(q, d.id).value() != 0) ++r.false_zeros;
      }
    }
  }
  return r;
}

}  // namespace caseloop::serving
