#include "caseloop/optimizer/optimizer.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>

#include "caseloop/core/error.hpp"
#include "caseloop/core/hash.hpp"
#include "caseloop/core/rng.hpp"
#include "caseloop/core/text.hpp"
#include "caseloop/world/catalog.hpp"

namespace caseloop::optimizer {

namespace {

constexpr std::string_view kMissingAttribute = "missing_attribute";
constexpr std::string_view kSemanticConfusion = "semantic_confusion";
constexpr std::string_view kHeadWordShift = "head_word_shift";
constexpr std::string_view kUnattributed = "unattributed";

std::string hex8(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf, 8);
}

std::string department_of(const std::optional<std::string>& category) {
  if (!category) return {};
  const auto& tax = world::Taxonomy::builtin();
  if (!tax.find(*category)) return {};
  return tax.department_of(*category);
}

std::optional<std::string> feature_defect(const Product& serving, const Product& pristine) {
  if (serving.category_path != pristine.category_path) return "wrong_category";
  if (serving.brand != pristine.brand) return "missing_brand";
  if (serving.title != pristine.title) return "seo_cheat";
  return std::nullopt;
}

CaseDiagnosis tag_model_side(const Case& c, const world::QueryIntent& intent, const Product& d) {
  CaseDiagnosis out;
  out.case_id = c.id;
  out.bucket = Bucket::kModelSide;
  out.cause = {std::string(kUnattributed), 0.0};
  if (!c.reference || *c.reference == c.online_prediction.label) return out;
  const int y = c.reference->value();
  const int yhat = c.online_prediction.label.value();
  const std::string dept = department_of(intent.category);
  const auto cmp = world::compare(intent, d);
  if (y < yhat) {
    if (!intent.category) {
      out.cause = {std::string(kSemanticConfusion), 0.5};
      out.pattern = PatternKey{dept, std::string(kSemanticConfusion), ""};
    } else if (!cmp.category_match) {
      out.cause = {std::string(kHeadWordShift), 0.9};
      out.pattern = PatternKey{dept, std::string(kHeadWordShift), ""};
    } else if (cmp.brand_conflict) {
      out.cause = {std::string(kMissingAttribute), 0.9};
      out.pattern = PatternKey{dept, std::string(kMissingAttribute), "brand"};
    } else if (!cmp.conflicting_attributes.empty()) {
      out.cause = {std::string(kMissingAttribute), 0.9};
      out.pattern = PatternKey{dept, std::string(kMissingAttribute), cmp.conflicting_attributes.front()};
    } else {
      out.cause = {std::string(kSemanticConfusion), 0.6};
      out.pattern = PatternKey{dept, std::string(kSemanticConfusion), *intent.category};
    }
  } else {
    // under-scored
    if (intent.category && cmp.category_match) {
      out.cause = {std::string(kSemanticConfusion), 0.6};
      out.pattern = PatternKey{dept, std::string(kSemanticConfusion), *intent.category};
    } else {
      out.cause = {std::string(kSemanticConfusion), 0.5};
      out.pattern = PatternKey{dept, std::string(kSemanticConfusion), ""};
    }
  }
  return out;
}

}  // namespace

std::vector<PatternKey> DiagnosisReport::patterns() const {
  std::set<PatternKey> out;
  for (const auto& c : cases) {
    if (c.bucket == Bucket::kModelSide && c.pattern && c.cause.tag != kUnattributed) out.insert(*c.pattern);
  }
  return {out.begin(), out.end()};
}

void to_json(Json& j, const DiagnosisReport& r) {
  j = Json::array();
  for (const auto& c : r.cases) {
    j.push_back(Json{{"case_id", c.case_id},
                     {"bucket", c.bucket == Bucket::kFeatureSide ? "feature_side" : "model_side"},
                     {"tag", c.cause.tag},
                     {"confidence", c.cause.confidence},
                     {"pattern", c.pattern ? Json(c.pattern->str()) : Json(nullptr)}});
  }
}

void to_json(Json& j, const DatasetDelta& d) {
  Json corr = Json::array();
  for (const auto& c : d.corrections) {
    corr.push_back(Json{{"sample_id", c.sample_id},
                        {"old_label", c.old_label.value()},
                        {"new_label", c.new_label.value()},
                        {"cause", c.cause}});
  }
  j = Json{{"corrections", corr}, {"additions", to_records(d.additions)},
           {"augmentation_aborted", d.augmentation_aborted}};
}

world::QueryIntent parsed_intent(const model::QueryParser& parser, const Query& q) {
  const QueryStructure st = parser.parse(q);
  world::QueryIntent intent;
  if (!st.category_intent.empty()) intent.category = st.category_intent.front();
  intent.brand = st.brand;
  intent.attributes = st.attributes;
  intent.tokens = tokenize(st.corrected_text ? *st.corrected_text : q.text);
  return intent;
}

bool in_pattern(const PatternKey& p, const world::QueryIntent& intent, const Product& d) {
  if (p.department.empty() || department_of(intent.category) != p.department) return false;
  const auto cmp = world::compare(intent, d);
  if (p.tag == kMissingAttribute) {
    if (!cmp.category_match) return false;
    if (p.key == "brand") return cmp.brand_conflict;
    return std::find(cmp.conflicting_attributes.begin(), cmp.conflicting_attributes.end(), p.key) !=
           cmp.conflicting_attributes.end();
  }
  if (p.tag == kHeadWordShift) {
    return !cmp.category_match && d.in_category(p.department) && (p.key.empty() || *intent.category == p.key);
  }
  if (p.tag == kSemanticConfusion) {
    return !p.key.empty() && cmp.category_match && *intent.category == p.key;
  }
  return false;
}

DiagnoseOutput diagnose(const std::vector<Case>& cases, const StandardsDoc&, const std::vector<Directive>&,
                        const memory::MemoryStore*, const DiagnoseContext& ctx) {
  DiagnoseOutput out;
  for (const auto& c : cases) {
    std::optional<std::string> defect;
    const Product* pristine = nullptr;
    try {
      pristine = &ctx.evaluation(c.product.id);
      defect = feature_defect(ctx.serving(c.product.id), *pristine);
    } catch (const Error&) {
      pristine = nullptr;
    }
    if (defect) {
      out.feature_side.push_back(c);
      out.report.cases.push_back({c.id, Bucket::kFeatureSide, {"feature_defect:" + *defect, 1.0}, std::nullopt});
      continue;
    }
    out.model_side.push_back(c);
    if (!pristine) {
      out.report.cases.push_back({c.id, Bucket::kModelSide, {std::string(kUnattributed), 0.0}, std::nullopt});
      continue;
    }
    out.report.cases.push_back(tag_model_side(c, parsed_intent(*ctx.parser, c.query), *pristine));
  }
  return out;
}

DatasetDelta refine(const std::vector<Case>& model_side, const DiagnosisReport& report, const Corpus& d,
                    const StandardsDoc& s, const std::vector<Directive>& i, const annotator::Annotator& annotator,
                    const DiagnoseContext& ctx, const std::vector<Case>& probe_cases, const RefineConfig& config) {
  DatasetDelta delta;
  std::map<std::string, world::QueryIntent> intents;
  auto intent_of = [&](const Query& q) -> const world::QueryIntent& {
    auto it = intents.find(q.text);
    if (it == intents.end()) it = intents.emplace(q.text, parsed_intent(*ctx.parser, q)).first;
    return it->second;
  };

  std::set<std::string> touched;
  bool annotator_down = false;
  for (const auto& p : report.patterns()) {
    if (annotator_down) break;
    std::size_t used = 0;
    for (const auto& sample : d) {
      if (used >= config.max_per_pattern) break;
      if (touched.count(sample.id)) continue;
      const Product& prod = ctx.evaluation(sample.product_id);
      if (!in_pattern(p, intent_of(sample.query), prod)) continue;
      touched.insert(sample.id);
      ++used;
      RelevanceLabel fresh;
      try {
        fresh = annotator.annotate(sample.query, prod, s, i).label;
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kAnnotatorUnavailable) throw;
        annotator_down = true;
        break;
      }
      if (fresh != sample.label) delta.corrections.push_back({sample.id, sample.label, fresh, p.str()});
    }
  }

  std::set<std::string> keys;
  for (const auto& c : model_side) {
    if (!c.reference) continue;
    Sample add{"add-" + c.id, c.query, c.product.id, *c.reference, "case:" + c.id};
    if (keys.insert(dedup_key(add)).second) delta.additions.push_back(std::move(add));
  }
  for (const auto& c : probe_cases) {
    if (annotator_down) break;
    try {
      const auto label = annotator.annotate(c.query, ctx.evaluation(c.product.id), s, i).label;
      Sample add{"add-" + c.id, c.query, c.product.id, label, "probe:" + c.id};
      if (keys.insert(dedup_key(add)).second) delta.additions.push_back(std::move(add));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kAnnotatorUnavailable) throw;
      annotator_down = true;
    }
  }
  delta.augmentation_aborted = annotator_down;
  return delta;
}

Corpus apply_delta(const Corpus& d, const DatasetDelta& delta) {
  Corpus out = d;
  std::map<std::string, std::size_t> by_id;
  std::set<std::string> keys;
  for (std::size_t n = 0; n < out.size(); ++n) {
    by_id.emplace(out[n].id, n);
  }
  for (const auto& c : delta.corrections) {
    auto it = by_id.find(c.sample_id);
    if (it == by_id.end()) throw Error(ErrorCode::kInvalidArgument, "correction for unknown sample " + c.sample_id);
    out[it->second].label = c.new_label;
  }
  for (const auto& s : out) keys.insert(dedup_key(s));
  for (const auto& a : delta.additions) {
    if (by_id.count(a.id) || keys.count(dedup_key(a))) continue;
    by_id.emplace(a.id, out.size());
    keys.insert(dedup_key(a));
    out.push_back(a);
  }
  return out;
}

// ---------------------------------------------------------------------------
// probe

std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::kReplicated:
      return "replicated";
    case Verdict::kRejected:
      return "rejected";
    case Verdict::kPending:
      return "pending";
  }
  return "pending";
}

namespace {

struct Budget {
  std::size_t left;
  bool exhausted = false;
  bool take() {
    if (left == 0) {
      exhausted = true;
      return false;
    }
    --left;
    return true;
  }
};

class CaseSink {
 public:
  void add(const Query& q, const Product& d, const Prediction& online, RelevanceLabel label) {
    const std::string id = "probe-" + hex8(fnv1a(q.text + "|" + d.id));
    if (!seen_.insert(id).second) return;
    cases.emplace_back(id, q, d, label, online, Provenance::kProbe);
  }
  std::vector<Case> cases;

 private:
  std::set<std::string> seen_;
};

// entity deletion, modifier swap within attribute class, head-word swap.
// Swaps skip the product's own value so the relation under test survives.
std::vector<world::QueryIntent> perturb_intent(const world::QueryIntent& intent, const Product& d) {
  std::vector<world::QueryIntent> out;
  if (!intent.category) return out;
  const auto& tax = world::Taxonomy::builtin();
  const auto& dept = tax.department(*intent.category);
  if (intent.brand) {
    auto del = intent;
    del.brand.reset();
    out.push_back(del);
    for (const auto& b : dept.brands) {
      if (b == *intent.brand || (d.brand && b == *d.brand)) continue;
      auto swap = intent;
      swap.brand = b;
      out.push_back(swap);
      break;
    }
  } else if (!intent.attributes.empty()) {
    auto del = intent;
    del.attributes.erase(del.attributes.begin());
    out.push_back(del);
  }
  for (const auto& [k, v] : intent.attributes) {
    for (const auto* def : tax.values_of(k)) {
      if (def->value == v) continue;
      if (auto it = d.attributes.find(k); it != d.attributes.end() && it->second == def->value) continue;
      auto swap = intent;
      swap.attributes[k] = def->value;
      out.push_back(swap);
      break;
    }
    break;
  }
  for (const auto* leaf : tax.leaves()) {
    if (leaf->id == *intent.category || tax.department_of(leaf->id) != dept.id) continue;
    auto swap = intent;
    swap.category = leaf->id;
    out.push_back(swap);
    break;
  }
  return out;
}

std::vector<world::QueryIntent> synthesize(const PatternKey& p, int round, int n, std::uint64_t seed) {
  std::vector<world::QueryIntent> out;
  const auto& tax = world::Taxonomy::builtin();
  const auto* dept = tax.find(p.department);
  if (!dept) return out;
  std::vector<std::string> leaves;
  for (const auto* leaf : tax.leaves()) {
    if (tax.department_of(leaf->id) == p.department) leaves.push_back(leaf->id);
  }
  if (leaves.empty()) return out;
  Rng rng = Rng::derive(seed, "probe|" + p.str(), static_cast<std::uint64_t>(round));
  for (int j = 0; j < n; ++j) {
    world::QueryIntent intent;
    const bool category_key = p.tag == kSemanticConfusion && !p.key.empty();
    intent.category = category_key ? p.key : rng.pick(leaves);
    if (p.tag == kMissingAttribute) {
      if (p.key == "brand") {
        if (!dept->brands.empty()) intent.brand = rng.pick(dept->brands);
      } else {
        const auto values = tax.values_of(p.key);
        if (!values.empty()) intent.attributes[p.key] = rng.pick(values)->value;
      }
    } else if (p.tag == kSemanticConfusion && !dept->attribute_keys.empty() && rng.bernoulli(0.5)) {
      const auto& key = rng.pick(dept->attribute_keys);
      const auto values = tax.values_of(key);
      if (!values.empty()) intent.attributes[key] = rng.pick(values)->value;
    }
    out.push_back(std::move(intent));
  }
  return out;
}

}  // namespace

ProbeResult probe(const DiagnosisReport& report, const std::vector<Case>& model_side, const StandardsDoc&,
                  const std::vector<Directive>&, const memory::MemoryStore*, const ProbeEnv& env,
                  const ProbeConfig& config) {
  const auto patterns = report.patterns();
  if (patterns.empty()) throw Error(ErrorCode::kInvalidArgument, "probe needs at least one model-side tag");
  ProbeResult out;
  Budget budget{config.label_budget};
  CaseSink sink;
  const int per_round = std::clamp(config.probes_per_round, 3, 5);
  const int rounds = std::clamp(config.max_rounds, 1, 3);

  // bad under the online model? Returns nullopt when the budget is spent.
  auto check = [&](const Query& q, const Product& d) -> std::optional<bool> {
    if (!budget.take()) return std::nullopt;
    const auto pred = env.online(q, d);
    const auto y = env.label(q, d);
    if (is_bad_case(pred, y)) {
      sink.add(q, d, pred, y);
      return true;
    }
    return false;
  };

  // concept + market layers over the point failures
  std::map<std::string, const CaseDiagnosis*> diag;
  for (const auto& c : report.cases) diag[c.case_id] = &c;
  for (const auto& c : model_side) {
    auto it = diag.find(c.id);
    if (it == diag.end() || !it->second->pattern || it->second->cause.tag == kUnattributed) continue;
    const auto intent = parsed_intent(*env.parser, c.query);
    const Product& d = env.evaluation(c.product.id);
    ConceptResult cr;
    cr.case_id = c.id;
    CaseSink local;
    std::vector<std::pair<Query, Prediction>> fails;
    for (const auto& pi : perturb_intent(intent, d)) {
      Query q{c.query.id + "~" + std::to_string(cr.perturbations.size()), env.compose(pi, c.query.language),
              c.query.language, std::nullopt};
      cr.perturbations.push_back(q.text);
      if (!budget.take()) break;
      const auto pred = env.online(q, d);
      const auto y = env.label(q, d);
      if (is_bad_case(pred, y)) {
        ++cr.persisted;
        local.add(q, d, pred, y);
      }
    }
    const bool universal = !cr.perturbations.empty() && 2 * cr.persisted > static_cast<int>(cr.perturbations.size());
    cr.verdict = universal ? ConceptVerdict::kUniversal : ConceptVerdict::kIndividual;
    if (universal) {
      for (const auto& lc : local.cases) sink.add(lc.query, lc.product, lc.online_prediction, *lc.reference);
      for (const auto& lang : config.languages) {
        if (lang == c.query.language) continue;
        Query q{c.query.id + "@" + lang, env.compose(intent, lang), lang, std::nullopt};
        if (!check(q, d)) break;
      }
    }
    out.concept_results.push_back(std::move(cr));
  }

  // logic layer: bounded hypothesis rounds per pattern
  for (const auto& p : patterns) {
    for (int round = 1; round <= rounds; ++round) {
      ProbeHypothesis h;
      h.abstraction = p.str();
      h.round = round;
      const auto intents = synthesize(p, round, per_round, config.seed);
      if (intents.size() < 3) break;
      std::vector<Query> queries;
      for (std::size_t n = 0; n < intents.size(); ++n) {
        queries.push_back({"probe-" + hex8(fnv1a(p.str())) + "-" + std::to_string(round) + "-" + std::to_string(n),
                           env.compose(intents[n], "en"), "en", std::nullopt});
        h.probes.push_back(queries.back().text);
      }
      int failing = 0;
      bool stopped = false;
      for (const auto& q : queries) {
        bool fails = false;
        for (const auto& d : env.search(q, config.results_per_probe)) {
          const auto r = check(q, d);
          if (!r) {
            stopped = true;
            break;
          }
          fails = fails || *r;
        }
        if (stopped) break;
        failing += fails;
      }
      if (stopped) {
        h.verdict = Verdict::kPending;
        out.hypotheses.push_back(std::move(h));
        break;
      }
      h.verdict = failing >= 2 ? Verdict::kReplicated : failing == 0 ? Verdict::kRejected : Verdict::kPending;
      const Verdict v = h.verdict;
      if (v == Verdict::kReplicated) {
        memory::Content mc;
        mc.kind = memory::ContentKind::kRuleSuggestion;
        mc.query_text = h.probes.front();
        mc.product_pattern = p.str();
        mc.citation = "probe:" + p.str();
        mc.text = "replicated on " + std::to_string(failing) + " of " + std::to_string(h.probes.size()) + " probes";
        out.memory_candidates.push_back(std::move(mc));
      }
      out.hypotheses.push_back(std::move(h));
      if (v != Verdict::kPending) break;
    }
    if (budget.exhausted) break;
  }
  out.new_cases = std::move(sink.cases);
  out.budget_exhausted = budget.exhausted;
  return out;
}

}  // namespace caseloop::optimizer
