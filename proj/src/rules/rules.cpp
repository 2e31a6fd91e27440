#include "caseloop/rules/rules.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>

#include "caseloop/core/error.hpp"
#include "caseloop/core/rng.hpp"
#include "caseloop/core/text.hpp"
#include "caseloop/world/world.hpp"

namespace caseloop::rules {

std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::kApplies: return "applies";
    case Verdict::kObjectMismatch: return "object_mismatch";
    case Verdict::kScenarioMismatch: return "scenario_mismatch";
  }
  return "scenario_mismatch";
}

std::string_view to_string(Scenario s) {
  switch (s) {
    case Scenario::kUp: return "up";
    case Scenario::kDown: return "down";
    case Scenario::kNeutral: return "neutral";
  }
  return "neutral";
}

namespace {

void describe(const std::string& side, const std::vector<std::string>& categories,
              const std::optional<std::string>& brand, const AttributeMap& attributes,
              std::vector<std::string>& out) {
  for (const auto& c : categories) out.push_back(side + ".category=" + c);
  if (brand) out.push_back(side + ".brand=" + *brand);
  for (const auto& [k, v] : attributes) out.push_back(side + "." + k + "=" + v);
}

}  // namespace

Applicability applies(const Rule& rule, const QueryStructure& q, const Product& d) {
  Applicability a;
  if (!rule.query_scope.matches(q)) {
    a.verdict = Verdict::kScenarioMismatch;
    return a;
  }
  describe("query", rule.query_scope.categories, rule.query_scope.brand, rule.query_scope.attributes,
           a.matched_clauses);
  const bool in_match = rule.product_match.matches(d);
  const bool fires = rule.primitive == RulePrimitive::kScoping ? !in_match : in_match;
  if (!fires) {
    a.verdict = Verdict::kObjectMismatch;
    return a;
  }
  if (rule.primitive == RulePrimitive::kScoping) {
    a.matched_clauses.push_back("product.outside_scope");
  } else {
    describe("product", rule.product_match.categories, rule.product_match.brand, rule.product_match.attributes,
             a.matched_clauses);
  }
  a.verdict = Verdict::kApplies;
  return a;
}

void sort_by_priority(std::vector<Directive>& directives) {
  std::stable_sort(directives.begin(), directives.end(), [](const Directive& a, const Directive& b) {
    if (a.priority != b.priority) return a.priority > b.priority;
    return a.rule.id < b.rule.id;
  });
}

RuleOutcome apply_rules(const Prediction& base, const std::vector<Directive>& active, const QueryStructure& q,
                        const Product& d) {
  std::vector<Directive> sorted = active;
  sort_by_priority(sorted);
  RuleOutcome out;
  out.prediction = base;
  const Directive* winner = nullptr;
  for (const auto& dir : sorted) {
    if (winner && dir.priority != winner->priority) break;
    Applicability a = applies(dir.rule, q, d);
    if (a.verdict != Verdict::kApplies) continue;
    if (!winner) {
      winner = &dir;
      out.justification = std::move(a.matched_clauses);
    } else {
      out.same_priority_conflicts.push_back(dir.rule.id);
    }
  }
  if (!winner) return out;
  out.applied_rule = winner->rule.id;
  const RelevanceLabel adjusted = winner->rule.action.apply(base.label);
  if (adjusted != base.label) out.prediction = Prediction::smoothed(adjusted, Stage::kRuleAdjusted);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

bool overlaps(const TimeWindow& a, const TimeWindow& b) { return a.start < b.end && b.start < a.end; }

}  // namespace

void DirectiveSet::add(const Directive& d) {
  d.rule.validate();
  if (d.id.empty()) throw Error(ErrorCode::kInvalidArgument, "directive id empty");
  std::unique_lock lock(mu_);
  for (const auto& existing : directives_) {
    if (existing.id == d.id) throw Error(ErrorCode::kInvalidArgument, "directive " + d.id + " already exists");
    if (existing.priority == d.priority && existing.rule.query_scope == d.rule.query_scope &&
        overlaps(existing.active_window, d.active_window)) {
      throw Error(ErrorCode::kInvalidArgument,
                  "directive " + d.id + " collides with " + existing.id + " on scope and priority");
    }
  }
  directives_.push_back(d);
}

bool DirectiveSet::remove(const std::string& id) {
  std::unique_lock lock(mu_);
  auto it = std::find_if(directives_.begin(), directives_.end(), [&](const Directive& d) { return d.id == id; });
  if (it == directives_.end()) return false;
  directives_.erase(it);
  return true;
}

std::vector<Directive> DirectiveSet::active_at(std::int64_t t) const {
  std::shared_lock lock(mu_);
  std::vector<Directive> out;
  for (const auto& d : directives_) {
    if (d.active_window.contains(t)) out.push_back(d);
  }
  sort_by_priority(out);
  return out;
}

std::vector<Directive> DirectiveSet::all() const {
  std::shared_lock lock(mu_);
  return directives_;
}

std::optional<Directive> DirectiveSet::find(const std::string& id) const {
  std::shared_lock lock(mu_);
  for (const auto& d : directives_) {
    if (d.id == id) return d;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Contrastive set

namespace {

class ItemFactory {
 public:
  ItemFactory(const world::World& w, std::uint64_t seed)
      : w_(w), rng_(Rng::derive(seed, "contrastive")), predicates_(w.oracle_standard().all_predicates()) {}

  const world::WorldQuery& pick_query() { return w_.queries()[rng_.uniform_int(w_.queries().size())]; }

  const Product& pick_product(const world::WorldQuery& q, bool same_leaf) {
    if (same_leaf && q.intent.category) {
      for (int i = 0; i < 200; ++i) {
        const Product& d = w_.products()[rng_.uniform_int(w_.products().size())];
        if (d.in_category(*q.intent.category)) return d;
      }
    }
    if (q.intent.category && rng_.bernoulli(0.5)) {
      const std::string dept = w_.taxonomy().department_of(*q.intent.category);
      for (int i = 0; i < 200; ++i) {
        const Product& d = w_.products()[rng_.uniform_int(w_.products().size())];
        if (d.in_category(dept)) return d;
      }
    }
    return w_.products()[rng_.uniform_int(w_.products().size())];
  }

  InstructionItem item(const world::WorldQuery& q, const Product& d) {
    InstructionItem it;
    it.query = q.query;
    it.structure = world::to_structure(q.intent);
    it.product = d;
    it.base_label = world::evaluate_clauses(q.intent, d, predicates_).label;
    return it;
  }

  std::string other_brand(const Product& d) {
    const auto& brands = w_.taxonomy().department(d.leaf()).brands;
    for (int i = 0; i < 20; ++i) {
      const std::string& b = rng_.pick(brands);
      if (d.brand != b) return b;
    }
    return "unbranded";
  }

  std::string other_leaf(const Product& d) {
    const auto leaves = w_.taxonomy().leaves();
    for (;;) {
      const auto* leaf = rng_.pick(leaves);
      if (leaf->id != d.leaf()) return leaf->id;
    }
  }

  Rule make_rule(RulePrimitive p, const world::WorldQuery& q, ProductMatch match, const std::string& id) {
    Rule r;
    r.id = id;
    r.primitive = p;
    r.query_scope.categories = {*q.intent.category};
    r.product_match = std::move(match);
    r.action = Rule::canonical_action(p);
    const auto& tax = w_.taxonomy();
    std::string target = r.product_match.brand ? *r.product_match.brand + " " : "";
    target += r.product_match.categories.empty() ? "products" : tax.display_name(r.product_match.categories[0]);
    const std::string scope = tax.display_name(*q.intent.category);
    switch (p) {
      case RulePrimitive::kInclusion:
        r.human_text = "For " + scope + " queries, " + target + " must be shown.";
        break;
      case RulePrimitive::kExclusion:
        r.human_text = "For " + scope + " queries, " + target + " cannot be shown.";
        break;
      case RulePrimitive::kScoping:
        r.human_text = "For " + scope + " queries, only " + target + " may be shown.";
        break;
    }
    return r;
  }

  // A rule that fires on (q, d) with the given primitive.
  Rule firing_rule(RulePrimitive p, const world::WorldQuery& q, const Product& d, const std::string& id) {
    ProductMatch m;
    if (p == RulePrimitive::kScoping) {
      m.categories = {d.leaf()};
      m.brand = other_brand(d);
    } else {
      m.categories = {d.leaf()};
      if (d.brand && rng_.bernoulli(0.5)) m.brand = d.brand;
    }
    return make_rule(p, q, m, id);
  }

  Rng& rng() { return rng_; }

 private:
  const world::World& w_;
  Rng rng_;
  std::vector<std::string> predicates_;
};

std::string item_id(const char* prefix, std::size_t n) { return std::string(prefix) + zero_pad(static_cast<long long>(n), 5); }

}  // namespace

std::vector<InstructionItem> generate_contrastive_set(const world::World& w, const ContrastiveCounts& counts,
                                                      std::uint64_t seed) {
  if (counts.up < 0 || counts.down < 0 || counts.neutral < 0) {
    throw Error(ErrorCode::kInvalidArgument, "contrastive counts must be non-negative");
  }
  ItemFactory f(w, seed);
  std::vector<InstructionItem> out;
  auto budget = [](int n) { return 200 + n * 200; };

  int made = 0;
  for (int attempt = 0; made < counts.up; ++attempt) {
    if (attempt > budget(counts.up)) throw Error(ErrorCode::kInsufficientWorld, "not enough up pairs");
    const auto& q = f.pick_query();
    if (!q.intent.category) continue;
    const Product& d = f.pick_product(q, false);
    InstructionItem it = f.item(q, d);
    if (it.base_label.value() >= 2) continue;
    it.scenario = Scenario::kUp;
    it.rule = f.firing_rule(RulePrimitive::kInclusion, q, d, item_id("r-up-", made + 1));
    it.expected_label = it.rule.action.apply(it.base_label);
    it.construction = Verdict::kApplies;
    out.push_back(std::move(it));
    ++made;
  }

  made = 0;
  for (int attempt = 0; made < counts.down; ++attempt) {
    if (attempt > budget(counts.down)) throw Error(ErrorCode::kInsufficientWorld, "not enough down pairs");
    const auto& q = f.pick_query();
    if (!q.intent.category) continue;
    const Product& d = f.pick_product(q, true);
    InstructionItem it = f.item(q, d);
    if (it.base_label.value() == 0) continue;
    const RulePrimitive p = f.rng().bernoulli(0.5) ? RulePrimitive::kExclusion : RulePrimitive::kScoping;
    it.scenario = Scenario::kDown;
    it.rule = f.firing_rule(p, q, d, item_id("r-down-", made + 1));
    it.expected_label = RelevanceLabel::irrelevant();
    it.construction = Verdict::kApplies;
    out.push_back(std::move(it));
    ++made;
  }

  const int object_target = counts.neutral / 2;
  made = 0;
  for (int attempt = 0; made < counts.neutral; ++attempt) {
    if (attempt > budget(counts.neutral)) throw Error(ErrorCode::kInsufficientWorld, "not enough neutral pairs");
    const auto& q = f.pick_query();
    if (!q.intent.category) continue;
    const Product& d = f.pick_product(q, f.rng().bernoulli(0.5));
    InstructionItem it = f.item(q, d);
    it.scenario = Scenario::kNeutral;
    it.expected_label = it.base_label;
    const std::string id = item_id("r-neutral-", made + 1);
    const auto kind = static_cast<int>(f.rng().uniform_int(3));
    const RulePrimitive p = kind == 0 ? RulePrimitive::kInclusion
                            : kind == 1 ? RulePrimitive::kExclusion
                                        : RulePrimitive::kScoping;
    if (made < object_target) {
      // Same query scope, wrong object.
      ProductMatch m;
      if (p == RulePrimitive::kScoping) {
        m.categories = {d.leaf()};
        if (d.brand) m.brand = d.brand;
      } else if (f.rng().bernoulli(0.5)) {
        m.categories = {d.leaf()};
        m.brand = f.other_brand(d);
      } else {
        m.categories = {f.other_leaf(d)};
      }
      it.rule = f.make_rule(p, q, m, id);
      it.construction = Verdict::kObjectMismatch;
    } else {
      // Rule transplanted from a query in another department.
      const auto& donor = f.pick_query();
      if (!donor.intent.category) continue;
      const auto& tax = w.taxonomy();
      if (tax.department_of(*donor.intent.category) == tax.department_of(*q.intent.category)) continue;
      const Product& donor_product = f.pick_product(donor, true);
      it.rule = f.firing_rule(p, donor, donor_product, id);
      it.construction = Verdict::kScenarioMismatch;
    }
    if (applies(it.rule, it.structure, it.product).verdict != it.construction) continue;
    out.push_back(std::move(it));
    ++made;
  }
  return out;
}

InstructionMetrics evaluate_instruction_following(const RuleScorer& scorer, const std::vector<InstructionItem>& set) {
  if (set.empty()) throw Error(ErrorCode::kEmptySet, "instruction-following set is empty");
  std::array<std::size_t, 3> hit{};
  std::array<std::size_t, 3> total{};
  for (const auto& item : set) {
    const auto s = static_cast<std::size_t>(item.scenario);
    ++total[s];
    if (scorer(item) == item.expected_label) ++hit[s];
  }
  auto rate = [&](std::size_t s) -> std::optional<double> {
    if (total[s] == 0) return std::nullopt;
    return static_cast<double>(hit[s]) / static_cast<double>(total[s]);
  };
  InstructionMetrics m;
  m.acc_total = static_cast<double>(hit[0] + hit[1] + hit[2]) / static_cast<double>(set.size());
  m.acc_up = rate(0);
  m.acc_down = rate(1);
  m.acc_neutral = rate(2);
  return m;
}

RelevanceLabel interpreter_score(const InstructionItem& item) {
  Directive d{item.rule.id, item.rule, 0, {}};
  return apply_rules(Prediction::smoothed(item.base_label, Stage::kFine), {d}, item.structure, item.product)
      .prediction.label;
}

// ---------------------------------------------------------------------------
// Rule classifier

std::array<double, RuleClassifier::kFeatures> RuleClassifier::features(const InstructionItem& item) {
  std::array<double, kFeatures> x{};
  x[static_cast<std::size_t>(item.base_label.value())] = 1.0;
  const bool qm = item.rule.query_scope.matches(item.structure);
  const bool pm = item.rule.product_match.matches(item.product);
  const std::size_t off = 4 + 4 * static_cast<std::size_t>(item.rule.primitive);
  x[off] = 1.0;
  x[off + 1] = qm ? 1.0 : 0.0;
  x[off + 2] = pm ? 1.0 : 0.0;
  x[off + 3] = qm && pm ? 1.0 : 0.0;
  x[16] = 1.0;
  x[17] = item.base_label.value() / 3.0;
  x[18] = qm ? 1.0 : 0.0;
  x[19] = pm ? 1.0 : 0.0;
  return x;
}

RuleClassifier RuleClassifier::train(const std::vector<InstructionItem>& items, const Config& config) {
  if (items.empty()) throw Error(ErrorCode::kEmptySet, "no training items");
  RuleClassifier m;
  std::vector<std::array<double, kFeatures>> xs;
  xs.reserve(items.size());
  for (const auto& it : items) xs.push_back(features(it));
  const double n = static_cast<double>(items.size());
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::array<std::array<double, kFeatures>, RelevanceLabel::kLevels> grad{};
    for (std::size_t i = 0; i < items.size(); ++i) {
      std::array<double, RelevanceLabel::kLevels> z{};
      for (std::size_t c = 0; c < z.size(); ++c) {
        for (std::size_t f = 0; f < kFeatures; ++f) z[c] += m.w_[c][f] * xs[i][f];
      }
      const double zmax = *std::max_element(z.begin(), z.end());
      double total = 0.0;
      for (auto& v : z) total += (v = std::exp(v - zmax));
      for (std::size_t c = 0; c < z.size(); ++c) {
        const double p = z[c] / total;
        const double g = p - (static_cast<int>(c) == items[i].expected_label.value() ? 1.0 : 0.0);
        for (std::size_t f = 0; f < kFeatures; ++f) grad[c][f] += g * xs[i][f] / n;
      }
    }
    for (std::size_t c = 0; c < grad.size(); ++c) {
      for (std::size_t f = 0; f < kFeatures; ++f) {
        m.w_[c][f] -= config.learning_rate * (grad[c][f] + config.l2 * m.w_[c][f]);
      }
    }
  }
  return m;
}

RelevanceLabel RuleClassifier::predict(const InstructionItem& item) const {
  const auto x = features(item);
  std::size_t best = 0;
  double best_z = -1e300;
  for (std::size_t c = 0; c < w_.size(); ++c) {
    double z = 0.0;
    for (std::size_t f = 0; f < kFeatures; ++f) z += w_[c][f] * x[f];
    if (z > best_z) {
      best_z = z;
      best = c;
    }
  }
  return RelevanceLabel::of(static_cast<int>(best));
}

}  // namespace caseloop::rules
