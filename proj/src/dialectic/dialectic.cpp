#include "caseloop/dialectic/dialectic.hpp"

#include <algorithm>

#include "caseloop/core/error.hpp"
#include "caseloop/core/rng.hpp"
#include "caseloop/core/text.hpp"
#include "caseloop/world/world.hpp"

namespace caseloop::dialectic {

namespace {
constexpr std::string_view kIntuition = "intuition";
}

std::string_view to_string(Speaker s) { return s == Speaker::kUser ? "user" : "annotator"; }

std::string_view to_string(RouteKind k) {
  switch (k) {
    case RouteKind::kStandardEvolution:
      return "standard_evolution_signal";
    case RouteKind::kModelError:
      return "model_error_case";
    case RouteKind::kExempt:
      return "exempt";
  }
  return "exempt";
}

RouteKind route_kind_from(std::string_view s) {
  if (s == "standard_evolution_signal") return RouteKind::kStandardEvolution;
  if (s == "model_error_case") return RouteKind::kModelError;
  if (s == "exempt") return RouteKind::kExempt;
  throw Error(ErrorCode::kCorruptRecord, "unknown action kind '" + std::string(s) + "'");
}

void to_json(Json& j, const Argument& a) {
  j = Json{{"label", a.label.value()},
           {"reason", a.reason},
           {"text", a.text},
           {"precedents", a.precedent_ids},
           {"justified_by_s", a.justified_by_s}};
}

void from_json(const Json& j, Argument& a) {
  a.label = RelevanceLabel::of(j.at("label").get<int>());
  a.reason = j.at("reason").get<std::string>();
  a.text = j.at("text").get<std::string>();
  a.precedent_ids = j.at("precedents").get<std::vector<std::string>>();
  a.justified_by_s = j.at("justified_by_s").get<bool>();
}

void to_json(Json& j, const Transcript& t) {
  Json turns = Json::array();
  for (const auto& turn : t.turns) {
    turns.push_back(Json{{"round", turn.round}, {"speaker", to_string(turn.speaker)}, {"argument", turn.argument}});
  }
  Json outcome{{"kind", t.outcome.kind == OutcomeKind::kConsensus ? "consensus" : "no_consensus"},
               {"label", t.outcome.label ? Json(t.outcome.label->value()) : Json(nullptr)},
               {"justified_by_s", t.outcome.justified_by_s}};
  j = Json{{"case_id", t.case_id}, {"round_count", t.round_count}, {"turns", turns}, {"outcome", outcome}};
}

void from_json(const Json& j, Transcript& t) {
  t.case_id = j.at("case_id").get<std::string>();
  t.round_count = j.at("round_count").get<int>();
  t.turns.clear();
  for (const auto& tj : j.at("turns")) {
    Turn turn;
    turn.round = tj.at("round").get<int>();
    const auto sp = tj.at("speaker").get<std::string>();
    if (sp != "user" && sp != "annotator") throw Error(ErrorCode::kCorruptRecord, "unknown speaker " + sp);
    turn.speaker = sp == "user" ? Speaker::kUser : Speaker::kAnnotator;
    turn.argument = tj.at("argument").get<Argument>();
    t.turns.push_back(std::move(turn));
  }
  const auto& o = j.at("outcome");
  t.outcome.kind = o.at("kind").get<std::string>() == "consensus" ? OutcomeKind::kConsensus : OutcomeKind::kNoConsensus;
  t.outcome.label = o.at("label").is_null() ? std::nullopt : std::optional(RelevanceLabel::of(o.at("label").get<int>()));
  t.outcome.justified_by_s = o.at("justified_by_s").get<bool>();
}

// ---------------------------------------------------------------------------
// mock user

MockUser::MockUser(const world::World& world, MockUserConfig config) : world_(world), config_(config) {}

Argument MockUser::clean(const Query& q, const Product& d) const {
  const auto v = world_.judge(world_.intent_of(q), d.id, world_.oracle_standard().all_predicates());
  Argument a;
  a.label = v.label;
  a.reason = v.predicate.empty() ? std::string(kIntuition) : v.predicate;
  a.text = "as a shopper I'd call this " + std::string(v.label.name());
  return a;
}

Argument MockUser::open(const Query& q, const Product& d) const {
  Argument a = clean(q, d);
  Rng rng = Rng::derive(config_.seed, "user|" + q.text + "|" + d.id);
  if (rng.bernoulli(config_.epsilon)) {
    a.label = annotator::perturb(a.label, rng);
    a.reason = std::string(kIntuition);
    a.text = "gut feeling: " + std::string(a.label.name());
  }
  return a;
}

Argument MockUser::respond(const Query& q, const Product& d, const Argument& mine, const Argument& theirs,
                           const std::vector<memory::MemoryEntry>&, int) const {
  if (config_.stubborn) return mine;
  Argument c = clean(q, d);
  if (theirs.label == c.label) {
    c.text = "fair, " + std::string(c.label.name()) + " works for me";
    return c;
  }
  c.text = "still " + std::string(c.label.name()) + ": " + c.reason;
  return c;
}

// ---------------------------------------------------------------------------
// mock annotator

MockAnnotatorAgent::MockAnnotatorAgent(std::shared_ptr<const annotator::Annotator> annotator,
                                       std::shared_ptr<const annotator::MockJudge> judge, MockAnnotatorConfig config)
    : annotator_(std::move(annotator)), judge_(std::move(judge)), config_(config) {}

annotator::Judgment MockAnnotatorAgent::clean(const Query& q, const Product& d, const StandardsDoc& s,
                                              const std::vector<Directive>& i) const {
  annotator::JudgeRequest r{q, d, annotator_->ground(q), s, i, 0};
  return judge_->clean(r);
}

namespace {

const memory::MemoryEntry* exact_precedent(const std::vector<memory::MemoryEntry>& k, const Query& q,
                                           const Product& d) {
  const memory::MemoryEntry* best = nullptr;
  for (const auto& e : k) {
    if (e.content.kind != memory::ContentKind::kPrecedent || !e.content.label) continue;
    if (e.content.query_text != q.text || e.content.product_id != d.id) continue;
    if (!best || e.authority > best->authority) best = &e;
  }
  return best;
}

Argument from_precedent(const memory::MemoryEntry& e, RelevanceLabel s_label) {
  Argument a;
  a.label = *e.content.label;
  a.reason = "precedent";
  a.precedent_ids = {e.id};
  a.justified_by_s = a.label == s_label;
  a.text = "precedent " + e.id + " settled this pair at " + std::to_string(a.label.value());
  return a;
}

Argument from_judgment(const annotator::Judgment& j, bool justified) {
  Argument a;
  a.label = j.label;
  a.reason = j.clause_id.empty() ? std::string(kIntuition) : j.clause_id;
  a.text = j.rationale;
  a.justified_by_s = justified;
  return a;
}

}  // namespace

Argument MockAnnotatorAgent::open(const Query& q, const Product& d, const StandardsDoc& s,
                                  const std::vector<Directive>& i,
                                  const std::vector<memory::MemoryEntry>& precedents) const {
  const auto c = clean(q, d, s, i);
  if (const auto* p = exact_precedent(precedents, q, d)) return from_precedent(*p, c.label);
  const auto r = annotator_->annotate(q, d, s, i);
  annotator::Judgment j{r.label, r.rationale, r.clause_id};
  return from_judgment(j, r.label == c.label);
}

Argument MockAnnotatorAgent::respond(const Query& q, const Product& d, const StandardsDoc& s,
                                     const std::vector<Directive>& i, const Argument& mine, const Argument& theirs,
                                     const std::vector<memory::MemoryEntry>& precedents, int) const {
  if (config_.stubborn) return mine;
  const auto c = clean(q, d, s, i);
  if (const auto* p = exact_precedent(precedents, q, d)) return from_precedent(*p, c.label);
  if (theirs.label == c.label) return from_judgment(c, true);
  // A shopper reason outside S that checks out on the listing.
  const auto preds = s.predicates();
  if (theirs.reason != kIntuition && std::find(preds.begin(), preds.end(), theirs.reason) == preds.end()) {
    auto extended = preds;
    extended.push_back(theirs.reason);
    const auto intent = annotator::grounded_intent(annotator_->parser(), q, annotator_->ground(q));
    const auto v = world::evaluate_clauses(intent, d, extended);
    if (v.label == theirs.label && v.predicate == theirs.reason) {
      Argument a;
      a.label = theirs.label;
      a.reason = theirs.reason;
      a.text = "no published clause covers '" + theirs.reason + "'; accepting the shopper reading";
      a.justified_by_s = false;
      return a;
    }
  }
  return from_judgment(c, true);
}

// ---------------------------------------------------------------------------

Transcript negotiate(const std::string& case_id, const Query& q, const Product& d, const StandardsDoc& s,
                     const std::vector<Directive>& i, const std::vector<memory::MemoryEntry>& precedents,
                     const UserPolicy& user, const AnnotatorPolicy& annotator, int max_rounds) {
  if (max_rounds < 1) throw Error(ErrorCode::kInvalidArgument, "max_rounds must be at least 1");
  Transcript t;
  t.case_id = case_id;
  Argument u = user.open(q, d);
  Argument a = annotator.open(q, d, s, i, precedents);
  t.turns.push_back({0, Speaker::kUser, u});
  t.turns.push_back({0, Speaker::kAnnotator, a});
  t.round_count = 1;
  while (u.label != a.label && t.round_count < max_rounds) {
    const int r = t.round_count;
    u = user.respond(q, d, u, a, precedents, r);
    a = annotator.respond(q, d, s, i, a, u, precedents, r);
    t.turns.push_back({r, Speaker::kUser, u});
    t.turns.push_back({r, Speaker::kAnnotator, a});
    ++t.round_count;
  }
  if (u.label == a.label) {
    t.outcome = {OutcomeKind::kConsensus, a.label, a.justified_by_s};
  } else {
    t.outcome = {OutcomeKind::kNoConsensus, std::nullopt, false};
  }
  return t;
}

DialecticBatch run_dialectic(const Query& q, const std::vector<Candidate>& candidates, const StandardsDoc& s,
                             const std::vector<Directive>& i, const memory::MemoryStore* memory,
                             const UserPolicy& user, const AnnotatorPolicy& annotator,
                             const DialecticConfig& config) {
  DialecticBatch out;
  std::vector<memory::MemoryEntry> precedents;
  if (memory) {
    for (auto& hit : memory->retrieve(q.text, config.precedents_k)) precedents.push_back(std::move(hit.entry));
  }
  for (std::size_t n = 0; n < candidates.size(); ++n) {
    const auto& cand = candidates[n];
    const std::string id = config.case_prefix + "-" + zero_pad(static_cast<long long>(n) + 1, 3);
    try {
      Transcript t = negotiate(id, q, cand.product, s, i, precedents, user, annotator, config.max_rounds);
      Case c(id, q, cand.product, std::nullopt, cand.online, Provenance::kDialectic, config.standards_version);
      out.results.push_back({std::move(c), std::move(t)});
    } catch (const std::exception& e) {
      out.failures.push_back({id, cand.product.id, e.what()});
    }
  }
  return out;
}

RoutedAction route_outcome(const ConsensusOutcome& outcome, const Prediction& online) {
  if (outcome.kind == OutcomeKind::kNoConsensus) return {RouteKind::kStandardEvolution, true};
  if (!outcome.label) throw Error(ErrorCode::kInvalidArgument, "consensus outcome without a label");
  if (!outcome.justified_by_s) return {RouteKind::kStandardEvolution, false};
  if (*outcome.label != online.label) return {RouteKind::kModelError, false};
  return {RouteKind::kExempt, false};
}

MiningMetrics mining_metrics(const std::map<std::string, RoutedAction>& routed,
                             const std::set<std::string>& reference_bad) {
  if (reference_bad.empty()) throw Error(ErrorCode::kEmptyReference, "reference bad-case set is empty");
  MiningMetrics m;
  m.reference = reference_bad.size();
  for (const auto& [id, action] : routed) {
    if (action.kind != RouteKind::kModelError) continue;
    ++m.emitted;
    if (reference_bad.count(id)) ++m.true_positives;
  }
  if (m.emitted > 0) m.precision = static_cast<double>(m.true_positives) / static_cast<double>(m.emitted);
  m.recall = static_cast<double>(m.true_positives) / static_cast<double>(m.reference);
  return m;
}

}  // namespace caseloop::dialectic
