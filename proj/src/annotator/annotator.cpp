#include "caseloop/annotator/annotator.hpp"

#include <algorithm>
#include <cmath>

#include <httplib.h>

#include "caseloop/core/error.hpp"
#include "caseloop/core/records.hpp"
#include "caseloop/core/rng.hpp"
#include "caseloop/core/text.hpp"
#include "caseloop/rules/rules.hpp"
#include "caseloop/world/world.hpp"

namespace caseloop::annotator {

QuerySummary ground_query(const Query& q, const ToolFn& web_tool) {
  QuerySummary s;
  s.query_id = q.id;
  s.summary_text = q.text;
  world::ToolResult result;
  try {
    result = web_tool({"web_search", {{"query", q.text}}});
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kToolUnavailable && e.code() != ErrorCode::kInvalidQuery) throw;
    s.degraded = true;
    return s;
  }
  if (result.hits.empty()) {
    s.degraded = true;
    return s;
  }
  for (const auto& h : result.hits) {
    s.summary_text += " | " + h.snippet;
    s.evidence.push_back({"web_search", h.ref, h.snippet});
    s.facts.push_back({h.ref, h.category_hint, h.attributes, h.image_refs});
  }
  return s;
}

world::QueryIntent grounded_intent(const model::QueryParser& parser, const Query& q, const QuerySummary& summary) {
  const QueryStructure st = parser.parse(q);
  world::QueryIntent intent;
  intent.tokens = tokenize(q.text);
  if (!st.category_intent.empty()) intent.category = st.category_intent.front();
  intent.brand = st.brand;
  intent.attributes = st.attributes;
  for (const auto& f : summary.facts) {
    intent.entity = f.entity;
    if (!intent.category && !f.category.empty()) intent.category = f.category;
    for (const auto& [k, v] : f.attributes) intent.attributes.emplace(k, v);
    break;
  }
  return intent;
}

RelevanceLabel perturb(RelevanceLabel label, Rng& rng) {
  const int v = label.value();
  if (v == 0) return RelevanceLabel::weak();
  if (v == 3) return RelevanceLabel::relevant();
  return RelevanceLabel::of(rng.bernoulli(0.5) ? v + 1 : v - 1);
}

namespace {

std::string clause_id_for(const StandardsDoc& s, const std::string& predicate) {
  const Clause* c = s.find_predicate(predicate);
  return c ? c->id : std::string();
}

Judgment judge_clean(const model::QueryParser& parser, const JudgeRequest& r) {
  const world::QueryIntent intent = grounded_intent(parser, r.query, r.summary);
  const world::ClauseVerdict v = world::evaluate_clauses(intent, r.product, r.standards.predicates());
  Judgment j;
  j.label = v.label;
  j.clause_id = clause_id_for(r.standards, v.predicate);
  j.rationale = j.clause_id.empty() ? "no clause applies" : "clause " + j.clause_id + " (" + v.predicate + ")";
  if (!r.directives.empty()) {
    const auto out = rules::apply_rules(Prediction::smoothed(j.label, Stage::kFine), r.directives,
                                        world::to_structure(intent), r.product);
    if (out.applied_rule && out.prediction.label != j.label) {
      j.label = out.prediction.label;
      j.rationale += "; directive rule " + *out.applied_rule;
    }
  }
  return j;
}

}  // namespace

MockJudge::MockJudge(const world::World& world, std::shared_ptr<const model::QueryParser> parser, double epsilon,
                     std::uint64_t seed)
    : world_(world), parser_(std::move(parser)), epsilon_(epsilon), seed_(seed) {}

Judgment MockJudge::clean(const JudgeRequest& request) const { return judge_clean(*parser_, request); }

Judgment MockJudge::judge(const JudgeRequest& request) const {
  (void)world_;
  Judgment j = clean(request);
  Rng rng = Rng::derive(seed_, "judge|" + request.query.text + "|" + request.product.id,
                        static_cast<std::uint64_t>(request.sample_index));
  if (rng.bernoulli(epsilon_)) {
    j.label = perturb(j.label, rng);
    j.rationale += "; borderline reading";
  }
  return j;
}

RemoteJudge::RemoteJudge(std::string host, int port, std::string path, int timeout_seconds)
    : host_(std::move(host)), port_(port), path_(std::move(path)), timeout_seconds_(timeout_seconds) {}

std::string RemoteJudge::render_prompt(const JudgeRequest& r) {
  std::string p = "You are a search relevance annotator. Answer with a label 0-3.\n\nStandards (version " +
                  std::to_string(r.standards.version) + "):\n";
  for (const auto& c : r.standards.clauses) p += "- [" + c.id + "] " + c.text + "\n";
  if (!r.directives.empty()) {
    p += "\nActive directives:\n";
    for (const auto& d : r.directives) p += "- [" + d.rule.id + "] " + d.rule.human_text + "\n";
  }
  p += "\nQuery: " + r.query.text + "\nQuery summary: " + r.summary.summary_text + "\nProduct: " + r.product.title +
       "\nCategory: " + join(r.product.category_path, " > ") + "\n";
  if (r.product.brand) p += "Brand: " + *r.product.brand + "\n";
  for (const auto& [k, v] : r.product.attributes) p += k + ": " + v + "\n";
  return p;
}

Judgment RemoteJudge::judge(const JudgeRequest& request) const {
  httplib::Client cli(host_, port_);
  cli.set_connection_timeout(timeout_seconds_);
  cli.set_read_timeout(timeout_seconds_);
  const Json body{{"prompt", render_prompt(request)}, {"sample_index", request.sample_index}};
  auto res = cli.Post(path_, body.dump(), "application/json");
  if (!res) throw Error(ErrorCode::kAnnotatorUnavailable, "remote judge unreachable at " + host_);
  if (res->status != 200) {
    throw Error(ErrorCode::kAnnotatorUnavailable, "remote judge returned status " + std::to_string(res->status));
  }
  try {
    const Json j = Json::parse(res->body);
    Judgment out;
    out.label = RelevanceLabel::of(j.at("label").get<int>());
    out.rationale = j.value("rationale", "");
    out.clause_id = j.value("clause_id", "");
    return out;
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::kAnnotatorUnavailable, std::string("malformed judge response: ") + e.what());
  }
}

std::vector<CandidateJudgment> generate_candidates(const JudgePolicy& judge, const QuerySummary& summary,
                                                   const Query& q, const Product& d, const StandardsDoc& s,
                                                   const std::vector<Directive>& directives, int k) {
  if (k < 1) throw Error(ErrorCode::kInvalidK, "k must be at least 1, got " + std::to_string(k));
  std::vector<CandidateJudgment> out;
  out.reserve(static_cast<std::size_t>(k));
  JudgeRequest req{q, d, summary, s, directives, 0};
  for (int i = 0; i < k; ++i) {
    req.sample_index = i;
    const Judgment j = judge.judge(req);
    out.push_back({j.label, j.rationale, j.clause_id, i});
  }
  return out;
}

// ---------------------------------------------------------------------------

const char* grm_feature_name(std::size_t i) {
  static constexpr std::array<const char*, kGrmFeatures> kNames{
      "bias",           "agrees_with_standard", "distance_to_standard", "directive_match", "directive_violation",
      "in_category_relevant", "mismatch_zero",  "conflict_weak",        "full_match_strong", "vote_share",
      "label_level"};
  return kNames[i];
}

GrmParams GrmParams::defaults() {
  GrmParams p;
  p.weights = {-1.0, 2.0, -1.0, 1.0, -2.0, 0.5, 0.5, 0.5, 0.5, 1.0, 0.0};
  return p;
}

GrmContext make_context(const model::QueryParser& parser, const QuerySummary& summary, const Query& q,
                        const Product& d, const StandardsDoc& s, const std::vector<Directive>& directives,
                        const std::vector<CandidateJudgment>& candidates) {
  GrmContext ctx;
  ctx.intent = grounded_intent(parser, q, summary);
  ctx.product = d;
  ctx.standards = s;
  ctx.directives = directives;
  for (const auto& c : candidates) ctx.vote_share[static_cast<std::size_t>(c.label.value())] += 1.0;
  if (!candidates.empty()) {
    for (auto& v : ctx.vote_share) v /= static_cast<double>(candidates.size());
  }
  return ctx;
}

GrmFeatures grm_features(const GrmContext& ctx, RelevanceLabel candidate) {
  GrmFeatures f{};
  const int l = candidate.value();
  const auto heuristic = world::evaluate_clauses(ctx.intent, ctx.product, ctx.standards.predicates()).label.value();
  f[0] = 1.0;
  f[1] = l == heuristic ? 1.0 : 0.0;
  f[2] = std::abs(l - heuristic) / 3.0;
  if (!ctx.directives.empty()) {
    const auto out = rules::apply_rules(Prediction::smoothed(RelevanceLabel::of(heuristic), Stage::kFine),
                                        ctx.directives, world::to_structure(ctx.intent), ctx.product);
    if (out.applied_rule) {
      (l == out.prediction.label.value() ? f[3] : f[4]) = 1.0;
    }
  }
  if (ctx.intent.category) {
    const world::PairConflicts c = world::compare(ctx.intent, ctx.product);
    const bool conflict = c.brand_conflict || !c.conflicting_attributes.empty();
    f[5] = c.category_match && !conflict && l >= 2 ? 1.0 : 0.0;
    f[6] = !c.category_match && l == 0 ? 1.0 : 0.0;
    f[7] = c.category_match && conflict && l == 1 ? 1.0 : 0.0;
    f[8] = c.category_match && !conflict && !c.brand_unknown && c.unknown_attributes.empty() && l == 3 ? 1.0 : 0.0;
  }
  f[9] = ctx.vote_share[static_cast<std::size_t>(l)];
  f[10] = l / 3.0;
  return f;
}

double grm_raw(const GrmParams& p, const GrmFeatures& f) {
  double s = 0.0;
  for (std::size_t i = 0; i < kGrmFeatures; ++i) s += p.weights[i] * f[i];
  return s;
}

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

double grm_score(const GrmParams& p, const GrmContext& ctx, RelevanceLabel candidate) {
  return sigmoid(grm_raw(p, grm_features(ctx, candidate)));
}

namespace {
double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
}  // namespace

double pairwise_loss(double score_p, double score_n, double margin) {
  return softplus(-(score_p - score_n - margin));
}

GrmLoss grm_loss(const GrmParams& p, const std::vector<GrmPair>& pairs, const std::vector<GrmLabeled>& ce,
                 GrmFeatures* grad) {
  GrmLoss L;
  if (grad) grad->fill(0.0);
  if (!ce.empty()) {
    const double n = static_cast<double>(ce.size());
    for (const auto& item : ce) {
      const double r = grm_raw(p, item.features);
      // -[y log s + (1-y) log(1-s)] = softplus(r) - y r
      L.ce += (softplus(r) - item.target * r) / n;
      if (grad) {
        const double g = (sigmoid(r) - item.target) / n;
        for (std::size_t i = 0; i < kGrmFeatures; ++i) (*grad)[i] += g * item.features[i];
      }
    }
  }
  if (!pairs.empty()) {
    const double n = static_cast<double>(pairs.size());
    for (const auto& pr : pairs) {
      const double sp = grm_raw(p, pr.positive);
      const double sn = grm_raw(p, pr.negative);
      L.pairwise += pairwise_loss(sp, sn, p.margin) / n;
      if (grad && p.lambda != 0.0) {
        const double g = -sigmoid(-(sp - sn - p.margin)) * p.lambda / n;
        for (std::size_t i = 0; i < kGrmFeatures; ++i) (*grad)[i] += g * (pr.positive[i] - pr.negative[i]);
      }
    }
  }
  L.total = L.ce + p.lambda * L.pairwise;
  return L;
}

GrmParams grm_train(const std::vector<GrmPair>& pairs, const std::vector<GrmLabeled>& ce,
                    const GrmTrainConfig& config) {
  if (pairs.empty()) throw Error(ErrorCode::kDegenerateData, "GRM training needs at least one pair");
  const bool all_same = std::all_of(pairs.begin(), pairs.end(), [](const GrmPair& p) { return p.positive == p.negative; });
  if (all_same) throw Error(ErrorCode::kDegenerateData, "every GRM pair has identical sides");
  if (config.margin < 0.0) throw Error(ErrorCode::kInvalidArgument, "margin must be non-negative");
  GrmParams p;
  p.lambda = config.lambda;
  p.margin = config.margin;
  GrmFeatures g{};
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    grm_loss(p, pairs, ce, &g);
    for (std::size_t i = 0; i < kGrmFeatures; ++i) p.weights[i] -= config.learning_rate * g[i];
  }
  return p;
}

std::size_t select_label(const std::vector<CandidateJudgment>& candidates, const std::vector<double>& scores) {
  if (candidates.empty() || scores.size() != candidates.size()) {
    throw Error(ErrorCode::kInvalidArgument, "select_label needs aligned, non-empty candidates and scores");
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    if (scores[i] > scores[best] ||
        (scores[i] == scores[best] && candidates[i].sample_index < candidates[best].sample_index)) {
      best = i;
    }
  }
  return best;
}

Annotator::Annotator(ToolFn web_tool, std::shared_ptr<const JudgePolicy> judge,
                     std::shared_ptr<const model::QueryParser> parser, GrmParams grm, AnnotatorConfig config)
    : web_tool_(std::move(web_tool)),
      judge_(std::move(judge)),
      parser_(std::move(parser)),
      grm_(grm),
      config_(config) {}

AnnotationResult Annotator::annotate(const Query& q, const Product& d, const StandardsDoc& s,
                                     const std::vector<Directive>& directives) const {
  AnnotationResult r;
  r.summary = ground_query(q, web_tool_);
  r.candidates = generate_candidates(*judge_, r.summary, q, d, s, directives, config_.k);
  const GrmContext ctx = make_context(*parser_, r.summary, q, d, s, directives, r.candidates);
  for (const auto& c : r.candidates) r.scores.push_back(grm_score(grm_, ctx, c.label));
  r.selected = select_label(r.candidates, r.scores);
  const auto& chosen = r.candidates[r.selected];
  r.label = chosen.label;
  r.rationale = chosen.rationale;
  r.clause_id = chosen.clause_id;
  if (!directives.empty()) {
    const auto out = rules::apply_rules(Prediction::smoothed(r.label, Stage::kFine), directives,
                                        world::to_structure(ctx.intent), d);
    if (out.applied_rule && out.prediction.label != r.label) {
      r.label = out.prediction.label;
      r.rationale += "; directive rule " + *out.applied_rule;
    }
  }
  return r;
}

GrmTrainingSet build_grm_training_set(const world::World& world, const JudgePolicy& judge,
                                      const model::QueryParser& parser,
                                      const std::vector<std::pair<std::string, std::string>>& pairs, int k) {
  GrmTrainingSet out;
  const ToolFn tool = [&world](const world::ToolCall& c) { return world.simulate_tool(c); };
  for (const auto& [qid, pid] : pairs) {
    const Query& q = world.query(qid).query;
    const Product& d = world.product(pid);
    const QuerySummary summary = ground_query(q, tool);
    const auto cands = generate_candidates(judge, summary, q, d, world.published_standards(), {}, k);
    const RelevanceLabel truth = world.oracle_label(q, d);
    const GrmContext ctx = make_context(parser, summary, q, d, world.published_standards(), {}, cands);
    std::vector<GrmFeatures> right, wrong;
    for (int l = 0; l < RelevanceLabel::kLevels; ++l) {
      if (ctx.vote_share[static_cast<std::size_t>(l)] == 0.0) continue;
      const auto f = grm_features(ctx, RelevanceLabel::of(l));
      const bool correct = l == truth.value();
      out.ce.push_back({f, correct ? 1.0 : 0.0});
      (correct ? right : wrong).push_back(f);
    }
    for (const auto& p : right) {
      for (const auto& n : wrong) out.pairs.push_back({p, n});
    }
  }
  return out;
}

}  // namespace caseloop::annotator
