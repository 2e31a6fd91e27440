#include <gtest/gtest.h>

#include <set>

#include "caseloop/core/error.hpp"
#include "caseloop/optimizer/optimizer.hpp"
#include "caseloop/world/catalog.hpp"
#include "caseloop/world/world.hpp"

using namespace caseloop;
using namespace caseloop::optimizer;

namespace {

struct Fixture {
  world::World world;
  std::shared_ptr<const model::QueryParser> parser;
  std::shared_ptr<const annotator::MockJudge> judge;
  std::shared_ptr<const annotator::Annotator> annotator;
  DiagnoseContext ctx;
};

std::unique_ptr<Fixture> make_fixture(world::WorldConfig c) {
  std::unique_ptr<Fixture> f(new Fixture{world::World::generate(c), nullptr, nullptr, nullptr, {}});
  f->parser = std::make_shared<const model::QueryParser>(f->world.lexicon(), f->world.typo_table());
  f->judge = std::make_shared<const annotator::MockJudge>(f->world, f->parser, 0.3, 3);
  annotator::ToolFn tool = [w = &f->world](const world::ToolCall& call) { return w->simulate_tool(call); };
  f->annotator = std::make_shared<const annotator::Annotator>(tool, f->judge, f->parser,
                                                              annotator::GrmParams::defaults());
  const world::World* w = &f->world;
  f->ctx = {[w](std::string_view id) -> const Product& { return w->serving_product(id); },
            [w](std::string_view id) -> const Product& { return w->product(id); }, f->parser};
  return f;
}

const Fixture& fx() {
  static const std::unique_ptr<Fixture> f = [] {
    world::WorldConfig c;
    c.num_products = 800;
    c.num_queries = 120;
    return make_fixture(c);
  }();
  return *f;
}

RelevanceLabel truth(const Query& q, const Product& d) {
  const auto& w = fx().world;
  return w.judge(w.intent_of(q), d.id, w.oracle_standard().all_predicates()).label;
}

Case make_case(std::string id, const Query& q, const Product& d, int reference, int online) {
  return Case(std::move(id), q, d, RelevanceLabel::of(reference),
              Prediction::smoothed(RelevanceLabel::of(online), Stage::kFine), Provenance::kDialectic);
}

// A brand query and an in-category product carrying another brand.
std::pair<Query, Product> brand_conflict_pair() {
  const auto& w = fx().world;
  for (const auto& q : w.queries()) {
    if (!q.intent.brand || !q.intent.category || q.intent.entity) continue;
    if (q.query.language != "en" || w.typo_table().count(q.query.text)) continue;
    for (const auto& d : w.products()) {
      if (w.defect(d.id)) continue;
      const auto c = world::compare(q.intent, d);
      if (c.category_match && c.brand_conflict && c.conflicting_attributes.empty()) return {q.query, d};
    }
  }
  throw std::runtime_error("no brand conflict pair");
}

ProbeEnv stub_env(std::function<Prediction(const Query&, const Product&)> online,
                  std::function<RelevanceLabel(const Query&, const Product&)> label) {
  const world::World* w = &fx().world;
  ProbeEnv env;
  env.online = std::move(online);
  env.label = std::move(label);
  env.search = [w, p = fx().parser](const Query& q, std::size_t n) {
    std::vector<Product> out;
    const auto intent = parsed_intent(*p, q);
    for (const auto& d : w->products()) {
      if (out.size() >= n) break;
      if (intent.category && d.in_category(*intent.category)) out.push_back(d);
    }
    return out;
  };
  env.compose = [w](const world::QueryIntent& i, std::string_view lang) { return w->compose_query_text(i, lang); };
  env.parser = fx().parser;
  env.evaluation = fx().ctx.evaluation;
  return env;
}

Prediction strong(const Query&, const Product&) { return Prediction::smoothed(RelevanceLabel::strong(), Stage::kFine); }

}  // namespace

TEST(Diagnose, FeatureDefectsRouteToFeatureSide) {
  const auto& w = fx().world;
  std::vector<Case> cases;
  std::set<std::string> defective;
  const auto& q = w.queries()[0].query;
  for (const auto& [pid, kind] : w.defects()) {
    cases.push_back(make_case("c-" + pid, q, w.product(pid), 0, 3));
    defective.insert("c-" + pid);
  }
  ASSERT_FALSE(defective.empty());
  for (std::size_t n = 0; n < 30; ++n) {
    const auto& d = w.products()[n * 7];
    if (w.defect(d.id)) continue;
    cases.push_back(make_case("c-" + d.id, q, d, 0, 2));
  }
  const auto out = diagnose(cases, w.published_standards(), {}, nullptr, fx().ctx);
  EXPECT_EQ(out.feature_side.size() + out.model_side.size(), cases.size());
  ASSERT_EQ(out.report.cases.size(), cases.size());
  for (const auto& c : out.feature_side) EXPECT_TRUE(defective.count(c.id));
  for (const auto& c : out.model_side) EXPECT_FALSE(defective.count(c.id));
  for (const auto& r : out.report.cases) {
    if (r.bucket != Bucket::kFeatureSide) continue;
    const auto kind = w.defect(r.case_id.substr(2));
    ASSERT_TRUE(kind);
    EXPECT_EQ(r.cause.tag, "feature_defect:" + std::string(world::to_string(*kind)));
  }
}

TEST(Diagnose, DefectFreeWorldHasNoFeatureSide) {
  world::WorldConfig c;
  c.num_products = 300;
  c.num_queries = 40;
  c.defect_rate = 0.0;
  const auto f = make_fixture(c);
  std::vector<Case> cases;
  for (std::size_t n = 0; n < 50; ++n) {
    cases.push_back(make_case("c" + std::to_string(n), f->world.queries()[n % 40].query, f->world.products()[n * 5],
                              0, 3));
  }
  const auto out = diagnose(cases, f->world.published_standards(), {}, nullptr, f->ctx);
  EXPECT_TRUE(out.feature_side.empty());
  EXPECT_EQ(out.model_side.size(), cases.size());
}

TEST(Diagnose, IgnoredAttributeTaggedMissingAttribute) {
  const auto& w = fx().world;
  // attribute query + in-category product with a conflicting value
  for (const auto& wq : w.queries()) {
    if (wq.intent.attributes.empty() || !wq.intent.category || wq.intent.entity || wq.intent.brand) continue;
    if (wq.query.language != "en" || w.typo_table().count(wq.query.text)) continue;
    for (const auto& d : w.products()) {
      if (w.defect(d.id)) continue;
      const auto c = world::compare(wq.intent, d);
      if (!c.category_match || c.conflicting_attributes.empty()) continue;
      const auto out = diagnose({make_case("c-1", wq.query, d, 0, 3)}, w.published_standards(), {}, nullptr, fx().ctx);
      ASSERT_EQ(out.model_side.size(), 1u);
      const auto& r = out.report.cases.at(0);
      EXPECT_EQ(r.cause.tag, "missing_attribute");
      EXPECT_GT(r.cause.confidence, 0.5);
      ASSERT_TRUE(r.pattern);
      EXPECT_EQ(r.pattern->key, c.conflicting_attributes.front());
      EXPECT_EQ(r.pattern->department, world::Taxonomy::builtin().department_of(*wq.intent.category));
      return;
    }
  }
  FAIL() << "no attribute conflict pair";
}

TEST(Diagnose, BrandConflictAndHeadWordShift) {
  const auto [q, d] = brand_conflict_pair();
  auto out = diagnose({make_case("c-1", q, d, 1, 3)}, fx().world.published_standards(), {}, nullptr, fx().ctx);
  EXPECT_EQ(out.report.cases[0].cause.tag, "missing_attribute");
  EXPECT_EQ(out.report.cases[0].pattern->key, "brand");
  const auto intent = parsed_intent(*fx().parser, q);
  for (const auto& other : fx().world.products()) {
    if (fx().world.defect(other.id) || other.in_category(*intent.category)) continue;
    out = diagnose({make_case("c-2", q, other, 0, 2)}, fx().world.published_standards(), {}, nullptr, fx().ctx);
    EXPECT_EQ(out.report.cases[0].cause.tag, "head_word_shift");
    break;
  }
}

TEST(Diagnose, NoTargetOrAgreementIsUnattributed) {
  const auto& w = fx().world;
  const auto& d = w.products()[0];
  Case no_ref("c-1", w.queries()[0].query, d, std::nullopt, Prediction::smoothed(RelevanceLabel::weak(), Stage::kFine),
              Provenance::kUserReport);
  const auto out = diagnose({no_ref, make_case("c-2", w.queries()[0].query, d, 2, 2)}, w.published_standards(), {},
                            nullptr, fx().ctx);
  for (const auto& r : out.report.cases) {
    if (r.bucket != Bucket::kModelSide) continue;
    EXPECT_EQ(r.cause.tag, "unattributed");
    EXPECT_EQ(r.cause.confidence, 0.0);
  }
  EXPECT_TRUE(out.report.patterns().empty());
}

// The corpus noise as the model would have learned it: cases carry the corrupted
// label as the online prediction and the oracle label as target.
TEST(Refine, CorrectionsOnNoisyPatternsMostlyRight) {
  const auto& w = fx().world;
  std::vector<Case> cases;
  for (const auto& s : w.initial_corpus()) {
    const auto& d = w.product(s.product_id);
    if (w.defect(d.id)) continue;
    const auto t = truth(s.query, d);
    if (t == s.label) continue;
    cases.push_back(make_case("c-" + s.id, s.query, d, t.value(), s.label.value()));
    if (cases.size() >= 60) break;
  }
  const auto diag = diagnose(cases, w.published_standards(), {}, nullptr, fx().ctx);
  ASSERT_FALSE(diag.report.patterns().empty());
  const auto delta = refine(diag.model_side, diag.report, w.initial_corpus(), w.published_standards(), {},
                            *fx().annotator, fx().ctx);
  ASSERT_GT(delta.corrections.size(), 20u);
  std::map<std::string, const Sample*> by_id;
  for (const auto& s : w.initial_corpus()) by_id[s.id] = &s;
  int right = 0;
  for (const auto& c : delta.corrections) {
    const Sample* s = by_id.at(c.sample_id);
    EXPECT_EQ(c.old_label, s->label);
    right += c.new_label == truth(s->query, w.product(s->product_id));
  }
  const double acc = static_cast<double>(right) / static_cast<double>(delta.corrections.size());
  RecordProperty("corrections", static_cast<int>(delta.corrections.size()));
  RecordProperty("accuracy", std::to_string(acc));
  EXPECT_GE(acc, 0.8);

  const Corpus d1 = apply_delta(w.initial_corpus(), delta);
  // additions that duplicate a corrected sample are dropped
  EXPECT_LE(d1.size(), w.initial_corpus().size() + delta.additions.size());
  EXPECT_GE(d1.size(), w.initial_corpus().size());
  for (std::size_t n = 0; n < w.initial_corpus().size(); ++n) EXPECT_EQ(d1[n].id, w.initial_corpus()[n].id);
  EXPECT_EQ(apply_delta(d1, delta), d1);
}

TEST(Refine, NoMatchingSamplesStillAddsCases) {
  const auto [q, d] = brand_conflict_pair();
  const auto c = make_case("c-9", q, d, 1, 3);
  const auto diag = diagnose({c}, fx().world.published_standards(), {}, nullptr, fx().ctx);
  const auto delta = refine(diag.model_side, diag.report, Corpus{}, fx().world.published_standards(), {},
                            *fx().annotator, fx().ctx);
  EXPECT_TRUE(delta.corrections.empty());
  ASSERT_EQ(delta.additions.size(), 1u);
  EXPECT_EQ(delta.additions[0].label, RelevanceLabel::weak());
  EXPECT_EQ(delta.additions[0].provenance, "case:c-9");
}

TEST(Refine, AnnotatorUnavailableAbortsAugmentation) {
  class Down : public annotator::JudgePolicy {
   public:
    annotator::Judgment judge(const annotator::JudgeRequest&) const override {
      throw Error(ErrorCode::kAnnotatorUnavailable, "down");
    }
    std::string name() const override { return "down"; }
  };
  annotator::ToolFn tool = [w = &fx().world](const world::ToolCall& call) { return w->simulate_tool(call); };
  annotator::Annotator down(tool, std::make_shared<Down>(), fx().parser, annotator::GrmParams::defaults());
  const auto [q, d] = brand_conflict_pair();
  const auto c = make_case("c-9", q, d, 1, 3);
  const auto diag = diagnose({c}, fx().world.published_standards(), {}, nullptr, fx().ctx);
  const auto delta = refine(diag.model_side, diag.report, fx().world.initial_corpus(),
                            fx().world.published_standards(), {}, down, fx().ctx, {make_case("p-1", q, d, 1, 3)});
  EXPECT_TRUE(delta.augmentation_aborted);
  EXPECT_TRUE(delta.corrections.empty());
  ASSERT_EQ(delta.additions.size(), 1u);
  EXPECT_EQ(delta.additions[0].provenance, "case:c-9");
}

TEST(Refine, ApplyRejectsUnknownSample) {
  DatasetDelta delta;
  delta.corrections.push_back({"nope", RelevanceLabel::weak(), RelevanceLabel::strong(), "x"});
  EXPECT_THROW(apply_delta(Corpus{}, delta), Error);
}

TEST(Probe, UniversalIssueEscalatesToMarketLayer) {
  const auto [q, d] = brand_conflict_pair();
  const auto c = make_case("c-1", q, d, truth(q, d).value(), 3);
  const auto diag = diagnose({c}, fx().world.published_standards(), {}, nullptr, fx().ctx);
  const auto env = stub_env(strong, truth);
  const auto r = probe(diag.report, diag.model_side, fx().world.published_standards(), {}, nullptr, env);
  ASSERT_EQ(r.concept_results.size(), 1u);
  const auto& cr = r.concept_results[0];
  EXPECT_GE(cr.perturbations.size(), 2u);
  EXPECT_EQ(cr.verdict, ConceptVerdict::kUniversal);
  const bool has_es = std::any_of(r.new_cases.begin(), r.new_cases.end(),
                                  [](const Case& k) { return k.query.language == "es"; });
  EXPECT_TRUE(has_es);
  for (const auto& k : r.new_cases) {
    EXPECT_EQ(k.provenance, Provenance::kProbe);
    ASSERT_TRUE(k.reference);
    EXPECT_NE(*k.reference, k.online_prediction.label);
  }
}

TEST(Probe, ErrorVanishingUnderPerturbationIsIndividual) {
  const auto [q, d] = brand_conflict_pair();
  const auto c = make_case("c-1", q, d, truth(q, d).value(), 3);
  const auto diag = diagnose({c}, fx().world.published_standards(), {}, nullptr, fx().ctx);
  // online model only fails on the original text
  const std::string text = q.text;
  auto online = [text](const Query& pq, const Product& pd) {
    return pq.text == text ? Prediction::smoothed(RelevanceLabel::strong(), Stage::kFine)
                           : Prediction::smoothed(truth(pq, pd), Stage::kFine);
  };
  const auto r = probe(diag.report, diag.model_side, fx().world.published_standards(), {}, nullptr,
                       stub_env(online, truth));
  EXPECT_EQ(r.concept_results.at(0).verdict, ConceptVerdict::kIndividual);
  EXPECT_EQ(r.concept_results.at(0).persisted, 0);
  for (const auto& k : r.new_cases) EXPECT_NE(k.query.text, text);
}

TEST(Probe, AllStrongResultsRejectHypothesis) {
  const auto [q, d] = brand_conflict_pair();
  const auto diag =
      diagnose({make_case("c-1", q, d, 1, 3)}, fx().world.published_standards(), {}, nullptr, fx().ctx);
  const auto r = probe(diag.report, diag.model_side, fx().world.published_standards(), {}, nullptr,
                       stub_env(strong, [](const Query&, const Product&) { return RelevanceLabel::strong(); }));
  ASSERT_EQ(r.hypotheses.size(), 1u);
  EXPECT_EQ(r.hypotheses[0].verdict, Verdict::kRejected);
  EXPECT_EQ(r.hypotheses[0].round, 1);
  EXPECT_TRUE(r.new_cases.empty());
  EXPECT_TRUE(r.memory_candidates.empty());
}

TEST(Probe, AmbiguousRoundsStopAtThree) {
  const auto [q, d] = brand_conflict_pair();
  const auto diag =
      diagnose({make_case("c-1", q, d, 1, 3)}, fx().world.published_standards(), {}, nullptr, fx().ctx);
  // one failing probe per round keeps the hypothesis pending
  auto label = [](const Query& pq, const Product&) {
    return pq.id.size() > 2 && pq.id.substr(pq.id.size() - 2) == "-0" ? RelevanceLabel::irrelevant()
                                                                        : RelevanceLabel::strong();
  };
  ProbeConfig cfg;
  cfg.probes_per_round = 9;
  cfg.max_rounds = 7;
  const auto r = probe(diag.report, diag.model_side, fx().world.published_standards(), {}, nullptr,
                       stub_env(strong, label), cfg);
  ASSERT_EQ(r.hypotheses.size(), 3u);
  for (int n = 0; n < 3; ++n) {
    EXPECT_EQ(r.hypotheses[static_cast<std::size_t>(n)].round, n + 1);
    EXPECT_EQ(r.hypotheses[static_cast<std::size_t>(n)].verdict, Verdict::kPending);
    EXPECT_EQ(r.hypotheses[static_cast<std::size_t>(n)].probes.size(), 5u);
  }
}

TEST(Probe, ReplicatedFailuresJoinNewCases) {
  const auto [q, d] = brand_conflict_pair();
  const auto diag =
      diagnose({make_case("c-1", q, d, 1, 3)}, fx().world.published_standards(), {}, nullptr, fx().ctx);
  const auto r = probe(diag.report, diag.model_side, fx().world.published_standards(), {}, nullptr,
                       stub_env(strong, [](const Query&, const Product&) { return RelevanceLabel::weak(); }));
  ASSERT_FALSE(r.hypotheses.empty());
  EXPECT_EQ(r.hypotheses.back().verdict, Verdict::kReplicated);
  EXPECT_GE(r.hypotheses.back().probes.size(), 3u);
  EXPECT_FALSE(r.new_cases.empty());
  EXPECT_EQ(r.memory_candidates.size(), 1u);
}

TEST(Probe, BudgetExhaustionLeavesPending) {
  const auto [q, d] = brand_conflict_pair();
  const auto diag =
      diagnose({make_case("c-1", q, d, 1, 3)}, fx().world.published_standards(), {}, nullptr, fx().ctx);
  ProbeConfig cfg;
  cfg.label_budget = 4;
  const auto r = probe(diag.report, diag.model_side, fx().world.published_standards(), {}, nullptr,
                       stub_env(strong, truth), cfg);
  EXPECT_TRUE(r.budget_exhausted);
  ASSERT_FALSE(r.hypotheses.empty());
  EXPECT_EQ(r.hypotheses.back().verdict, Verdict::kPending);
}

TEST(Probe, NeedsModelSideTag) {
  DiagnosisReport empty;
  try {
    probe(empty, {}, fx().world.published_standards(), {}, nullptr, stub_env(strong, truth));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidArgument);
  }
}
