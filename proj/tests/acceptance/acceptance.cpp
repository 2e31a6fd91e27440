// Acceptance suite: one PASS/FAIL line per criterion.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"

#include "caseloop/annotator/annotator.hpp"
#include "caseloop/core/error.hpp"
#include "caseloop/core/rng.hpp"
#include "caseloop/deep_search/deep_search.hpp"
#include "caseloop/dialectic/dialectic.hpp"
#include "caseloop/model/index.hpp"
#include "caseloop/model/model.hpp"
#include "caseloop/pipeline/pipeline.hpp"
#include "caseloop/rules/rules.hpp"
#include "caseloop/serving/serving.hpp"
#include "caseloop/serving/soundness.hpp"
#include "caseloop/world/catalog.hpp"
#include "caseloop/world/world.hpp"

using namespace caseloop;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string sci(double v) {
  std::ostringstream o;
  o.setf(std::ios::scientific);
  o.precision(2);
  o << v;
  return o.str();
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(digits);
  o << v;
  return o.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    out[fs::relative(e.path(), dir).string()] = s.str();
  }
  return out;
}

std::vector<Json> read_jsonl(const fs::path& path) {
  std::vector<Json> out;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(Json::parse(line));
  }
  return out;
}

// ---------------------------------------------------------------------------

constexpr int kCycles = 5;

std::vector<pipeline::CycleReport> run_closed_loop(const fs::path& dir, double* secs) {
  fs::remove_all(dir);
  fs::remove_all(fs::path(dir.string() + ".snapshot"));
  const auto t0 = std::chrono::steady_clock::now();
  auto p = pipeline::Pipeline::init(dir, pipeline::PipelineConfig{});
  for (int n = 0; n < kCycles; ++n) p->run_cycle();
  *secs = seconds_since(t0);
  return p->reports();
}

Outcome closed_loop(const std::vector<pipeline::CycleReport>& r, double secs) {
  const double first = r.front().bad_case_rate_before;
  const double last = r.back().bad_case_rate_after;
  std::string trail;
  for (const auto& c : r) trail += " " + fmt(c.bad_case_rate_after, 3);
  return {last <= 0.5 * first && secs < 300.0,
          "cycle-1 " + fmt(first, 3) + " ->" + trail + " in " + fmt(secs, 1) + "s"};
}

// ---------------------------------------------------------------------------

bool in_pattern(const world::World& w, const world::NoisePattern& p, const world::QueryIntent& intent,
                const Product& d) {
  if (!intent.category || w.taxonomy().department_of(*intent.category) != p.scope) return false;
  if (p.kind == "sibling_category") return !d.in_category(*intent.category) && d.in_category(p.scope);
  const auto v = w.judge(intent, d.id, w.oracle_standard().all_predicates());
  if (p.kind == "brand_conflict") return v.predicate == world::predicate::kBrandConflict;
  const std::string prefix = "attribute_conflict:";
  if (p.kind.rfind(prefix, 0) != 0 || v.predicate != world::predicate::kAttributeConflict) return false;
  const auto c = world::compare(intent, d);
  const std::string key = p.kind.substr(prefix.size());
  return std::find(c.conflicting_attributes.begin(), c.conflicting_attributes.end(), key) !=
         c.conflicting_attributes.end();
}

Outcome injected_pattern(const fs::path& dir) {
  pipeline::PipelineConfig c;
  c.world.noise_patterns = 1;
  fs::remove_all(dir);
  fs::remove_all(fs::path(dir.string() + ".snapshot"));
  auto p = pipeline::Pipeline::init(dir, c);
  const auto& w = p->world();
  if (w.noise_patterns().size() != 1) return {false, "world injected " + std::to_string(w.noise_patterns().size())};
  const auto& pat = w.noise_patterns()[0];
  const auto preds = w.oracle_standard().all_predicates();
  using Pair = std::pair<std::string, std::string>;
  std::vector<Pair> slice, rest;
  for (const auto& q : w.queries()) {
    for (const auto& d : w.products()) {
      if (in_pattern(w, pat, q.intent, d)) slice.emplace_back(q.query.id, d.id);
    }
  }
  for (const auto& h : w.heldout_pairs()) {
    if (!in_pattern(w, pat, w.query(h.query_id).intent, w.product(h.product_id))) {
      rest.emplace_back(h.query_id, h.product_id);
    }
  }
  if (slice.empty() || rest.empty()) return {false, "empty slice"};
  const auto rate = [&](const std::vector<Pair>& v) {
    std::size_t bad = 0;
    for (const auto& [q, d] : v) {
      bad += p->score(q, d).prediction.label != w.judge(w.query(q).intent, d, preds).label;
    }
    return static_cast<double>(bad) / static_cast<double>(v.size());
  };
  const double s0 = rate(slice), r0 = rate(rest);
  const auto rep = p->run_cycle();
  const double s1 = rate(slice), r1 = rate(rest);
  const bool ok = s0 > 0.0 && s1 <= 0.5 * s0 && r1 - r0 < 0.02;
  return {ok, pat.scope + "/" + pat.kind + " slice " + fmt(s0) + " -> " + fmt(s1) + " (n=" +
                  std::to_string(slice.size()) + "), pattern-free " + fmt(r0) + " -> " + fmt(r1) + ", " +
                  std::to_string(rep.corrections) + " corrections, " + rep.deployed_version};
}

// ---------------------------------------------------------------------------

const world::World& grad_world() {
  static const world::World w = [] {
    world::WorldConfig c;
    c.num_products = 300;
    c.num_queries = 40;
    c.heldout_pairs = 100;
    c.guard_pairs = 50;
    return world::World::generate(c);
  }();
  return w;
}

struct AnnotatorEnv {
  world::World world;
  std::shared_ptr<const model::QueryParser> parser;
};

const AnnotatorEnv& annotator_env() {
  static const std::unique_ptr<AnnotatorEnv> e = [] {
    world::WorldConfig c;
    c.num_products = 800;
    c.num_queries = 120;
    std::unique_ptr<AnnotatorEnv> out(new AnnotatorEnv{world::World::generate(c), nullptr});
    out->parser = std::make_shared<const model::QueryParser>(out->world.lexicon(), out->world.typo_table());
    return out;
  }();
  return *e;
}

std::vector<std::pair<std::string, std::string>> grm_pairs(std::uint64_t seed, int n) {
  const auto& w = annotator_env().world;
  Rng rng = Rng::derive(seed, "pairs");
  std::vector<std::pair<std::string, std::string>> out;
  for (int i = 0; i < n; ++i) {
    const auto& q = w.queries()[rng.uniform_int(w.queries().size())];
    std::string pid = w.products()[rng.uniform_int(w.products().size())].id;
    if (i % 2 == 0 && q.intent.category) {
      std::vector<std::string> same;
      for (const auto& d : w.products()) {
        if (d.in_category(*q.intent.category)) same.push_back(d.id);
      }
      if (!same.empty()) pid = same[rng.uniform_int(same.size())];
    }
    out.emplace_back(q.query.id, pid);
  }
  return out;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

Outcome gradient_checks() {
  using namespace model;
  const auto& w = grad_world();
  QueryParser parser(w.lexicon(), w.typo_table());
  auto lookup = [&](std::string_view id) -> const Product& { return w.serving_product(id); };
  const auto examples = featurize(w.initial_corpus(), lookup, parser);
  const std::vector<TaskWeights> weightings{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 1}};
  const double h = 1e-6;
  double worst_mt = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng = Rng::derive(seed, "gradcheck");
    std::vector<Example> batch;
    const std::size_t g0 = rng.uniform_int(30);
    for (const auto& e : examples) {
      if (e.group >= g0 && e.group < g0 + 4) batch.push_back(e);
    }
    Checkpoint ck = Checkpoint::initialize(ModelDims{}, seed);
    for (const auto& tw : weightings) {
      TrainConfig cfg;
      cfg.weights = tw;
      Gradients g;
      g.reset(ck);
      multitask_loss(ck, batch, cfg, &g);
      if (g.touched_rows.empty()) return {false, "no embedding rows touched"};
      for (int k = 0; k < 10; ++k) {
        const auto b = static_cast<std::size_t>(rng.uniform_int(kNumBlocks));
        std::size_t i;
        if (b == kEmbed) {
          const auto row = g.touched_rows[rng.uniform_int(g.touched_rows.size())];
          i = row * ck.dims.embed + rng.uniform_int(ck.dims.embed);
        } else {
          i = rng.uniform_int(ck.blocks[b].values.size());
        }
        const double orig = ck.blocks[b].values[i];
        ck.blocks[b].values[i] = orig + h;
        const double up = multitask_loss(ck, batch, cfg, nullptr).total;
        ck.blocks[b].values[i] = orig - h;
        const double down = multitask_loss(ck, batch, cfg, nullptr).total;
        ck.blocks[b].values[i] = orig;
        worst_mt = std::max(worst_mt, rel_err(g.blocks[b][i], (up - down) / (2 * h)));
      }
    }
  }

  const auto& env = annotator_env();
  annotator::MockJudge judge(env.world, env.parser, 0.3, 11);
  const auto set = annotator::build_grm_training_set(env.world, judge, *env.parser, grm_pairs(4, 80), 5);
  double worst_grm = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng = Rng::derive(seed, "grm-gradcheck");
    annotator::GrmParams p;
    for (auto& v : p.weights) v = rng.normal();
    p.lambda = 0.5 + rng.uniform01();
    p.margin = rng.uniform01();
    annotator::GrmFeatures g{};
    annotator::grm_loss(p, set.pairs, set.ce, &g);
    for (int k = 0; k < 10; ++k) {
      const auto i = static_cast<std::size_t>(rng.uniform_int(annotator::kGrmFeatures));
      auto up = p, down = p;
      up.weights[i] += h;
      down.weights[i] -= h;
      const double numeric = (annotator::grm_loss(up, set.pairs, set.ce, nullptr).total -
                              annotator::grm_loss(down, set.pairs, set.ce, nullptr).total) /
                             (2 * h);
      worst_grm = std::max(worst_grm, rel_err(g[i], numeric));
    }
  }
  return {worst_mt <= 1e-4 && worst_grm <= 1e-4,
          "max rel err multitask " + sci(worst_mt) + ", grm " + sci(worst_grm)};
}

Outcome analytic_loss() {
  const double at_margin = annotator::pairwise_loss(1.7, 1.2, 0.5);
  const double zero = annotator::pairwise_loss(0.0, 0.0, 0.0);
  const auto& env = annotator_env();
  annotator::MockJudge judge(env.world, env.parser, 0.3, 11);
  const auto set = annotator::build_grm_training_set(env.world, judge, *env.parser, grm_pairs(3, 100), 5);
  if (set.pairs.empty()) return {false, "no preference pairs"};
  auto p = annotator::GrmParams::defaults();
  p.lambda = 0.0;
  annotator::GrmFeatures with_pairs{}, without{};
  const auto a = annotator::grm_loss(p, set.pairs, set.ce, &with_pairs);
  const auto b = annotator::grm_loss(p, {}, set.ce, &without);
  const bool isolated = a.total == b.total && with_pairs == without;
  const double err = std::max(std::abs(at_margin - std::log(2.0)), std::abs(zero - std::log(2.0)));
  return {err <= 1e-12 && isolated,
          "|loss - ln2| " + sci(err) + ", lambda=0 " + (isolated ? "identical" : "differs")};
}

// ---------------------------------------------------------------------------

Outcome dialectic_properties() {
  using namespace dialectic;
  const auto& env = annotator_env();
  const auto& w = env.world;
  auto judge = std::make_shared<const annotator::MockJudge>(w, env.parser, 0.3, 3);
  annotator::ToolFn tool = [&w](const world::ToolCall& call) { return w.simulate_tool(call); };
  auto ann = std::make_shared<const annotator::Annotator>(tool, judge, env.parser, annotator::GrmParams::defaults());
  MockUser user(w);
  MockAnnotatorAgent agent(ann, judge);
  StandardsDoc other = w.published_standards();
  other.version += 7;
  other.clauses.erase(other.clauses.begin() + 1, other.clauses.begin() + 3);
  Rng rng = Rng::derive(2024, "dialectic-acceptance");
  std::size_t failures = 0;
  std::map<RouteKind, int> seen;
  for (int n = 0; n < 1000; ++n) {
    const auto& q = w.queries()[rng.uniform_int(w.queries().size())].query;
    const auto& d = w.products()[rng.uniform_int(w.products().size())];
    const int max_rounds = 1 + static_cast<int>(rng.uniform_int(5));
    const auto online = Prediction::smoothed(RelevanceLabel::of(static_cast<int>(rng.uniform_int(4))), Stage::kFine);
    const auto t = negotiate("a", q, d, w.published_standards(), {}, {}, user, agent, max_rounds);
    bool ok = t.round_count >= 1 && t.round_count <= max_rounds && t.round_count <= 5 &&
              t.turns.size() == static_cast<std::size_t>(2 * t.round_count);
    for (std::size_t i = 0; ok && i < t.turns.size(); ++i) {
      ok = t.turns[i].speaker == (i % 2 == 0 ? Speaker::kUser : Speaker::kAnnotator);
    }
    if (t.outcome.kind == OutcomeKind::kNoConsensus) ok = ok && t.round_count == max_rounds;
    // exactly one route holds and it is the one taken
    const bool consensus = t.outcome.kind == OutcomeKind::kConsensus;
    const bool justified = consensus && t.outcome.justified_by_s;
    const bool se = !justified;
    const bool me = justified && *t.outcome.label != online.label;
    const bool ex = justified && *t.outcome.label == online.label;
    const auto r = route_outcome(t.outcome, online);
    ok = ok && (se + me + ex) == 1;
    ok = ok && r.kind == (se ? RouteKind::kStandardEvolution : me ? RouteKind::kModelError : RouteKind::kExempt);
    ++seen[r.kind];
    // the user side sees no S
    const auto t2 = negotiate("a", q, d, other, {}, {}, user, agent, max_rounds);
    ok = ok && !t.turns.empty() && !t2.turns.empty() && t.turns[0] == t2.turns[0];
    const Argument probe{RelevanceLabel::of(n % 4), "probe", "", {}, true};
    ok = ok && user.respond(q, d, t.turns[0].argument, probe, {}, 1) ==
                   user.respond(q, d, t2.turns[0].argument, probe, {}, 1);
    failures += !ok;
  }
  return {failures == 0, std::to_string(1000 - failures) + "/1000 pass; routes model_error " +
                             std::to_string(seen[RouteKind::kModelError]) + " exempt " +
                             std::to_string(seen[RouteKind::kExempt]) + " standard_evolution " +
                             std::to_string(seen[RouteKind::kStandardEvolution])};
}

// ---------------------------------------------------------------------------

Outcome instruction_robustness() {
  using namespace rules;
  const auto& w = annotator_env().world;
  const auto probe = generate_contrastive_set(w, {200, 200, 1000}, 5);
  const auto interp = evaluate_instruction_following(interpreter_score, probe);
  const bool exact = interp.acc_total == 1.0 && *interp.acc_up == 1.0 && *interp.acc_down == 1.0 &&
                     *interp.acc_neutral == 1.0;
  const auto train = generate_contrastive_set(w, {200, 200, 1000}, 101);
  const auto eval = generate_contrastive_set(w, {200, 200, 1000}, 202);
  std::vector<InstructionItem> positives;
  for (const auto& it : train) {
    if (it.scenario != Scenario::kNeutral) positives.push_back(it);
  }
  const auto pos_model = RuleClassifier::train(positives);
  const auto con_model = RuleClassifier::train(train);
  const auto pos = evaluate_instruction_following([&](const auto& it) { return pos_model.predict(it); }, eval);
  const auto con = evaluate_instruction_following([&](const auto& it) { return con_model.predict(it); }, eval);
  const double gain = *con.acc_neutral - *pos.acc_neutral;
  return {exact && gain >= 0.3 && *con.acc_up >= 0.85 && *con.acc_down >= 0.85,
          std::string("interpreter ") + (exact ? "1.0 on all" : "not exact") + "; neutral " +
              fmt(*pos.acc_neutral) + " -> " + fmt(*con.acc_neutral) + ", up " + fmt(*con.acc_up) + ", down " +
              fmt(*con.acc_down)};
}

Outcome cache_soundness() {
  world::WorldConfig c;
  c.num_products = 500;
  const auto w = world::World::generate(c);
  model::QueryParser p(w.lexicon(), w.typo_table());
  const auto r = serving::check_zero_soundness(w, p);
  return {r.inferred_zeros > 0 && r.false_zeros == 0,
          std::to_string(r.inferred_zeros) + " inferred zeros over " + std::to_string(r.lookups) + " lookups, " +
              std::to_string(r.false_zeros) + " false"};
}

// ---------------------------------------------------------------------------

struct ServingEnv {
  world::World world;
  std::shared_ptr<const model::QueryParser> parser;
  std::shared_ptr<const model::Checkpoint> checkpoint;
  std::shared_ptr<const model::ProductIndex> index;
  model::ProductLookup lookup;
  std::vector<double> weights;

  std::shared_ptr<const model::RelevanceModel> model() const {
    return std::make_shared<const model::RelevanceModel>(checkpoint, parser);
  }
  std::unique_ptr<serving::ServingEngine> engine(serving::ServingConfig cfg) const {
    auto e = std::make_unique<serving::ServingEngine>(model(), lookup, 1, cfg);
    e->set_index(index);
    return e;
  }
};

const ServingEnv& serving_env() {
  static const std::unique_ptr<ServingEnv> e = [] {
    std::unique_ptr<ServingEnv> out(new ServingEnv{world::World::generate(world::WorldConfig{}), {}, {}, {}, {}, {}});
    const world::World* w = &out->world;
    out->parser = std::make_shared<const model::QueryParser>(w->lexicon(), w->typo_table());
    out->lookup = [w](std::string_view id) -> const Product& { return w->serving_product(id); };
    out->checkpoint = std::make_shared<const model::Checkpoint>(
        model::train_multitask(w->initial_corpus(), out->lookup, *out->parser, model::TrainConfig{}, "ck-0"));
    std::vector<Product> products;
    for (const auto& d : w->products()) products.push_back(w->serving_product(d.id));
    out->index = std::make_shared<const model::ProductIndex>(model::ProductIndex::build(*out->model(), products));
    for (const auto& q : w->queries()) out->weights.push_back(q.weight);
    return out;
  }();
  return *e;
}

Outcome routing_economics() {
  const auto& env = serving_env();
  const auto& w = env.world;
  serving::ServingConfig cfg;
  cfg.tau = 0.95;
  cfg.min_support = 20;
  cfg.retrieval_k = 100;
  cfg.fine_k = 20;
  cfg.use_cache = false;
  auto routed = env.engine(cfg);
  auto always = env.engine(cfg);
  constexpr int kWindow = 1000;
  Rng r1 = Rng::derive(3, "window", 1);
  for (int n = 0; n < kWindow; ++n) routed->search(w.queries()[r1.weighted_index(env.weights)].query, {});
  routed->set_stats(serving::consistency_table(routed->logs(), cfg.min_support));
  const auto before = routed->metrics();
  Rng r2 = Rng::derive(3, "window", 2);
  std::size_t items = 0, differ = 0;
  for (int n = 0; n < kWindow; ++n) {
    const auto& q = w.queries()[r2.weighted_index(env.weights)].query;
    const auto a = routed->search(q, {});
    const auto b = always->search(q, {});
    if (a.items.size() != b.items.size()) return {false, "pool size differs for " + q.id};
    for (std::size_t i = 0; i < a.items.size(); ++i) {
      if (a.items[i].product_id != b.items[i].product_id) return {false, "pool order differs for " + q.id};
      ++items;
      differ += a.items[i].prediction.label != b.items[i].prediction.label;
    }
  }
  const double routed_calls = static_cast<double>(routed->metrics().fine_calls - before.fine_calls);
  const double full_calls = static_cast<double>(always->metrics().fine_calls);
  const double drop = 1.0 - routed_calls / full_calls;
  const double disagree = static_cast<double>(differ) / static_cast<double>(items);
  return {drop >= 0.15 && disagree <= 0.01, "fine calls " + fmt(routed_calls, 0) + " vs " + fmt(full_calls, 0) +
                                                " (drop " + fmt(drop) + "), label disagreement " + fmt(disagree)};
}

Outcome deep_search_checks() {
  const auto& env = serving_env();
  const auto& w = env.world;
  const search::ToolFn tools = [&w](const world::ToolCall& call) { return w.simulate_tool(call); };
  const search::ScriptedPlanner planner(env.parser);
  constexpr int kBudget = 6;
  serving::ServingConfig cfg;
  cfg.use_cache = false;
  auto engine = env.engine(cfg);

  // Lorax: no lexical overlap, found through web then image search
  const Query& lorax = w.query("q-0001").query;
  const auto out = search::deep_search(lorax, planner, tools, kBudget, 0.9, 5);
  const auto preds = w.oracle_standard().all_predicates();
  bool lorax_ok = !out.state.evidence.empty() && out.state.evidence[0].result &&
                  out.state.evidence[0].result->hits.empty() && !out.record.candidates.empty();
  std::set<std::string> strong;
  for (const auto& c : out.record.candidates) {
    lorax_ok = lorax_ok && search::path_string(c.meta) == "web_search>image_search";
    bool logged = false;
    for (const auto& e : out.state.evidence) logged = logged || e.path == c.meta;
    lorax_ok = lorax_ok && logged;
    if (w.judge(w.intent_of(lorax), c.product_id, preds).label == RelevanceLabel::of(3)) strong.insert(c.product_id);
  }
  std::vector<std::string> extra;
  for (const auto& c : out.record.candidates) extra.push_back(c.product_id);
  const auto served = engine->search(lorax, {}, extra);
  std::size_t surfaced = 0;
  for (const auto& it : served.items) surfaced += strong.count(it.product_id);
  lorax_ok = lorax_ok && !strong.empty() && surfaced == strong.size();

  // every query: within budget, base pool kept under augmentation
  std::size_t over_budget = 0, not_subset = 0;
  for (const auto& wq : w.queries()) {
    const auto o = search::deep_search(wq.query, planner, tools, kBudget, 0.9, 5);
    over_budget += o.state.step > kBudget || static_cast<int>(o.state.evidence.size()) > kBudget;
    const auto base = engine->search(wq.query, {});
    std::vector<std::string> base_ids, ids;
    for (const auto& it : base.items) base_ids.push_back(it.product_id);
    for (const auto& c : o.record.candidates) ids.push_back(c.product_id);
    const auto aug = engine->search(wq.query, {}, ids);
    std::set<std::string> aug_ids;
    for (const auto& it : aug.items) aug_ids.insert(it.product_id);
    const auto pool = search::augment_pool(base_ids, o.record);
    const std::set<std::string> pool_ids(pool.begin(), pool.end());
    for (const auto& id : base_ids) {
      if (!aug_ids.count(id) || !pool_ids.count(id)) {
        ++not_subset;
        break;
      }
    }
  }
  return {lorax_ok && over_budget == 0 && not_subset == 0,
          "lorax " + std::string(lorax_ok ? "recovered" : "missed") + " (" + std::to_string(strong.size()) +
              " strong via web_search>image_search), " + std::to_string(w.queries().size()) + " queries, " +
              std::to_string(over_budget) + " over budget, " + std::to_string(not_subset) + " base-pool violations"};
}

// ---------------------------------------------------------------------------

std::string run_capture(const std::string& cmd) {
  std::string out;
  FILE* f = popen(cmd.c_str(), "r");
  if (!f) throw std::runtime_error("cannot run " + cmd);
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, f)) > 0) out.append(buf, n);
  if (pclose(f) != 0) throw std::runtime_error("recount script failed");
  return out;
}

Outcome recounts(const fs::path& dir, const std::string& script) {
  const Json got = Json::parse(run_capture("python3 '" + script + "' '" + dir.string() + "'"));
  const auto cycles = read_jsonl(dir / "cycles.jsonl");
  if (got["cycles"].size() != cycles.size()) return {false, "cycle count differs"};
  std::vector<std::string> bad;
  for (std::size_t t = 0; t < cycles.size(); ++t) {
    const Json& a = cycles[t];
    const Json& b = got["cycles"][t];
    for (const char* k : {"bad_case_rate_before", "bad_case_rate_after", "crawled", "flagged", "discovered",
                          "discovery_rate", "resolved", "resolution_rate"}) {
      if (a.at(k) != b.at(k)) bad.push_back("cycle " + std::to_string(t + 1) + " " + k);
    }
    for (const char* k : {"precision", "recall"}) {
      if (a.at("mining").at(k) != b.at("mining").at(k)) bad.push_back("cycle " + std::to_string(t + 1) + " " + k);
    }
  }
  std::map<std::string, Json> stored;
  for (const auto& r : read_jsonl(dir / "stats.jsonl")) stored[r.at("query_id")] = r;
  const Json& counted = got["stats"];
  if (stored.size() != counted.size()) bad.push_back("c(q) table size");
  for (const auto& [q, r] : stored) {
    if (!counted.contains(q)) {
      bad.push_back("c(" + q + ") missing");
      continue;
    }
    for (const char* k : {"support", "agreement", "c"}) {
      if (r.at(k) != counted[q].at(k)) bad.push_back("c(" + q + ") " + k);
    }
  }
  std::string detail = std::to_string(cycles.size()) + " cycles, " + std::to_string(stored.size()) + " c(q) rows";
  if (!bad.empty()) detail += "; mismatch: " + bad.front() + (bad.size() > 1 ? " (+more)" : "");
  return {bad.empty(), detail};
}

Outcome determinism(const fs::path& a, const fs::path& b) {
  double secs = 0.0;
  run_closed_loop(b, &secs);
  const auto sa = snapshot(a);
  const auto sb = snapshot(b);
  std::size_t differ = 0;
  std::string first;
  for (const auto& [name, bytes] : sa) {
    const auto it = sb.find(name);
    if (it == sb.end() || it->second != bytes) {
      if (first.empty()) first = name;
      ++differ;
    }
  }
  differ += sb.size() > sa.size() ? sb.size() - sa.size() : 0;
  return {differ == 0 && !sa.empty(), std::to_string(sa.size()) + " files, " + std::to_string(differ) + " differ" +
                                          (first.empty() ? "" : " (first " + first + ")")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("caseloop acceptance");
  std::string state = "acceptance_state";
  std::string script = "tests/recount.py";
  app.add_option("--state", state, "scratch directory for persisted runs");
  app.add_option("--recount", script, "independent counting script");
  CLI11_PARSE(app, argc, argv);
  const fs::path root(state);
  fs::create_directories(root);

  int failed = 0;
  const auto report = [&](const std::string& name, const std::function<Outcome()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << " [" << fmt(seconds_since(t0), 1)
              << "s]" << std::endl;
  };

  std::vector<pipeline::CycleReport> loop;
  double loop_secs = 0.0;
  report("closed-loop repair", [&] {
    loop = run_closed_loop(root / "closed_loop", &loop_secs);
    return closed_loop(loop, loop_secs);
  });
  report("injected-pattern repair", [&] { return injected_pattern(root / "pattern"); });
  report("gradient checks", gradient_checks);
  report("analytic loss values", analytic_loss);
  report("dialectic protocol", dialectic_properties);
  report("instruction robustness", instruction_robustness);
  report("cache soundness", cache_soundness);
  report("routing economics", routing_economics);
  report("deep search", deep_search_checks);
  report("recounts", [&] { return recounts(root / "closed_loop", script); });
  report("determinism", [&] { return determinism(root / "closed_loop", root / "closed_loop_rerun"); });
  std::cout << (failed ? std::to_string(failed) + " failed" : "all passed") << std::endl;
  return failed ? 1 : 0;
}
