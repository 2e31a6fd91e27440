#include <gtest/gtest.h>

#include <filesystem>
#include <set>
#include <thread>

#include "caseloop/core/error.hpp"
#include "caseloop/serving/serving.hpp"
#include "caseloop/serving/soundness.hpp"
#include "caseloop/world/world.hpp"

using namespace caseloop;
using namespace caseloop::serving;

namespace {

LogEntry log(std::string q, std::string d, int c, int f) {
  return {std::move(q), std::move(d), RelevanceLabel::of(c), RelevanceLabel::of(f), 0};
}

struct Env {
  world::World world;
  std::shared_ptr<const model::QueryParser> parser;
  std::shared_ptr<const model::RelevanceModel> model;
  model::ProductLookup lookup;
};

const Env& env() {
  static const std::unique_ptr<Env> e = [] {
    world::WorldConfig c;
    c.num_products = 400;
    c.num_queries = 80;
    auto out = std::unique_ptr<Env>(new Env{world::World::generate(c), nullptr, nullptr, {}});
    out->parser = std::make_shared<const model::QueryParser>(out->world.lexicon(), out->world.typo_table());
    const world::World* w = &out->world;
    out->lookup = [w](std::string_view id) -> const Product& { return w->serving_product(id); };
    model::TrainConfig tc;
    tc.epochs = 4;
    auto ck = std::make_shared<const model::Checkpoint>(
        model::train_multitask(w->initial_corpus(), out->lookup, *out->parser, tc, "t"));
    out->model = std::make_shared<const model::RelevanceModel>(ck, out->parser);
    return out;
  }();
  return *e;
}

QueryStructure structure(std::string cat, std::optional<std::string> brand = std::nullopt, AttributeMap attrs = {}) {
  QueryStructure s;
  s.category_intent = {std::move(cat)};
  s.brand = std::move(brand);
  s.attributes = std::move(attrs);
  return s;
}

std::vector<std::string> first_products(std::size_t n) {
  std::vector<std::string> out;
  for (const auto& d : env().world.products()) {
    if (out.size() == n) break;
    out.push_back(d.id);
  }
  return out;
}

}  // namespace

TEST(Consistency, Counts) {
  std::vector<LogEntry> logs{log("q", "a", 1, 1), log("q", "b", 2, 2), log("q", "c", 0, 0), log("q", "d", 3, 3)};
  auto all = consistency_score("q", logs, 4);
  ASSERT_TRUE(all);
  EXPECT_DOUBLE_EQ(all->c, 1.0);
  logs[3].fine_bin = RelevanceLabel::of(2);
  auto three = consistency_score("q", logs, 4);
  EXPECT_DOUBLE_EQ(three->c, 0.75);
  EXPECT_EQ(three->support, 4u);
  EXPECT_EQ(three->agreement, 3u);
  EXPECT_FALSE(consistency_score("q", {log("q", "a", 1, 1), log("q", "b", 1, 1)}, 20));
  EXPECT_FALSE(consistency_score("other", logs, 1));
  // a later line for the same product replaces the earlier one
  logs.push_back(log("q", "d", 2, 2));
  EXPECT_DOUBLE_EQ(consistency_score("q", logs, 4)->c, 1.0);
  auto table = consistency_table(logs, 4);
  ASSERT_EQ(table.size(), 1u);
  EXPECT_EQ(table.at("q"), *consistency_score("q", logs, 4));
}

TEST(Route, ThresholdRule) {
  StatTable stats;
  stats["perfect"] = {"perfect", 20, 20, 1.0, 0};
  stats["high"] = {"high", 20, 19, 0.95, 0};
  stats["mid"] = {"mid", 20, 15, 0.75, 0};
  EXPECT_EQ(route_inference("perfect", stats, 0.95), RoutePath::kCoarseOnly);
  EXPECT_EQ(route_inference("high", stats, 0.95), RoutePath::kCoarseOnly);
  EXPECT_EQ(route_inference("mid", stats, 0.95), RoutePath::kFull);
  EXPECT_EQ(route_inference("longtail", stats, 0.0), RoutePath::kFull);
  EXPECT_EQ(route_inference("perfect", stats, 1.0), RoutePath::kCoarseOnly);
  EXPECT_EQ(route_inference("high", stats, 1.0), RoutePath::kFull);
  EXPECT_THROW(route_inference("x", stats, 1.5), Error);
}

TEST(Cache, HypernymOrder) {
  auto key = cache_key(structure("basketball-shoes", "nike", {{"style", "high-top"}, {"color", "red"}}), "p");
  ASSERT_TRUE(key);
  auto hs = hypernym_keys(*key);
  ASSERT_EQ(hs.size(), 7u);
  // attributes first, then brand; category everywhere
  EXPECT_EQ(hs[0].attributes, (AttributeMap{{"color", "red"}}));
  EXPECT_EQ(hs[0].brand, "nike");
  EXPECT_EQ(hs[1].attributes, (AttributeMap{{"style", "high-top"}}));
  EXPECT_TRUE(hs[2].attributes.empty());
  EXPECT_EQ(hs[2].brand, "nike");
  EXPECT_FALSE(hs[3].brand);
  EXPECT_EQ(hs[3].attributes.size(), 2u);
  EXPECT_FALSE(hs[6].brand);
  EXPECT_TRUE(hs[6].attributes.empty());
  for (const auto& h : hs) EXPECT_EQ(h.category, "basketball-shoes");
  QueryStructure none;
  EXPECT_FALSE(cache_key(none, "p"));
}

TEST(Cache, ZeroPropagatesOnlyZero) {
  const auto& w = env().world;
  const auto& p = *env().parser;
  Query specific;
  specific.id = "a";
  specific.text = "nike high top basketball shoes";
  Query general;
  general.id = "b";
  general.text = "nike basketball shoes";
  const auto ss = p.parse(specific);
  ASSERT_EQ(ss.attributes.count("style"), 1u);
  std::string soccer;
  for (const auto& d : w.products()) {
    if (d.leaf() == "soccer-shoes") {
      soccer = d.id;
      break;
    }
  }
  ASSERT_FALSE(soccer.empty());
  HypernymCache empty(1);
  EXPECT_FALSE(empty.lookup(ss, soccer));

  HypernymCache cache(1);
  cache.insert(p.parse(general), soccer, RelevanceLabel::irrelevant(), 1);
  auto hit = cache.lookup(ss, soccer);
  ASSERT_TRUE(hit);
  EXPECT_EQ(hit->label.value(), 0);
  EXPECT_TRUE(hit->inferred);
  EXPECT_EQ(w.oracle_label(specific, soccer).value(), 0);

  HypernymCache three(1);
  three.insert(p.parse(general), soccer, RelevanceLabel::strong(), 1);
  EXPECT_FALSE(three.lookup(ss, soccer));
}

TEST(Cache, ExactHitAndVersionInvalidation) {
  HypernymCache cache(1);
  const auto s = structure("lamps");
  cache.insert(s, "p1", RelevanceLabel::relevant(), 1, 5);
  auto hit = cache.lookup(s, "p1");
  ASSERT_TRUE(hit);
  EXPECT_EQ(hit->label.value(), 2);
  EXPECT_FALSE(hit->inferred);
  cache.set_version(2);
  EXPECT_FALSE(cache.lookup(s, "p1"));
  EXPECT_EQ(cache.size(), 0u);
  // written under a stale version: unreadable
  cache.insert(s, "p2", RelevanceLabel::relevant(), 1);
  EXPECT_FALSE(cache.lookup(s, "p2"));
  auto m = cache.metrics();
  EXPECT_EQ(m.lookups, 3u);
  EXPECT_EQ(m.exact_hits, 1u);
}

TEST(Cache, ConcurrentWritersSingleEntry) {
  HypernymCache cache(1);
  const auto s = structure("lamps", "acme");
  std::vector<std::thread> threads;
  for (int t = 0; t < 8; ++t) {
    threads.emplace_back([&, t] {
      for (int n = 0; n < 500; ++n) {
        cache.insert(s, "p1", RelevanceLabel::of((t + n) % 4), 1, n);
        auto hit = cache.lookup(s, "p1");
        ASSERT_TRUE(hit);
      }
    });
  }
  for (auto& t : threads) t.join();
  EXPECT_EQ(cache.size(), 1u);
  cache.insert(s, "p1", RelevanceLabel::weak(), 1);
  EXPECT_EQ(cache.lookup(s, "p1")->label.value(), 1);
}

TEST(Cache, SaveLoad) {
  HypernymCache cache(3);
  cache.insert(structure("lamps", "acme", {{"color", "red"}}), "p1", RelevanceLabel::weak(), 3, 7);
  cache.insert(structure("wigs"), "p2", RelevanceLabel::irrelevant(), 3, 8);
  auto path = std::filesystem::temp_directory_path() / "caseloop_cache_test.jsonl";
  cache.save(path);
  auto back = HypernymCache::load(path, 3);
  EXPECT_EQ(back.size(), 2u);
  EXPECT_EQ(back.lookup(structure("lamps", "acme", {{"color", "red"}}), "p1")->label.value(), 1);
  EXPECT_EQ(HypernymCache::load(path, 4).size(), 0u);
  std::filesystem::remove(path);
}

TEST(Cache, ZeroInferenceSoundOnSmallWorld) {
  world::WorldConfig c;
  c.num_products = 200;
  c.num_queries = 60;
  auto w = world::World::generate(c);
  model::QueryParser p(w.lexicon(), w.typo_table());
  auto r = check_zero_soundness(w, p);
  EXPECT_GT(r.inferred_zeros, 1000u);
  EXPECT_EQ(r.false_zeros, 0u);
}

TEST(Engine, CoarseOnlySkipsFineHead) {
  const auto& e = env();
  auto model = std::make_shared<const model::RelevanceModel>(
      std::make_shared<const model::Checkpoint>(e.model->checkpoint()), e.parser);
  ServingConfig cfg;
  cfg.use_cache = false;
  ServingEngine engine(model, e.lookup, 1, cfg);
  const Query& q = e.world.queries()[10].query;
  const auto cands = first_products(25);
  auto full = engine.serve(q, cands, {});
  EXPECT_EQ(full.path, RoutePath::kFull);
  EXPECT_EQ(model->fine_calls(), 25u);
  EXPECT_EQ(engine.logs().size(), 25u);
  engine.set_stats({{q.id, {q.id, 25, 25, 1.0, 0}}});
  auto down = engine.serve(q, cands, {});
  EXPECT_EQ(down.path, RoutePath::kCoarseOnly);
  EXPECT_EQ(model->fine_calls(), 25u);
  for (std::size_t n = 0; n < cands.size(); ++n) {
    EXPECT_EQ(down.items[n].prediction.label, model->coarse_bin(down.items[n].coarse_score));
    EXPECT_EQ(down.items[n].prediction.source_stage, Stage::kCoarse);
  }
  auto m = engine.metrics();
  EXPECT_EQ(m.queries, 2u);
  EXPECT_EQ(m.downgraded, 1u);
  EXPECT_DOUBLE_EQ(m.downgrade_fraction(), 0.5);
  EXPECT_EQ(m.shadow_calls, 0u);
  EXPECT_EQ(engine.logs().size(), 25u);
}

TEST(Engine, ShadowSamplingFlag) {
  const auto& e = env();
  ServingConfig cfg;
  cfg.use_cache = false;
  cfg.shadow_sampling = true;
  cfg.shadow_rate = 1.0;
  ServingEngine engine(e.model, e.lookup, 1, cfg);
  const Query& q = e.world.queries()[3].query;
  engine.set_stats({{q.id, {q.id, 20, 20, 1.0, 0}}});
  auto r = engine.serve(q, first_products(10), {});
  EXPECT_EQ(r.path, RoutePath::kCoarseOnly);
  EXPECT_EQ(engine.metrics().shadow_calls, 10u);
  EXPECT_EQ(engine.logs().size(), 10u);
  // labels still come from the coarse head
  for (const auto& it : r.items) EXPECT_EQ(it.prediction.source_stage, Stage::kCoarse);
}

TEST(Engine, CacheServesRepeatsAndResetsOnSwap) {
  const auto& e = env();
  auto model = std::make_shared<const model::RelevanceModel>(
      std::make_shared<const model::Checkpoint>(e.model->checkpoint()), e.parser);
  ServingEngine engine(model, e.lookup, 1);
  const Query* q = nullptr;
  for (const auto& wq : e.world.queries()) {
    if (!e.parser->parse(wq.query).category_intent.empty()) {
      q = &wq.query;
      break;
    }
  }
  ASSERT_TRUE(q);
  const auto cands = first_products(12);
  auto first = engine.serve(*q, cands, {});
  EXPECT_EQ(model->fine_calls(), 12u);
  auto second = engine.serve(*q, cands, {});
  EXPECT_EQ(model->fine_calls(), 12u);
  for (std::size_t n = 0; n < cands.size(); ++n) {
    EXPECT_TRUE(second.items[n].from_cache);
    EXPECT_EQ(second.items[n].prediction.label, first.items[n].prediction.label);
  }
  EXPECT_GT(engine.metrics().cache.hit_rate(), 0.0);
  engine.swap_model(model, 2);
  engine.serve(*q, cands, {});
  EXPECT_EQ(model->fine_calls(), 24u);
}

TEST(Engine, DirectivesApplyOnTop) {
  const auto& e = env();
  ServingEngine engine(e.model, e.lookup, 1);
  const Query& q = e.world.queries()[12].query;
  const auto s = e.parser->parse(q);
  const auto cands = first_products(15);
  Rule r;
  r.id = "r-all";
  r.primitive = RulePrimitive::kExclusion;
  r.query_scope.categories = s.category_intent;
  r.action = Rule::canonical_action(RulePrimitive::kExclusion);
  Directive d{"d1", r, 1, {}};
  auto out = engine.serve(q, cands, {d});
  for (const auto& it : out.items) EXPECT_EQ(it.prediction.label.value(), 0);
}

TEST(Engine, SearchFunnel) {
  const auto& e = env();
  std::vector<Product> products;
  for (const auto& d : e.world.products()) products.push_back(e.world.serving_product(d.id));
  auto index = std::make_shared<const model::ProductIndex>(model::ProductIndex::build(*e.model, products));
  ServingConfig cfg;
  cfg.retrieval_k = 50;
  cfg.fine_k = 8;
  ServingEngine engine(e.model, e.lookup, 1, cfg);
  EXPECT_THROW(engine.search(e.world.queries()[0].query, {}), Error);
  engine.set_index(index);
  auto r = engine.search(e.world.queries()[5].query, {});
  ASSERT_EQ(r.items.size(), 8u);
  for (std::size_t n = 1; n < r.items.size(); ++n) EXPECT_GE(r.items[n - 1].coarse_score, r.items[n].coarse_score);
}
