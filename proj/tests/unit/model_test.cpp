#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "caseloop/core/error.hpp"
#include "caseloop/core/records.hpp"
#include "caseloop/model/index.hpp"
#include "caseloop/model/model.hpp"
#include "caseloop/world/world.hpp"

using namespace caseloop;
using namespace caseloop::model;

namespace {

struct Trained {
  world::World world;
  std::shared_ptr<const QueryParser> parser;
  std::shared_ptr<const Checkpoint> checkpoint;
  ProductLookup lookup;

  RelevanceModel model() const { return RelevanceModel(checkpoint, parser); }
};

const Trained& trained() {
  static const std::unique_ptr<Trained> t = [] {
    std::unique_ptr<Trained> t(new Trained{world::World::generate(world::WorldConfig{}), nullptr, nullptr, {}});
    t->parser = std::make_shared<const QueryParser>(t->world.lexicon(), t->world.typo_table());
    t->lookup = [w = &t->world](std::string_view id) -> const Product& { return w->serving_product(id); };
    t->checkpoint = std::make_shared<const Checkpoint>(
        train_multitask(t->world.initial_corpus(), t->lookup, *t->parser, TrainConfig{}, "test-v1"));
    return t;
  }();
  return *t;
}

const world::World& small_world() {
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

Corpus heldout_corpus(const world::World& w) {
  Corpus out;
  for (const auto& pr : w.heldout_pairs()) {
    Sample s;
    s.id = pr.query_id + ":" + pr.product_id;
    s.query = w.query(pr.query_id).query;
    s.product_id = pr.product_id;
    s.label = w.oracle_label(s.query, pr.product_id);
    out.push_back(s);
  }
  return out;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(const std::vector<double>& a) { return std::sqrt(cosine(a, a)); }

Query make_query(std::string text, std::string lang = "en") {
  Query q;
  q.id = "q-test";
  q.text = std::move(text);
  q.language = std::move(lang);
  return q;
}

}  // namespace

TEST(Train, SameSeedIdenticalCheckpoints) {
  const auto& w = small_world();
  QueryParser parser(w.lexicon(), w.typo_table());
  auto lookup = [&](std::string_view id) -> const Product& { return w.serving_product(id); };
  TrainConfig c;
  c.epochs = 3;
  const auto a = train_multitask(w.initial_corpus(), lookup, parser, c, "v");
  const auto b = train_multitask(w.initial_corpus(), lookup, parser, c, "v");
  EXPECT_EQ(a.digest(), b.digest());
  EXPECT_EQ(a.meta.loss_curve, b.meta.loss_curve);
  EXPECT_TRUE(a.all_finite());
}

TEST(Train, ZeroWeightHeadsStayAtInitialization) {
  const auto& w = small_world();
  QueryParser parser(w.lexicon(), w.typo_table());
  auto lookup = [&](std::string_view id) -> const Product& { return w.serving_product(id); };
  TrainConfig c;
  c.epochs = 2;
  c.weights = {0.0, 0.0, 1.0};
  const auto trained_ck = train_multitask(w.initial_corpus(), lookup, parser, c, "v");
  const auto init = Checkpoint::initialize(c.dims, c.seed);
  for (auto b : {kRetrievalW, kCoarseW, kCoarseB}) EXPECT_EQ(trained_ck.blocks[b].values, init.blocks[b].values);
  for (auto b : {kEmbed, kHiddenW, kFine1W, kFine2B}) EXPECT_NE(trained_ck.blocks[b].values, init.blocks[b].values);
  EXPECT_EQ(trained_ck.coarse_cutpoints, init.coarse_cutpoints);
}

TEST(Train, LossCurveNonIncreasing) {
  const auto& curve = trained().checkpoint->meta.loss_curve;
  ASSERT_EQ(curve.size(), 12u);
  for (std::size_t i = 1; i < curve.size(); ++i) EXPECT_LE(curve[i], curve[i - 1] + 1e-3) << "epoch " << i;
}

TEST(Train, DegenerateCorpusRejected) {
  const auto& w = small_world();
  QueryParser parser(w.lexicon(), w.typo_table());
  auto lookup = [&](std::string_view id) -> const Product& { return w.serving_product(id); };
  Corpus same;
  for (const auto& s : w.initial_corpus()) {
    if (s.label == RelevanceLabel::irrelevant()) same.push_back(s);
  }
  try {
    train_multitask(same, lookup, parser, TrainConfig{}, "v");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDegenerateCorpus);
  }
  try {
    train_multitask({}, lookup, parser, TrainConfig{}, "v");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDegenerateCorpus);
  }
}

TEST(Checkpoint, SaveLoadRoundTrip) {
  const auto& ck = *trained().checkpoint;
  const auto dir = std::filesystem::temp_directory_path() / "caseloop_ckpt_test";
  std::filesystem::create_directories(dir);
  ck.save(dir / "a.ckpt");
  const auto back = Checkpoint::load(dir / "a.ckpt");
  EXPECT_EQ(back.digest(), ck.digest());
  EXPECT_EQ(back.meta.loss_curve, ck.meta.loss_curve);
  EXPECT_EQ(back.coarse_cutpoints, ck.coarse_cutpoints);
  back.save(dir / "b.ckpt");
  EXPECT_EQ(read_text(dir / "a.ckpt"), read_text(dir / "b.ckpt"));
  write_text(dir / "c.ckpt", "garbage");
  EXPECT_THROW(Checkpoint::load(dir / "c.ckpt"), Error);
  std::filesystem::remove_all(dir);
}

// Central differences against the analytic gradient for every loss term.
TEST(GradientCheck, MultitaskLossMatchesFiniteDifferences) {
  const auto& w = small_world();
  QueryParser parser(w.lexicon(), w.typo_table());
  auto lookup = [&](std::string_view id) -> const Product& { return w.serving_product(id); };
  const auto examples = featurize(w.initial_corpus(), lookup, parser);
  const std::vector<TaskWeights> weightings{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 1}};
  double worst = 0.0;
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
      ASSERT_FALSE(g.touched_rows.empty());
      for (int k = 0; k < 10; ++k) {
        const auto b = static_cast<std::size_t>(rng.uniform_int(kNumBlocks));
        std::size_t i;
        if (b == kEmbed) {
          const auto row = g.touched_rows[rng.uniform_int(g.touched_rows.size())];
          i = row * ck.dims.embed + rng.uniform_int(ck.dims.embed);
        } else {
          i = rng.uniform_int(ck.blocks[b].values.size());
        }
        const double h = 1e-6;
        const double orig = ck.blocks[b].values[i];
        ck.blocks[b].values[i] = orig + h;
        const double up = multitask_loss(ck, batch, cfg, nullptr).total;
        ck.blocks[b].values[i] = orig - h;
        const double down = multitask_loss(ck, batch, cfg, nullptr).total;
        ck.blocks[b].values[i] = orig;
        const double numeric = (up - down) / (2 * h);
        const double analytic = g.blocks[b][i];
        const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
        worst = std::max(worst, rel);
        EXPECT_LE(rel, 1e-4) << block_name(b) << "[" << i << "] seed " << seed << " analytic " << analytic
                             << " numeric " << numeric;
      }
    }
  }
  RecordProperty("max_relative_error", std::to_string(worst));
}

TEST(Encode, UnitNormDeterministicAndFallback) {
  const auto m = trained().model();
  const auto& w = trained().world;
  const Query q = w.queries()[0].query;
  const auto a = m.encode(q);
  EXPECT_EQ(a, m.encode(q));
  EXPECT_NEAR(norm(a), 1.0, 1e-6);
  EXPECT_NEAR(norm(m.encode(w.products()[5])), 1.0, 1e-6);
  const auto fallback = m.encode(make_query("!!!"));
  ASSERT_EQ(fallback.size(), 64u);
  EXPECT_EQ(fallback[0], 1.0);
  EXPECT_NEAR(norm(fallback), 1.0, 1e-12);
}

TEST(Encode, ExactMatchCloserThanRandomProduct) {
  const auto m = trained().model();
  const auto& w = trained().world;
  const auto q = w.query("q-0007").query;  // nike basketball shoes
  const auto qv = m.encode(q);
  double exact = -2, random = 0;
  int n_random = 0;
  for (const auto& p : w.products()) {
    const auto label = w.judge(w.intent_of(q), p.id, w.oracle_standard().all_predicates()).label;
    const double c = cosine(qv, m.encode(w.serving_product(p.id)));
    if (label == RelevanceLabel::strong()) exact = std::max(exact, c);
    if (label == RelevanceLabel::irrelevant()) {
      random += c;
      ++n_random;
    }
  }
  EXPECT_GT(exact, random / n_random);
}

TEST(Retrieve, FullCorpusIsPermutationAndOversizedKFlagged) {
  const auto m = trained().model();
  const auto& w = trained().world;
  const std::vector<Product> products(w.products().begin(), w.products().begin() + 200);
  const auto idx = ProductIndex::build(m, products);
  const auto all = idx.retrieve(m, w.queries()[3].query, 200);
  EXPECT_FALSE(all.truncated);
  std::set<std::string> ids;
  for (const auto& h : all.hits) ids.insert(h.product_id);
  EXPECT_EQ(ids.size(), 200u);
  for (std::size_t i = 1; i < all.hits.size(); ++i) EXPECT_GE(all.hits[i - 1].score, all.hits[i].score);
  const auto over = idx.retrieve(m, w.queries()[3].query, 500);
  EXPECT_TRUE(over.truncated);
  EXPECT_EQ(over.hits.size(), 200u);
}

TEST(Retrieve, TopHundredMatchesBruteForceScan) {
  const auto m = trained().model();
  const auto& w = trained().world;
  const std::vector<Product> products(w.products().begin(), w.products().end());
  const auto idx = ProductIndex::build(m, products);
  const auto q = w.queries()[10].query;
  const auto got = idx.retrieve(m, q, 100);
  const auto qv = m.encode(q);
  std::vector<std::pair<double, std::string>> scan;
  for (const auto& p : products) scan.emplace_back(-cosine(qv, m.encode(p)), p.id);
  std::sort(scan.begin(), scan.end());
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(got.hits[i].product_id, scan[i].second);
}

TEST(Retrieve, VerbatimTitleRetrievesItsProduct) {
  const auto m = trained().model();
  const auto& w = trained().world;
  const std::vector<Product> products(w.products().begin(), w.products().end());
  const auto idx = ProductIndex::build(m, products);
  int hits = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    const auto& p = products[i * 97];
    const auto got = idx.retrieve(m, make_query(p.title), 1);
    hits += got.hits.at(0).product_id == p.id;
  }
  EXPECT_EQ(hits, 20);
}

TEST(Coarse, EmptySingletonDuplicatesAndPermutation) {
  const auto m = trained().model();
  const auto& w = trained().world;
  const auto q = w.queries()[0].query;
  EXPECT_TRUE(m.coarse_score(q, {}).empty());
  const auto a = w.products()[1], b = w.products()[2];
  EXPECT_EQ(m.coarse_score(q, {a}).size(), 1u);
  const auto dup = m.coarse_score(q, {a, a, b});
  EXPECT_EQ(dup[0], dup[1]);
  const auto perm = m.coarse_score(q, {b, a, a});
  EXPECT_EQ(perm[0], dup[2]);
  EXPECT_EQ(perm[1], dup[0]);
}

TEST(Coarse, StrongPairsOutscoreIrrelevantOnHeldOut) {
  const auto m = trained().model();
  const auto& w = trained().world;
  double s3 = 0, s0 = 0;
  int n3 = 0, n0 = 0;
  for (const auto& s : heldout_corpus(w)) {
    const double score = m.coarse_score(s.query, {w.serving_product(s.product_id)})[0];
    if (s.label.value() == 3) s3 += score, ++n3;
    if (s.label.value() == 0) s0 += score, ++n0;
  }
  ASSERT_GT(n3, 0);
  ASSERT_GT(n0, 0);
  EXPECT_GT(s3 / n3, s0 / n0);
}

TEST(Fine, HeldOutAccuracyAtLeastLogisticBaseline) {
  const auto& t = trained();
  const auto m = t.model();
  const auto held = heldout_corpus(t.world);
  const auto baseline = LogisticBaseline::train(featurize(t.world.initial_corpus(), t.lookup, *t.parser));
  const auto held_x = featurize(held, t.lookup, *t.parser);
  int model_ok = 0, base_ok = 0;
  for (std::size_t i = 0; i < held.size(); ++i) {
    model_ok += m.fine_base(held[i].query, t.lookup(held[i].product_id)).label == held[i].label;
    base_ok += baseline.predict(held_x[i].cross) == held[i].label;
  }
  RecordProperty("model_correct", model_ok);
  RecordProperty("baseline_correct", base_ok);
  EXPECT_GE(model_ok, base_ok);
}

TEST(Fine, NoDirectivesKeepsBaseAndExclusionZeroesCami) {
  const auto& t = trained();
  const auto m = t.model();
  const auto& w = t.world;
  const auto q = w.query("q-0006").query;  // blusas de mujer sexy
  const Product* cami = nullptr;
  for (const auto& p : w.products()) {
    if (p.title == "Plain Summer All Seasons") cami = &p;
  }
  ASSERT_NE(cami, nullptr);
  const auto base = m.fine_base(q, *cami);
  EXPECT_EQ(m.fine_score(q, *cami, {}), base);
  EXPECT_EQ(base.source_stage, Stage::kFine);
  EXPECT_TRUE(base.is_consistent());

  Rule r;
  r.id = "r-blouses";
  r.primitive = RulePrimitive::kExclusion;
  r.query_scope.categories = {"womens-blouses"};
  r.product_match.categories = {"womens-tanks-camis"};
  r.action = Rule::canonical_action(r.primitive);
  const auto adjusted = m.fine_score(q, *cami, {{"d-1", r, 0, {}}});
  EXPECT_EQ(adjusted.label, RelevanceLabel::irrelevant());
  EXPECT_TRUE(adjusted.is_consistent());
  EXPECT_EQ(m.fine_score(q, *cami, {{"d-1", r, 0, {}}}), adjusted);
}

TEST(Parse, LexiconExamples) {
  const auto& w = small_world();
  QueryParser parser(w.lexicon(), w.typo_table());
  const auto s = parser.parse(make_query("nike basketball shoes"));
  EXPECT_EQ(s.brand, std::optional<std::string>("nike"));
  EXPECT_EQ(s.category_intent, std::vector<std::string>{"basketball-shoes"});
  EXPECT_FALSE(s.corrected_text);
  const auto none = parser.parse(make_query("zzqx wobble"));
  EXPECT_TRUE(none.empty());
  EXPECT_FALSE(none.corrected_text);
}

TEST(Parse, TypoCorrectedFirst) {
  const auto& w = small_world();
  QueryParser parser(w.lexicon(), w.typo_table());
  const auto s = parser.parse(make_query("nkie running shoes"));
  ASSERT_TRUE(s.corrected_text);
  EXPECT_EQ(*s.corrected_text, "nike running shoes");
  EXPECT_EQ(s.brand, std::optional<std::string>("nike"));
  EXPECT_EQ(s.category_intent, std::vector<std::string>{"running-shoes"});
}

TEST(Augment, CountsAndEmptyTable) {
  Corpus c;
  for (int i = 0; i < 3; ++i) {
    Sample s;
    s.id = "s" + std::to_string(i);
    s.query = make_query("nkie running shoes");
    s.product_id = "p-" + std::to_string(i);
    s.label = RelevanceLabel::relevant();
    c.push_back(s);
  }
  Sample other = c[0];
  other.id = "s9";
  other.query = make_query("adidas soccer shoes");
  c.push_back(other);
  const std::map<std::string, std::string> table{{"nkie running shoes", "nike running shoes"}};
  const auto out = augment_corrections(c, table);
  ASSERT_EQ(out.size(), 7u);
  for (std::size_t i = 4; i < 7; ++i) {
    EXPECT_EQ(out[i].query.text, "nike running shoes");
    EXPECT_EQ(out[i].product_id, c[i - 4].product_id);
    EXPECT_EQ(out[i].label, c[i - 4].label);
  }
  EXPECT_EQ(augment_corrections(c, {}), c);
}

// Paired seeded runs: same world, same seeds, corpus with and without correction copies.
TEST(Augment, ImprovesFineAccuracyOnTypoSlice) {
  const auto& t = trained();
  const auto& w = t.world;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& s : w.initial_corpus()) seen.emplace(s.query.text, s.product_id);
  Corpus slice;
  for (const auto& wq : w.queries()) {
    if (!w.typo_table().count(wq.query.text)) continue;
    for (const auto& p : w.products()) {
      if (seen.count({wq.query.text, p.id})) continue;
      Sample s;
      s.id = wq.query.id + ":" + p.id;
      s.query = wq.query;
      s.product_id = p.id;
      s.label = w.oracle_label(wq.query, p.id);
      slice.push_back(s);
    }
  }
  ASSERT_FALSE(slice.empty());
  const Corpus augmented = augment_corrections(w.initial_corpus(), w.typo_table());
  ASSERT_GT(augmented.size(), w.initial_corpus().size());
  long plain_ok = 0, aug_ok = 0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    TrainConfig c;
    c.seed = seed;
    const RelevanceModel plain(
        std::make_shared<const Checkpoint>(train_multitask(w.initial_corpus(), t.lookup, *t.parser, c, "plain")),
        t.parser);
    const RelevanceModel aug(
        std::make_shared<const Checkpoint>(train_multitask(augmented, t.lookup, *t.parser, c, "aug")), t.parser);
    for (const auto& s : slice) {
      plain_ok += plain.fine_base(s.query, t.lookup(s.product_id)).label == s.label;
      aug_ok += aug.fine_base(s.query, t.lookup(s.product_id)).label == s.label;
    }
  }
  RecordProperty("plain_correct", static_cast<int>(plain_ok));
  RecordProperty("augmented_correct", static_cast<int>(aug_ok));
  EXPECT_GT(aug_ok, plain_ok);
}

TEST(Retrieve, SavedIndexAnswersIdentically) {
  const auto m = trained().model();
  const auto& w = trained().world;
  const std::vector<Product> products(w.products().begin(), w.products().begin() + 150);
  const auto idx = ProductIndex::build(m, products);
  const auto path = std::filesystem::temp_directory_path() / "caseloop_index_roundtrip.jsonl";
  idx.save(path);
  const auto back = ProductIndex::load(path);
  EXPECT_EQ(back.size(), idx.size());
  EXPECT_EQ(back.version(), idx.version());
  const auto a = idx.retrieve(m, w.queries()[5].query, 20);
  const auto b = back.retrieve(m, w.queries()[5].query, 20);
  ASSERT_EQ(a.hits.size(), b.hits.size());
  for (std::size_t i = 0; i < a.hits.size(); ++i) {
    EXPECT_EQ(a.hits[i].product_id, b.hits[i].product_id);
    EXPECT_DOUBLE_EQ(a.hits[i].score, b.hits[i].score);
  }
}
