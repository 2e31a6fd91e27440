#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "caseloop/core/error.hpp"
#include "caseloop/core/hash.hpp"
#include "caseloop/core/rng.hpp"
#include "caseloop/core/text.hpp"
#include "caseloop/deep_search/deep_search.hpp"
#include "caseloop/world/world.hpp"

using namespace caseloop;
using namespace caseloop::search;

namespace {

const world::World& W() {
  static const world::World w = world::World::generate(world::WorldConfig{});
  return w;
}

ToolFn world_tools() {
  return [](const world::ToolCall& call) { return W().simulate_tool(call); };
}

std::shared_ptr<const model::QueryParser> parser() {
  static auto p = std::make_shared<const model::QueryParser>(W().lexicon(), W().typo_table());
  return p;
}

Query query_text(std::string id, std::string text) {
  Query q;
  q.id = std::move(id);
  q.text = std::move(text);
  return q;
}

class MapJudge : public annotator::JudgePolicy {
 public:
  explicit MapJudge(std::map<std::string, int> labels) : labels_(std::move(labels)) {}
  annotator::Judgment judge(const annotator::JudgeRequest& r) const override {
    auto it = labels_.find(r.product.id);
    return {RelevanceLabel::of(it == labels_.end() ? 0 : it->second), "map", ""};
  }
  std::string name() const override { return "map"; }

 private:
  std::map<std::string, int> labels_;
};

annotator::Annotator map_annotator(std::map<std::string, int> labels) {
  return annotator::Annotator(world_tools(), std::make_shared<const MapJudge>(std::move(labels)), parser(),
                              annotator::GrmParams::defaults());
}

AssociationRecord record_of(std::vector<std::string> ids) {
  AssociationRecord r;
  r.query_id = "q";
  r.query_text = "running shoes";
  double w = 0.9;
  for (auto& id : ids) {
    r.candidates.push_back({id, w, {{"ecom_search", "running shoes"}}});
    w -= 0.1;
  }
  return r;
}

model::ProductLookup lookup() {
  return [](std::string_view id) -> const Product& { return W().serving_product(id); };
}

}  // namespace

TEST(DeepSearch, ZeroBudget) {
  ScriptedPlanner planner(parser());
  auto out = deep_search(query_text("q", "running shoes"), planner, world_tools(), 0, 0.9, 5);
  EXPECT_EQ(out.state.step, 0);
  EXPECT_TRUE(out.record.candidates.empty());
  EXPECT_TRUE(out.state.evidence.empty());
  EXPECT_THROW(deep_search(query_text("q", "x"), planner, world_tools(), -1, 0.9, 5), Error);
  EXPECT_THROW(deep_search(query_text("q", "x"), planner, world_tools(), 3, 0.9, 0), Error);
}

TEST(DeepSearch, LoraxChainsWebIntoImage) {
  const Query& q = W().query("q-0001").query;
  ASSERT_EQ(q.text, "lorax costume");
  ScriptedPlanner planner(parser());
  auto out = deep_search(q, planner, world_tools(), 6, 0.9, 5);
  // ecom finds nothing for the character name
  ASSERT_GE(out.state.evidence.size(), 3u);
  EXPECT_TRUE(out.state.evidence[0].result->hits.empty());
  ASSERT_EQ(out.record.candidates.size(), 5u);
  std::set<std::string> top;
  for (const auto& c : out.record.candidates) {
    EXPECT_EQ(path_string(c.meta), "web_search>image_search");
    EXPECT_EQ(c.meta.back().input, "img://lorax");
    if (c.weight == kImageReliability) top.insert(c.product_id);
  }
  EXPECT_EQ(top, (std::set<std::string>{"p-00001", "p-00002", "p-00003"}));
  const auto preds = W().oracle_standard().all_predicates();
  for (const auto& id : top) EXPECT_EQ(W().judge(W().intent_of(q), id, preds).label.value(), 3);
  EXPECT_EQ(out.state.step, 4);  // rewrite, ecom, web, image; planner out of moves
}

TEST(DeepSearch, StrongLexicalMatchStopsEarly) {
  ScriptedPlanner planner(parser());
  auto out = deep_search(query_text("q", "running shoes"), planner, world_tools(), 6, 0.9, 5);
  EXPECT_EQ(out.state.step, 2);
  ASSERT_EQ(out.record.candidates.size(), 5u);
  for (const auto& c : out.record.candidates) {
    EXPECT_DOUBLE_EQ(c.weight, 0.9);
    EXPECT_EQ(path_string(c.meta), "ecom_search");
  }
}

TEST(DeepSearch, RewriteUsesTypoCorrection) {
  ScriptedPlanner planner(parser());
  auto out = deep_search(query_text("q", "nkie running shoes"), planner, world_tools(), 6, 0.9, 5);
  ASSERT_FALSE(out.state.intent_hypotheses.empty());
  EXPECT_EQ(out.state.intent_hypotheses.front(), "nike running shoes");
  EXPECT_TRUE(out.state.attempted_rewrites.count("nike running shoes"));
  EXPECT_EQ(out.state.step, 2);
}

TEST(DeepSearch, ToolFailureIsRecorded) {
  ToolFn flaky = [](const world::ToolCall& call) -> world::ToolResult {
    if (call.tool_name == "web_search") throw Error(ErrorCode::kToolUnavailable, "web down");
    return W().simulate_tool(call);
  };
  ScriptedPlanner planner(parser());
  auto out = deep_search(query_text("q", "lorax costume"), planner, flaky, 6, 0.9, 5);
  ASSERT_EQ(out.state.evidence.size(), 2u);
  EXPECT_TRUE(out.state.evidence[1].failed());
  EXPECT_NE(out.state.evidence[1].error.find("web down"), std::string::npos);
  EXPECT_TRUE(out.record.candidates.empty());
}

TEST(DeepSearch, RepeatedDiscoveryKeepsMax) {
  class Twice : public SearchPolicy {
   public:
    std::optional<Action> next(const Query&, const SearchState& st) const override {
      if (st.step >= 3) return std::nullopt;
      Action a;
      a.kind = Action::Kind::kToolCall;
      const std::string tool = st.step == 1 ? "image_search" : "ecom_search";
      a.call = {tool, {{"query", "x"}}};
      a.path = {{tool, std::to_string(st.step)}};
      return a;
    }
  };
  ToolFn tools = [](const world::ToolCall& call) {
    world::ToolResult r;
    r.tool = world::tool_from(call.tool_name);
    const double s = call.tool_name == "image_search" ? 1.0 : 0.5;
    r.hits.push_back({"p-1", s, "", {}, {}, "", {}});
    return r;
  };
  auto out = deep_search(query_text("q", "x"), Twice(), tools, 10, 0.99, 1);
  EXPECT_EQ(out.state.step, 3);
  ASSERT_EQ(out.record.candidates.size(), 1u);
  EXPECT_DOUBLE_EQ(out.record.candidates[0].weight, 0.7);
  EXPECT_EQ(out.record.candidates[0].meta.front().input, "1");
}

TEST(DeepSearch, InvariantsOverWorldQueries) {
  ScriptedPlanner planner(parser());
  Rng rng = Rng::derive(5, "deep-search-props");
  for (const auto& wq : W().queries()) {
    const int budget = static_cast<int>(rng.uniform_range(0, 6));
    const std::size_t top_k = static_cast<std::size_t>(rng.uniform_range(1, 8));
    auto out = deep_search(wq.query, planner, world_tools(), budget, 0.9, top_k);
    ASSERT_LE(out.state.step, budget);
    ASSERT_LE(out.record.candidates.size(), top_k);
    for (const auto& [pid, c] : out.state.candidate_confidence) {
      ASSERT_GE(c, 0.0);
      ASSERT_LE(c, 1.0);
    }
    for (std::size_t n = 0; n < out.record.candidates.size(); ++n) {
      const auto& c = out.record.candidates[n];
      if (n > 0) ASSERT_GE(out.record.candidates[n - 1].weight, c.weight);
      ASSERT_FALSE(c.meta.empty());
      // the chain reconstructs to a logged call
      bool logged = false;
      for (const auto& e : out.state.evidence) logged = logged || e.path == c.meta;
      ASSERT_TRUE(logged) << wq.query.text;
      ASSERT_TRUE(W().has_product(c.product_id));
    }
  }
}

TEST(AugmentPool, SetUnion) {
  std::vector<std::string> base;
  for (int n = 0; n < 10; ++n) base.push_back("b" + std::to_string(n));
  EXPECT_EQ(augment_pool(base, AssociationRecord{}), base);
  auto extra = record_of({"a0", "a1", "a2", "a3", "a4"});
  auto aug = augment_pool(base, extra);
  EXPECT_EQ(aug.size(), 15u);
  EXPECT_TRUE(std::equal(base.begin(), base.end(), aug.begin()));
  auto overlap = record_of({"b1", "a0", "b9"});
  EXPECT_EQ(augment_pool(base, overlap).size(), 11u);
}

TEST(Gate, KeepsStrongOnlyInOrder) {
  auto rec = record_of({"p-00024", "p-00025", "p-00026"});
  auto none = gate_associations(rec, query_text("q", "running shoes"),
                                map_annotator({{"p-00024", 2}, {"p-00025", 1}, {"p-00026", 0}}),
                                W().published_standards(), {}, nullptr, lookup());
  EXPECT_TRUE(none.record.candidates.empty());
  EXPECT_EQ(none.annotated, 3u);
  auto mixed = gate_associations(rec, query_text("q", "running shoes"),
                                 map_annotator({{"p-00024", 3}, {"p-00025", 2}, {"p-00026", 3}}),
                                 W().published_standards(), {}, nullptr, lookup());
  ASSERT_EQ(mixed.record.candidates.size(), 2u);
  EXPECT_EQ(mixed.record.candidates[0].product_id, "p-00024");
  EXPECT_EQ(mixed.record.candidates[1].product_id, "p-00026");
  EXPECT_GT(mixed.record.candidates[0].weight, mixed.record.candidates[1].weight);
}

TEST(Gate, MemoryPrecedentSkipsAnnotation) {
  memory::MemoryStore k([](const std::string& t) {
    std::vector<double> v(8, 0.0);
    for (const auto& tok : tokenize(t)) v[fnv1a(tok) % 8] += 1.0;
    return v;
  });
  memory::Content c;
  c.kind = memory::ContentKind::kPrecedent;
  c.query_text = "Running Shoes";
  c.product_id = "p-00025";
  c.label = RelevanceLabel::strong();
  k.write(memory::Source::kExpertCurated, c, 1);
  auto rec = record_of({"p-00024", "p-00025"});
  auto out = gate_associations(rec, query_text("q", "running shoes"), map_annotator({}), W().published_standards(),
                               {}, &k, lookup());
  EXPECT_EQ(out.from_memory, 1u);
  EXPECT_EQ(out.annotated, 1u);
  ASSERT_EQ(out.record.candidates.size(), 1u);
  EXPECT_EQ(out.record.candidates[0].product_id, "p-00025");
}

TEST(AssociationStore, RoundTrip) {
  ScriptedPlanner planner(parser());
  AssociationStore store;
  for (const char* id : {"q-0001", "q-0002", "q-0009"}) {
    store.put(deep_search(W().query(id).query, planner, world_tools(), 6, 0.9, 5).record);
  }
  auto dir = std::filesystem::temp_directory_path() / "caseloop_assoc_test";
  std::filesystem::create_directories(dir);
  store.save(dir / "associations.jsonl");
  auto back = AssociationStore::load(dir / "associations.jsonl");
  EXPECT_EQ(back.records(), store.records());
  EXPECT_FALSE(back.get("q-0404").has_value());
  std::filesystem::remove_all(dir);
}
