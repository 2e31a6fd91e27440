#include "caseloop/world/world.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "caseloop/core/error.hpp"
#include "caseloop/core/hash.hpp"
#include "caseloop/core/records.hpp"
#include "caseloop/core/rng.hpp"
#include "caseloop/core/text.hpp"

namespace caseloop::world {
namespace {

constexpr int kDefaultTopN = 20;

std::string title_case(const std::string& phrase) {
  std::string out = phrase;
  bool start = true;
  for (char& c : out) {
    if (start && c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
    start = c == ' ';
  }
  return out;
}

std::string product_id(int n) { return "p-" + zero_pad(n, 5); }
std::string query_id(int n) { return "q-" + zero_pad(n, 4); }

struct EntitySpec {
  const char* entity;
  const char* color;
  const char* material;
  const char* text;
  std::vector<const char*> titles;
};

const std::vector<EntitySpec>& entity_specs() {
  static const std::vector<EntitySpec> kSpecs = {
      {"lorax", "orange", "furry",
       "The Lorax is a storybook character with bright orange fur and a bushy yellow mustache.",
       {"Orange Furry Mascot Suit", "Plush Orange Furry Character Jumpsuit", "Orange Furry Full Body Suit"}},
      {"grinch", "green", "furry", "The Grinch is a storybook character covered in shaggy green fur.",
       {"Green Furry Holiday Mascot Suit", "Green Furry Character Jumpsuit"}},
      {"elsa", "blue", "satin", "Elsa is an animated ice queen who wears a flowing blue satin gown.",
       {"Blue Satin Princess Gown Set", "Blue Satin Ice Queen Dress Up Set"}},
      {"minion", "yellow", "denim", "Minions are small yellow creatures who wear denim overalls.",
       {"Yellow Denim Overall Jumpsuit", "Yellow Denim Bib Dress Up Set"}},
      {"pikachu", "yellow", "furry", "Pikachu is a cartoon creature with soft yellow fur and red cheeks.",
       {"Yellow Furry Kigurumi Onesie", "Yellow Furry Hooded Onesie"}},
  };
  return kSpecs;
}

// ---------------------------------------------------------------------------
// Record conversions for world-specific types.

Json intent_json(const QueryIntent& i) {
  Json j{{"attributes", i.attributes}, {"tokens", i.tokens}};
  if (i.category) j["category"] = *i.category;
  if (i.brand) j["brand"] = *i.brand;
  if (i.entity) j["entity"] = *i.entity;
  return j;
}

QueryIntent intent_from(const Json& j) {
  QueryIntent i;
  i.attributes = j.value("attributes", AttributeMap{});
  i.tokens = j.value("tokens", std::vector<std::string>{});
  if (j.contains("category")) i.category = j["category"].get<std::string>();
  if (j.contains("brand")) i.brand = j["brand"].get<std::string>();
  if (j.contains("entity")) i.entity = j["entity"].get<std::string>();
  return i;
}

Json config_json(const WorldConfig& c) {
  return Json{{"seed", c.seed},
              {"num_products", c.num_products},
              {"num_queries", c.num_queries},
              {"noise_rate", c.noise_rate},
              {"head_fraction", c.head_fraction},
              {"head_weight", c.head_weight},
              {"typo_fraction", c.typo_fraction},
              {"spanish_fraction", c.spanish_fraction},
              {"defect_rate", c.defect_rate},
              {"corpus_pairs_per_query", c.corpus_pairs_per_query},
              {"heldout_pairs", c.heldout_pairs},
              {"guard_pairs", c.guard_pairs},
              {"noise_patterns", c.noise_patterns}};
}

WorldConfig config_from(const Json& j) {
  WorldConfig c;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.num_products = j.at("num_products").get<int>();
  c.num_queries = j.at("num_queries").get<int>();
  c.noise_rate = j.at("noise_rate").get<double>();
  c.head_fraction = j.at("head_fraction").get<double>();
  c.head_weight = j.at("head_weight").get<double>();
  c.typo_fraction = j.at("typo_fraction").get<double>();
  c.spanish_fraction = j.at("spanish_fraction").get<double>();
  c.defect_rate = j.at("defect_rate").get<double>();
  c.corpus_pairs_per_query = j.at("corpus_pairs_per_query").get<int>();
  c.heldout_pairs = j.at("heldout_pairs").get<int>();
  c.guard_pairs = j.at("guard_pairs").get<int>();
  c.noise_patterns = j.at("noise_patterns").get<int>();
  return c;
}

// ---------------------------------------------------------------------------
// Generation helpers.

class Builder {
 public:
  Builder(const WorldConfig& config, const Taxonomy& tax) : config_(config), tax_(tax) {}

  Product make_product(int n, const std::string& leaf, std::optional<std::string> brand, AttributeMap attrs,
                       std::optional<std::string> title, Rng& rng) const {
    Product p;
    p.id = product_id(n);
    p.category_path = tax_.path_to(leaf);
    p.brand = std::move(brand);
    p.attributes = std::move(attrs);
    if (title) {
      p.title = *title;
    } else {
      std::vector<std::string> parts;
      if (p.brand) parts.push_back(title_case(*p.brand));
      for (const char* key : {"fit", "color", "material", "style", "connectivity", "gender"}) {
        auto it = p.attributes.find(key);
        if (it == p.attributes.end()) continue;
        parts.push_back(tax_.find_value(key, it->second)->title_word);
      }
      parts.push_back(title_case(tax_.display_name(leaf, "en")));
      parts.push_back("M" + zero_pad(static_cast<long long>(rng.uniform_int(10000)), 4));
      p.title = join(parts, " ");
    }
    return p;
  }

  Product random_product(int n, Rng& rng) const {
    const auto leaves = tax_.leaves();
    const CategoryNode* leaf = leaves[rng.uniform_int(leaves.size())];
    const CategoryNode& dept = tax_.department(leaf->id);
    std::optional<std::string> brand;
    if (rng.bernoulli(0.85)) brand = rng.pick(dept.brands);
    AttributeMap attrs;
    for (const auto& key : dept.attribute_keys) {
      if (!rng.bernoulli(0.6)) continue;
      const auto values = tax_.values_of(key);
      attrs[key] = values[rng.uniform_int(values.size())]->value;
    }
    return make_product(n, leaf->id, brand, attrs, std::nullopt, rng);
  }

  QueryIntent random_intent(Rng& rng) const {
    const auto leaves = tax_.leaves();
    const CategoryNode* leaf = leaves[rng.uniform_int(leaves.size())];
    const CategoryNode& dept = tax_.department(leaf->id);
    QueryIntent intent;
    intent.category = leaf->id;
    if (rng.bernoulli(0.4)) intent.brand = rng.pick(dept.brands);
    std::vector<std::string> keys = dept.attribute_keys;
    rng.shuffle(keys);
    const int n_attrs = rng.uniform_range(0, 2);
    for (int i = 0; i < n_attrs && i < static_cast<int>(keys.size()); ++i) {
      const auto values = tax_.values_of(keys[static_cast<std::size_t>(i)]);
      intent.attributes[keys[static_cast<std::size_t>(i)]] = values[rng.uniform_int(values.size())]->value;
    }
    return intent;
  }

 private:
  const WorldConfig& config_;
  const Taxonomy& tax_;
};

// Swaps two interior characters of the longest token; retries until the
// result leaves the lexicon.
std::optional<std::string> make_typo(const std::string& text, const Lexicon& lex, Rng& rng) {
  auto tokens = tokenize(text);
  std::vector<std::size_t> order(tokens.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return tokens[a].size() > tokens[b].size(); });
  for (std::size_t idx : order) {
    std::string& tok = tokens[idx];
    if (tok.size() < 4) continue;
    for (int attempt = 0; attempt < 6; ++attempt) {
      std::string candidate = tok;
      const std::size_t pos = 1 + static_cast<std::size_t>(rng.uniform_int(candidate.size() - 2));
      std::swap(candidate[pos - 1], candidate[pos]);
      if (candidate == tok) continue;
      if (lex.entries().count(candidate)) continue;
      std::string saved = tok;
      tok = candidate;
      std::string out = join(tokens, " ");
      tok = saved;
      return out;
    }
  }
  return std::nullopt;
}

bool matches_pattern(const NoisePattern& p, const QueryIntent& intent, const Product& d, const Taxonomy& tax,
                     const ClauseVerdict& clean) {
  if (!intent.category || tax.department_of(*intent.category) != p.scope) return false;
  if (p.kind == "sibling_category") {
    return !d.in_category(*intent.category) && d.in_category(p.scope);
  }
  if (p.kind == "brand_conflict") return clean.predicate == predicate::kBrandConflict;
  if (p.kind.rfind("attribute_conflict:", 0) == 0) {
    if (clean.predicate != predicate::kAttributeConflict) return false;
    const std::string key = p.kind.substr(std::string("attribute_conflict:").size());
    const auto c = compare(intent, d);
    return std::find(c.conflicting_attributes.begin(), c.conflicting_attributes.end(), key) !=
           c.conflicting_attributes.end();
  }
  return false;
}

}  // namespace

// ---------------------------------------------------------------------------

void WorldConfig::validate() const {
  if (num_products < 1 || num_queries < 1) {
    throw Error(ErrorCode::kInvalidConfig, "world sizes must be positive");
  }
  if (corpus_pairs_per_query < 1 || heldout_pairs < 0 || guard_pairs < 0 || noise_patterns < 0) {
    throw Error(ErrorCode::kInvalidConfig, "sample counts must be positive");
  }
  auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!unit(noise_rate) || !unit(head_fraction) || !unit(typo_fraction) || !unit(spanish_fraction) ||
      !unit(defect_rate)) {
    throw Error(ErrorCode::kInvalidConfig, "rates must lie in [0,1]");
  }
  if (head_weight <= 0.0) throw Error(ErrorCode::kInvalidConfig, "head_weight must be positive");
}

std::string_view to_string(FeatureDefect d) {
  switch (d) {
    case FeatureDefect::kSeoCheat: return "seo_cheat";
    case FeatureDefect::kWrongCategory: return "wrong_category";
    case FeatureDefect::kMissingBrand: return "missing_brand";
  }
  return "seo_cheat";
}

FeatureDefect feature_defect_from(std::string_view s) {
  if (s == "seo_cheat") return FeatureDefect::kSeoCheat;
  if (s == "wrong_category") return FeatureDefect::kWrongCategory;
  if (s == "missing_brand") return FeatureDefect::kMissingBrand;
  throw Error(ErrorCode::kInvalidArgument, "unknown feature defect " + std::string(s));
}

std::vector<std::string> OracleStandard::all_predicates() const {
  std::vector<std::string> out = published.predicates();
  for (const auto& c : hidden_clauses) out.push_back(c.predicate);
  return out;
}

World::World(const World& other)
    : config_(other.config_),
      lexicon_(other.lexicon_),
      products_(other.products_),
      serving_products_(other.serving_products_),
      defects_(other.defects_),
      queries_(other.queries_),
      typo_table_(other.typo_table_),
      knowledge_(other.knowledge_),
      images_(other.images_),
      oracle_(other.oracle_),
      initial_corpus_(other.initial_corpus_),
      noise_patterns_(other.noise_patterns_),
      heldout_(other.heldout_),
      guard_(other.guard_),
      product_index_(other.product_index_),
      query_index_(other.query_index_),
      oracle_calls_(std::make_shared<std::atomic<std::uint64_t>>(other.oracle_calls())) {}

World& World::operator=(const World& other) {
  if (this != &other) {
    World copy(other);
    *this = std::move(copy);
  }
  return *this;
}

World World::generate(const WorldConfig& config) {
  config.validate();
  const Taxonomy& tax = Taxonomy::builtin();
  World w;
  w.config_ = config;
  w.lexicon_ = Lexicon::from_taxonomy(tax);
  w.oracle_.published = default_published_standards();
  w.oracle_.hidden_clauses = default_hidden_clauses();
  Builder builder(config, tax);

  // External knowledge and the image registry.
  for (const auto& spec : entity_specs()) {
    KnowledgeFact fact;
    fact.entity = spec.entity;
    fact.text = spec.text;
    fact.image_ref = std::string("img://") + spec.entity;
    fact.visual_tags = {spec.color, spec.material, "costume"};
    std::sort(fact.visual_tags.begin(), fact.visual_tags.end());
    fact.category = "costumes";
    fact.attributes = {{"color", spec.color}, {"material", spec.material}};
    w.images_[fact.image_ref] = fact.visual_tags;
    w.knowledge_[fact.entity] = fact;
  }

  // Anchor products: fixed cases that examples and acceptance checks rely on.
  Rng prng = Rng::derive(config.seed, "products");
  int next_product = 1;
  std::set<std::string> anchor_products;
  auto add_anchor = [&](const std::string& leaf, std::optional<std::string> brand, AttributeMap attrs,
                        std::optional<std::string> title) {
    Product p = builder.make_product(next_product++, leaf, std::move(brand), std::move(attrs), std::move(title), prng);
    anchor_products.insert(p.id);
    w.products_.push_back(std::move(p));
  };
  for (const auto& spec : entity_specs()) {
    for (const char* title : spec.titles) {
      add_anchor("costumes", std::nullopt, {{"color", spec.color}, {"material", spec.material}}, title);
    }
  }
  add_anchor("blankets", std::nullopt, {{"color", "orange"}, {"material", "furry"}}, "Orange Furry Throw");
  add_anchor("womens-tanks-camis", std::nullopt, {{"fit", "sexy"}}, "Plain Summer All Seasons");
  add_anchor("womens-blouses", "zara", {{"fit", "sexy"}, {"color", "white"}}, std::nullopt);
  add_anchor("womens-blouses", "mango", {{"fit", "sexy"}}, std::nullopt);
  for (const char* color : {"red", "black", "white", "blue", "green", "yellow"}) {
    AttributeMap attrs{{"color", color}};
    if (std::string(color) == "red" || std::string(color) == "black") attrs["style"] = "high-top";
    add_anchor("basketball-shoes", "nike", attrs, std::nullopt);
  }
  add_anchor("soccer-shoes", "nike", {{"color", "black"}}, std::nullopt);
  add_anchor("basketball-shoes", "adidas", {{"style", "high-top"}}, std::nullopt);
  add_anchor("running-shoes", "nike", {{"gender", "men"}}, std::nullopt);
  add_anchor("running-shoes", "asics", {{"gender", "women"}}, std::nullopt);
  add_anchor("running-shoes", "puma", {{"gender", "women"}, {"color", "pink"}}, std::nullopt);

  while (next_product <= config.num_products) {
    w.products_.push_back(builder.random_product(next_product++, prng));
  }

  // Serving view with injected feature defects (never on anchors).
  Rng drng = Rng::derive(config.seed, "defects");
  const auto leaves = tax.leaves();
  w.serving_products_ = w.products_;
  for (auto& p : w.serving_products_) {
    if (anchor_products.count(p.id) || !drng.bernoulli(config.defect_rate)) continue;
    std::vector<FeatureDefect> options{FeatureDefect::kSeoCheat, FeatureDefect::kWrongCategory};
    if (p.brand) options.push_back(FeatureDefect::kMissingBrand);
    const FeatureDefect defect = drng.pick(options);
    switch (defect) {
      case FeatureDefect::kSeoCheat: {
        std::vector<std::string> extra;
        for (int i = 0; i < 3; ++i) extra.push_back(title_case(tax.display_name(drng.pick(leaves)->id, "en")));
        p.title += " " + join(extra, " ");
        break;
      }
      case FeatureDefect::kWrongCategory: {
        const CategoryNode* other = nullptr;
        do {
          other = drng.pick(leaves);
        } while (other->id == p.leaf());
        p.category_path = tax.path_to(other->id);
        break;
      }
      case FeatureDefect::kMissingBrand:
        p.brand.reset();
        break;
    }
    w.defects_[p.id] = defect;
  }

  // Queries: anchors first, then template-composed ones.
  Rng qrng = Rng::derive(config.seed, "queries");
  int next_query = 1;
  std::set<std::string> texts;
  auto add_query = [&](QueryIntent intent, const std::string& language, std::optional<std::string> text) {
    WorldQuery wq;
    wq.query.id = query_id(next_query++);
    wq.query.language = language;
    wq.query.text = text ? *text : w.compose_query_text(intent, language);
    intent.tokens = tokenize(wq.query.text);
    wq.intent = std::move(intent);
    texts.insert(normalize_text(wq.query.text));
    w.queries_.push_back(std::move(wq));
  };
  for (const auto& spec : entity_specs()) {
    QueryIntent intent;
    intent.category = "costumes";
    intent.entity = spec.entity;
    intent.attributes = {{"color", spec.color}, {"material", spec.material}};
    add_query(intent, "en", std::nullopt);
  }
  add_query(QueryIntent{"womens-blouses", std::nullopt, {{"fit", "sexy"}}, std::nullopt, {}}, "es",
            std::string("blusas de mujer sexy"));
  add_query(QueryIntent{"basketball-shoes", "nike", {}, std::nullopt, {}}, "en", std::nullopt);
  add_query(QueryIntent{"basketball-shoes", "nike", {{"style", "high-top"}}, std::nullopt, {}}, "en", std::nullopt);
  add_query(QueryIntent{"running-shoes", std::nullopt, {{"gender", "women"}}, std::nullopt, {}}, "en", std::nullopt);
  add_query(QueryIntent{"soccer-shoes", "adidas", {}, std::nullopt, {}}, "en", std::nullopt);
  {
    QueryIntent typo_intent{"running-shoes", "nike", {}, std::nullopt, {}};
    const std::string corrected = w.compose_query_text(typo_intent, "en");
    w.typo_table_["nkie running shoes"] = corrected;
    add_query(typo_intent, "en", std::string("nkie running shoes"));
  }
  const int anchor_queries = next_query - 1;

  while (next_query <= std::max(config.num_queries, anchor_queries)) {
    if (next_query > config.num_queries) break;
    QueryIntent intent;
    std::string language;
    std::string text;
    for (int attempt = 0; attempt < 100; ++attempt) {
      intent = builder.random_intent(qrng);
      language = qrng.bernoulli(config.spanish_fraction) ? "es" : "en";
      text = w.compose_query_text(intent, language);
      if (!texts.count(normalize_text(text))) break;
    }
    if (texts.count(normalize_text(text))) break;
    std::optional<std::string> typo;
    if (language == "en" && qrng.bernoulli(config.typo_fraction)) {
      typo = make_typo(text, w.lexicon_, qrng);
      if (typo && texts.count(*typo)) typo.reset();
    }
    if (typo) {
      w.typo_table_[*typo] = normalize_text(text);
      texts.insert(normalize_text(text));
      add_query(intent, language, *typo);
    } else {
      add_query(intent, language, text);
    }
  }

  // Traffic weights: a shuffled head slice carries most of the mass.
  {
    std::vector<std::size_t> order(w.queries_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng hrng = Rng::derive(config.seed, "head");
    hrng.shuffle(order);
    const auto n_head = static_cast<std::size_t>(std::llround(config.head_fraction * static_cast<double>(order.size())));
    for (std::size_t i = 0; i < order.size(); ++i) {
      auto& wq = w.queries_[order[i]];
      wq.head = i < n_head;
      wq.weight = wq.head ? config.head_weight : 1.0;
    }
  }
  w.rebuild_indexes();

  // Pair sampler shared by corpus, held-out and guard sets.
  std::map<std::string, std::vector<std::size_t>> by_leaf;
  std::map<std::string, std::vector<std::size_t>> by_dept;
  for (std::size_t i = 0; i < w.products_.size(); ++i) {
    by_leaf[w.products_[i].leaf()].push_back(i);
    by_dept[w.products_[i].category_path.front()].push_back(i);
  }
  auto sample_product = [&](const QueryIntent& intent, Rng& rng) -> const Product& {
    const double u = rng.uniform01();
    if (intent.category) {
      const auto& same = by_leaf[*intent.category];
      if (u < 0.45 && !same.empty()) return w.products_[rng.pick(same)];
      const auto& dept = by_dept[tax.department_of(*intent.category)];
      if (u < 0.70 && !dept.empty()) return w.products_[rng.pick(dept)];
    }
    return w.products_[rng.uniform_int(w.products_.size())];
  };

  const std::vector<std::string> published_predicates = w.oracle_.published.predicates();
  const std::vector<std::string> all_predicates = w.oracle_.all_predicates();
  std::set<std::pair<std::string, std::string>> used_pairs;

  // Initial corpus: oracle labels, then corrupted.
  Rng crng = Rng::derive(config.seed, "corpus");
  std::vector<ClauseVerdict> clean;
  for (const auto& wq : w.queries_) {
    int attempts = 0;
    int added = 0;
    while (added < config.corpus_pairs_per_query && attempts < config.corpus_pairs_per_query * 10) {
      ++attempts;
      const Product& d = sample_product(wq.intent, crng);
      if (!used_pairs.emplace(wq.query.id, d.id).second) continue;
      const ClauseVerdict v = evaluate_clauses(wq.intent, d, all_predicates);
      Sample s;
      s.id = "s-" + zero_pad(static_cast<long long>(w.initial_corpus_.size() + 1), 6);
      s.query = Query{wq.query.id, wq.query.text, wq.query.language, std::nullopt};
      s.product_id = d.id;
      s.label = v.label;
      s.provenance = "initial";
      w.initial_corpus_.push_back(std::move(s));
      clean.push_back(v);
      ++added;
    }
  }

  const auto budget = static_cast<std::size_t>(
      std::llround(config.noise_rate * static_cast<double>(w.initial_corpus_.size())));
  if (budget > 0) {
    // Candidate systematic patterns, ranked by support and interleaved by kind.
    std::map<std::string, std::vector<std::pair<std::size_t, NoisePattern>>> by_kind;
    for (const auto* dept : [&] {
           std::vector<const CategoryNode*> out;
           for (const auto& n : tax.nodes()) {
             if (n.parent.empty()) out.push_back(&n);
           }
           return out;
         }()) {
      std::vector<NoisePattern> candidates{{dept->id, "sibling_category", RelevanceLabel::relevant()},
                                           {dept->id, "brand_conflict", RelevanceLabel::strong()}};
      for (const auto& key : dept->attribute_keys) {
        candidates.push_back({dept->id, "attribute_conflict:" + key, RelevanceLabel::strong()});
      }
      for (const auto& cand : candidates) {
        std::size_t support = 0;
        for (std::size_t i = 0; i < w.initial_corpus_.size(); ++i) {
          const auto& s = w.initial_corpus_[i];
          if (matches_pattern(cand, w.query(s.query.id).intent, w.product(s.product_id), tax, clean[i])) ++support;
        }
        if (support >= 5) {
          const std::string family = cand.kind.rfind("attribute", 0) == 0 ? "attribute" : cand.kind;
          by_kind[family].emplace_back(support, cand);
        }
      }
    }
    for (auto& [kind, list] : by_kind) {
      std::stable_sort(list.begin(), list.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    }
    const std::vector<std::string> kind_order{"sibling_category", "brand_conflict", "attribute"};
    std::map<std::string, std::size_t> cursor;
    while (static_cast<int>(w.noise_patterns_.size()) < config.noise_patterns) {
      bool progressed = false;
      for (const auto& kind : kind_order) {
        if (static_cast<int>(w.noise_patterns_.size()) >= config.noise_patterns) break;
        auto& list = by_kind[kind];
        auto& c = cursor[kind];
        if (c < list.size()) {
          w.noise_patterns_.push_back(list[c++].second);
          progressed = true;
        }
      }
      if (!progressed) break;
    }

    std::vector<bool> corrupted(w.initial_corpus_.size(), false);
    std::size_t used = 0;
    for (const auto& pattern : w.noise_patterns_) {
      for (std::size_t i = 0; i < w.initial_corpus_.size() && used < budget; ++i) {
        if (corrupted[i]) continue;
        auto& s = w.initial_corpus_[i];
        if (!matches_pattern(pattern, w.query(s.query.id).intent, w.product(s.product_id), tax, clean[i])) continue;
        if (s.label == pattern.corrupted_label) continue;
        s.label = pattern.corrupted_label;
        corrupted[i] = true;
        ++used;
      }
    }
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < corrupted.size(); ++i) {
      if (!corrupted[i]) rest.push_back(i);
    }
    Rng nrng = Rng::derive(config.seed, "noise");
    nrng.shuffle(rest);
    for (std::size_t k = 0; k < rest.size() && used < budget; ++k) {
      auto& s = w.initial_corpus_[rest[k]];
      int v = s.label.value();
      int flipped = nrng.bernoulli(0.5) ? v + 1 : v - 1;
      if (flipped < 0) flipped = 1;
      if (flipped > 3) flipped = 2;
      s.label = RelevanceLabel::of(flipped);
      ++used;
    }
  }

  // Held-out and guard pairs, disjoint from the corpus and each other.
  auto draw_pairs = [&](int count, std::string_view tag) {
    std::vector<PairRef> out;
    Rng rng = Rng::derive(config.seed, tag);
    int attempts = 0;
    while (static_cast<int>(out.size()) < count && attempts < count * 20) {
      ++attempts;
      const auto& wq = w.queries_[rng.uniform_int(w.queries_.size())];
      const Product& d = sample_product(wq.intent, rng);
      if (!used_pairs.emplace(wq.query.id, d.id).second) continue;
      out.push_back({wq.query.id, d.id});
    }
    return out;
  };
  w.heldout_ = draw_pairs(config.heldout_pairs, "heldout");
  w.guard_ = draw_pairs(config.guard_pairs, "guard");

  // Hidden-clause reachability.
  bool reachable = false;
  for (const auto& wq : w.queries_) {
    if (!wq.intent.attributes.count("gender")) continue;
    for (const auto& d : w.products_) {
      if (evaluate_clauses(wq.intent, d, all_predicates).label !=
          evaluate_clauses(wq.intent, d, published_predicates).label) {
        reachable = true;
        break;
      }
    }
    if (reachable) break;
  }
  if (!reachable) throw Error(ErrorCode::kInvalidConfig, "no query exercises the hidden clauses");
  return w;
}

void World::rebuild_indexes() {
  product_index_.clear();
  query_index_.clear();
  for (std::size_t i = 0; i < products_.size(); ++i) product_index_.emplace(products_[i].id, i);
  for (std::size_t i = 0; i < queries_.size(); ++i) query_index_.emplace(queries_[i].query.id, i);
}

const Product& World::product(std::string_view id) const {
  auto it = product_index_.find(id);
  if (it == product_index_.end()) throw Error(ErrorCode::kUnknownEntity, "unknown product " + std::string(id));
  return products_[it->second];
}

bool World::has_product(std::string_view id) const { return product_index_.find(id) != product_index_.end(); }

const Product& World::serving_product(std::string_view id) const {
  auto it = product_index_.find(id);
  if (it == product_index_.end()) throw Error(ErrorCode::kUnknownEntity, "unknown product " + std::string(id));
  return serving_products_[it->second];
}

std::optional<FeatureDefect> World::defect(std::string_view id) const {
  auto it = defects_.find(std::string(id));
  if (it == defects_.end()) return std::nullopt;
  return it->second;
}

const WorldQuery* World::find_query(std::string_view id) const {
  auto it = query_index_.find(id);
  return it == query_index_.end() ? nullptr : &queries_[it->second];
}

const WorldQuery& World::query(std::string_view id) const {
  const WorldQuery* q = find_query(id);
  if (!q) throw Error(ErrorCode::kUnknownEntity, "unknown query " + std::string(id));
  return *q;
}

QueryIntent World::intent_of(const Query& q) const {
  if (const WorldQuery* wq = find_query(q.id); wq && wq->query.text == q.text) return wq->intent;
  QueryIntent intent;
  intent.tokens = tokenize(q.text);
  std::string normalized = join(intent.tokens, " ");
  if (auto it = typo_table_.find(normalized); it != typo_table_.end()) normalized = it->second;
  const auto tokens = tokenize(normalized);
  const LexiconMatch m = lexicon_.match(tokens);
  if (!m.categories.empty()) intent.category = m.categories.front();
  intent.brand = m.brand;
  intent.attributes = m.attributes;
  for (const auto& [entity, fact] : knowledge_) {
    if (std::find(tokens.begin(), tokens.end(), entity) == tokens.end()) continue;
    intent.entity = entity;
    if (!intent.category) intent.category = fact.category;
    for (const auto& [k, v] : fact.attributes) intent.attributes.emplace(k, v);
    break;
  }
  return intent;
}

RelevanceLabel World::oracle_label(const Query& q, const Product& d) const {
  return oracle_label(q, std::string_view(d.id));
}

RelevanceLabel World::oracle_label(const Query& q, std::string_view product_id) const {
  const Product& pristine = product(product_id);
  oracle_calls_->fetch_add(1);
  return evaluate_clauses(intent_of(q), pristine, oracle_.all_predicates()).label;
}

ClauseVerdict World::judge(const QueryIntent& intent, std::string_view product_id,
                           const std::vector<std::string>& predicates) const {
  return evaluate_clauses(intent, product(product_id), predicates);
}

std::vector<std::string> World::visual_tags(const Product& d) const {
  std::vector<std::string> tags;
  if (auto it = d.attributes.find("color"); it != d.attributes.end()) tags.push_back(it->second);
  if (auto it = d.attributes.find("material"); it != d.attributes.end()) tags.push_back(it->second);
  if (const CategoryNode* leaf = taxonomy().find(d.leaf())) tags.push_back(leaf->visual_class);
  std::sort(tags.begin(), tags.end());
  tags.erase(std::unique(tags.begin(), tags.end()), tags.end());
  return tags;
}

ToolResult World::simulate_tool(const ToolCall& call) const {
  const ToolName tool = tool_from(call.tool_name);
  std::size_t top_n = kDefaultTopN;
  if (auto it = call.parameters.find("top_n"); it != call.parameters.end()) {
    top_n = static_cast<std::size_t>(std::max(1, std::stoi(it->second)));
  }
  auto param = [&](const char* key) {
    auto it = call.parameters.find(key);
    return it == call.parameters.end() ? std::string() : it->second;
  };
  ToolResult result;
  result.tool = tool;
  auto finish = [&](std::vector<ToolHit> hits) {
    std::stable_sort(hits.begin(), hits.end(), [](const ToolHit& a, const ToolHit& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.ref < b.ref;
    });
    if (hits.size() > top_n) hits.resize(top_n);
    result.hits = std::move(hits);
    return result;
  };

  switch (tool) {
    case ToolName::kEcomSearch: {
      const auto tokens = tokenize(param("query"));
      if (tokens.empty()) throw Error(ErrorCode::kInvalidQuery, "ecom_search needs a non-empty query");
      std::set<std::string> qset(tokens.begin(), tokens.end());
      const LexiconMatch m = lexicon_.match(tokens);
      const std::size_t struct_total = m.categories.size() + (m.brand ? 1 : 0) + m.attributes.size();
      const Taxonomy& tax = taxonomy();
      std::vector<ToolHit> hits;
      for (const auto& d : serving_products_) {
        std::set<std::string> ptokens;
        for (auto& t : tokenize(d.title)) ptokens.insert(std::move(t));
        if (const CategoryNode* leaf = tax.find(d.leaf())) {
          for (const auto& [lang, names] : leaf->names) {
            for (const auto& n : names) {
              for (auto& t : tokenize(n)) ptokens.insert(std::move(t));
            }
          }
        }
        if (d.brand) ptokens.insert(*d.brand);
        std::size_t overlap = 0;
        for (const auto& t : qset) overlap += ptokens.count(t);
        const double lexical = static_cast<double>(overlap) / static_cast<double>(qset.size());
        double score = lexical;
        if (struct_total > 0) {
          std::size_t matched = 0;
          for (const auto& c : m.categories) matched += d.in_category(c) ? 1 : 0;
          if (m.brand && d.brand == m.brand) ++matched;
          for (const auto& [k, v] : m.attributes) {
            auto it = d.attributes.find(k);
            if (it != d.attributes.end() && it->second == v) ++matched;
          }
          score = 0.5 * lexical + 0.5 * static_cast<double>(matched) / static_cast<double>(struct_total);
        }
        if (score <= 0.0) continue;
        ToolHit hit;
        hit.ref = d.id;
        hit.score = score;
        hit.snippet = d.title;
        hits.push_back(std::move(hit));
      }
      return finish(std::move(hits));
    }
    case ToolName::kWebSearch: {
      const auto tokens = tokenize(param("query"));
      if (tokens.empty()) throw Error(ErrorCode::kInvalidQuery, "web_search needs a non-empty query");
      std::vector<ToolHit> hits;
      for (const auto& [entity, fact] : knowledge_) {
        if (std::find(tokens.begin(), tokens.end(), entity) == tokens.end()) continue;
        ToolHit hit;
        hit.ref = entity;
        hit.score = 1.0;
        hit.snippet = fact.text;
        hit.image_refs = {fact.image_ref};
        hit.visual_tags = fact.visual_tags;
        hit.category_hint = fact.category;
        hit.attributes = fact.attributes;
        hits.push_back(std::move(hit));
      }
      return finish(std::move(hits));
    }
    case ToolName::kImageSearch: {
      const std::string ref = param("image_ref");
      auto it = images_.find(ref);
      if (it == images_.end()) throw Error(ErrorCode::kInvalidQuery, "unknown image reference '" + ref + "'");
      const std::set<std::string> want(it->second.begin(), it->second.end());
      std::vector<ToolHit> hits;
      for (const auto& d : serving_products_) {
        const auto tags = visual_tags(d);
        std::size_t inter = 0;
        for (const auto& t : tags) inter += want.count(t);
        if (inter == 0) continue;
        const double jaccard = static_cast<double>(inter) / static_cast<double>(want.size() + tags.size() - inter);
        ToolHit hit;
        hit.ref = d.id;
        hit.score = jaccard;
        hit.snippet = d.title;
        hit.visual_tags = tags;
        hits.push_back(std::move(hit));
      }
      return finish(std::move(hits));
    }
  }
  return result;
}

std::string World::compose_query_text(const QueryIntent& intent, std::string_view language) const {
  const Taxonomy& tax = taxonomy();
  const std::string lang(language);
  auto value_name = [&](const std::string& key, const std::string& v) {
    const AttributeValueDef* def = tax.find_value(key, v);
    auto it = def->names.find(lang);
    if (it == def->names.end()) it = def->names.find("en");
    return it->second.front();
  };
  if (intent.entity) {
    return lang == "es" ? "disfraz de " + *intent.entity : *intent.entity + " costume";
  }
  std::vector<std::string> parts;
  if (lang == "es") {
    if (intent.category) parts.push_back(tax.display_name(*intent.category, "es"));
    for (const auto& [k, v] : intent.attributes) parts.push_back(value_name(k, v));
    if (intent.brand) parts.push_back(*intent.brand);
  } else {
    if (intent.brand) parts.push_back(*intent.brand);
    for (const auto& [k, v] : intent.attributes) parts.push_back(value_name(k, v));
    if (intent.category) parts.push_back(tax.display_name(*intent.category, "en"));
  }
  return join(parts, " ");
}

// ---------------------------------------------------------------------------
// Export / import

namespace {

std::vector<Json> query_records(std::span<const WorldQuery> queries) {
  std::vector<Json> out;
  for (const auto& wq : queries) {
    out.push_back(Json{{"query", wq.query}, {"intent", intent_json(wq.intent)}, {"weight", wq.weight}, {"head", wq.head}});
  }
  return out;
}

}  // namespace

void World::export_to(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  write_records(dir / "config.jsonl", {config_json(config_)});
  write_records(dir / "products.jsonl", to_records(products_));
  write_records(dir / "serving_products.jsonl", to_records(serving_products_));
  std::vector<Json> defects;
  for (const auto& [id, d] : defects_) defects.push_back(Json{{"product_id", id}, {"defect", to_string(d)}});
  write_records(dir / "defects.jsonl", defects);
  write_records(dir / "queries.jsonl", query_records(queries_));
  std::vector<Json> typos;
  for (const auto& [typo, fixed] : typo_table_) typos.push_back(Json{{"query", typo}, {"corrected", fixed}});
  write_records(dir / "typos.jsonl", typos);
  std::vector<Json> facts;
  for (const auto& [entity, f] : knowledge_) {
    facts.push_back(Json{{"entity", f.entity},
                         {"text", f.text},
                         {"visual_tags", f.visual_tags},
                         {"image_ref", f.image_ref},
                         {"category", f.category},
                         {"attributes", f.attributes}});
  }
  write_records(dir / "knowledge.jsonl", facts);
  std::vector<Json> images;
  for (const auto& [ref, tags] : images_) images.push_back(Json{{"image_ref", ref}, {"visual_tags", tags}});
  write_records(dir / "images.jsonl", images);
  write_records(dir / "standards.jsonl", {Json(oracle_.published)});
  write_records(dir / "hidden_clauses.jsonl", to_records(oracle_.hidden_clauses));
  write_records(dir / "corpus.jsonl", to_records(initial_corpus_));
  std::vector<Json> patterns;
  for (const auto& p : noise_patterns_) {
    patterns.push_back(Json{{"scope", p.scope}, {"kind", p.kind}, {"corrupted_label", p.corrupted_label}});
  }
  write_records(dir / "noise_patterns.jsonl", patterns);
  auto pairs = [](const std::vector<PairRef>& v) {
    std::vector<Json> out;
    for (const auto& p : v) out.push_back(Json{{"query_id", p.query_id}, {"product_id", p.product_id}});
    return out;
  };
  write_records(dir / "heldout.jsonl", pairs(heldout_));
  write_records(dir / "guard.jsonl", pairs(guard_));
}

World World::import_from(const std::filesystem::path& dir) {
  World w;
  w.config_ = config_from(read_records(dir / "config.jsonl").at(0));
  w.lexicon_ = Lexicon::from_taxonomy(Taxonomy::builtin());
  w.products_ = from_records<Product>(read_records(dir / "products.jsonl"));
  w.serving_products_ = from_records<Product>(read_records(dir / "serving_products.jsonl"));
  for (const auto& r : read_records(dir / "defects.jsonl")) {
    w.defects_[r.at("product_id").get<std::string>()] = feature_defect_from(r.at("defect").get<std::string>());
  }
  for (const auto& r : read_records(dir / "queries.jsonl")) {
    WorldQuery wq;
    wq.query = r.at("query").get<Query>();
    wq.intent = intent_from(r.at("intent"));
    wq.weight = r.at("weight").get<double>();
    wq.head = r.at("head").get<bool>();
    w.queries_.push_back(std::move(wq));
  }
  for (const auto& r : read_records(dir / "typos.jsonl")) {
    w.typo_table_[r.at("query").get<std::string>()] = r.at("corrected").get<std::string>();
  }
  for (const auto& r : read_records(dir / "knowledge.jsonl")) {
    KnowledgeFact f;
    f.entity = r.at("entity").get<std::string>();
    f.text = r.at("text").get<std::string>();
    f.visual_tags = r.at("visual_tags").get<std::vector<std::string>>();
    f.image_ref = r.at("image_ref").get<std::string>();
    f.category = r.at("category").get<std::string>();
    f.attributes = r.at("attributes").get<AttributeMap>();
    w.knowledge_[f.entity] = f;
  }
  for (const auto& r : read_records(dir / "images.jsonl")) {
    w.images_[r.at("image_ref").get<std::string>()] = r.at("visual_tags").get<std::vector<std::string>>();
  }
  w.oracle_.published = read_records(dir / "standards.jsonl").at(0).get<StandardsDoc>();
  w.oracle_.hidden_clauses = from_records<Clause>(read_records(dir / "hidden_clauses.jsonl"));
  w.initial_corpus_ = from_records<Sample>(read_records(dir / "corpus.jsonl"));
  for (const auto& r : read_records(dir / "noise_patterns.jsonl")) {
    w.noise_patterns_.push_back(
        {r.at("scope").get<std::string>(), r.at("kind").get<std::string>(), r.at("corrupted_label").get<RelevanceLabel>()});
  }
  auto pairs = [](const std::vector<Json>& records) {
    std::vector<PairRef> out;
    for (const auto& r : records) out.push_back({r.at("query_id").get<std::string>(), r.at("product_id").get<std::string>()});
    return out;
  };
  w.heldout_ = pairs(read_records(dir / "heldout.jsonl"));
  w.guard_ = pairs(read_records(dir / "guard.jsonl"));
  w.rebuild_indexes();
  return w;
}

std::string World::digest() const {
  std::uint64_t h = fnv1a("caseloop-world");
  auto feed = [&](const std::vector<Json>& records) {
    for (const auto& r : records) {
      h = fnv1a(r.dump(), h);
      h = fnv1a("\n", h);
    }
  };
  feed({config_json(config_)});
  feed(to_records(products_));
  feed(to_records(serving_products_));
  for (const auto& [id, d] : defects_) h = fnv1a(id + ":" + std::string(to_string(d)), h);
  feed(query_records(queries_));
  for (const auto& [typo, fixed] : typo_table_) h = fnv1a(typo + "=>" + fixed, h);
  for (const auto& [entity, f] : knowledge_) h = fnv1a(entity + f.text + f.image_ref, h);
  feed({Json(oracle_.published)});
  feed(to_records(oracle_.hidden_clauses));
  feed(to_records(initial_corpus_));
  for (const auto& p : noise_patterns_) h = fnv1a(p.scope + p.kind, h);
  for (const auto& p : heldout_) h = fnv1a(p.query_id + p.product_id, h);
  for (const auto& p : guard_) h = fnv1a(p.query_id + p.product_id, h);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace caseloop::world
