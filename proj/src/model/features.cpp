#include "caseloop/model/features.hpp"

#include <algorithm>
#include <set>

#include "caseloop/core/hash.hpp"
#include "caseloop/core/text.hpp"
#include "caseloop/world/catalog.hpp"

namespace caseloop::model {
namespace {

const std::array<const char*, 6> kKeys{"color", "gender", "style", "material", "fit", "connectivity"};
const std::array<const char*, 5> kDepartments{"footwear", "womens-tops", "electronics", "costumes-party", "home"};

std::size_t department_slot(const std::string& dept) {
  for (std::size_t i = 0; i < kDepartments.size(); ++i) {
    if (dept == kDepartments[i]) return i;
  }
  return kDepartments.size();
}

std::string department_of(const std::string& category) {
  const auto& tax = world::Taxonomy::builtin();
  if (!tax.find(category)) return {};
  return tax.department_of(category);
}

}  // namespace

QueryParser::QueryParser(world::Lexicon lexicon, std::map<std::string, std::string> typo_table)
    : lexicon_(std::move(lexicon)), typo_table_(std::move(typo_table)) {}

QueryStructure QueryParser::parse(const Query& q) const {
  QueryStructure s;
  auto tokens = tokenize(q.text);
  if (auto it = typo_table_.find(join(tokens, " ")); it != typo_table_.end()) {
    s.corrected_text = it->second;
    tokens = tokenize(it->second);
  }
  const world::LexiconMatch m = lexicon_.match(tokens);
  s.category_intent = m.categories;
  s.brand = m.brand;
  s.attributes = m.attributes;
  s.residual_terms = m.residual;
  return s;
}

Query QueryParser::understand(const Query& q) const {
  Query out = q;
  out.structure = parse(q);
  return out;
}

Corpus augment_corrections(const Corpus& corpus, const std::map<std::string, std::string>& typo_table) {
  Corpus out = corpus;
  for (const auto& s : corpus) {
    auto it = typo_table.find(normalize_text(s.query.text));
    if (it == typo_table.end()) continue;
    Sample copy = s;
    copy.id = s.id + "#c";
    copy.query.id = s.query.id + "#c";
    copy.query.text = it->second;
    copy.query.structure.reset();
    copy.provenance = "correction";
    out.push_back(std::move(copy));
  }
  return out;
}

std::uint32_t feature_id(std::string_view name) {
  return static_cast<std::uint32_t>(fnv1a(name) % kHashDim);
}

std::vector<std::string> query_feature_names(const Query& q, const QueryStructure& s) {
  std::vector<std::string> out;
  for (const auto& t : tokenize(q.text)) out.push_back("t:" + t);
  for (const auto& c : s.category_intent) {
    out.push_back("c:" + c);
    const std::string dept = department_of(c);
    if (!dept.empty()) out.push_back("p:" + dept);
  }
  if (s.brand) out.push_back("b:" + *s.brand);
  for (const auto& [k, v] : s.attributes) out.push_back("a:" + k + "=" + v);
  if (!out.empty()) out.push_back("lang:" + q.language);
  return out;
}

std::vector<std::string> product_feature_names(const Product& d) {
  std::vector<std::string> out;
  for (const auto& t : tokenize(d.title)) out.push_back("t:" + t);
  out.push_back("c:" + d.leaf());
  out.push_back("p:" + d.category_path.front());
  if (d.brand) out.push_back("b:" + *d.brand);
  for (const auto& [k, v] : d.attributes) out.push_back("a:" + k + "=" + v);
  return out;
}

FeatureIds hash_features(const std::vector<std::string>& names) {
  FeatureIds out;
  out.reserve(names.size());
  for (const auto& n : names) out.push_back(feature_id(n));
  return out;
}

CrossFeatures cross_features(const Query& q, const QueryStructure& s, const Product& d) {
  CrossFeatures x{};
  x[0] = 1.0;
  const std::string product_dept = d.category_path.front();
  if (!s.category_intent.empty()) {
    x[1] = 1.0;
    const bool leaf = std::any_of(s.category_intent.begin(), s.category_intent.end(),
                                  [&](const auto& c) { return d.in_category(c); });
    const bool dept = std::any_of(s.category_intent.begin(), s.category_intent.end(),
                                  [&](const auto& c) { return department_of(c) == product_dept; });
    if (leaf) {
      x[2] = 1.0;
    } else if (dept) {
      x[3] = 1.0;
    } else {
      x[4] = 1.0;
    }
    const std::size_t slot = department_slot(department_of(s.category_intent.front()));
    if (slot < kDepartments.size()) x[22 + slot] = 1.0;
  }
  if (s.brand) {
    x[5] = 1.0;
    if (!d.brand) {
      x[8] = 1.0;
    } else if (*d.brand == *s.brand) {
      x[6] = 1.0;
    } else {
      x[7] = 1.0;
    }
  }
  double matched = 0, conflicting = 0, unknown = 0;
  for (const auto& [k, v] : s.attributes) {
    auto it = d.attributes.find(k);
    if (it == d.attributes.end()) {
      ++unknown;
    } else if (it->second == v) {
      ++matched;
    } else {
      ++conflicting;
      for (std::size_t i = 0; i < kKeys.size(); ++i) {
        if (k == kKeys[i]) x[13 + i] = 1.0;
      }
    }
  }
  x[9] = static_cast<double>(s.attributes.size()) / 3.0;
  x[10] = matched / 3.0;
  x[11] = conflicting / 3.0;
  x[12] = unknown / 3.0;

  const auto qtokens = tokenize(s.corrected_text ? *s.corrected_text : q.text);
  const auto title = tokenize(d.title);
  const std::set<std::string> title_set(title.begin(), title.end());
  std::size_t overlap = 0;
  for (const auto& t : qtokens) overlap += title_set.count(t);
  if (!qtokens.empty()) x[19] = static_cast<double>(overlap) / static_cast<double>(qtokens.size());
  x[20] = overlap > 0 ? 1.0 : 0.0;
  x[21] = s.empty() ? 1.0 : 0.0;
  const std::size_t pslot = department_slot(product_dept);
  if (pslot < kDepartments.size()) x[27 + pslot] = 1.0;
  return x;
}

}  // namespace caseloop::model
