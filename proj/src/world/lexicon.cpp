#include "caseloop/world/lexicon.hpp"

#include <algorithm>

#include "caseloop/core/text.hpp"
#include "caseloop/world/catalog.hpp"

namespace caseloop::world {

Lexicon Lexicon::from_taxonomy(const Taxonomy& taxonomy) {
  Lexicon lex;
  for (const auto& node : taxonomy.nodes()) {
    if (!node.parent.empty()) {
      for (const auto& [lang, names] : node.names) {
        for (const auto& name : names) lex.add(name, {LexiconKind::kCategory, node.id, "", lang});
      }
    }
    for (const auto& brand : node.brands) lex.add(brand, {LexiconKind::kBrand, brand, "", "en"});
  }
  for (const auto& v : taxonomy.attribute_values()) {
    for (const auto& [lang, names] : v.names) {
      for (const auto& name : names) lex.add(name, {LexiconKind::kAttribute, v.key, v.value, lang});
    }
  }
  return lex;
}

void Lexicon::add(const std::string& phrase, LexiconEntry entry) {
  const auto tokens = tokenize(phrase);
  if (tokens.empty()) return;
  max_tokens_ = std::max(max_tokens_, tokens.size());
  entries_.emplace(join(tokens, " "), std::move(entry));
}

LexiconMatch Lexicon::match(const std::vector<std::string>& tokens) const {
  LexiconMatch out;
  std::size_t i = 0;
  while (i < tokens.size()) {
    bool matched = false;
    for (std::size_t len = std::min(max_tokens_, tokens.size() - i); len >= 1; --len) {
      std::vector<std::string> span(tokens.begin() + static_cast<long>(i), tokens.begin() + static_cast<long>(i + len));
      auto it = entries_.find(join(span, " "));
      if (it == entries_.end()) continue;
      const LexiconEntry& e = it->second;
      switch (e.kind) {
        case LexiconKind::kCategory:
          if (std::find(out.categories.begin(), out.categories.end(), e.id) == out.categories.end()) {
            out.categories.push_back(e.id);
          }
          break;
        case LexiconKind::kBrand:
          if (!out.brand) out.brand = e.id;
          break;
        case LexiconKind::kAttribute:
          out.attributes.emplace(e.id, e.value);
          break;
      }
      if (std::find(out.languages.begin(), out.languages.end(), e.language) == out.languages.end()) {
        out.languages.push_back(e.language);
      }
      i += len;
      matched = true;
      break;
    }
    if (!matched) {
      out.residual.push_back(tokens[i]);
      ++i;
    }
  }
  return out;
}

}  // namespace caseloop::world
