#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "caseloop/core/types.hpp"

namespace caseloop::world {

class Taxonomy;

enum class LexiconKind { kCategory, kBrand, kAttribute };

struct LexiconEntry {
  LexiconKind kind;
  std::string id;     // category id, brand, or attribute key
  std::string value;  // attribute value; empty otherwise
  std::string language;
};

struct LexiconMatch {
  std::vector<std::string> categories;
  std::optional<std::string> brand;
  AttributeMap attributes;
  std::vector<std::string> residual;
  std::vector<std::string> languages;  // languages of matched phrases
};

// Phrase dictionary over normalized token sequences with greedy longest match.
class Lexicon {
 public:
  static Lexicon from_taxonomy(const Taxonomy& taxonomy);

  void add(const std::string& phrase, LexiconEntry entry);
  LexiconMatch match(const std::vector<std::string>& tokens) const;
  std::size_t size() const { return entries_.size(); }
  const std::map<std::string, LexiconEntry>& entries() const { return entries_; }

 private:
  std::map<std::string, LexiconEntry> entries_;  // key: space-joined tokens
  std::size_t max_tokens_ = 1;
};

}  // namespace caseloop::world
