#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace caseloop::world {

// Localized surface forms; the first entry per language is the display name.
using LocalizedNames = std::map<std::string, std::vector<std::string>>;

struct CategoryNode {
  std::string id;
  std::string parent;  // empty for departments
  LocalizedNames names;
  std::string visual_class;
  std::vector<std::string> attribute_keys;  // departments only
  std::vector<std::string> brands;          // departments only
};

struct AttributeValueDef {
  std::string key;
  std::string value;
  LocalizedNames names;
  std::string title_word;  // how the value appears in product titles
};

// Static category tree, attribute vocabulary and brands.
class Taxonomy {
 public:
  static const Taxonomy& builtin();

  const std::vector<CategoryNode>& nodes() const { return nodes_; }
  std::vector<const CategoryNode*> leaves() const;
  const CategoryNode* find(std::string_view id) const;
  // Root-to-leaf path of ids. Throws kUnknownEntity.
  std::vector<std::string> path_to(std::string_view id) const;
  std::string department_of(std::string_view leaf) const;
  const CategoryNode& department(std::string_view leaf) const;
  bool is_valid_path(const std::vector<std::string>& path) const;

  const std::vector<AttributeValueDef>& attribute_values() const { return values_; }
  std::vector<const AttributeValueDef*> values_of(std::string_view key) const;
  const AttributeValueDef* find_value(std::string_view key, std::string_view value) const;
  std::string display_name(std::string_view category, std::string_view language = "en") const;

 private:
  Taxonomy();
  std::vector<CategoryNode> nodes_;
  std::vector<AttributeValueDef> values_;
};

}  // namespace caseloop::world
