#include "caseloop/world/catalog.hpp"

#include <algorithm>

#include "caseloop/core/error.hpp"

namespace caseloop::world {
namespace {

CategoryNode dept_node(std::string id, std::string en, std::string es, std::vector<std::string> keys,
                        std::vector<std::string> brands) {
  return CategoryNode{std::move(id), "", {{"en", {std::move(en)}}, {"es", {std::move(es)}}}, "",
                      std::move(keys), std::move(brands)};
}

CategoryNode leaf(std::string id, std::string parent, std::vector<std::string> en, std::vector<std::string> es,
                  std::string visual) {
  return CategoryNode{std::move(id), std::move(parent), {{"en", std::move(en)}, {"es", std::move(es)}},
                      std::move(visual), {}, {}};
}

AttributeValueDef value(std::string key, std::string v, std::vector<std::string> en, std::vector<std::string> es,
                        std::string title_word) {
  return AttributeValueDef{std::move(key), std::move(v), {{"en", std::move(en)}, {"es", std::move(es)}},
                           std::move(title_word)};
}

}  // namespace

const Taxonomy& Taxonomy::builtin() {
  static const Taxonomy kTaxonomy;
  return kTaxonomy;
}

Taxonomy::Taxonomy() {
  nodes_ = {
      dept_node("footwear", "footwear", "calzado", {"color", "gender", "style", "material"},
                 {"nike", "adidas", "puma", "asics", "reebok"}),
      leaf("basketball-shoes", "footwear", {"basketball shoes"}, {"zapatillas de baloncesto"}, "shoe"),
      leaf("soccer-shoes", "footwear", {"soccer shoes"}, {"botas de futbol"}, "shoe"),
      leaf("running-shoes", "footwear", {"running shoes"}, {"zapatillas para correr"}, "shoe"),
      leaf("sandals", "footwear", {"sandals"}, {"sandalias"}, "shoe"),
      leaf("boots", "footwear", {"boots"}, {"botas"}, "shoe"),

      dept_node("womens-tops", "womens tops", "tops de mujer", {"color", "fit", "material"},
                 {"zara", "mango", "shein", "uniqlo", "gap"}),
      leaf("womens-blouses", "womens-tops", {"womens blouses", "blouses"}, {"blusas de mujer", "blusas"}, "top"),
      leaf("womens-tanks-camis", "womens-tops", {"womens tanks and camis", "camis", "tank tops"},
           {"camisetas de tirantes de mujer", "camisetas de tirantes"}, "top"),
      leaf("womens-tshirts", "womens-tops", {"womens t shirts", "t shirts"}, {"camisetas de mujer", "camisetas"},
           "top"),
      leaf("womens-sweaters", "womens-tops", {"womens sweaters", "sweaters"}, {"sueteres de mujer", "sueteres"},
           "top"),
      leaf("dresses", "womens-tops", {"dresses"}, {"vestidos"}, "dress"),

      dept_node("electronics", "electronics", "electronica", {"color", "connectivity", "material"},
                 {"sony", "samsung", "anker", "jbl", "xiaomi"}),
      leaf("headphones", "electronics", {"headphones"}, {"auriculares"}, "device"),
      leaf("phone-cases", "electronics", {"phone cases"}, {"fundas de telefono"}, "device"),
      leaf("chargers", "electronics", {"chargers"}, {"cargadores"}, "device"),
      leaf("smartwatches", "electronics", {"smart watches"}, {"relojes inteligentes"}, "device"),
      leaf("speakers", "electronics", {"speakers"}, {"altavoces"}, "device"),

      dept_node("costumes-party", "costumes and party", "disfraces y fiesta", {"color", "material", "gender"},
                 {"rubies", "disguise", "spirit"}),
      leaf("costumes", "costumes-party", {"costumes"}, {"disfraces"}, "costume"),
      leaf("masks", "costumes-party", {"masks"}, {"mascaras"}, "mask"),
      leaf("wigs", "costumes-party", {"wigs"}, {"pelucas"}, "wig"),

      dept_node("home", "home", "hogar", {"color", "material"}, {"ikea", "muji", "yeti"}),
      leaf("blankets", "home", {"blankets"}, {"mantas"}, "blanket"),
      leaf("pillows", "home", {"pillows"}, {"almohadas"}, "pillow"),
      leaf("mugs", "home", {"mugs"}, {"tazas"}, "mug"),
      leaf("lamps", "home", {"lamps"}, {"lamparas"}, "lamp"),
  };

  values_ = {
      value("color", "red", {"red"}, {"rojo", "roja"}, "Red"),
      value("color", "blue", {"blue"}, {"azul"}, "Blue"),
      value("color", "black", {"black"}, {"negro", "negra"}, "Black"),
      value("color", "white", {"white"}, {"blanco", "blanca"}, "White"),
      value("color", "green", {"green"}, {"verde"}, "Green"),
      value("color", "orange", {"orange"}, {"naranja"}, "Orange"),
      value("color", "pink", {"pink"}, {"rosa"}, "Pink"),
      value("color", "yellow", {"yellow"}, {"amarillo", "amarilla"}, "Yellow"),
      value("gender", "women", {"womens", "women"}, {"mujer"}, "Women's"),
      value("gender", "men", {"mens", "men"}, {"hombre"}, "Men's"),
      value("gender", "kids", {"kids"}, {"ninos"}, "Kids"),
      value("style", "high-top", {"high top"}, {"cana alta"}, "High-Top"),
      value("style", "low-top", {"low top"}, {"cana baja"}, "Low-Top"),
      value("material", "leather", {"leather"}, {"cuero"}, "Leather"),
      value("material", "mesh", {"mesh"}, {"malla"}, "Mesh"),
      value("material", "cotton", {"cotton"}, {"algodon"}, "Cotton"),
      value("material", "silk", {"silk"}, {"seda"}, "Silk"),
      value("material", "furry", {"furry"}, {"peludo", "peluda"}, "Furry"),
      value("material", "satin", {"satin"}, {"saten"}, "Satin"),
      value("material", "denim", {"denim"}, {"mezclilla"}, "Denim"),
      value("material", "plastic", {"plastic"}, {"plastico"}, "Plastic"),
      value("material", "metal", {"metal"}, {"metalico"}, "Metal"),
      value("material", "ceramic", {"ceramic"}, {"ceramica"}, "Ceramic"),
      value("material", "wool", {"wool"}, {"lana"}, "Wool"),
      value("fit", "sexy", {"sexy"}, {"sexy"}, "Sexy"),
      value("fit", "casual", {"casual"}, {"informal"}, "Casual"),
      value("fit", "formal", {"formal"}, {"elegante"}, "Formal"),
      value("connectivity", "wireless", {"wireless"}, {"inalambrico", "inalambricos"}, "Wireless"),
      value("connectivity", "wired", {"wired"}, {"con cable"}, "Wired"),
  };
}

std::vector<const CategoryNode*> Taxonomy::leaves() const {
  std::vector<const CategoryNode*> out;
  for (const auto& n : nodes_) {
    if (!n.parent.empty()) out.push_back(&n);
  }
  return out;
}

const CategoryNode* Taxonomy::find(std::string_view id) const {
  for (const auto& n : nodes_) {
    if (n.id == id) return &n;
  }
  return nullptr;
}

std::vector<std::string> Taxonomy::path_to(std::string_view id) const {
  std::vector<std::string> path;
  const CategoryNode* node = find(id);
  if (!node) throw Error(ErrorCode::kUnknownEntity, "unknown category " + std::string(id));
  while (node) {
    path.push_back(node->id);
    node = node->parent.empty() ? nullptr : find(node->parent);
  }
  std::reverse(path.begin(), path.end());
  return path;
}

std::string Taxonomy::department_of(std::string_view leaf) const { return path_to(leaf).front(); }

const CategoryNode& Taxonomy::department(std::string_view leaf) const { return *find(department_of(leaf)); }

bool Taxonomy::is_valid_path(const std::vector<std::string>& path) const {
  if (path.empty()) return false;
  const CategoryNode* node = find(path.back());
  if (!node) return false;
  try {
    return path_to(path.back()) == path;
  } catch (const Error&) {
    return false;
  }
}

std::vector<const AttributeValueDef*> Taxonomy::values_of(std::string_view key) const {
  std::vector<const AttributeValueDef*> out;
  for (const auto& v : values_) {
    if (v.key == key) out.push_back(&v);
  }
  return out;
}

const AttributeValueDef* Taxonomy::find_value(std::string_view key, std::string_view v) const {
  for (const auto& def : values_) {
    if (def.key == key && def.value == v) return &def;
  }
  return nullptr;
}

std::string Taxonomy::display_name(std::string_view category, std::string_view language) const {
  const CategoryNode* node = find(category);
  if (!node) throw Error(ErrorCode::kUnknownEntity, "unknown category " + std::string(category));
  auto it = node->names.find(std::string(language));
  if (it == node->names.end() || it->second.empty()) it = node->names.find("en");
  return it->second.front();
}

}  // namespace caseloop::world
