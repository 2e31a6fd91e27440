#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "caseloop/model/model.hpp"

namespace caseloop::model {

struct Hit {
  std::string product_id;
  double score = 0.0;
};

struct RetrieveResult {
  std::vector<Hit> hits;
  bool truncated = false;  // k exceeded the index size
};

// Exhaustive cosine index over product embeddings. Ties break by product id.
class ProductIndex {
 public:
  static ProductIndex build(const RelevanceModel& model, const std::vector<Product>& products);

  std::size_t size() const { return ids_.size(); }
  const std::string& version() const { return version_; }
  RetrieveResult retrieve(const std::vector<double>& query, std::size_t k) const;
  RetrieveResult retrieve(const RelevanceModel& model, const Query& q, std::size_t k) const;

  // Header line {version, dim, size}, then one {id, vector} line per product.
  void save(const std::filesystem::path& path) const;
  static ProductIndex load(const std::filesystem::path& path);

 private:
  std::string version_;
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::vector<double> vectors_;
};

}  // namespace caseloop::model
