#include "caseloop/model/index.hpp"

#include <algorithm>

#include "caseloop/core/error.hpp"
#include "caseloop/core/records.hpp"

namespace caseloop::model {

ProductIndex ProductIndex::build(const RelevanceModel& model, const std::vector<Product>& products) {
  ProductIndex idx;
  idx.version_ = model.checkpoint().version;
  idx.dim_ = model.checkpoint().dims.embed;
  idx.ids_.reserve(products.size());
  idx.vectors_.reserve(products.size() * idx.dim_);
  for (const auto& p : products) {
    idx.ids_.push_back(p.id);
    const auto v = model.encode(p);
    idx.vectors_.insert(idx.vectors_.end(), v.begin(), v.end());
  }
  return idx;
}

RetrieveResult ProductIndex::retrieve(const std::vector<double>& query, std::size_t k) const {
  if (query.size() != dim_) throw Error(ErrorCode::kInvalidArgument, "query embedding dimension");
  RetrieveResult out;
  out.truncated = k > ids_.size();
  k = std::min(k, ids_.size());
  std::vector<Hit> all;
  all.reserve(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    double s = 0.0;
    const double* v = vectors_.data() + i * dim_;
    for (std::size_t j = 0; j < dim_; ++j) s += v[j] * query[j];
    all.push_back({ids_[i], s});
  }
  auto order = [](const Hit& a, const Hit& b) { return a.score != b.score ? a.score > b.score : a.product_id < b.product_id; };
  std::partial_sort(all.begin(), all.begin() + static_cast<long>(k), all.end(), order);
  all.resize(k);
  out.hits = std::move(all);
  return out;
}

RetrieveResult ProductIndex::retrieve(const RelevanceModel& model, const Query& q, std::size_t k) const {
  return retrieve(model.encode(q), k);
}

void ProductIndex::save(const std::filesystem::path& path) const {
  std::vector<Json> rows;
  rows.push_back(Json{{"version", version_}, {"dim", dim_}, {"size", ids_.size()}});
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    rows.push_back(Json{{"id", ids_[i]},
                        {"vector", std::vector<double>(vectors_.begin() + static_cast<std::ptrdiff_t>(i * dim_),
                                                       vectors_.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim_))}});
  }
  write_records(path, rows);
}

ProductIndex ProductIndex::load(const std::filesystem::path& path) {
  const auto rows = read_records(path);
  if (rows.empty()) throw Error(ErrorCode::kCorruptRecord, "empty index file " + path.string());
  ProductIndex idx;
  idx.version_ = rows[0].at("version").get<std::string>();
  idx.dim_ = rows[0].at("dim").get<std::size_t>();
  if (rows[0].at("size").get<std::size_t>() != rows.size() - 1) throw Error(ErrorCode::kCorruptRecord, "index size");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto v = rows[i].at("vector").get<std::vector<double>>();
    if (v.size() != idx.dim_) throw Error(ErrorCode::kCorruptRecord, "index vector dimension");
    idx.ids_.push_back(rows[i].at("id").get<std::string>());
    idx.vectors_.insert(idx.vectors_.end(), v.begin(), v.end());
  }
  return idx;
}

}  // namespace caseloop::model
