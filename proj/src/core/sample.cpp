#include "caseloop/core/sample.hpp"

namespace caseloop {

std::string dedup_key(const Sample& s) {
  return s.query.text + '\t' + s.product_id + '\t' + std::to_string(s.label.value());
}

}  // namespace caseloop
