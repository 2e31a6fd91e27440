#include "caseloop/deep_search/deep_search.hpp"

#include <algorithm>

#include "caseloop/core/error.hpp"
#include "caseloop/core/text.hpp"

namespace caseloop::search {

double reliability(std::string_view tool) {
  if (tool == "ecom_search") return kEcomReliability;
  if (tool == "image_search") return kImageReliability;
  if (tool == "web_search") return kWebReliability;
  return 0.0;
}

std::string path_string(const std::vector<PathStep>& path) {
  std::vector<std::string> tools;
  for (const auto& p : path) tools.push_back(p.tool);
  return join(tools, ">");
}

namespace {

Json path_json(const std::vector<PathStep>& path) {
  Json arr = Json::array();
  for (const auto& p : path) arr.push_back(Json{{"tool", p.tool}, {"input", p.input}});
  return arr;
}

std::vector<PathStep> path_from(const Json& j) {
  std::vector<PathStep> out;
  for (const auto& p : j) out.push_back({p.at("tool").get<std::string>(), p.at("input").get<std::string>()});
  return out;
}

bool called(const SearchState& st, const std::string& tool, const std::string& input) {
  for (const auto& e : st.evidence) {
    if (!e.path.empty() && e.path.back().tool == tool && e.path.back().input == input) return true;
  }
  return false;
}

double top_confidence(const SearchState& st) {
  double best = 0.0;
  for (const auto& [pid, c] : st.candidate_confidence) best = std::max(best, c);
  return best;
}

void absorb(SearchState& st, const Evidence& ev) {
  if (ev.failed() || !ev.result) return;
  const std::string tool(world::to_string(ev.result->tool));
  const double r = reliability(tool);
  // web hits are entities, not catalog products
  if (ev.result->tool == world::ToolName::kWebSearch) return;
  for (const auto& hit : ev.result->hits) {
    const double c = std::clamp(r * hit.score, 0.0, 1.0);
    auto it = st.candidate_confidence.find(hit.ref);
    if (it == st.candidate_confidence.end() || c > it->second) {
      st.candidate_confidence[hit.ref] = c;
      st.candidate_path[hit.ref] = ev.path;
    }
  }
}

}  // namespace

void to_json(Json& j, const AssociationRecord& r) {
  Json cands = Json::array();
  for (const auto& c : r.candidates) {
    cands.push_back(Json{{"product_id", c.product_id},
                         {"weight", c.weight},
                         {"meta", path_json(c.meta)},
                         {"tool_path", path_string(c.meta)}});
  }
  j = Json{{"query_id", r.query_id}, {"query_text", r.query_text}, {"candidates", cands}};
}

void from_json(const Json& j, AssociationRecord& r) {
  r.query_id = j.at("query_id").get<std::string>();
  r.query_text = j.value("query_text", std::string());
  r.candidates.clear();
  for (const auto& c : j.at("candidates")) {
    r.candidates.push_back(
        {c.at("product_id").get<std::string>(), c.at("weight").get<double>(), path_from(c.at("meta"))});
  }
}

ScriptedPlanner::ScriptedPlanner(std::shared_ptr<const model::QueryParser> parser, double low_confidence,
                                 std::size_t top_n)
    : parser_(std::move(parser)), low_confidence_(low_confidence), top_n_(top_n) {}

std::optional<Action> ScriptedPlanner::next(const Query& q, const SearchState& st) const {
  const std::string top_n = std::to_string(top_n_);
  if (st.intent_hypotheses.empty()) {
    Action a;
    a.kind = Action::Kind::kRewrite;
    a.rewrite = normalize_text(q.text);
    if (parser_) {
      if (auto it = parser_->typo_table().find(a.rewrite); it != parser_->typo_table().end()) a.rewrite = it->second;
    }
    if (a.rewrite.empty()) a.rewrite = q.text;
    a.path = {{"rewrite", a.rewrite}};
    return a;
  }
  for (const auto& h : st.intent_hypotheses) {
    if (called(st, "ecom_search", h)) continue;
    Action a;
    a.kind = Action::Kind::kToolCall;
    a.call = {"ecom_search", {{"query", h}, {"top_n", top_n}}};
    a.path = {{"ecom_search", h}};
    return a;
  }
  if (top_confidence(st) < low_confidence_ && !called(st, "web_search", q.text)) {
    Action a;
    a.kind = Action::Kind::kToolCall;
    a.call = {"web_search", {{"query", q.text}, {"top_n", top_n}}};
    a.path = {{"web_search", q.text}};
    return a;
  }
  // image refs found on the web
  for (const auto& e : st.evidence) {
    if (e.failed() || !e.result || e.result->tool != world::ToolName::kWebSearch) continue;
    for (const auto& hit : e.result->hits) {
      for (const auto& ref : hit.image_refs) {
        if (called(st, "image_search", ref)) continue;
        Action a;
        a.kind = Action::Kind::kToolCall;
        a.call = {"image_search", {{"image_ref", ref}, {"top_n", top_n}}};
        a.path = e.path;
        a.path.push_back({"image_search", ref});
        return a;
      }
    }
  }
  return std::nullopt;
}

std::vector<AssociationCandidate> ranked_candidates(const SearchState& state, std::size_t top_k) {
  std::vector<AssociationCandidate> out;
  for (const auto& [pid, c] : state.candidate_confidence) {
    auto it = state.candidate_path.find(pid);
    out.push_back({pid, c, it == state.candidate_path.end() ? std::vector<PathStep>{} : it->second});
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    if (a.weight != b.weight) return a.weight > b.weight;
    return a.product_id < b.product_id;
  });
  if (out.size() > top_k) out.resize(top_k);
  return out;
}

SearchOutput deep_search(const Query& q, const SearchPolicy& policy, const ToolFn& tools, int budget,
                         double confidence_threshold, std::size_t top_k) {
  if (budget < 0) throw Error(ErrorCode::kInvalidArgument, "budget must be >= 0");
  if (top_k == 0) throw Error(ErrorCode::kInvalidArgument, "top_k must be >= 1");
  SearchOutput out;
  SearchState& st = out.state;
  auto satisfied = [&] {
    auto top = ranked_candidates(st, top_k);
    return top.size() == top_k && top.back().weight >= confidence_threshold;
  };
  while (st.step < budget && !satisfied()) {
    std::optional<Action> action = policy.next(q, st);
    if (!action) break;
    ++st.step;
    if (action->kind == Action::Kind::kRewrite) {
      st.attempted_rewrites.insert(action->rewrite);
      if (std::find(st.intent_hypotheses.begin(), st.intent_hypotheses.end(), action->rewrite) ==
          st.intent_hypotheses.end()) {
        st.intent_hypotheses.push_back(action->rewrite);
      }
      continue;
    }
    Evidence ev;
    ev.step = st.step;
    ev.path = action->path;
    try {
      ev.result = tools(action->call);
    } catch (const std::exception& e) {
      ev.error = e.what();
      if (ev.error.empty()) ev.error = "tool failure";
    }
    absorb(st, ev);
    st.evidence.push_back(std::move(ev));
  }
  out.record.query_id = q.id;
  out.record.query_text = q.text;
  out.record.candidates = ranked_candidates(st, top_k);
  return out;
}

std::vector<std::string> augment_pool(const std::vector<std::string>& base, const AssociationRecord& associations) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& id : base) {
    if (seen.insert(id).second) out.push_back(id);
  }
  for (const auto& c : associations.candidates) {
    if (seen.insert(c.product_id).second) out.push_back(c.product_id);
  }
  return out;
}

GateResult gate_associations(const AssociationRecord& record, const Query& q, const annotator::Annotator& annotator,
                             const StandardsDoc& s, const std::vector<Directive>& i, const memory::MemoryStore* k,
                             const model::ProductLookup& products) {
  // (product -> label, authority) from exact precedents for this query
  std::map<std::string, std::pair<RelevanceLabel, double>> settled;
  if (k) {
    const std::string text = normalize_text(q.text);
    for (const auto& e : k->entries()) {
      const auto& c = e.content;
      if (c.kind != memory::ContentKind::kPrecedent || !c.label || c.product_id.empty()) continue;
      if (normalize_text(c.query_text) != text) continue;
      auto it = settled.find(c.product_id);
      if (it == settled.end() || e.authority >= it->second.second) settled[c.product_id] = {*c.label, e.authority};
    }
  }
  GateResult out;
  out.record.query_id = record.query_id;
  out.record.query_text = record.query_text;
  for (const auto& cand : record.candidates) {
    RelevanceLabel label;
    if (auto it = settled.find(cand.product_id); it != settled.end()) {
      label = it->second.first;
      ++out.from_memory;
    } else {
      label = annotator.annotate(q, products(cand.product_id), s, i).label;
      ++out.annotated;
    }
    if (label.value() == 3) out.record.candidates.push_back(cand);
  }
  return out;
}

void AssociationStore::put(AssociationRecord record) {
  std::unique_lock lock(mu_);
  records_[record.query_id] = std::move(record);
}

std::optional<AssociationRecord> AssociationStore::get(const std::string& query_id) const {
  std::shared_lock lock(mu_);
  auto it = records_.find(query_id);
  if (it == records_.end()) return std::nullopt;
  return it->second;
}

std::size_t AssociationStore::size() const {
  std::shared_lock lock(mu_);
  return records_.size();
}

std::vector<AssociationRecord> AssociationStore::records() const {
  std::shared_lock lock(mu_);
  std::vector<AssociationRecord> out;
  for (const auto& [id, r] : records_) out.push_back(r);
  return out;
}

void AssociationStore::save(const std::filesystem::path& path) const {
  std::vector<Json> rows;
  for (const auto& r : records()) rows.push_back(Json(r));
  write_records(path, rows);
}

AssociationStore AssociationStore::load(const std::filesystem::path& path) {
  AssociationStore store;
  for (const auto& row : read_records(path)) store.put(row.get<AssociationRecord>());
  return store;
}

}  // namespace caseloop::search
