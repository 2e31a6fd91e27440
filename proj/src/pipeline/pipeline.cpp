#include "caseloop/pipeline/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "caseloop/core/error.hpp"
#include "caseloop/core/hash.hpp"
#include "caseloop/core/rng.hpp"
#include "caseloop/core/text.hpp"
#include "caseloop/rules/rules.hpp"

namespace caseloop::pipeline {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// records

void to_json(Json& j, const PipelineConfig& c) {
  const auto& w = c.world;
  j = Json{{"world",
            {{"seed", w.seed},
             {"num_products", w.num_products},
             {"num_queries", w.num_queries},
             {"noise_rate", w.noise_rate},
             {"head_fraction", w.head_fraction},
             {"head_weight", w.head_weight},
             {"typo_fraction", w.typo_fraction},
             {"spanish_fraction", w.spanish_fraction},
             {"defect_rate", w.defect_rate},
             {"corpus_pairs_per_query", w.corpus_pairs_per_query},
             {"heldout_pairs", w.heldout_pairs},
             {"guard_pairs", w.guard_pairs},
             {"noise_patterns", w.noise_patterns}}},
           {"seed", c.seed},
           {"queries_per_cycle", c.queries_per_cycle},
           {"judge_epsilon", c.judge_epsilon},
           {"annotator_k", c.annotator_k},
           {"user_epsilon", c.user_epsilon},
           {"max_rounds", c.max_rounds},
           {"train",
            {{"epochs", c.train.epochs},
             {"seed", c.train.seed},
             {"queries_per_batch", c.train.queries_per_batch},
             {"learning_rate", c.train.learning_rate},
             {"lr_decay", c.train.lr_decay},
             {"temperature", c.train.temperature},
             {"coarse_scale", c.train.coarse_scale},
             {"weights", {c.train.weights.retrieval, c.train.weights.coarse, c.train.weights.fine}}}},
           {"guard", {{"max_regression", c.guard.max_regression}, {"breaker_limit", c.guard.breaker_limit}}},
           {"serving",
            {{"tau", c.serving.tau},
             {"min_support", c.serving.min_support},
             {"use_cache", c.serving.use_cache},
             {"shadow_sampling", c.serving.shadow_sampling},
             {"shadow_rate", c.serving.shadow_rate},
             {"retrieval_k", c.serving.retrieval_k},
             {"fine_k", c.serving.fine_k}}},
           {"refine", {{"max_per_pattern", c.refine.max_per_pattern}}},
           {"probe", c.probe},
           {"probe_config",
            {{"max_rounds", c.probe_config.max_rounds},
             {"probes_per_round", c.probe_config.probes_per_round},
             {"results_per_probe", c.probe_config.results_per_probe},
             {"label_budget", c.probe_config.label_budget},
             {"languages", c.probe_config.languages},
             {"seed", c.probe_config.seed}}},
           {"deep_search", c.deep_search},
           {"search_budget", c.search_budget},
           {"search_threshold", c.search_threshold},
           {"search_top_k", c.search_top_k}};
}

void from_json(const Json& j, PipelineConfig& c) {
  c = PipelineConfig{};
  if (j.contains("world")) {
    const auto& w = j["world"];
    auto& o = c.world;
    o.seed = w.value("seed", o.seed);
    o.num_products = w.value("num_products", o.num_products);
    o.num_queries = w.value("num_queries", o.num_queries);
    o.noise_rate = w.value("noise_rate", o.noise_rate);
    o.head_fraction = w.value("head_fraction", o.head_fraction);
    o.head_weight = w.value("head_weight", o.head_weight);
    o.typo_fraction = w.value("typo_fraction", o.typo_fraction);
    o.spanish_fraction = w.value("spanish_fraction", o.spanish_fraction);
    o.defect_rate = w.value("defect_rate", o.defect_rate);
    o.corpus_pairs_per_query = w.value("corpus_pairs_per_query", o.corpus_pairs_per_query);
    o.heldout_pairs = w.value("heldout_pairs", o.heldout_pairs);
    o.guard_pairs = w.value("guard_pairs", o.guard_pairs);
    o.noise_patterns = w.value("noise_patterns", o.noise_patterns);
  }
  c.seed = j.value("seed", c.seed);
  c.queries_per_cycle = j.value("queries_per_cycle", c.queries_per_cycle);
  c.judge_epsilon = j.value("judge_epsilon", c.judge_epsilon);
  c.annotator_k = j.value("annotator_k", c.annotator_k);
  c.user_epsilon = j.value("user_epsilon", c.user_epsilon);
  c.max_rounds = j.value("max_rounds", c.max_rounds);
  if (j.contains("train")) {
    const auto& t = j["train"];
    c.train.epochs = t.value("epochs", c.train.epochs);
    c.train.seed = t.value("seed", c.train.seed);
    c.train.queries_per_batch = t.value("queries_per_batch", c.train.queries_per_batch);
    c.train.learning_rate = t.value("learning_rate", c.train.learning_rate);
    c.train.lr_decay = t.value("lr_decay", c.train.lr_decay);
    c.train.temperature = t.value("temperature", c.train.temperature);
    c.train.coarse_scale = t.value("coarse_scale", c.train.coarse_scale);
    if (t.contains("weights")) {
      const auto w = t["weights"].get<std::vector<double>>();
      c.train.weights = {w.at(0), w.at(1), w.at(2)};
    }
  }
  if (j.contains("guard")) {
    c.guard.max_regression = j["guard"].value("max_regression", c.guard.max_regression);
    c.guard.breaker_limit = j["guard"].value("breaker_limit", c.guard.breaker_limit);
  }
  if (j.contains("serving")) {
    const auto& s = j["serving"];
    c.serving.tau = s.value("tau", c.serving.tau);
    c.serving.min_support = s.value("min_support", c.serving.min_support);
    c.serving.use_cache = s.value("use_cache", c.serving.use_cache);
    c.serving.shadow_sampling = s.value("shadow_sampling", c.serving.shadow_sampling);
    c.serving.shadow_rate = s.value("shadow_rate", c.serving.shadow_rate);
    c.serving.retrieval_k = s.value("retrieval_k", c.serving.retrieval_k);
    c.serving.fine_k = s.value("fine_k", c.serving.fine_k);
  }
  if (j.contains("refine")) c.refine.max_per_pattern = j["refine"].value("max_per_pattern", c.refine.max_per_pattern);
  c.probe = j.value("probe", c.probe);
  if (j.contains("probe_config")) {
    const auto& p = j["probe_config"];
    auto& o = c.probe_config;
    o.max_rounds = p.value("max_rounds", o.max_rounds);
    o.probes_per_round = p.value("probes_per_round", o.probes_per_round);
    o.results_per_probe = p.value("results_per_probe", o.results_per_probe);
    o.label_budget = p.value("label_budget", o.label_budget);
    o.languages = p.value("languages", o.languages);
    o.seed = p.value("seed", o.seed);
  }
  c.deep_search = j.value("deep_search", c.deep_search);
  c.search_budget = j.value("search_budget", c.search_budget);
  c.search_threshold = j.value("search_threshold", c.search_threshold);
  c.search_top_k = j.value("search_top_k", c.search_top_k);
}

void to_json(Json& j, const CycleReport& r) {
  Json mining{{"emitted", r.mining.emitted},
              {"true_positives", r.mining.true_positives},
              {"reference", r.mining.reference},
              {"recall", r.mining.recall}};
  mining["precision"] = r.mining.precision ? Json(*r.mining.precision) : Json(nullptr);
  j = Json{{"cycle_id", r.cycle_id},
           {"d_full_before", r.d_full_before},
           {"d_inc", r.d_inc},
           {"dedup_count", r.dedup_count},
           {"d_full", r.d_full},
           {"crawled", r.crawled},
           {"flagged", r.flagged},
           {"discovered", r.discovered},
           {"resolved", r.resolved},
           {"discovery_rate", r.discovery_rate},
           {"resolution_rate", r.resolution_rate ? Json(*r.resolution_rate) : Json(nullptr)},
           {"exempt", r.exempt},
           {"standard_evolution", r.standard_evolution},
           {"no_consensus", r.no_consensus},
           {"corrections", r.corrections},
           {"additions", r.additions},
           {"probe_cases", r.probe_cases},
           {"feature_side", r.feature_side},
           {"mining", mining},
           {"decision", to_string(r.decision)},
           {"candidate_version", r.candidate_version},
           {"deployed_version", r.deployed_version},
           {"incumbent_accuracy", r.incumbent_accuracy},
           {"candidate_accuracy", r.candidate_accuracy},
           {"bad_case_rate_before", r.bad_case_rate_before},
           {"bad_case_rate_after", r.bad_case_rate_after},
           {"associations", r.associations},
           {"fine_calls", r.fine_calls},
           {"downgrade_fraction", r.downgrade_fraction}};
}

void from_json(const Json& j, CycleReport& r) {
  r.cycle_id = j.at("cycle_id").get<int>();
  r.d_full_before = j.at("d_full_before").get<std::size_t>();
  r.d_inc = j.at("d_inc").get<std::size_t>();
  r.dedup_count = j.at("dedup_count").get<std::size_t>();
  r.d_full = j.at("d_full").get<std::size_t>();
  r.crawled = j.at("crawled").get<std::size_t>();
  r.flagged = j.at("flagged").get<std::size_t>();
  r.discovered = j.at("discovered").get<std::size_t>();
  r.resolved = j.at("resolved").get<std::size_t>();
  r.discovery_rate = j.at("discovery_rate").get<double>();
  if (!j.at("resolution_rate").is_null()) r.resolution_rate = j["resolution_rate"].get<double>();
  r.exempt = j.at("exempt").get<std::size_t>();
  r.standard_evolution = j.at("standard_evolution").get<std::size_t>();
  r.no_consensus = j.at("no_consensus").get<std::size_t>();
  r.corrections = j.at("corrections").get<std::size_t>();
  r.additions = j.at("additions").get<std::size_t>();
  r.probe_cases = j.at("probe_cases").get<std::size_t>();
  r.feature_side = j.at("feature_side").get<std::size_t>();
  const auto& m = j.at("mining");
  r.mining.emitted = m.at("emitted").get<std::size_t>();
  r.mining.true_positives = m.at("true_positives").get<std::size_t>();
  r.mining.reference = m.at("reference").get<std::size_t>();
  r.mining.recall = m.at("recall").get<double>();
  if (!m.at("precision").is_null()) r.mining.precision = m["precision"].get<double>();
  r.decision = decision_from(j.at("decision").get<std::string>());
  r.candidate_version = j.at("candidate_version").get<std::string>();
  r.deployed_version = j.at("deployed_version").get<std::string>();
  r.incumbent_accuracy = j.at("incumbent_accuracy").get<double>();
  r.candidate_accuracy = j.at("candidate_accuracy").get<double>();
  r.bad_case_rate_before = j.at("bad_case_rate_before").get<double>();
  r.bad_case_rate_after = j.at("bad_case_rate_after").get<double>();
  r.associations = j.at("associations").get<std::size_t>();
  r.fine_calls = j.at("fine_calls").get<std::size_t>();
  r.downgrade_fraction = j.at("downgrade_fraction").get<double>();
}

std::string_view to_string(CaseStatus s) {
  switch (s) {
    case CaseStatus::kQueuedForRetrain:
      return "queued_for_retrain";
    case CaseStatus::kRetrained:
      return "retrained";
    case CaseStatus::kExempt:
      return "exempt";
    case CaseStatus::kAwaitingHuman:
      return "awaiting_human";
    case CaseStatus::kResolved:
      return "resolved";
  }
  return "resolved";
}

CaseStatus case_status_from(std::string_view s) {
  for (auto st : {CaseStatus::kQueuedForRetrain, CaseStatus::kRetrained, CaseStatus::kExempt,
                  CaseStatus::kAwaitingHuman, CaseStatus::kResolved}) {
    if (to_string(st) == s) return st;
  }
  throw Error(ErrorCode::kCorruptRecord, "unknown case status '" + std::string(s) + "'");
}

void to_json(Json& j, const CaseRecord& c) {
  j = Json{{"case", Json(c.record)},
           {"transcript", Json(c.transcript)},
           {"route", dialectic::to_string(c.route.kind)},
           {"low_confidence", c.route.low_confidence},
           {"status", to_string(c.status)},
           {"complaint", c.complaint},
           {"citations", c.citations},
           {"proposal_id", c.proposal_id},
           {"justification", c.justification},
           {"cycle", c.cycle}};
  j["verdict"] = c.verdict ? Json(c.verdict->value()) : Json(nullptr);
}

CaseRecord case_record_from(const Json& j) {
  CaseRecord c{case_from_json(j.at("case")), j.at("transcript").get<dialectic::Transcript>(), {}, {}, {}, {}, {}, {},
               {}, 0};
  c.route.kind = dialectic::route_kind_from(j.at("route").get<std::string>());
  c.route.low_confidence = j.at("low_confidence").get<bool>();
  c.status = case_status_from(j.at("status").get<std::string>());
  c.complaint = j.value("complaint", std::string());
  c.citations = j.value("citations", std::vector<std::string>{});
  c.proposal_id = j.value("proposal_id", std::string());
  c.justification = j.value("justification", std::string());
  c.cycle = j.value("cycle", 0);
  if (j.contains("verdict") && !j["verdict"].is_null()) c.verdict = RelevanceLabel::of(j["verdict"].get<int>());
  return c;
}

std::string_view to_string(ProposalStatus s) {
  switch (s) {
    case ProposalStatus::kOpen:
      return "open";
    case ProposalStatus::kApproved:
      return "approved";
    case ProposalStatus::kRejected:
      return "rejected";
  }
  return "open";
}

void to_json(Json& j, const Proposal& p) {
  j = Json{{"id", p.id},
           {"predicate", p.predicate},
           {"clause_text", p.clause_text},
           {"proposed_label", p.proposed_label.value()},
           {"supporting_cases", p.supporting_cases},
           {"status", to_string(p.status)},
           {"reason", p.reason},
           {"clause_id", p.clause_id}};
}

void from_json(const Json& j, Proposal& p) {
  p.id = j.at("id").get<std::string>();
  p.predicate = j.at("predicate").get<std::string>();
  p.clause_text = j.at("clause_text").get<std::string>();
  p.proposed_label = RelevanceLabel::of(j.at("proposed_label").get<int>());
  p.supporting_cases = j.at("supporting_cases").get<std::vector<std::string>>();
  const auto st = j.at("status").get<std::string>();
  p.status = st == "approved" ? ProposalStatus::kApproved
                              : (st == "rejected" ? ProposalStatus::kRejected : ProposalStatus::kOpen);
  p.reason = j.value("reason", std::string());
  p.clause_id = j.value("clause_id", std::string());
}

void to_json(Json& j, const CrawledPair& p) {
  j = Json{{"query_id", p.query_id},       {"query_text", p.query_text}, {"product_id", p.product_id},
           {"online", p.online.value()},   {"annotated", p.annotated.value()},
           {"oracle", p.oracle.value()},   {"case_id", p.case_id},       {"route", p.route}};
}

void from_json(const Json& j, CrawledPair& p) {
  p.query_id = j.at("query_id").get<std::string>();
  p.query_text = j.at("query_text").get<std::string>();
  p.product_id = j.at("product_id").get<std::string>();
  p.online = RelevanceLabel::of(j.at("online").get<int>());
  p.annotated = RelevanceLabel::of(j.at("annotated").get<int>());
  p.oracle = RelevanceLabel::of(j.at("oracle").get<int>());
  p.case_id = j.value("case_id", std::string());
  p.route = j.value("route", std::string());
}

// ---------------------------------------------------------------------------
// helpers

namespace {

void atomic_write(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".tmp";
  write_text(tmp, text);
  fs::rename(tmp, path);
}

std::string jsonl(const std::vector<Json>& rows) {
  std::string out;
  for (const auto& r : rows) {
    out += r.dump();
    out += '\n';
  }
  return out;
}

template <typename T>
std::vector<Json> rows_of(const std::vector<T>& items) {
  std::vector<Json> out;
  out.reserve(items.size());
  for (const auto& i : items) out.push_back(Json(i));
  return out;
}

int version_number(const std::string& v) {
  const auto pos = v.rfind('-');
  return pos == std::string::npos ? 0 : std::stoi(v.substr(pos + 1));
}

fs::path checkpoint_path(const fs::path& dir, const std::string& version) {
  return dir / "checkpoints" / (version + ".ckpt");
}

std::string pair_key(const std::string& qid, const std::string& pid) { return qid + "|" + pid; }

std::string cycle_tag(int t) { return "cycle-" + zero_pad(t, 3); }

}  // namespace

// ---------------------------------------------------------------------------
// lifecycle

Pipeline::Pipeline(fs::path dir, PipelineConfig config) : dir_(std::move(dir)), config_(std::move(config)) {}

Pipeline::~Pipeline() = default;

std::unique_ptr<Pipeline> Pipeline::init(const fs::path& dir, const PipelineConfig& config) {
  if (fs::exists(dir / "state.json")) throw Error(ErrorCode::kInvalidArgument, dir.string() + " already holds state");
  std::unique_ptr<Pipeline> p(new Pipeline(dir, config));
  fs::create_directories(dir / "checkpoints");
  p->world_ = std::make_unique<world::World>(world::World::generate(config.world));
  const world::World& w = *p->world_;
  p->corpus_ = w.initial_corpus();
  int n = 0;
  for (const auto& pr : w.guard_pairs()) {
    const Query& q = w.query(pr.query_id).query;
    p->eval_set_.push_back({"eval-" + zero_pad(++n, 5), q, pr.product_id, w.oracle_label(q, pr.product_id), "eval"});
  }
  p->parser_ = std::make_shared<const model::QueryParser>(w.lexicon(), w.typo_table());
  model::ProductLookup serving = [&w](std::string_view id) -> const Product& { return w.serving_product(id); };
  const model::Checkpoint ck = model::train_multitask(p->corpus_, serving, *p->parser_, config.train, "ck-0");
  ck.save(checkpoint_path(dir, "ck-0"));
  p->deployed_ = "ck-0";
  p->standards_ = w.published_standards();
  p->build_runtime();
  {
    std::vector<Json> rows;
    n = 0;
    for (const auto& pr : w.heldout_pairs()) {
      const Query& q = w.query(pr.query_id).query;
      rows.push_back(Json(Sample{"heldout-" + zero_pad(++n, 5), q, pr.product_id, w.oracle_label(q, pr.product_id),
                                 "heldout"}));
    }
    write_records(dir / "heldout.jsonl", rows);
  }
  write_records(dir / "eval_set.jsonl", rows_of(p->eval_set_));
  p->heldout_bad_rate(*p->model_, cycle_tag(0) + ".jsonl");
  p->persist();
  return p;
}

std::unique_ptr<Pipeline> Pipeline::open(const fs::path& dir) {
  if (!fs::exists(dir / "state.json")) throw Error(ErrorCode::kIo, "no state under " + dir.string());
  const Json cfg = Json::parse(read_text(dir / "config.json"));
  std::unique_ptr<Pipeline> p(new Pipeline(dir, cfg.get<PipelineConfig>()));
  p->world_ = std::make_unique<world::World>(world::World::generate(p->config_.world));
  p->load_state();
  return p;
}

void Pipeline::load_state() {
  const Json st = Json::parse(read_text(dir_ / "state.json"));
  cycle_ = st.at("cycle").get<int>();
  clock_ = st.at("clock").get<std::int64_t>();
  checkpoint_counter_ = st.at("checkpoint_counter").get<int>();
  deployed_ = st.at("deployed").get<std::string>();
  guard_ = st.at("guard").get<GuardState>();
  report_counter_ = st.value("report_counter", 0);
  corpus_.clear();
  for (const auto& r : read_records(dir_ / "corpus.jsonl")) corpus_.push_back(r.get<Sample>());
  eval_set_.clear();
  for (const auto& r : read_records(dir_ / "eval_set.jsonl")) eval_set_.push_back(r.get<Sample>());
  standards_ = Json::parse(read_text(dir_ / "standards.json")).get<StandardsDoc>();
  directives_.clear();
  for (const auto& r : read_records(dir_ / "directives.jsonl")) directives_.push_back(r.get<Directive>());
  proposals_.clear();
  for (const auto& r : read_records(dir_ / "proposals.jsonl")) proposals_.push_back(r.get<Proposal>());
  cases_.clear();
  for (const auto& r : read_records(dir_ / "cases.jsonl")) cases_.push_back(case_record_from(r));
  reports_.clear();
  for (const auto& r : read_records(dir_ / "cycles.jsonl")) reports_.push_back(r.get<CycleReport>());
  parser_ = std::make_shared<const model::QueryParser>(world_->lexicon(), world_->typo_table());
  build_runtime();
  memory_->load(dir_ / "memory");
  associations_ = search::AssociationStore::load(dir_ / "associations.jsonl");
  serving::StatTable stats;
  for (const auto& r : read_records(dir_ / "stats.jsonl")) {
    auto s = r.get<serving::ConsistencyStat>();
    stats.emplace(s.query_id, s);
  }
  engine_->set_stats(std::move(stats));
  engine_->cache() = serving::HypernymCache::load(dir_ / "cache.jsonl", version_number(deployed_));
}

void Pipeline::build_runtime() {
  const world::World& w = *world_;
  if (!parser_) parser_ = std::make_shared<const model::QueryParser>(w.lexicon(), w.typo_table());
  judge_ = std::make_shared<const annotator::MockJudge>(w, parser_, config_.judge_epsilon,
                                                        Rng::derive(config_.seed, "judge").next_u64());
  annotator::ToolFn tool = [&w](const world::ToolCall& call) { return w.simulate_tool(call); };
  annotator_ = std::make_shared<const annotator::Annotator>(tool, judge_, parser_, annotator::GrmParams::defaults(),
                                                            annotator::AnnotatorConfig{config_.annotator_k});
  user_ = std::make_unique<dialectic::MockUser>(
      w, dialectic::MockUserConfig{config_.user_epsilon, Rng::derive(config_.seed, "user").next_u64(), false});
  agent_ = std::make_unique<dialectic::MockAnnotatorAgent>(annotator_, judge_);
  encoder_ = std::make_shared<const model::RelevanceModel>(
      std::make_shared<const model::Checkpoint>(model::Checkpoint::load(checkpoint_path(dir_, "ck-0"))), parser_);
  auto enc = encoder_;
  memory_ = std::make_unique<memory::MemoryStore>([enc](const std::string& text) {
    Query q;
    q.id = "memory";
    q.text = text;
    return enc->encode(q);
  });
  engine_.reset();
  load_model(deployed_);
}

void Pipeline::load_model(const std::string& version) {
  model_ = std::make_shared<const model::RelevanceModel>(
      std::make_shared<const model::Checkpoint>(model::Checkpoint::load(checkpoint_path(dir_, version))), parser_);
  std::vector<Product> products;
  for (const auto& d : world_->products()) products.push_back(world_->serving_product(d.id));
  auto index = std::make_shared<const model::ProductIndex>(model::ProductIndex::build(*model_, products));
  if (!engine_) {
    const world::World* w = world_.get();
    engine_ = std::make_unique<serving::ServingEngine>(
        model_, [w](std::string_view id) -> const Product& { return w->serving_product(id); }, version_number(version),
        config_.serving);
    engine_->set_index(index);
  } else {
    engine_->swap_model(model_, version_number(version), index);
  }
  deployed_ = version;
}

void Pipeline::persist() const {
  fs::create_directories(dir_);
  atomic_write(dir_ / "config.json", Json(config_).dump(2) + "\n");
  Json st{{"cycle", cycle_},
          {"clock", clock_},
          {"checkpoint_counter", checkpoint_counter_},
          {"deployed", deployed_},
          {"guard", Json(guard_)},
          {"report_counter", report_counter_},
          {"world_digest", world_->digest()}};
  atomic_write(dir_ / "state.json", st.dump(2) + "\n");
  atomic_write(dir_ / "corpus.jsonl", jsonl(rows_of(corpus_)));
  atomic_write(dir_ / "standards.json", Json(standards_).dump(2) + "\n");
  atomic_write(dir_ / "directives.jsonl", jsonl(rows_of(directives_)));
  atomic_write(dir_ / "proposals.jsonl", jsonl(rows_of(proposals_)));
  atomic_write(dir_ / "cases.jsonl", jsonl(rows_of(cases_)));
  atomic_write(dir_ / "cycles.jsonl", jsonl(rows_of(reports_)));
  std::vector<Json> stats;
  for (const auto& [q, s] : engine_->stats()) stats.push_back(Json(s));
  atomic_write(dir_ / "stats.jsonl", jsonl(stats));
  engine_->cache().save(dir_ / "cache.jsonl");
  associations_.save(dir_ / "associations.jsonl");
  memory_->save(dir_ / "memory");
}

void Pipeline::persist_small() const { persist(); }

// ---------------------------------------------------------------------------
// accessors

std::vector<Directive> Pipeline::active() const {
  std::vector<Directive> out;
  for (const auto& d : directives_) {
    if (d.active_window.contains(clock_)) out.push_back(d);
  }
  rules::sort_by_priority(out);
  return out;
}

Query Pipeline::resolve_query(const std::string& text) const {
  if (const world::WorldQuery* wq = world_->find_query(text)) return wq->query;
  const std::string norm = normalize_text(text);
  if (norm.empty()) throw Error(ErrorCode::kUnknownEntity, "empty query");
  for (const auto& wq : world_->queries()) {
    if (normalize_text(wq.query.text) == norm) return wq.query;
  }
  Query q;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%08llx", static_cast<unsigned long long>(fnv1a(norm) & 0xffffffffULL));
  q.id = std::string("adhoc-") + buf;
  q.text = text;
  return q;
}

std::vector<CaseRecord> Pipeline::cases() const {
  std::lock_guard lock(mu_);
  return cases_;
}

std::optional<CaseRecord> Pipeline::find_case(const std::string& id) const {
  std::lock_guard lock(mu_);
  for (const auto& c : cases_) {
    if (c.record.id == id) return c;
  }
  return std::nullopt;
}

std::vector<Proposal> Pipeline::proposals() const {
  std::lock_guard lock(mu_);
  return proposals_;
}

std::vector<Directive> Pipeline::directives() const {
  std::lock_guard lock(mu_);
  return directives_;
}

StandardsDoc Pipeline::standards() const {
  std::lock_guard lock(mu_);
  return standards_;
}

std::vector<CycleReport> Pipeline::reports() const {
  std::lock_guard lock(mu_);
  return reports_;
}

GuardState Pipeline::guard() const {
  std::lock_guard lock(mu_);
  return guard_;
}

int Pipeline::cycle() const {
  std::lock_guard lock(mu_);
  return cycle_;
}

std::string Pipeline::deployed_version() const {
  std::lock_guard lock(mu_);
  return deployed_;
}

std::shared_ptr<const model::RelevanceModel> Pipeline::deployed_model() const {
  std::lock_guard lock(mu_);
  return model_;
}

std::size_t Pipeline::memory_size() const { return memory_->size(); }

std::vector<memory::MemoryEntry> Pipeline::memory_entries() const { return memory_->entries(); }

std::size_t Pipeline::corpus_size() const {
  std::lock_guard lock(mu_);
  return corpus_.size();
}

std::int64_t Pipeline::clock() const {
  std::lock_guard lock(mu_);
  return clock_;
}

Json Pipeline::metrics() const {
  std::lock_guard lock(mu_);
  std::map<std::string, int> by_status;
  for (const auto& c : cases_) ++by_status[std::string(to_string(c.status))];
  int open = 0;
  for (const auto& p : proposals_) open += p.status == ProposalStatus::kOpen ? 1 : 0;
  Json cycles = Json::array();
  for (const auto& r : reports_) {
    cycles.push_back(Json{{"cycle_id", r.cycle_id},
                          {"bad_case_rate_before", r.bad_case_rate_before},
                          {"bad_case_rate_after", r.bad_case_rate_after},
                          {"discovery_rate", r.discovery_rate},
                          {"resolution_rate", r.resolution_rate ? Json(*r.resolution_rate) : Json(nullptr)},
                          {"decision", to_string(r.decision)},
                          {"d_full", r.d_full}});
  }
  return Json{{"cycle", cycle_},
              {"deployed_version", deployed_},
              {"guard", Json(guard_)},
              {"breaker_tripped", guard_.tripped},
              {"corpus_size", corpus_.size()},
              {"memory_size", memory_->size()},
              {"standards_version", standards_.version},
              {"directives", directives_.size()},
              {"open_proposals", open},
              {"cases_by_status", by_status},
              {"serving", Json(engine_->metrics())},
              {"cycles", cycles}};
}

// ---------------------------------------------------------------------------
// evaluation

double Pipeline::heldout_bad_rate(const model::RelevanceModel& m, const std::string& out_name) const {
  const auto rows = read_records(dir_ / "heldout.jsonl");
  const auto act = active();
  std::vector<Case> cases;
  std::vector<Json> out;
  cases.reserve(rows.size());
  for (const auto& r : rows) {
    const Sample s = r.get<Sample>();
    const Product& d = world_->serving_product(s.product_id);
    const Prediction p = m.fine_score(s.query, d, act);
    out.push_back(Json{{"query_id", s.query.id},
                       {"product_id", s.product_id},
                       {"reference", s.label.value()},
                       {"predicted", p.label.value()}});
    cases.emplace_back(s.id, s.query, d, s.label, p, Provenance::kEvaluation, standards_.version);
  }
  if (!out_name.empty()) write_records(dir_ / "heldout" / out_name, out);
  return bad_case_rate(cases);
}

ServedLabel Pipeline::score(const std::string& query, const std::string& product_id) {
  std::lock_guard lock(mu_);
  const Query q = resolve_query(query);
  if (!world_->has_product(product_id)) throw Error(ErrorCode::kUnknownEntity, "unknown product " + product_id);
  const Product& d = world_->serving_product(product_id);
  const Prediction base = model_->fine_base(q, d);
  const auto act = active();
  if (act.empty()) return {base, std::nullopt};
  const auto out = rules::apply_rules(base, act, model_->structure_of(q), d);
  return {out.prediction, out.applied_rule};
}

}  // namespace caseloop::pipeline

// ---------------------------------------------------------------------------
// cases

namespace caseloop::pipeline {

namespace {

// Reason behind the settled label: user side first, then the annotator.
std::string settled_reason(const dialectic::Transcript& t, std::optional<RelevanceLabel> label) {
  for (auto speaker : {dialectic::Speaker::kUser, dialectic::Speaker::kAnnotator}) {
    for (auto it = t.turns.rbegin(); it != t.turns.rend(); ++it) {
      if (it->speaker != speaker) continue;
      if (label && it->argument.label != *label) continue;
      if (it->argument.reason.empty() || it->argument.reason == "intuition") continue;
      return it->argument.reason;
    }
  }
  return {};
}

std::optional<RelevanceLabel> last_user_label(const dialectic::Transcript& t) {
  for (auto it = t.turns.rbegin(); it != t.turns.rend(); ++it) {
    if (it->speaker == dialectic::Speaker::kUser) return it->argument.label;
  }
  return std::nullopt;
}

}  // namespace

CaseRecord Pipeline::finish_case(Case c, dialectic::Transcript t, int cycle, const std::string& complaint) {
  CaseRecord rec{std::move(c), std::move(t), {}, CaseStatus::kQueuedForRetrain, complaint, {}, {}, std::nullopt, {},
                 cycle};
  rec.route = dialectic::route_outcome(rec.transcript.outcome, rec.record.online_prediction);
  if (rec.transcript.outcome.label) rec.record.reference = rec.transcript.outcome.label;
  route_side_effects(rec);
  cases_.push_back(rec);
  return rec;
}

void Pipeline::route_side_effects(CaseRecord& rec) {
  switch (rec.route.kind) {
    case dialectic::RouteKind::kModelError:
      rec.status = CaseStatus::kQueuedForRetrain;
      return;
    case dialectic::RouteKind::kExempt: {
      rec.status = CaseStatus::kExempt;
      for (const auto& turn : rec.transcript.turns) {
        if (turn.speaker != dialectic::Speaker::kAnnotator || !turn.argument.justified_by_s) continue;
        std::string id;
        if (const Clause* cl = standards_.find_predicate(turn.argument.reason)) id = cl->id;
        for (const auto& cl : standards_.clauses) {
          if (cl.id == turn.argument.reason) id = cl.id;
        }
        if (!id.empty() && std::find(rec.citations.begin(), rec.citations.end(), id) == rec.citations.end()) {
          rec.citations.push_back(id);
        }
      }
      return;
    }
    case dialectic::RouteKind::kStandardEvolution:
      break;
  }
  rec.status = CaseStatus::kAwaitingHuman;
  const std::string predicate = settled_reason(rec.transcript, rec.transcript.outcome.label);
  if (predicate.empty() || standards_.has_predicate(predicate)) return;
  const std::optional<RelevanceLabel> label =
      rec.transcript.outcome.label ? rec.transcript.outcome.label : last_user_label(rec.transcript);
  if (!label) return;
  for (auto& p : proposals_) {
    if (p.status == ProposalStatus::kOpen && p.predicate == predicate) {
      p.supporting_cases.push_back(rec.record.id);
      rec.proposal_id = p.id;
      return;
    }
  }
  Proposal p;
  p.id = "prop-" + zero_pad(static_cast<long long>(proposals_.size()) + 1, 4);
  p.predicate = predicate;
  p.clause_text = "Apply '" + predicate + "' when judging relevance.";
  for (const auto& cl : world_->oracle_standard().hidden_clauses) {
    if (cl.predicate == predicate) p.clause_text = cl.text;
  }
  p.proposed_label = *label;
  p.supporting_cases.push_back(rec.record.id);
  rec.proposal_id = p.id;
  proposals_.push_back(std::move(p));
}

CaseRecord Pipeline::handle_case_report(const CaseSubmission& submission) {
  std::lock_guard lock(mu_);
  if (!world_->has_product(submission.product_id)) {
    throw Error(ErrorCode::kUnknownEntity, "unknown product " + submission.product_id);
  }
  const Query q = resolve_query(submission.query);
  const Product& d = world_->serving_product(submission.product_id);
  const auto act = active();
  const Prediction online = model_->fine_score(q, d, act);
  const std::string id = "r-" + zero_pad(++report_counter_, 5);
  std::vector<memory::MemoryEntry> precedents;
  for (auto& hit : memory_->retrieve(q.text, 5)) precedents.push_back(std::move(hit.entry));
  dialectic::Transcript t =
      dialectic::negotiate(id, q, d, standards_, act, precedents, *user_, *agent_, config_.max_rounds);
  Case c(id, q, d, std::nullopt, online, Provenance::kUserReport, standards_.version);
  CaseRecord rec = finish_case(std::move(c), std::move(t), 0, submission.complaint);
  persist();
  return rec;
}

CaseRecord Pipeline::handle_adjudication(const std::string& case_id, RelevanceLabel verdict,
                                         const std::string& justification) {
  std::lock_guard lock(mu_);
  auto it = std::find_if(cases_.begin(), cases_.end(), [&](const CaseRecord& c) { return c.record.id == case_id; });
  if (it == cases_.end()) throw Error(ErrorCode::kUnknownEntity, "unknown case " + case_id);
  if (it->status != CaseStatus::kAwaitingHuman) {
    throw Error(ErrorCode::kCaseNotAwaiting, "case " + case_id + " is " + std::string(to_string(it->status)));
  }
  CaseRecord& rec = *it;
  rec.verdict = verdict;
  rec.justification = justification;
  rec.record.reference = verdict;
  annotator::JudgeRequest req{rec.record.query, rec.record.product, annotator_->ground(rec.record.query), standards_,
                              active(), 0};
  const bool justified = judge_->clean(req).label == verdict;
  if (!justified) {
    rec.route = {dialectic::RouteKind::kStandardEvolution, false};
  } else if (verdict != rec.record.online_prediction.label) {
    rec.route = {dialectic::RouteKind::kModelError, false};
  } else {
    rec.route = {dialectic::RouteKind::kExempt, false};
  }
  rec.status = rec.route.kind == dialectic::RouteKind::kModelError ? CaseStatus::kQueuedForRetrain
                                                                    : CaseStatus::kResolved;
  memory::Resolution r{rec.record.id, rec.record.query, rec.record.product,
                       memory::ResolutionKind::kHumanAdjudication, verdict, rec.record.id, true};
  for (const auto& dist : memory::distill(r)) memory_->write(dist.source, dist.content, clock_, dist.authority);
  const CaseRecord out = rec;
  persist();
  return out;
}

// ---------------------------------------------------------------------------
// directives and standards

Directive Pipeline::add_directive(const Directive& d) {
  std::lock_guard lock(mu_);
  d.rule.validate();
  rules::DirectiveSet set;
  for (const auto& e : directives_) set.add(e);
  set.add(d);
  directives_.push_back(d);
  persist();
  return d;
}

void Pipeline::retire_directive(const std::string& id) {
  std::lock_guard lock(mu_);
  auto it = std::find_if(directives_.begin(), directives_.end(), [&](const Directive& d) { return d.id == id; });
  if (it == directives_.end()) throw Error(ErrorCode::kUnknownEntity, "unknown directive " + id);
  directives_.erase(it);
  persist();
}

Proposal Pipeline::decide_proposal(const std::string& id, bool approve, const std::string& reason) {
  std::lock_guard lock(mu_);
  auto it = std::find_if(proposals_.begin(), proposals_.end(), [&](const Proposal& p) { return p.id == id; });
  if (it == proposals_.end()) throw Error(ErrorCode::kUnknownEntity, "unknown proposal " + id);
  if (it->status != ProposalStatus::kOpen) throw Error(ErrorCode::kAlreadyDecided, "proposal " + id + " is decided");
  it->reason = reason;
  if (!approve) {
    it->status = ProposalStatus::kRejected;
    persist();
    return *it;
  }
  it->status = ProposalStatus::kApproved;
  ++standards_.version;
  it->clause_id = "S" + std::to_string(standards_.version) + "-" +
                  zero_pad(static_cast<long long>(standards_.clauses.size()) + 1, 2);
  standards_.clauses.push_back({it->clause_id, it->clause_text, it->predicate});
  standards_.validate();
  for (auto& c : cases_) {
    if (c.proposal_id != id || c.status != CaseStatus::kAwaitingHuman) continue;
    c.status = CaseStatus::kResolved;
    c.record.reference = it->proposed_label;
    memory::Resolution r{c.record.id, c.record.query, c.record.product, memory::ResolutionKind::kStandardEvolution,
                         it->proposed_label, it->clause_id, true};
    for (const auto& dist : memory::distill(r)) memory_->write(dist.source, dist.content, clock_, dist.authority);
  }
  persist();
  return *it;
}

void Pipeline::release_breaker() {
  std::lock_guard lock(mu_);
  pipeline::release_breaker(guard_);
  persist();
}

// ---------------------------------------------------------------------------
// cycle

CycleReport Pipeline::run_cycle() {
  std::lock_guard lock(mu_);
  fs::path snap = dir_;
  snap += ".snapshot";
  fs::remove_all(snap);
  fs::copy(dir_, snap, fs::copy_options::recursive);
  try {
    CycleReport r = cycle_body();
    fs::remove_all(snap);
    return r;
  } catch (...) {
    fs::remove_all(dir_);
    fs::rename(snap, dir_);
    load_state();
    throw;
  }
}

CycleReport Pipeline::cycle_body() {
  const auto stage = [this](std::string_view name) {
    if (fault_hook_) fault_hook_(name);
  };
  const world::World& w = *world_;
  const int t = cycle_ + 1;
  const model::ProductLookup serving = [&w](std::string_view id) -> const Product& { return w.serving_product(id); };
  const model::ProductLookup pristine = [&w](std::string_view id) -> const Product& { return w.product(id); };
  const auto act = active();
  const fs::path stage_dir = dir_ / "stages" / cycle_tag(t);

  CycleReport rep;
  rep.cycle_id = t;
  rep.d_full_before = corpus_.size();
  rep.bad_case_rate_before = heldout_bad_rate(*model_, cycle_tag(t) + "-before.jsonl");

  // sample
  stage("sample");
  std::vector<double> weights;
  for (const auto& wq : w.queries()) weights.push_back(wq.weight);
  Rng rng = Rng::derive(config_.seed, "traffic", static_cast<std::uint64_t>(t));
  std::vector<const world::WorldQuery*> sampled;
  std::set<std::string> seen;
  for (std::size_t n = 0; n < config_.queries_per_cycle; ++n) {
    const world::WorldQuery& wq = w.queries()[rng.weighted_index(weights)];
    if (seen.insert(wq.query.id).second) sampled.push_back(&wq);
  }

  // serve + annotate
  stage("annotate");
  engine_->clear_logs();
  const serving::ServingMetrics m0 = engine_->metrics();
  std::vector<CrawledPair> crawled;
  std::vector<Prediction> online;
  std::map<std::string, std::vector<std::size_t>> flagged_by_query;
  for (const auto* wq : sampled) {
    const Query& q = wq->query;
    std::vector<std::string> extra;
    if (auto a = associations_.get(q.id)) {
      for (const auto& c : a->candidates) extra.push_back(c.product_id);
    }
    const serving::ServeResult res = engine_->search(q, act, extra);
    for (const auto& item : res.items) {
      const Product& d = w.serving_product(item.product_id);
      CrawledPair p;
      p.query_id = q.id;
      p.query_text = q.text;
      p.product_id = item.product_id;
      p.online = item.prediction.label;
      p.annotated = annotator_->annotate(q, d, standards_, act).label;
      p.oracle = w.oracle_label(q, item.product_id);
      if (p.annotated != p.online) flagged_by_query[q.id].push_back(crawled.size());
      crawled.push_back(std::move(p));
      online.push_back(item.prediction);
    }
  }
  rep.crawled = crawled.size();
  for (const auto& [q, idx] : flagged_by_query) rep.flagged += idx.size();

  // dialectic
  stage("dialectic");
  std::map<std::string, dialectic::RoutedAction> routed;
  std::vector<std::string> discovered_ids;
  for (const auto* wq : sampled) {
    auto fit = flagged_by_query.find(wq->query.id);
    if (fit == flagged_by_query.end()) continue;
    std::vector<dialectic::Candidate> cands;
    for (std::size_t i : fit->second) {
      cands.push_back({w.serving_product(crawled[i].product_id), online[i]});
    }
    dialectic::DialecticConfig dc{config_.max_rounds, 5, "c" + zero_pad(t, 3) + "-" + wq->query.id,
                                  standards_.version};
    auto batch = dialectic::run_dialectic(wq->query, cands, standards_, act, memory_.get(), *user_, *agent_, dc);
    for (auto& res : batch.results) {
      const std::string pid = res.case_record.product.id;
      CaseRecord rec = finish_case(std::move(res.case_record), std::move(res.transcript), t, {});
      for (std::size_t i : fit->second) {
        if (crawled[i].product_id != pid) continue;
        crawled[i].case_id = rec.record.id;
        crawled[i].route = std::string(dialectic::to_string(rec.route.kind));
      }
      routed[pair_key(wq->query.id, pid)] = rec.route;
      if (rec.route.low_confidence) ++rep.no_consensus;
      switch (rec.route.kind) {
        case dialectic::RouteKind::kModelError:
          ++rep.discovered;
          discovered_ids.push_back(rec.record.id);
          break;
        case dialectic::RouteKind::kExempt:
          ++rep.exempt;
          break;
        case dialectic::RouteKind::kStandardEvolution:
          ++rep.standard_evolution;
          break;
      }
    }
  }
  rep.discovery_rate = rep.crawled ? static_cast<double>(rep.discovered) / static_cast<double>(rep.crawled) : 0.0;

  // optimize
  stage("optimize");
  std::vector<Case> queued;
  for (const auto& c : cases_) {
    if (c.status == CaseStatus::kQueuedForRetrain && c.record.reference) queued.push_back(c.record);
  }
  optimizer::DiagnoseContext ctx{serving, pristine, parser_};
  optimizer::DiagnoseOutput diag = optimizer::diagnose(queued, standards_, act, memory_.get(), ctx);
  rep.feature_side = diag.feature_side.size();
  std::vector<Case> probe_cases;
  if (config_.probe && !diag.report.patterns().empty()) {
    optimizer::ProbeEnv env;
    const auto model = model_;
    env.online = [model, act](const Query& q, const Product& d) { return model->fine_score(q, d, act); };
    env.search = [this, &w](const Query& q, std::size_t k) {
      std::vector<Product> out;
      for (const auto& item : engine_->search(q, active()).items) {
        if (out.size() >= k) break;
        out.push_back(w.serving_product(item.product_id));
      }
      return out;
    };
    env.label = [this, act](const Query& q, const Product& d) {
      return annotator_->annotate(q, d, standards_, act).label;
    };
    env.compose = [&w](const world::QueryIntent& intent, std::string_view lang) {
      return w.compose_query_text(intent, lang);
    };
    env.parser = parser_;
    env.evaluation = pristine;
    optimizer::ProbeConfig pc = config_.probe_config;
    pc.seed = Rng::derive(config_.seed, "probe", static_cast<std::uint64_t>(t)).next_u64();
    optimizer::ProbeResult pr =
        optimizer::probe(diag.report, diag.model_side, standards_, act, memory_.get(), env, pc);
    probe_cases = std::move(pr.new_cases);
    for (const auto& content : pr.memory_candidates) {
      memory_->write(memory::Source::kDistilledTrace, content, clock_);
    }
  }
  rep.probe_cases = probe_cases.size();
  optimizer::DatasetDelta delta = optimizer::refine(diag.model_side, diag.report, corpus_, standards_, act,
                                                    *annotator_, ctx, probe_cases, config_.refine);
  rep.corrections = delta.corrections.size();
  rep.additions = delta.additions.size();
  write_text(stage_dir / "diagnosis.json", Json(diag.report).dump(2) + "\n");
  write_text(stage_dir / "delta.json", Json(delta).dump(2) + "\n");

  // D_t
  stage("corpus");
  Corpus inc;
  int n = 0;
  for (const auto& p : crawled) {
    RelevanceLabel label = p.annotated;
    if (!p.case_id.empty()) {
      for (const auto& c : cases_) {
        if (c.record.id == p.case_id && c.transcript.outcome.label) label = *c.transcript.outcome.label;
      }
    }
    inc.push_back({"s" + zero_pad(t, 3) + "-" + zero_pad(++n, 5), w.query(p.query_id).query, p.product_id, label,
                   "crawl"});
  }
  for (const auto& s : delta.additions) inc.push_back(s);
  Corpus next = optimizer::apply_delta(corpus_, optimizer::DatasetDelta{delta.corrections, {}, false});
  std::set<std::string> keys;
  for (const auto& s : next) keys.insert(dedup_key(s));
  for (const auto& s : inc) {
    if (keys.insert(dedup_key(s)).second) {
      next.push_back(s);
    } else {
      ++rep.dedup_count;
    }
  }
  rep.d_inc = inc.size();
  rep.d_full = next.size();
  corpus_ = std::move(next);
  write_records(stage_dir / "d_inc.jsonl", rows_of(inc));

  // retrain + guard
  stage("train");
  model::TrainConfig tc = config_.train;
  tc.seed = config_.train.seed + static_cast<std::uint64_t>(t);
  const std::string version = "ck-" + std::to_string(++checkpoint_counter_);
  const model::Checkpoint ck = model::train_multitask(corpus_, serving, *parser_, tc, version);
  ck.save(checkpoint_path(dir_, version));
  const model::RelevanceModel candidate(std::make_shared<const model::Checkpoint>(ck), parser_);
  stage("guard");
  const double inc_acc = eval_accuracy(*model_, eval_set_, serving, act);
  const double cand_acc = eval_accuracy(candidate, eval_set_, serving, act);
  const Selection sel = select_checkpoint({deployed_, inc_acc}, {{version, cand_acc}}, config_.guard, guard_);
  rep.decision = sel.decision;
  rep.candidate_version = version;
  rep.incumbent_accuracy = inc_acc;
  rep.candidate_accuracy = cand_acc;
  stage("deploy");
  if (sel.decision == Decision::kPromoted) load_model(version);
  rep.deployed_version = deployed_;

  for (auto& c : cases_) {
    if (c.status != CaseStatus::kQueuedForRetrain || !c.record.reference) continue;
    c.status = CaseStatus::kRetrained;
    memory::Resolution r{c.record.id, c.record.query, c.record.product, memory::ResolutionKind::kModelErrorRetrained,
                         c.record.reference, c.record.id, true};
    for (const auto& dist : memory::distill(r)) memory_->write(dist.source, dist.content, clock_, dist.authority);
  }

  // serving stats from this cycle's traffic
  stage("stats");
  const auto logs = engine_->logs();
  engine_->set_stats(serving::consistency_table(logs, config_.serving.min_support));
  const serving::ServingMetrics m1 = engine_->metrics();
  rep.fine_calls = m1.fine_calls - m0.fine_calls;
  const std::size_t served = m1.queries - m0.queries;
  rep.downgrade_fraction =
      served ? static_cast<double>(m1.downgraded - m0.downgraded) / static_cast<double>(served) : 0.0;

  // evaluate
  stage("evaluate");
  std::vector<Json> resolution_rows;
  for (const auto& id : discovered_ids) {
    for (const auto& c : cases_) {
      if (c.record.id != id) continue;
      const Prediction p = model_->fine_score(c.record.query, w.serving_product(c.record.product.id), act);
      const bool ok = p.label == *c.record.reference;
      rep.resolved += ok ? 1 : 0;
      resolution_rows.push_back(Json{{"case_id", id},
                                     {"reference", c.record.reference->value()},
                                     {"predicted", p.label.value()},
                                     {"deployed_version", deployed_}});
    }
  }
  if (rep.discovered) rep.resolution_rate = static_cast<double>(rep.resolved) / static_cast<double>(rep.discovered);
  write_records(dir_ / "resolution" / (cycle_tag(t) + ".jsonl"), resolution_rows);
  rep.bad_case_rate_after = heldout_bad_rate(*model_, cycle_tag(t) + ".jsonl");
  std::set<std::string> reference_bad;
  for (const auto& p : crawled) {
    if (p.online != p.oracle) reference_bad.insert(pair_key(p.query_id, p.product_id));
  }
  if (!reference_bad.empty()) rep.mining = dialectic::mining_metrics(routed, reference_bad);

  // deep search over queries with no strong result
  stage("deep_search");
  if (config_.deep_search) {
    const search::ScriptedPlanner planner(parser_);
    const search::ToolFn tools = [&w](const world::ToolCall& call) { return w.simulate_tool(call); };
    for (const auto* wq : sampled) {
      const bool strong = std::any_of(crawled.begin(), crawled.end(), [&](const CrawledPair& p) {
        return p.query_id == wq->query.id && p.annotated == RelevanceLabel::of(3);
      });
      if (strong || associations_.get(wq->query.id)) continue;
      const auto out = search::deep_search(wq->query, planner, tools, config_.search_budget, config_.search_threshold,
                                           config_.search_top_k);
      const auto gate = search::gate_associations(out.record, wq->query, *annotator_, standards_, act, memory_.get(),
                                                  serving);
      if (gate.record.candidates.empty()) continue;
      for (const auto& c : gate.record.candidates) {
        memory::Content content;
        content.kind = memory::ContentKind::kMapping;
        content.query_text = wq->query.text;
        content.product_id = c.product_id;
        content.label = RelevanceLabel::of(3);
        content.citation = search::path_string(c.meta);
        content.text = wq->query.text + " -> " + c.product_id;
        memory_->write(memory::Source::kDeepSearchArtifact, content, clock_);
      }
      associations_.put(gate.record);
      ++rep.associations;
    }
  }

  stage("persist");
  write_records(dir_ / "crawled" / (cycle_tag(t) + ".jsonl"), rows_of(crawled));
  write_records(dir_ / "logs" / (cycle_tag(t) + ".jsonl"), rows_of(logs));
  cycle_ = t;
  clock_ = t;
  reports_.push_back(rep);
  persist();
  return rep;
}

}  // namespace caseloop::pipeline
