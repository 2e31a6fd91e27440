// caseloop command line: state management, model utilities, and one
// subcommand per service endpoint (routed through the same handler).

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "caseloop/core/error.hpp"
#include "caseloop/core/records.hpp"
#include "caseloop/core/text.hpp"
#include "caseloop/deep_search/deep_search.hpp"
#include "caseloop/model/index.hpp"
#include "caseloop/optimizer/optimizer.hpp"
#include "caseloop/pipeline/pipeline.hpp"
#include "caseloop/service/service.hpp"

using namespace caseloop;
namespace fs = std::filesystem;

namespace {

int emit(const service::Response& r) {
  std::fputs(r.body.c_str(), r.status >= 400 ? stderr : stdout);
  return r.status >= 400 ? 1 : 0;
}

int call(const fs::path& state, const std::string& method, const std::string& path, const Json& body = Json::object()) {
  auto p = pipeline::Pipeline::open(state);
  service::Api api(*p);
  return emit(api.handle(method, path, body.empty() ? "" : body.dump()));
}

void print(const Json& j) { std::cout << j.dump(2) << "\n"; }

std::shared_ptr<const model::RelevanceModel> load_model(const pipeline::Pipeline& p, const fs::path& ckpt) {
  auto parser = std::make_shared<const model::QueryParser>(p.world().lexicon(), p.world().typo_table());
  return std::make_shared<const model::RelevanceModel>(
      std::make_shared<const model::Checkpoint>(model::Checkpoint::load(ckpt)), parser);
}

fs::path checkpoint_or_deployed(const pipeline::Pipeline& p, const std::string& ckpt) {
  if (!ckpt.empty()) return ckpt;
  return p.dir() / "checkpoints" / (p.deployed_version() + ".ckpt");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"caseloop: bad-case mining and repair loop"};
  app.require_subcommand(1);
  std::string state = "state";
  app.add_option("--state", state, "state directory")->capture_default_str();

  // world
  auto* world_cmd = app.add_subcommand("world", "generate or inspect a world");
  world_cmd->require_subcommand(1);
  auto* world_gen = world_cmd->add_subcommand("generate", "write a world to a directory");
  std::string world_out;
  std::string config_file;
  world::WorldConfig wc;
  world_gen->add_option("--out", world_out)->required();
  world_gen->add_option("--seed", wc.seed);
  world_gen->add_option("--products", wc.num_products);
  world_gen->add_option("--queries", wc.num_queries);
  world_gen->add_option("--noise", wc.noise_rate);
  auto* world_digest = world_cmd->add_subcommand("digest", "digest of the state's world");

  // state
  auto* init_cmd = app.add_subcommand("init", "create a state directory");
  init_cmd->add_option("--config", config_file, "pipeline config json");
  std::optional<std::uint64_t> init_seed;
  init_cmd->add_option("--world-seed", init_seed);

  // model utilities
  auto* train_cmd = app.add_subcommand("train", "train a checkpoint on the state's corpus");
  std::string ckpt_out;
  int epochs = 0;
  std::uint64_t train_seed = 1;
  train_cmd->add_option("--out", ckpt_out)->required();
  train_cmd->add_option("--epochs", epochs);
  train_cmd->add_option("--seed", train_seed);

  auto* eval_cmd = app.add_subcommand("eval", "held-out bad-case rate and guard accuracy of a checkpoint");
  std::string ckpt;
  eval_cmd->add_option("--checkpoint", ckpt, "defaults to the deployed checkpoint");

  auto* embed_cmd = app.add_subcommand("embed", "query embedding");
  std::string text;
  embed_cmd->add_option("--checkpoint", ckpt);
  embed_cmd->add_option("--text", text)->required();

  auto* index_cmd = app.add_subcommand("index-build", "build and save the product index");
  std::string index_out;
  index_cmd->add_option("--checkpoint", ckpt);
  index_cmd->add_option("--out", index_out)->required();

  auto* opt_cmd = app.add_subcommand("optimize", "diagnose and refine a case file against the state corpus");
  std::string cases_file;
  std::string delta_out;
  opt_cmd->add_option("--cases", cases_file, "case records with reference labels")->required();
  opt_cmd->add_option("--out", delta_out, "write report and delta here");

  auto* ds_cmd = app.add_subcommand("deep-search", "precompute gated associations for a query slice");
  std::string slice;
  int budget = 6;
  std::string assoc_out;
  ds_cmd->add_option("--slice", slice, "one query id or text per line")->required();
  ds_cmd->add_option("--budget", budget)->capture_default_str();
  ds_cmd->add_option("--out", assoc_out, "defaults to the state's association store");

  auto* mem_cmd = app.add_subcommand("memory", "memory store maintenance");
  mem_cmd->require_subcommand(1);
  auto* mem_compact = mem_cmd->add_subcommand("compact", "drop repeated entries");
  auto* mem_digest = mem_cmd->add_subcommand("digest", "one-liners and cluster digests");

  // endpoint mirrors
  auto* case_cmd = app.add_subcommand("case", "bad-case workflows");
  case_cmd->require_subcommand(1);
  auto* case_report = case_cmd->add_subcommand("report", "POST /cases");
  std::string query, product, complaint, case_id, justification, reason, id;
  int verdict = -1;
  case_report->add_option("--query", query, "world query id or text")->required();
  case_report->add_option("--product", product)->required();
  case_report->add_option("--complaint", complaint);
  auto* case_list = case_cmd->add_subcommand("list", "GET /cases");
  auto* case_show = case_cmd->add_subcommand("show", "GET /cases/{id}");
  case_show->add_option("id", case_id)->required();
  auto* case_transcript = case_cmd->add_subcommand("transcript", "GET /cases/{id}/transcript");
  case_transcript->add_option("id", case_id)->required();
  auto* case_adj = case_cmd->add_subcommand("adjudicate", "POST /cases/{id}/adjudicate");
  case_adj->add_option("id", case_id)->required();
  case_adj->add_option("--verdict", verdict)->required()->check(CLI::Range(0, 3));
  case_adj->add_option("--justification", justification);

  auto* dir_cmd = app.add_subcommand("directive", "online directives");
  dir_cmd->require_subcommand(1);
  auto* dir_add = dir_cmd->add_subcommand("add", "POST /directives");
  std::string dir_file;
  dir_add->add_option("--file", dir_file, "directive json")->required();
  auto* dir_list = dir_cmd->add_subcommand("list", "GET /directives");
  auto* dir_retire = dir_cmd->add_subcommand("retire", "DELETE /directives/{id}");
  dir_retire->add_option("id", id)->required();

  auto* std_cmd = app.add_subcommand("standards", "GET /standards");
  auto* prop_cmd = app.add_subcommand("proposal", "standard refinement proposals");
  prop_cmd->require_subcommand(1);
  auto* prop_list = prop_cmd->add_subcommand("list", "GET /standards/proposals");
  auto* prop_approve = prop_cmd->add_subcommand("approve", "POST /standards/proposals/{id}/approve");
  prop_approve->add_option("id", id)->required();
  prop_approve->add_option("--reason", reason);
  auto* prop_reject = prop_cmd->add_subcommand("reject", "POST /standards/proposals/{id}/reject");
  prop_reject->add_option("id", id)->required();
  prop_reject->add_option("--reason", reason)->required();

  auto* metrics_cmd = app.add_subcommand("metrics", "GET /metrics");
  auto* cycle_cmd = app.add_subcommand("run-cycle", "POST /pipeline/run-cycle");
  int cycles = 1;
  cycle_cmd->add_option("-n,--cycles", cycles)->capture_default_str();
  auto* release_cmd = app.add_subcommand("release-breaker", "POST /pipeline/release-breaker");
  auto* score_cmd = app.add_subcommand("score", "POST /score");
  score_cmd->add_option("--query", query)->required();
  score_cmd->add_option("--product", product)->required();

  auto* serve_cmd = app.add_subcommand("serve", "run the service");
  std::string host = "127.0.0.1";
  int port = 8080;
  serve_cmd->add_option("--host", host)->capture_default_str();
  serve_cmd->add_option("--port", port)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (world_gen->parsed()) {
      world::World::generate(wc).export_to(world_out);
      std::cout << world_out << "\n";
      return 0;
    }
    if (world_digest->parsed()) {
      auto p = pipeline::Pipeline::open(state);
      std::cout << p->world().digest() << "\n";
      return 0;
    }
    if (init_cmd->parsed()) {
      pipeline::PipelineConfig cfg;
      if (!config_file.empty()) cfg = Json::parse(read_text(config_file)).get<pipeline::PipelineConfig>();
      if (init_seed) cfg.world.seed = *init_seed;
      auto p = pipeline::Pipeline::init(state, cfg);
      print(p->metrics());
      return 0;
    }
    if (train_cmd->parsed()) {
      auto p = pipeline::Pipeline::open(state);
      const world::World& w = p->world();
      model::QueryParser parser(w.lexicon(), w.typo_table());
      model::TrainConfig tc = p->config().train;
      if (epochs > 0) tc.epochs = epochs;
      tc.seed = train_seed;
      Corpus corpus = from_records<Sample>(read_records(p->dir() / "corpus.jsonl"));
      const auto ck = model::train_multitask(
          corpus, [&w](std::string_view id) -> const Product& { return w.serving_product(id); }, parser, tc,
          fs::path(ckpt_out).stem().string());
      ck.save(ckpt_out);
      print(Json{{"checkpoint", ckpt_out}, {"digest", ck.digest()}, {"parameters", ck.parameter_count()}});
      return 0;
    }
    if (eval_cmd->parsed()) {
      auto p = pipeline::Pipeline::open(state);
      const auto m = load_model(*p, checkpoint_or_deployed(*p, ckpt));
      const world::World& w = p->world();
      const model::ProductLookup lookup = [&w](std::string_view i) -> const Product& { return w.serving_product(i); };
      std::vector<Case> cases;
      for (const auto& r : read_records(p->dir() / "heldout.jsonl")) {
        const Sample s = r.get<Sample>();
        const Product& d = lookup(s.product_id);
        cases.emplace_back(s.id, s.query, d, s.label, m->fine_score(s.query, d, {}), Provenance::kEvaluation);
      }
      const Corpus eval = from_records<Sample>(read_records(p->dir() / "eval_set.jsonl"));
      print(Json{{"checkpoint", m->checkpoint().version},
                 {"heldout_bad_case_rate", bad_case_rate(cases)},
                 {"guard_accuracy", pipeline::eval_accuracy(*m, eval, lookup, {})}});
      return 0;
    }
    if (embed_cmd->parsed()) {
      auto p = pipeline::Pipeline::open(state);
      const auto m = load_model(*p, checkpoint_or_deployed(*p, ckpt));
      Query q;
      q.id = "cli";
      q.text = text;
      print(Json{{"text", text}, {"embedding", m->encode(q)}});
      return 0;
    }
    if (index_cmd->parsed()) {
      auto p = pipeline::Pipeline::open(state);
      const auto m = load_model(*p, checkpoint_or_deployed(*p, ckpt));
      std::vector<Product> products;
      for (const auto& d : p->world().products()) products.push_back(p->world().serving_product(d.id));
      const auto idx = model::ProductIndex::build(*m, products);
      idx.save(index_out);
      print(Json{{"index", index_out}, {"size", idx.size()}, {"version", idx.version()}});
      return 0;
    }
    if (opt_cmd->parsed()) {
      auto p = pipeline::Pipeline::open(state);
      const world::World& w = p->world();
      auto parser = std::make_shared<const model::QueryParser>(w.lexicon(), w.typo_table());
      std::vector<Case> cases;
      for (const auto& r : read_records(cases_file)) cases.push_back(case_from_json(r));
      optimizer::DiagnoseContext ctx{[&w](std::string_view i) -> const Product& { return w.serving_product(i); },
                                     [&w](std::string_view i) -> const Product& { return w.product(i); }, parser};
      const auto standards = p->standards();
      const auto diag = optimizer::diagnose(cases, standards, {}, nullptr, ctx);
      const auto cfg = p->config();
      auto judge = std::make_shared<const annotator::MockJudge>(w, parser, cfg.judge_epsilon, cfg.seed);
      const annotator::Annotator ann([&w](const world::ToolCall& c) { return w.simulate_tool(c); }, judge, parser,
                                     annotator::GrmParams::defaults(), {cfg.annotator_k});
      const Corpus corpus = from_records<Sample>(read_records(p->dir() / "corpus.jsonl"));
      const auto delta = optimizer::refine(diag.model_side, diag.report, corpus, standards, {}, ann, ctx, {}, cfg.refine);
      const Json out{{"report", Json(diag.report)}, {"delta", Json(delta)}, {"feature_side", diag.feature_side.size()}};
      if (!delta_out.empty()) {
        write_text(delta_out, out.dump(2) + "\n");
        print(Json{{"written", delta_out}, {"corrections", delta.corrections.size()},
                   {"additions", delta.additions.size()}});
      } else {
        print(out);
      }
      return 0;
    }
    if (ds_cmd->parsed()) {
      auto p = pipeline::Pipeline::open(state);
      const world::World& w = p->world();
      auto parser = std::make_shared<const model::QueryParser>(w.lexicon(), w.typo_table());
      const auto cfg = p->config();
      auto judge = std::make_shared<const annotator::MockJudge>(w, parser, cfg.judge_epsilon, cfg.seed);
      const annotator::ToolFn tools = [&w](const world::ToolCall& c) { return w.simulate_tool(c); };
      const annotator::Annotator ann(tools, judge, parser, annotator::GrmParams::defaults(), {cfg.annotator_k});
      const search::ScriptedPlanner planner(parser);
      const fs::path out_path = assoc_out.empty() ? p->dir() / "associations.jsonl" : fs::path(assoc_out);
      search::AssociationStore store =
          fs::exists(out_path) ? search::AssociationStore::load(out_path) : search::AssociationStore();
      std::istringstream lines(read_text(slice));
      std::string line;
      int n = 0;
      while (std::getline(lines, line)) {
        if (normalize_text(line).empty()) continue;
        Query q;
        if (const auto* wq = w.find_query(line)) {
          q = wq->query;
        } else {
          q.id = "slice-" + zero_pad(++n, 4);
          q.text = line;
        }
        const auto res = search::deep_search(q, planner, tools, budget, cfg.search_threshold, cfg.search_top_k);
        const auto gate = search::gate_associations(
            res.record, q, ann, p->standards(), {}, nullptr,
            [&w](std::string_view i) -> const Product& { return w.serving_product(i); });
        if (!gate.record.candidates.empty()) store.put(gate.record);
        std::cout << Json{{"query_id", q.id},
                          {"steps", res.state.step},
                          {"found", res.record.candidates.size()},
                          {"kept", gate.record.candidates.size()}}
                         .dump()
                  << "\n";
      }
      store.save(out_path);
      return 0;
    }
    if (mem_compact->parsed() || mem_digest->parsed()) {
      auto p = pipeline::Pipeline::open(state);
      memory::MemoryStore store([](const std::string&) { return std::vector<double>{}; });
      store.load(p->dir() / "memory");
      if (mem_compact->parsed()) {
        const auto dropped = store.compact();
        store.save(p->dir() / "memory");
        print(Json{{"dropped", dropped}, {"size", store.size()}});
      } else {
        for (const auto& e : store.entries()) std::cout << memory::MemoryStore::one_liner(e) << "\n";
        for (const auto& [key, digest] : store.cluster_digests()) std::cout << key << ": " << digest << "\n";
      }
      return 0;
    }

    if (case_report->parsed()) {
      return call(state, "POST", "/cases", Json{{"query", query}, {"product_id", product}, {"complaint", complaint}});
    }
    if (case_list->parsed()) return call(state, "GET", "/cases");
    if (case_show->parsed()) return call(state, "GET", "/cases/" + case_id);
    if (case_transcript->parsed()) return call(state, "GET", "/cases/" + case_id + "/transcript");
    if (case_adj->parsed()) {
      return call(state, "POST", "/cases/" + case_id + "/adjudicate",
                  Json{{"verdict", verdict}, {"justification", justification}});
    }
    if (dir_add->parsed()) return call(state, "POST", "/directives", Json::parse(read_text(dir_file)));
    if (dir_list->parsed()) return call(state, "GET", "/directives");
    if (dir_retire->parsed()) return call(state, "DELETE", "/directives/" + id);
    if (std_cmd->parsed()) return call(state, "GET", "/standards");
    if (prop_list->parsed()) return call(state, "GET", "/standards/proposals");
    if (prop_approve->parsed()) {
      return call(state, "POST", "/standards/proposals/" + id + "/approve", Json{{"reason", reason}});
    }
    if (prop_reject->parsed()) {
      return call(state, "POST", "/standards/proposals/" + id + "/reject", Json{{"reason", reason}});
    }
    if (metrics_cmd->parsed()) return call(state, "GET", "/metrics");
    if (cycle_cmd->parsed()) {
      auto p = pipeline::Pipeline::open(state);
      service::Api api(*p);
      for (int c = 0; c < cycles; ++c) {
        if (int rc = emit(api.handle("POST", "/pipeline/run-cycle", ""))) return rc;
      }
      return 0;
    }
    if (release_cmd->parsed()) return call(state, "POST", "/pipeline/release-breaker");
    if (score_cmd->parsed()) return call(state, "POST", "/score", Json{{"query", query}, {"product_id", product}});
    if (serve_cmd->parsed()) {
      auto p = pipeline::Pipeline::open(state);
      std::cerr << "listening on " << host << ":" << port << "\n";
      return service::serve(*p, host, port) ? 0 : 1;
    }
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
