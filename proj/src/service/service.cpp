#include "caseloop/service/service.hpp"

#include <regex>

#include "httplib.h"

#include "caseloop/core/error.hpp"

namespace caseloop::service {

namespace {

Response json_response(const Json& j, int status = 200) { return {status, "application/json", j.dump() + "\n"}; }

Response error_response(int status, std::string_view code, const std::string& message) {
  return json_response(Json{{"error", code}, {"message", message}}, status);
}

Json case_summary(const pipeline::CaseRecord& c) {
  return Json{{"id", c.record.id},
              {"query_id", c.record.query.id},
              {"query", c.record.query.text},
              {"product_id", c.record.product.id},
              {"route", dialectic::to_string(c.route.kind)},
              {"low_confidence", c.route.low_confidence},
              {"status", pipeline::to_string(c.status)},
              {"online_label", c.record.online_prediction.label.value()},
              {"reference", c.record.reference ? Json(c.record.reference->value()) : Json(nullptr)},
              {"rounds", c.transcript.round_count},
              {"proposal_id", c.proposal_id},
              {"cycle", c.cycle}};
}

const std::regex kCase("^/cases/([^/]+)$");
const std::regex kTranscript("^/cases/([^/]+)/transcript$");
const std::regex kAdjudicate("^/cases/([^/]+)/adjudicate$");
const std::regex kDirective("^/directives/([^/]+)$");
const std::regex kDecide("^/standards/proposals/([^/]+)/(approve|reject)$");

std::string require_string(const Json& body, const char* key) {
  if (!body.contains(key) || !body[key].is_string()) {
    throw Error(ErrorCode::kInvalidArgument, std::string("missing string field '") + key + "'");
  }
  return body[key].get<std::string>();
}

}  // namespace

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::kUnknownEntity:
      return 404;
    case ErrorCode::kCaseNotAwaiting:
    case ErrorCode::kAlreadyDecided:
      return 409;
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kInvalidConfig:
    case ErrorCode::kInvalidQuery:
    case ErrorCode::kInvalidK:
      return 400;
    case ErrorCode::kAnnotatorUnavailable:
    case ErrorCode::kToolUnavailable:
      return 503;
    default:
      return 500;
  }
}

std::vector<std::string> Api::transcript_lines(const std::string& case_id) const {
  const auto c = pipeline_.find_case(case_id);
  if (!c) throw Error(ErrorCode::kUnknownEntity, "unknown case " + case_id);
  std::vector<std::string> out;
  for (const auto& turn : c->transcript.turns) {
    out.push_back(Json{{"type", "turn"},
                       {"round", turn.round},
                       {"speaker", dialectic::to_string(turn.speaker)},
                       {"argument", Json(turn.argument)}}
                      .dump());
  }
  Json end{{"type", "outcome"},
           {"outcome", Json(c->transcript)["outcome"]},
           {"route", dialectic::to_string(c->route.kind)},
           {"low_confidence", c->route.low_confidence},
           {"status", pipeline::to_string(c->status)}};
  end["verdict"] = c->verdict ? Json(c->verdict->value()) : Json(nullptr);
  out.push_back(end.dump());
  return out;
}

Response Api::handle(const std::string& method, const std::string& path, const std::string& body) const {
  try {
    Json j = body.empty() ? Json::object() : Json::parse(body);
    return dispatch(method, path, j);
  } catch (const Error& e) {
    return error_response(http_status(e.code()), to_string(e.code()), e.what());
  } catch (const Json::exception& e) {
    return error_response(400, "invalid_argument", e.what());
  } catch (const std::exception& e) {
    return error_response(500, "internal", e.what());
  }
}

Response Api::dispatch(const std::string& method, const std::string& path, const Json& body) const {
  auto& p = pipeline_;
  std::smatch m;
  if (path == "/cases") {
    if (method == "POST") {
      pipeline::CaseSubmission s{require_string(body, "query"), require_string(body, "product_id"),
                                 body.value("complaint", std::string())};
      const auto c = p.handle_case_report(s);
      Json out = case_summary(c);
      out["transcript_url"] = "/cases/" + c.record.id + "/transcript";
      return json_response(out, 201);
    }
    if (method == "GET") {
      Json out = Json::array();
      for (const auto& c : p.cases()) out.push_back(case_summary(c));
      return json_response(out);
    }
  }
  if (std::regex_match(path, m, kCase) && method == "GET") {
    const auto c = p.find_case(m[1]);
    if (!c) throw Error(ErrorCode::kUnknownEntity, "unknown case " + m[1].str());
    Json out = Json(*c);
    out["summary"] = case_summary(*c);
    return json_response(out);
  }
  if (std::regex_match(path, m, kTranscript) && method == "GET") {
    std::string text;
    for (const auto& line : transcript_lines(m[1])) text += line + "\n";
    return {200, "application/x-ndjson", text};
  }
  if (std::regex_match(path, m, kAdjudicate) && method == "POST") {
    if (!body.contains("verdict") || !body["verdict"].is_number_integer()) {
      throw Error(ErrorCode::kInvalidArgument, "missing integer field 'verdict'");
    }
    const auto c = p.handle_adjudication(m[1], RelevanceLabel::of(body["verdict"].get<int>()),
                                         body.value("justification", std::string()));
    return json_response(case_summary(c));
  }
  if (path == "/directives") {
    if (method == "GET") return json_response(Json(p.directives()));
    if (method == "POST") return json_response(Json(p.add_directive(body.get<Directive>())), 201);
  }
  if (std::regex_match(path, m, kDirective) && method == "DELETE") {
    p.retire_directive(m[1]);
    return json_response(Json{{"retired", m[1].str()}});
  }
  if (path == "/standards" && method == "GET") return json_response(Json(p.standards()));
  if (path == "/standards/proposals" && method == "GET") return json_response(Json(p.proposals()));
  if (std::regex_match(path, m, kDecide) && method == "POST") {
    const bool approve = m[2] == "approve";
    const std::string reason = body.value("reason", std::string());
    if (!approve && reason.empty()) throw Error(ErrorCode::kInvalidArgument, "rejection needs a reason");
    const auto out = p.decide_proposal(m[1], approve, reason);
    return json_response(Json{{"proposal", Json(out)}, {"standards_version", p.standards().version}});
  }
  if (path == "/metrics" && method == "GET") return json_response(p.metrics());
  if (path == "/pipeline/run-cycle" && method == "POST") return json_response(Json(p.run_cycle()));
  if (path == "/pipeline/release-breaker" && method == "POST") {
    p.release_breaker();
    return json_response(Json(p.guard()));
  }
  if (path == "/score" && method == "POST") {
    const auto s = p.score(require_string(body, "query"), require_string(body, "product_id"));
    Json out{{"prediction", Json(s.prediction)}, {"label", s.prediction.label.value()}};
    out["applied_rule"] = s.applied_rule ? Json(*s.applied_rule) : Json(nullptr);
    return json_response(out);
  }
  return error_response(404, "not_found", method + " " + path);
}

void mount(httplib::Server& server, const Api& api) {
  const auto plain = [&api](const httplib::Request& req, httplib::Response& res) {
    const Response r = api.handle(req.method, req.path, req.body);
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  server.Get("/cases/([^/]+)/transcript", [&api](const httplib::Request& req, httplib::Response& res) {
    std::vector<std::string> lines;
    try {
      lines = api.transcript_lines(req.matches[1]);
    } catch (const Error& e) {
      res.status = http_status(e.code());
      res.set_content(Json{{"error", to_string(e.code())}, {"message", e.what()}}.dump() + "\n", "application/json");
      return;
    }
    auto shared = std::make_shared<std::vector<std::string>>(std::move(lines));
    auto next = std::make_shared<std::size_t>(0);
    res.set_chunked_content_provider("application/x-ndjson", [shared, next](std::size_t, httplib::DataSink& sink) {
      if (*next < shared->size()) {
        const std::string line = (*shared)[(*next)++] + "\n";
        sink.write(line.data(), line.size());
      } else {
        sink.done();
      }
      return true;
    });
  });
  const std::string any = ".*";
  server.Get(any, plain);
  server.Post(any, plain);
  server.Delete(any, plain);
}

bool serve(pipeline::Pipeline& pipeline, const std::string& host, int port) {
  Api api(pipeline);
  httplib::Server server;
  mount(server, api);
  return server.listen(host, port);
}

}  // namespace caseloop::service
