#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>

#include "caseloop/core/error.hpp"
#include "caseloop/core/records.hpp"
#include "caseloop/pipeline/pipeline.hpp"

namespace httplib {
class Server;
}

namespace caseloop::service {

struct Response {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

// Transport-free routing over one pipeline. Bodies are JSON; the transcript
// endpoint answers ndjson, one turn per line then the outcome.
class Api {
 public:
  explicit Api(pipeline::Pipeline& pipeline) : pipeline_(pipeline) {}

  Response handle(const std::string& method, const std::string& path, const std::string& body) const;

  // Transcript lines for streaming; throws kUnknownEntity.
  std::vector<std::string> transcript_lines(const std::string& case_id) const;

 private:
  Response dispatch(const std::string& method, const std::string& path, const Json& body) const;

  pipeline::Pipeline& pipeline_;
};

int http_status(ErrorCode code);

// Binds every route; the transcript endpoint is chunked.
void mount(httplib::Server& server, const Api& api);

// Blocks until the server stops.
bool serve(pipeline::Pipeline& pipeline, const std::string& host, int port);

}  // namespace caseloop::service
