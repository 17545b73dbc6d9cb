// SPDX-License-Identifier: Apache-2.0
#pragma once

// cpp-httplib transport for remote tool adapters, plus the chat-completions
// agent backend.

#include <chrono>
#include <cstdlib>
#include <memory>
#include <string>
#include <thread>
#include <utility>

#include "audiotoolagent/adapters.hpp"
#include "audiotoolagent/agent.hpp"
#include "httplib.h"
#include "json.hpp"

namespace ata {

/// Splits "https://host:port/base" into ("https://host:port", "/base").
inline std::pair<std::string, std::string> split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  const auto host_start = scheme_end == std::string::npos ? 0 : scheme_end + 3;
  const auto path_start = url.find('/', host_start);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

class HttplibClient final : public HttpClient {
 public:
  HttpResponse post(const HttpRequest& request) override {
    const auto [origin, path] = split_url(request.url);
    httplib::Client client(origin);
    const auto timeout = std::chrono::duration_cast<std::chrono::microseconds>(request.timeout);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);

    httplib::Headers headers;
    for (const auto& [k, v] : request.headers) headers.emplace(k, v);

    const auto started = std::chrono::steady_clock::now();
    httplib::Result res;
    if (!request.parts.empty()) {
      httplib::MultipartFormDataItems items;
      for (const auto& p : request.parts) items.push_back({p.name, p.content, p.filename, p.content_type});
      res = client.Post(path, headers, items);
    } else {
      res = client.Post(path, headers, request.body, "application/json");
    }
    if (!res) {
      const auto elapsed = std::chrono::steady_clock::now() - started;
      const bool timed_out = res.error() == httplib::Error::ConnectionTimeout ||
                             elapsed >= request.timeout * 0.95;
      throw TransportError("POST " + request.url + ": " + httplib::to_string(res.error()), timed_out);
    }
    return {res->status, res->body};
  }
};

inline std::shared_ptr<HttpClient> make_http_client() { return std::make_shared<HttplibClient>(); }

/// Agent backend speaking the chat-completions wire format. Tool turns are
/// sent as user messages labelled with the tool name, since the tag
/// protocol does not use native tool-call ids.
class ChatCompletionsBackend final : public AgentBackend {
 public:
  ChatCompletionsBackend(AgentConfig config, std::shared_ptr<HttpClient> transport)
      : config_(std::move(config)), transport_(std::move(transport)) {}

  std::string complete(const std::vector<ChatMessage>& messages, std::int64_t seed,
                       const SamplingConfig& sampling) const override {
    nlohmann::json body = nlohmann::json::object();
    if (sampling.extra.is_object()) body = sampling.extra;
    body["model"] = config_.model_id;
    body["seed"] = seed;
    if (sampling.temperature) body["temperature"] = *sampling.temperature;
    auto wire = nlohmann::json::array();
    for (const auto& m : messages) {
      if (m.role == Role::tool) {
        wire.push_back({{"role", "user"}, {"content", "Tool '" + m.name + "' returned:\n" + m.content}});
      } else {
        wire.push_back({{"role", to_string(m.role)}, {"content", m.content}});
      }
    }
    body["messages"] = std::move(wire);

    HttpRequest req;
    req.url = detail::strip_trailing_slash(config_.endpoint.value_or("")) + "/chat/completions";
    req.body = body.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
    req.timeout = config_.timeout;
    if (config_.auth_env) {
      const char* key = std::getenv(config_.auth_env->c_str());
      if (!key || !*key) throw BackendError("environment variable " + *config_.auth_env + " is not set");
      req.headers.emplace_back("Authorization", std::string("Bearer ") + key);
    }

    std::string last_error;
    for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
      if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(250 * attempt));
      HttpResponse resp;
      try {
        resp = transport_->post(req);
      } catch (const TransportError& e) {
        last_error = e.what();
        continue;
      }
      if (resp.status >= 200 && resp.status < 300) {
        if (auto text = detail::chat_completion_text(resp.body)) return *text;
        last_error = "unrecognized response body";
        continue;
      }
      last_error = "HTTP " + std::to_string(resp.status) + ": " + resp.body.substr(0, 200);
      if (!detail::retryable_status(resp.status)) break;
    }
    throw BackendError("agent backend failed: " + last_error);
  }

 private:
  AgentConfig config_;
  std::shared_ptr<HttpClient> transport_;
};

inline std::shared_ptr<const AgentBackend> make_backend(const AgentConfig& config,
                                                        std::shared_ptr<HttpClient> transport) {
  switch (config.kind) {
    case BackendKind::scripted:
      return std::make_shared<ScriptedBackend>(load_scripted_backend(*config.script));
    case BackendKind::chat_completions:
      if (!transport) transport = make_http_client();
      return std::make_shared<ChatCompletionsBackend>(config, std::move(transport));
  }
  throw ConfigError("unsupported agent backend");
}

}  // namespace ata
