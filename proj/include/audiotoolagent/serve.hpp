// SPDX-License-Identifier: Apache-2.0
#pragma once

// Streaming session server.
//
//   POST /sessions              start a session (JSON or multipart upload)
//   GET  /sessions/{id}/events  server-sent events, replayed from the start
//                               (or after Last-Event-ID) until session_ended
//   GET  /sessions/{id}         status and, once finished, the full trace
//   GET  /tools                 registry listing
//   GET  /*                     static UI assets when a UI directory is set
//
// Each SSE frame is
//   id: <sequence>\nevent: <kind>\ndata: <SessionEvent JSON>\n\n

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "audiotoolagent/agent.hpp"
#include "httplib.h"
#include "json.hpp"

namespace ata {

enum class EventKind { session_started, assistant_text, tool_call_started, tool_result, answer, session_ended };

inline std::string_view to_string(EventKind k) {
  switch (k) {
    case EventKind::session_started: return "session_started";
    case EventKind::assistant_text: return "assistant_text";
    case EventKind::tool_call_started: return "tool_call_started";
    case EventKind::tool_result: return "tool_result";
    case EventKind::answer: return "answer";
    case EventKind::session_ended: return "session_ended";
  }
  return "unknown";
}

struct SessionEvent {
  EventKind kind;
  nlohmann::json payload;
  std::uint64_t sequence = 0;
  std::string session_id;
};

inline nlohmann::json to_json(const SessionEvent& e) {
  return {{"event_kind", to_string(e.kind)},
          {"sequence", e.sequence},
          {"session_id", e.session_id},
          {"payload", e.payload}};
}

inline std::string to_sse(const SessionEvent& e) {
  return "id: " + std::to_string(e.sequence) + "\nevent: " + std::string(to_string(e.kind)) +
         "\ndata: " + to_json(e).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) + "\n\n";
}

/// Append-only event buffer for one session; one writer, many readers.
class SessionLog {
 public:
  explicit SessionLog(std::string id) : id_(std::move(id)) {}

  const std::string& id() const { return id_; }

  std::uint64_t append(EventKind kind, nlohmann::json payload) {
    std::lock_guard lock(mu_);
    const auto seq = static_cast<std::uint64_t>(events_.size()) + 1;
    events_.push_back({kind, std::move(payload), seq, id_});
    if (kind == EventKind::session_ended) ended_ = true;
    cv_.notify_all();
    return seq;
  }

  /// Waits until an event with sequence > after exists, the session ends,
  /// or the timeout expires.
  std::optional<SessionEvent> next_after(std::uint64_t after, std::chrono::milliseconds timeout) {
    std::unique_lock lock(mu_);
    cv_.wait_for(lock, timeout, [&] { return events_.size() > after || ended_; });
    if (events_.size() > after) return events_[after];
    return std::nullopt;
  }

  std::vector<SessionEvent> snapshot() const {
    std::lock_guard lock(mu_);
    return events_;
  }

  bool ended() const {
    std::lock_guard lock(mu_);
    return ended_;
  }

  void set_trace(SessionTrace trace) {
    std::lock_guard lock(mu_);
    trace_ = std::move(trace);
  }

  std::optional<SessionTrace> trace() const {
    std::lock_guard lock(mu_);
    return trace_;
  }

 private:
  std::string id_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::vector<SessionEvent> events_;
  std::optional<SessionTrace> trace_;
  bool ended_ = false;
};

struct ServeOptions {
  /// Completed sessions kept for replay; the oldest are dropped first.
  std::size_t max_retained = 64;
  std::optional<std::filesystem::path> ui_dir;
  /// Where uploaded audio is written; a temp directory when unset.
  std::optional<std::filesystem::path> upload_dir;
  SessionOptions session;
};

/// Runs one session and mirrors it into `log` as events.
inline SessionTrace run_logged_session(const AudioTask& task, const AgentBackend& backend,
                                       const ToolRegistry& registry, const SessionOptions& options,
                                       SessionLog& log) {
  log.append(EventKind::session_started, {{"task_id", task.id},
                                          {"question", task.question},
                                          {"audio", task.audio_refs},
                                          {"choices", task.choices ? nlohmann::json(*task.choices)
                                                                   : nlohmann::json(nullptr)}});
  int call_index = 0;
  SessionHooks hooks;
  hooks.assistant_text = [&](const std::string& text) {
    log.append(EventKind::assistant_text, {{"text", text}});
  };
  hooks.tool_call_started = [&](const ToolCallRequest& call) {
    auto j = to_json(call);
    j["call_index"] = ++call_index;
    log.append(EventKind::tool_call_started, std::move(j));
  };
  hooks.tool_result = [&](const ToolCallRequest&, const ToolResult& result) {
    log.append(EventKind::tool_result, {{"call_index", call_index}, {"result", to_json(result)}});
  };

  auto trace = run_session(task, backend, registry, options, hooks);
  if (trace.outcome == Outcome::answered) log.append(EventKind::answer, {{"answer", *trace.answer}});
  nlohmann::json ended = {{"outcome", to_string(trace.outcome)},
                          {"tool_call_count", trace.tool_call_count},
                          {"wall_time_s", trace.wall_time.count()}};
  ended["answer"] = trace.answer ? nlohmann::json(*trace.answer) : nlohmann::json(nullptr);
  if (trace.error) ended["error"] = *trace.error;
  log.set_trace(trace);
  log.append(EventKind::session_ended, std::move(ended));
  return trace;
}

class SessionServer {
 public:
  SessionServer(ToolRegistry registry, std::shared_ptr<const AgentBackend> backend, ServeOptions options = {})
      : registry_(std::move(registry)), backend_(std::move(backend)), options_(std::move(options)) {
    routes();
  }

  ~SessionServer() { stop(); }

  SessionServer(const SessionServer&) = delete;
  SessionServer& operator=(const SessionServer&) = delete;

  /// Binds to host:port (port 0 picks a free port). Returns the bound port
  /// or -1.
  int bind(const std::string& host, int port) {
    if (port == 0) return server_.bind_to_any_port(host);
    return server_.bind_to_port(host, port) ? port : -1;
  }

  /// Serves until stop(). Call after bind().
  bool listen() { return server_.listen_after_bind(); }

  void start_background() {
    listener_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  void stop() {
    if (stopped_.exchange(true)) return;
    server_.stop();
    if (listener_.joinable()) listener_.join();
    std::vector<std::thread> workers;
    {
      std::lock_guard lock(mu_);
      workers.swap(workers_);
    }
    for (auto& w : workers)
      if (w.joinable()) w.join();
  }

  /// Starts a session in the background and returns its id.
  std::string start_session(AudioTask task, std::optional<std::int64_t> seed = std::nullopt) {
    std::shared_ptr<SessionLog> log;
    {
      std::lock_guard lock(mu_);
      char buf[32];
      std::snprintf(buf, sizeof buf, "s%06llu", static_cast<unsigned long long>(++counter_));
      log = std::make_shared<SessionLog>(buf);
      if (task.id.empty()) task.id = buf;
      sessions_.emplace(log->id(), log);
    }
    auto options = options_.session;
    if (seed) options.seed = *seed;
    std::thread worker([this, log, task = std::move(task), options] {
      run_logged_session(task, *backend_, registry_, options, *log);
      retire(log->id());
    });
    std::lock_guard lock(mu_);
    workers_.push_back(std::move(worker));
    return log->id();
  }

  std::shared_ptr<SessionLog> find(const std::string& id) const {
    std::lock_guard lock(mu_);
    const auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
  }

  const ToolRegistry& registry() const { return registry_; }

 private:
  void retire(const std::string& id) {
    std::lock_guard lock(mu_);
    completed_.push_back(id);
    while (completed_.size() > options_.max_retained) {
      sessions_.erase(completed_.front());
      completed_.pop_front();
    }
  }

  static void json_reply(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace), "application/json");
  }

  static void bad_request(httplib::Response& res, const std::string& why) {
    json_reply(res, 400, {{"error", why}});
  }

  std::filesystem::path upload_dir() {
    std::lock_guard lock(mu_);
    if (!upload_dir_) {
      upload_dir_ = options_.upload_dir.value_or(std::filesystem::temp_directory_path() / "audiotoolagent-uploads");
      std::filesystem::create_directories(*upload_dir_);
    }
    return *upload_dir_;
  }

  // Builds a task from a JSON body or a multipart form. Returns an error
  // string on malformed input.
  std::variant<AudioTask, std::string> parse_task(const httplib::Request& req) {
    AudioTask task;
    if (req.is_multipart_form_data()) {
      if (!req.has_file("question")) return std::string("missing 'question' field");
      task.question = req.get_file_value("question").content;
      if (req.has_file("choices")) {
        const auto choices = nlohmann::json::parse(req.get_file_value("choices").content, nullptr, false);
        if (!choices.is_array()) return std::string("'choices' must be a JSON array");
        task.choices.emplace();
        for (const auto& c : choices) {
          if (!c.is_string()) return std::string("'choices' entries must be strings");
          task.choices->push_back(c.get<std::string>());
        }
      }
      for (const auto& file : req.get_file_values("audio")) {
        if (file.filename.empty()) {
          task.audio_refs.push_back(file.content);  // a server-side path
          continue;
        }
        const auto name = std::filesystem::path(file.filename).filename().string();
        const auto dest = upload_dir() / (std::to_string(++uploads_) + "-" + name);
        std::ofstream out(dest, std::ios::binary);
        out << file.content;
        if (!out) return std::string("cannot store upload");
        task.audio_refs.push_back(dest.string());
      }
    } else {
      const auto body = nlohmann::json::parse(req.body, nullptr, false);
      if (!body.is_object()) return std::string("body must be a JSON object");
      if (!body.contains("question") || !body["question"].is_string())
        return std::string("missing string 'question'");
      task.question = body["question"].get<std::string>();
      if (body.contains("audio")) {
        const auto& a = body["audio"];
        if (a.is_string()) {
          task.audio_refs.push_back(a.get<std::string>());
        } else if (a.is_array()) {
          for (const auto& e : a) {
            if (!e.is_string()) return std::string("'audio' entries must be strings");
            task.audio_refs.push_back(e.get<std::string>());
          }
        } else {
          return std::string("'audio' must be a string or list");
        }
      }
      if (body.contains("choices") && !body["choices"].is_null()) {
        if (!body["choices"].is_array()) return std::string("'choices' must be a list");
        task.choices.emplace();
        for (const auto& c : body["choices"]) {
          if (!c.is_string()) return std::string("'choices' entries must be strings");
          task.choices->push_back(c.get<std::string>());
        }
      }
      if (body.contains("id") && body["id"].is_string()) task.id = body["id"].get<std::string>();
    }
    try {
      AudioTask probe = task;
      if (probe.id.empty()) probe.id = "request";
      validate(probe);
    } catch (const Error& e) {
      return std::string(e.what());
    }
    return task;
  }

  void routes() {
    server_.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
      auto parsed = parse_task(req);
      if (auto* why = std::get_if<std::string>(&parsed)) return bad_request(res, *why);
      std::optional<std::int64_t> seed;
      if (!req.is_multipart_form_data()) {
        const auto body = nlohmann::json::parse(req.body, nullptr, false);
        if (body.contains("seed") && body["seed"].is_number_integer()) seed = body["seed"].get<std::int64_t>();
      }
      const auto id = start_session(std::get<AudioTask>(std::move(parsed)), seed);
      json_reply(res, 201, {{"session_id", id}, {"events", "/sessions/" + id + "/events"}});
    });

    server_.Get(R"(/sessions/([A-Za-z0-9_-]+)/events)", [this](const httplib::Request& req, httplib::Response& res) {
      auto log = find(req.matches[1]);
      if (!log) return json_reply(res, 404, {{"error", "unknown session"}});
      std::uint64_t after = 0;
      if (req.has_header("Last-Event-ID")) {
        try {
          after = std::stoull(req.get_header_value("Last-Event-ID"));
        } catch (...) {
          return bad_request(res, "malformed Last-Event-ID");
        }
      }
      res.set_header("Cache-Control", "no-cache");
      res.set_chunked_content_provider(
          "text/event-stream", [this, log, after](std::size_t, httplib::DataSink& sink) mutable {
            while (!stopped_) {
              auto ev = log->next_after(after, std::chrono::milliseconds(200));
              if (!ev) {
                if (log->ended()) break;
                continue;
              }
              after = ev->sequence;
              const auto frame = to_sse(*ev);
              if (!sink.write(frame.data(), frame.size())) return false;
              if (ev->kind == EventKind::session_ended) break;
            }
            sink.done();
            return true;
          });
    });

    server_.Get(R"(/sessions/([A-Za-z0-9_-]+))", [this](const httplib::Request& req, httplib::Response& res) {
      auto log = find(req.matches[1]);
      if (!log) return json_reply(res, 404, {{"error", "unknown session"}});
      nlohmann::json body = {{"session_id", log->id()}, {"ended", log->ended()},
                             {"events", log->snapshot().size()}};
      if (auto trace = log->trace()) body["trace"] = to_json(*trace);
      json_reply(res, 200, body);
    });

    server_.Get("/tools", [this](const httplib::Request&, httplib::Response& res) {
      nlohmann::json tools = nlohmann::json::array();
      for (const auto& s : registry_.specs())
        tools.push_back({{"name", s.name}, {"kind", to_string(s.kind)}, {"description", s.description},
                         {"multi_audio", s.multi_audio}});
      json_reply(res, 200, {{"tools", tools}});
    });

    if (options_.ui_dir) server_.set_mount_point("/", options_.ui_dir->string());
  }

  ToolRegistry registry_;
  std::shared_ptr<const AgentBackend> backend_;
  ServeOptions options_;
  httplib::Server server_;
  std::thread listener_;
  std::atomic<bool> stopped_{false};

  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<SessionLog>> sessions_;
  std::deque<std::string> completed_;
  std::vector<std::thread> workers_;
  std::uint64_t counter_ = 0;
  std::uint64_t uploads_ = 0;
  std::optional<std::filesystem::path> upload_dir_;
};

}  // namespace ata
