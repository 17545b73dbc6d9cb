// SPDX-License-Identifier: Apache-2.0
#pragma once

// Tool adapters: a uniform invoke() over chat-with-audio endpoints,
// transcription endpoints, web search, and scripted mock tools.
//
// This header is transport-agnostic. Remote kinds build an HttpRequest and
// hand it to the registry's HttpClient; the cpp-httplib implementation lives
// in http.hpp so that code paths without network access never pull it in.

#include <fnmatch.h>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include <boost/beast/core/detail/base64.hpp>

#include "audiotoolagent/errors.hpp"
#include "audiotoolagent/tagparse.hpp"
#include "audiotoolagent/yaml_util.hpp"
#include "json.hpp"

namespace ata {

using Seconds = std::chrono::duration<double>;

enum class ToolKind { chat_audio, transcription, web_search, mock };

inline std::string_view to_string(ToolKind k) {
  switch (k) {
    case ToolKind::chat_audio: return "chat_audio";
    case ToolKind::transcription: return "transcription";
    case ToolKind::web_search: return "web_search";
    case ToolKind::mock: return "mock";
  }
  return "unknown";
}

inline std::optional<ToolKind> parse_tool_kind(std::string_view s) {
  if (s == "chat_audio") return ToolKind::chat_audio;
  if (s == "transcription") return ToolKind::transcription;
  if (s == "web_search") return ToolKind::web_search;
  if (s == "mock") return ToolKind::mock;
  return std::nullopt;
}

inline constexpr double kDefaultToolTimeoutSeconds = 120.0;
inline constexpr int kDefaultToolMaxRetries = 2;

struct ToolSpec {
  std::string name;
  ToolKind kind = ToolKind::mock;
  std::string description;
  std::optional<std::string> endpoint;
  std::string model_id;
  std::optional<std::string> auth_env;
  Seconds timeout{kDefaultToolTimeoutSeconds};
  int max_retries = kDefaultToolMaxRetries;
  /// Whether one call may carry several audio files.
  bool multi_audio = true;
  /// Transcription language hint, forwarded as-is.
  std::optional<std::string> language;
  /// Mock script file (kind == mock only).
  std::optional<std::filesystem::path> script;
};

inline bool valid_tool_name(std::string_view name) {
  if (name.empty()) return false;
  return std::all_of(name.begin(), name.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_';
  });
}

enum class ToolErrorCode {
  unknown_tool,
  unsupported_input,
  audio_unreadable,
  missing_credentials,
  no_transport,
  no_script_match,
  http_status,
  timeout,
  retries_exhausted,
};

inline std::string_view to_string(ToolErrorCode c) {
  switch (c) {
    case ToolErrorCode::unknown_tool: return "unknown_tool";
    case ToolErrorCode::unsupported_input: return "unsupported_input";
    case ToolErrorCode::audio_unreadable: return "audio_unreadable";
    case ToolErrorCode::missing_credentials: return "missing_credentials";
    case ToolErrorCode::no_transport: return "no_transport";
    case ToolErrorCode::no_script_match: return "no_script_match";
    case ToolErrorCode::http_status: return "http_status";
    case ToolErrorCode::timeout: return "timeout";
    case ToolErrorCode::retries_exhausted: return "retries_exhausted";
  }
  return "unknown";
}

struct ToolError {
  ToolErrorCode code;
  std::string message;
  friend bool operator==(const ToolError&, const ToolError&) = default;
};

struct ToolResult {
  std::string tool_name;
  std::string text;
  Seconds latency{0};
  int attempts = 1;
  bool refusal = false;
  std::optional<ToolError> error;

  bool ok() const { return !error.has_value(); }

  /// What the agent sees as the tool message.
  std::string agent_text() const {
    if (error) return "Tool error (" + std::string(to_string(error->code)) + "): " + error->message;
    return text;
  }
};

// ---------------------------------------------------------------------------
// Refusal detection

inline const std::vector<std::string>& default_refusal_patterns() {
  static const std::vector<std::string> patterns = {
      "can't listen",      "cannot listen",         "unable to listen",
      "unable to process audio", "cannot process audio", "can't process audio",
      "i cannot hear",     "i can't hear",          "unable to hear",
  };
  return patterns;
}

namespace detail {

inline std::string fold_case(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    // U+2019 RIGHT SINGLE QUOTATION MARK is a common apostrophe in model output.
    if (i + 2 < s.size() && static_cast<unsigned char>(s[i]) == 0xE2 &&
        static_cast<unsigned char>(s[i + 1]) == 0x80 &&
        static_cast<unsigned char>(s[i + 2]) == 0x99) {
      out.push_back('\'');
      i += 2;
      continue;
    }
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(s[i]))));
  }
  return out;
}

}  // namespace detail

/// Case-insensitive substring match against a pattern list.
class RefusalDetector {
 public:
  RefusalDetector() : RefusalDetector(default_refusal_patterns()) {}
  explicit RefusalDetector(const std::vector<std::string>& patterns) {
    for (const auto& p : patterns)
      if (!p.empty()) patterns_.push_back(detail::fold_case(p));
  }

  bool operator()(std::string_view text) const {
    if (text.empty()) return false;
    const auto folded = detail::fold_case(text);
    return std::any_of(patterns_.begin(), patterns_.end(), [&](const std::string& p) {
      return folded.find(p) != std::string::npos;
    });
  }

  const std::vector<std::string>& patterns() const { return patterns_; }

 private:
  std::vector<std::string> patterns_;
};

inline bool detect_refusal(std::string_view text) { return RefusalDetector{}(text); }

// ---------------------------------------------------------------------------
// Mock scripts
//
// version: 1
// responses:
//   - tool: whisper          # glob over the tool name
//     audio: "/data/*.wav"   # glob over the call's audio refs joined with ','
//     prompt: "Transcribe*"  # glob over the prompt
//     attempt: 1             # optional; absent matches every attempt
//     text: "hello world"    # or `error: "..."` to simulate a transport failure
//
// Globs follow fnmatch(3) without FNM_PATHNAME, so '*' also matches '/'.
// Rows are tried top to bottom; the first match wins.

struct MockRow {
  std::string tool_glob = "*";
  std::string audio_glob = "*";
  std::string prompt_glob = "*";
  std::optional<int> attempt;
  std::optional<std::string> text;
  std::optional<std::string> error;
};

inline bool glob_match(const std::string& pattern, const std::string& value) {
  return ::fnmatch(pattern.c_str(), value.c_str(), 0) == 0;
}

inline std::string join(const std::vector<std::string>& items, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

class MockScript {
 public:
  MockScript() = default;
  explicit MockScript(std::vector<MockRow> rows) : rows_(std::move(rows)) {}

  const MockRow* lookup(const std::string& tool, const std::vector<std::string>& audio_refs,
                        const std::string& prompt, int attempt) const {
    const auto audio = join(audio_refs, ",");
    for (const auto& row : rows_) {
      if (row.attempt && *row.attempt != attempt) continue;
      if (!glob_match(row.tool_glob, tool)) continue;
      if (!glob_match(row.audio_glob, audio)) continue;
      if (!glob_match(row.prompt_glob, prompt)) continue;
      return &row;
    }
    return nullptr;
  }

  const std::vector<MockRow>& rows() const { return rows_; }

 private:
  std::vector<MockRow> rows_;
};

inline MockScript load_mock_script(const std::filesystem::path& path) {
  const auto root = yaml::load_file(path);
  yaml::expect_keys(root, {"version", "responses"}, "mock script");
  if (const auto v = yaml::get_opt<int>(root, "version", "integer"); v && *v != 1)
    throw ConfigError("unsupported mock script version", "version", yaml::line_of(root["version"]));
  const auto rows = root["responses"];
  if (!rows || !rows.IsSequence())
    throw ConfigError("mock script needs a 'responses' list", "responses", yaml::line_of(root));

  std::vector<MockRow> out;
  for (const auto& node : rows) {
    yaml::expect_keys(node, {"tool", "audio", "prompt", "attempt", "text", "error"}, "response");
    MockRow row;
    row.tool_glob = yaml::get_opt<std::string>(node, "tool", "string").value_or("*");
    row.audio_glob = yaml::get_opt<std::string>(node, "audio", "string").value_or("*");
    row.prompt_glob = yaml::get_opt<std::string>(node, "prompt", "string").value_or("*");
    row.attempt = yaml::get_opt<int>(node, "attempt", "integer");
    row.text = yaml::get_opt<std::string>(node, "text", "string");
    row.error = yaml::get_opt<std::string>(node, "error", "string");
    if (row.text.has_value() == row.error.has_value())
      throw ConfigError("each response needs exactly one of 'text' or 'error'", "text",
                        yaml::line_of(node));
    if (row.attempt && *row.attempt < 1)
      throw ConfigError("attempt indices start at 1", "attempt", yaml::line_of(node["attempt"]));
    out.push_back(std::move(row));
  }
  return MockScript(std::move(out));
}

// ---------------------------------------------------------------------------
// Transport interface

struct MultipartPart {
  std::string name;
  std::string content;
  std::string filename;
  std::string content_type;
};

struct HttpRequest {
  std::string url;
  std::vector<std::pair<std::string, std::string>> headers;
  /// JSON body; ignored when `parts` is non-empty.
  std::string body;
  std::vector<MultipartPart> parts;
  Seconds timeout{kDefaultToolTimeoutSeconds};
};

struct HttpResponse {
  int status = 0;
  std::string body;
};

/// Connection-level failure (no HTTP status was received).
class TransportError : public Error {
 public:
  TransportError(const std::string& message, bool timed_out)
      : Error(message), timed_out_(timed_out) {}
  bool timed_out() const noexcept { return timed_out_; }

 private:
  bool timed_out_;
};

/// POST-only client used by the remote adapters and the remote agent
/// backend. Implementations must be safe for concurrent use.
class HttpClient {
 public:
  virtual ~HttpClient() = default;
  virtual HttpResponse post(const HttpRequest& request) = 0;
};

// ---------------------------------------------------------------------------
// Registry

class ToolRegistry {
 public:
  ToolRegistry() = default;
  ToolRegistry(std::vector<ToolSpec> specs, RefusalDetector refusal,
               std::map<std::string, std::shared_ptr<const MockScript>> scripts,
               std::shared_ptr<HttpClient> transport = nullptr)
      : specs_(std::move(specs)),
        refusal_(std::move(refusal)),
        scripts_(std::move(scripts)),
        transport_(std::move(transport)) {
    for (std::size_t i = 0; i < specs_.size(); ++i) {
      const auto& s = specs_[i];
      if (!valid_tool_name(s.name))
        throw ConfigError("tool name must match [a-z0-9_]+: '" + s.name + "'", "name");
      if (!index_.emplace(s.name, i).second)
        throw ConfigError("duplicate tool name '" + s.name + "'", "name");
    }
  }

  std::size_t size() const { return specs_.size(); }
  bool empty() const { return specs_.empty(); }
  const std::vector<ToolSpec>& specs() const { return specs_; }
  const RefusalDetector& refusal() const { return refusal_; }
  const std::shared_ptr<HttpClient>& transport() const { return transport_; }

  /// Exact, case-sensitive lookup.
  const ToolSpec* find(std::string_view name) const {
    const auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : &specs_[it->second];
  }

  const MockScript* script_for(const ToolSpec& spec) const {
    if (!spec.script) return nullptr;
    const auto it = scripts_.find(spec.script->string());
    return it == scripts_.end() ? nullptr : it->second.get();
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& s : specs_) out.push_back(s.name);
    return out;
  }

  /// Registry limited to `names` (in registry order). Unknown names throw.
  ToolRegistry restricted_to(const std::vector<std::string>& names) const {
    for (const auto& n : names)
      if (!find(n)) throw ConfigError("unknown tool '" + n + "'", "tools");
    std::vector<ToolSpec> kept;
    for (const auto& s : specs_)
      if (std::find(names.begin(), names.end(), s.name) != names.end()) kept.push_back(s);
    return ToolRegistry(std::move(kept), refusal_, scripts_, transport_);
  }

  ToolRegistry with_transport(std::shared_ptr<HttpClient> transport) const {
    return ToolRegistry(specs_, refusal_, scripts_, std::move(transport));
  }

 private:
  std::vector<ToolSpec> specs_;
  std::map<std::string, std::size_t> index_;
  RefusalDetector refusal_;
  std::map<std::string, std::shared_ptr<const MockScript>> scripts_;
  std::shared_ptr<HttpClient> transport_;
};

namespace detail {

inline ToolSpec parse_tool_spec(const YAML::Node& node, const std::filesystem::path& config_path) {
  yaml::expect_keys(node,
                    {"name", "kind", "description", "endpoint", "model_id", "auth_env", "timeout",
                     "max_retries", "multi_audio", "language", "script"},
                    "tool");
  ToolSpec spec;
  spec.name = yaml::get<std::string>(node, "name", "string");
  if (!valid_tool_name(spec.name))
    throw ConfigError("tool name must match [a-z0-9_]+", "name", yaml::line_of(node["name"]));

  const auto kind = yaml::get<std::string>(node, "kind", "string");
  const auto parsed_kind = parse_tool_kind(kind);
  if (!parsed_kind)
    throw ConfigError("unknown tool kind '" + kind + "'", "kind", yaml::line_of(node["kind"]));
  spec.kind = *parsed_kind;

  spec.description = yaml::get_opt<std::string>(node, "description", "string").value_or("");
  if (spec.description.empty())
    throw ConfigError("tool description must be non-empty", "description", yaml::line_of(node));

  spec.endpoint = yaml::get_opt<std::string>(node, "endpoint", "string");
  spec.model_id = yaml::get_opt<std::string>(node, "model_id", "string").value_or("");
  spec.auth_env = yaml::get_opt<std::string>(node, "auth_env", "string");
  spec.language = yaml::get_opt<std::string>(node, "language", "string");

  if (const auto t = yaml::get_opt<double>(node, "timeout", "number (seconds)")) {
    if (!(*t > 0)) throw ConfigError("timeout must be > 0", "timeout", yaml::line_of(node["timeout"]));
    spec.timeout = Seconds(*t);
  }
  if (const auto r = yaml::get_opt<int>(node, "max_retries", "integer")) {
    if (*r < 0)
      throw ConfigError("max_retries must be >= 0", "max_retries", yaml::line_of(node["max_retries"]));
    spec.max_retries = *r;
  }
  spec.multi_audio = yaml::get_opt<bool>(node, "multi_audio", "boolean")
                         .value_or(spec.kind != ToolKind::transcription);

  if (spec.kind == ToolKind::mock) {
    const auto script = yaml::get_opt<std::string>(node, "script", "string");
    if (!script)
      throw ConfigError("mock tools need a 'script' file", "script", yaml::line_of(node));
    spec.script = yaml::resolve(config_path, *script).lexically_normal();
  } else {
    if (!spec.endpoint || spec.endpoint->empty())
      throw ConfigError("remote tools need an 'endpoint'", "endpoint", yaml::line_of(node));
    if (spec.kind != ToolKind::web_search && spec.model_id.empty())
      throw ConfigError("remote audio tools need a 'model_id'", "model_id", yaml::line_of(node));
    if (node["script"])
      throw ConfigError("'script' is only valid for mock tools", "script",
                        yaml::line_of(node["script"]));
  }
  return spec;
}

}  // namespace detail

/// Loads the `tools` section (and `refusal_patterns`) of a config file.
/// Other top-level sections belong to other modules and are not checked
/// here beyond being known.
inline ToolRegistry load_registry(const std::filesystem::path& config_path,
                                  std::shared_ptr<HttpClient> transport = nullptr) {
  const auto root = yaml::load_file(config_path);
  if (root.IsNull()) throw ConfigError("config file is empty", {}, 1);
  yaml::expect_keys(root, {"version", "tools", "refusal_patterns", "agent"}, "config");

  RefusalDetector refusal;
  if (root["refusal_patterns"]) {
    refusal = RefusalDetector(yaml::string_list(root["refusal_patterns"], "refusal_patterns"));
  }

  std::vector<ToolSpec> specs;
  std::map<std::string, std::shared_ptr<const MockScript>> scripts;
  std::map<std::string, int> seen;
  if (const auto tools = root["tools"]; tools && !tools.IsNull()) {
    if (!tools.IsSequence())
      throw ConfigError("'tools' must be a list", "tools", yaml::line_of(tools));
    for (const auto& node : tools) {
      auto spec = detail::parse_tool_spec(node, config_path);
      const auto line = yaml::line_of(node).value_or(0);
      if (const auto [it, inserted] = seen.emplace(spec.name, line); !inserted)
        throw ConfigError("duplicate tool name '" + spec.name + "' (first defined on line " +
                              std::to_string(it->second) + ")",
                          "name", line);
      if (spec.script && !scripts.count(spec.script->string())) {
        scripts.emplace(spec.script->string(),
                        std::make_shared<const MockScript>(load_mock_script(*spec.script)));
      }
      specs.push_back(std::move(spec));
    }
  }
  return ToolRegistry(std::move(specs), std::move(refusal), std::move(scripts),
                      std::move(transport));
}

// ---------------------------------------------------------------------------
// Invocation

namespace detail {

struct AudioPayload {
  std::string path;
  std::string bytes;
};

struct AttemptFailure {
  std::string message;
  bool timed_out = false;
  bool retryable = true;
  std::optional<int> status;
};

using AttemptOutcome = std::variant<std::string, AttemptFailure>;

inline std::optional<std::string> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) return std::nullopt;
  return ss.str();
}

inline std::string base64(std::string_view bytes) {
  namespace b64 = boost::beast::detail::base64;
  std::string out(b64::encoded_size(bytes.size()), '\0');
  out.resize(b64::encode(out.data(), bytes.data(), bytes.size()));
  return out;
}

inline std::string audio_format_label(const std::string& path) {
  auto ext = std::filesystem::path(path).extension().string();
  if (!ext.empty() && ext.front() == '.') ext.erase(0, 1);
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return ext.empty() ? "wav" : ext;
}

inline std::string audio_mime_type(const std::string& path) {
  const auto fmt = audio_format_label(path);
  if (fmt == "mp3") return "audio/mpeg";
  if (fmt == "flac") return "audio/flac";
  if (fmt == "ogg" || fmt == "opus") return "audio/ogg";
  if (fmt == "m4a" || fmt == "mp4") return "audio/mp4";
  if (fmt == "webm") return "audio/webm";
  return "audio/wav";
}

inline std::string strip_trailing_slash(std::string s) {
  while (!s.empty() && s.back() == '/') s.pop_back();
  return s;
}

inline std::vector<std::pair<std::string, std::string>> auth_headers(const ToolSpec& spec) {
  std::vector<std::pair<std::string, std::string>> headers;
  if (spec.auth_env) {
    if (const char* v = std::getenv(spec.auth_env->c_str()); v && *v)
      headers.emplace_back("Authorization", std::string("Bearer ") + v);
  }
  return headers;
}

/// chat_audio: POST {endpoint}/chat/completions with one text part and one
/// base64 input_audio part per file.
inline HttpRequest build_chat_audio_request(const ToolSpec& spec, const std::string& prompt,
                                            const std::vector<AudioPayload>& audio) {
  nlohmann::ordered_json content = nlohmann::ordered_json::array();
  content.push_back({{"type", "text"}, {"text", prompt}});
  for (const auto& a : audio) {
    content.push_back({{"type", "input_audio"},
                       {"input_audio",
                        {{"data", base64(a.bytes)}, {"format", audio_format_label(a.path)}}}});
  }
  nlohmann::ordered_json body;
  body["model"] = spec.model_id;
  body["messages"] = nlohmann::ordered_json::array({{{"role", "user"}, {"content", content}}});

  HttpRequest req;
  req.url = strip_trailing_slash(*spec.endpoint) + "/chat/completions";
  req.headers = auth_headers(spec);
  req.body = body.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
  req.timeout = spec.timeout;
  return req;
}

/// transcription: multipart POST {endpoint}/audio/transcriptions.
inline HttpRequest build_transcription_request(const ToolSpec& spec, const AudioPayload& audio) {
  HttpRequest req;
  req.url = strip_trailing_slash(*spec.endpoint) + "/audio/transcriptions";
  req.headers = auth_headers(spec);
  req.parts.push_back({"file", audio.bytes, std::filesystem::path(audio.path).filename().string(),
                       audio_mime_type(audio.path)});
  req.parts.push_back({"model", spec.model_id, "", ""});
  if (spec.language) req.parts.push_back({"language", *spec.language, "", ""});
  req.timeout = spec.timeout;
  return req;
}

/// web_search: POST {endpoint}/search with {"query", "max_results"}.
inline HttpRequest build_search_request(const ToolSpec& spec, const std::string& query) {
  nlohmann::ordered_json body;
  body["query"] = query;
  body["max_results"] = 5;
  if (!spec.model_id.empty()) body["search_depth"] = spec.model_id;
  HttpRequest req;
  req.url = strip_trailing_slash(*spec.endpoint) + "/search";
  req.headers = auth_headers(spec);
  req.body = body.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
  req.timeout = spec.timeout;
  return req;
}

/// First choice's message content. Content may be a string or a list of
/// text parts.
inline std::optional<std::string> chat_completion_text(const std::string& body) {
  const auto j = nlohmann::json::parse(body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  const auto choices = j.find("choices");
  if (choices == j.end() || !choices->is_array() || choices->empty()) return std::nullopt;
  const auto& first = (*choices)[0];
  if (!first.is_object() || !first.contains("message")) return std::nullopt;
  const auto& message = first["message"];
  if (!message.is_object() || !message.contains("content")) return std::nullopt;
  const auto& content = message["content"];
  if (content.is_string()) return content.get<std::string>();
  if (content.is_array()) {
    std::string out;
    for (const auto& part : content)
      if (part.is_object() && part.contains("text") && part["text"].is_string())
        out += part["text"].get<std::string>();
    return out;
  }
  return std::nullopt;
}

inline std::optional<std::string> transcription_text(const std::string& body) {
  const auto j = nlohmann::json::parse(body, nullptr, false);
  if (j.is_discarded() || !j.is_object() || !j.contains("text") || !j["text"].is_string())
    return std::nullopt;
  return j["text"].get<std::string>();
}

inline std::optional<std::string> search_snippets(const std::string& body) {
  const auto j = nlohmann::json::parse(body, nullptr, false);
  if (j.is_discarded() || !j.is_object() || !j.contains("results") || !j["results"].is_array())
    return std::nullopt;
  std::string out;
  for (const auto& r : j["results"]) {
    if (!r.is_object()) continue;
    std::string snippet;
    for (const char* key : {"content", "snippet", "body"})
      if (r.contains(key) && r[key].is_string()) {
        snippet = r[key].get<std::string>();
        break;
      }
    if (snippet.empty()) continue;
    if (!out.empty()) out += "\n\n";
    if (r.contains("title") && r["title"].is_string())
      out += r["title"].get<std::string>() + ": ";
    out += snippet;
  }
  return out;
}

inline bool retryable_status(int status) { return status == 408 || status == 429 || status >= 500; }

inline AttemptOutcome send(HttpClient& client, const HttpRequest& req,
                           std::optional<std::string> (*extract)(const std::string&)) {
  HttpResponse resp;
  try {
    resp = client.post(req);
  } catch (const TransportError& e) {
    return AttemptFailure{e.what(), e.timed_out(), true, std::nullopt};
  }
  if (resp.status < 200 || resp.status >= 300) {
    auto snippet = resp.body.substr(0, 200);
    return AttemptFailure{"HTTP " + std::to_string(resp.status) + ": " + snippet, false,
                          retryable_status(resp.status), resp.status};
  }
  auto text = extract(resp.body);
  if (!text) return AttemptFailure{"unrecognized response body", false, true, resp.status};
  return std::move(*text);
}

inline ToolResult failed(const ToolCallRequest& call, ToolErrorCode code, std::string message,
                         int attempts = 1) {
  ToolResult r;
  r.tool_name = call.tool_name;
  r.attempts = attempts;
  r.error = ToolError{code, std::move(message)};
  return r;
}

}  // namespace detail

/// Executes one tool call. Never throws for per-call problems: unknown
/// tools, unreadable audio, and exhausted retries come back as a ToolResult
/// carrying an error, whose agent_text() is fed to the agent.
///
/// Transport failures and detected refusals are retried up to
/// spec.max_retries times; `attempts` counts every try.
inline ToolResult invoke(const ToolRegistry& registry, const ToolCallRequest& call) {
  using clock = std::chrono::steady_clock;
  const auto started = clock::now();
  const auto finish = [&](ToolResult r) {
    r.latency = std::chrono::duration_cast<Seconds>(clock::now() - started);
    return r;
  };

  const ToolSpec* spec = registry.find(call.tool_name);
  if (!spec) {
    auto available = registry.names();
    return finish(detail::failed(call, ToolErrorCode::unknown_tool,
                                 "unknown tool '" + call.tool_name + "'; available tools: " +
                                     (available.empty() ? std::string("none") : join(available, ", "))));
  }

  if (!spec->multi_audio && call.audio_refs.size() > 1) {
    return finish(detail::failed(
        call, ToolErrorCode::unsupported_input,
        "tool '" + spec->name + "' accepts a single audio file per call; received " +
            std::to_string(call.audio_refs.size()) + ". Call it once per file."));
  }
  if ((spec->kind == ToolKind::chat_audio || spec->kind == ToolKind::transcription) &&
      call.audio_refs.empty()) {
    return finish(detail::failed(call, ToolErrorCode::unsupported_input,
                                 "tool '" + spec->name + "' needs an audio file in 'audio'"));
  }

  std::vector<detail::AudioPayload> audio;
  if (spec->kind == ToolKind::chat_audio || spec->kind == ToolKind::transcription) {
    for (const auto& ref : call.audio_refs) {
      auto bytes = detail::read_file(ref);
      if (!bytes)
        return finish(detail::failed(call, ToolErrorCode::audio_unreadable,
                                     "cannot read audio file '" + ref + "'"));
      audio.push_back({ref, std::move(*bytes)});
    }
  }

  const MockScript* script = nullptr;
  std::shared_ptr<HttpClient> client;
  if (spec->kind == ToolKind::mock) {
    script = registry.script_for(*spec);
  } else {
    if (spec->auth_env) {
      const char* v = std::getenv(spec->auth_env->c_str());
      if (!v || !*v)
        return finish(detail::failed(call, ToolErrorCode::missing_credentials,
                                     "environment variable " + *spec->auth_env + " is not set"));
    }
    client = registry.transport();
    if (!client)
      return finish(detail::failed(call, ToolErrorCode::no_transport,
                                   "no HTTP transport configured for remote tool '" +
                                       spec->name + "'"));
  }

  const int max_attempts = spec->max_retries + 1;
  detail::AttemptFailure last{"no attempt made", false, true, std::nullopt};
  for (int attempt = 1; attempt <= max_attempts; ++attempt) {
    detail::AttemptOutcome outcome;
    switch (spec->kind) {
      case ToolKind::mock: {
        const MockRow* row = script ? script->lookup(spec->name, call.audio_refs, call.prompt,
                                                     attempt)
                                    : nullptr;
        if (!row)
          return finish(detail::failed(call, ToolErrorCode::no_script_match,
                                       "no scripted response for this call", attempt));
        if (row->error) {
          outcome = detail::AttemptFailure{*row->error, false, true, std::nullopt};
        } else {
          outcome = *row->text;
        }
        break;
      }
      case ToolKind::chat_audio:
        outcome = detail::send(*client, detail::build_chat_audio_request(*spec, call.prompt, audio),
                               &detail::chat_completion_text);
        break;
      case ToolKind::transcription:
        outcome = detail::send(*client, detail::build_transcription_request(*spec, audio.front()),
                               &detail::transcription_text);
        break;
      case ToolKind::web_search:
        outcome = detail::send(*client, detail::build_search_request(*spec, call.prompt),
                               &detail::search_snippets);
        break;
    }

    if (auto* failure = std::get_if<detail::AttemptFailure>(&outcome)) {
      last = std::move(*failure);
      if (!last.retryable) {
        return finish(detail::failed(call, ToolErrorCode::http_status, last.message, attempt));
      }
      continue;
    }

    auto& text = std::get<std::string>(outcome);
    if (text.empty()) {
      last = {"empty response", false, true, std::nullopt};
      continue;
    }
    const bool refused = registry.refusal()(text);
    if (refused && attempt < max_attempts) continue;

    ToolResult r;
    r.tool_name = call.tool_name;
    r.text = std::move(text);
    r.attempts = attempt;
    r.refusal = refused;
    return finish(std::move(r));
  }

  const auto code = last.timed_out ? ToolErrorCode::timeout : ToolErrorCode::retries_exhausted;
  return finish(detail::failed(call, code,
                               "all " + std::to_string(max_attempts) +
                                   " attempts failed; last error: " + last.message,
                               max_attempts));
}

}  // namespace ata
