// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "audiotoolagent/adapters.hpp"
#include "audiotoolagent/errors.hpp"
#include "audiotoolagent/tagparse.hpp"
#include "audiotoolagent/yaml_util.hpp"
#include "json.hpp"

namespace ata {

inline constexpr int kDefaultToolBudget = 20;

inline constexpr std::string_view kFinalAnswerNudge =
    "You have no tool calls remaining. Provide your final answer now.";

inline constexpr std::string_view kContinueReminder =
    "Continue. Either call a tool inside <tool_call> tags or give your final answer between "
    "<answer> and </answer> tags.";

struct AudioTask {
  std::string id;
  std::vector<std::string> audio_refs;
  std::string question;
  std::optional<std::vector<std::string>> choices;
  std::optional<std::string> gold;
  std::vector<std::string> categories;
};

/// Throws Error when the task breaks its invariants.
inline void validate(const AudioTask& task) {
  if (task.audio_refs.empty()) throw Error("task '" + task.id + "' has no audio");
  if (task.question.find_first_not_of(" \t\r\n") == std::string::npos)
    throw Error("task '" + task.id + "' has an empty question");
  if (task.choices) {
    if (task.choices->size() < 2)
      throw Error("task '" + task.id + "' needs at least two choices");
    if (task.gold) {
      const auto n = std::count(task.choices->begin(), task.choices->end(), *task.gold);
      if (n != 1)
        throw Error("task '" + task.id + "': gold answer must equal exactly one choice");
    }
  }
}

/// "(a)", "(b)", ... for the first 26 choices, then "(27)", "(28)", ...
inline std::string choice_label(std::size_t index) {
  if (index < 26) return std::string("(") + static_cast<char>('a' + index) + ")";
  return "(" + std::to_string(index + 1) + ")";
}

inline std::string compose_user_message(const AudioTask& task) {
  std::string out = "Question: " + task.question + "\n";
  if (task.choices) {
    out += "\nChoices:\n";
    for (std::size_t i = 0; i < task.choices->size(); ++i)
      out += choice_label(i) + " " + (*task.choices)[i] + "\n";
  }
  out += "\nAudio files:\n";
  for (const auto& ref : task.audio_refs) out += "- " + ref + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Backend contract

enum class Role { system, user, assistant, tool };

inline std::string_view to_string(Role r) {
  switch (r) {
    case Role::system: return "system";
    case Role::user: return "user";
    case Role::assistant: return "assistant";
    case Role::tool: return "tool";
  }
  return "unknown";
}

struct ChatMessage {
  Role role = Role::user;
  std::string content;
  /// Tool name, for role == tool.
  std::string name;
  friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

/// Sampling parameters. `extra` is merged verbatim into the request body of
/// remote backends (vendor knobs such as reasoning effort).
struct SamplingConfig {
  std::optional<double> temperature;
  nlohmann::json extra = nlohmann::json::object();
};

/// The backend failed in a way retrying will not fix.
class BackendError : public Error {
 public:
  using Error::Error;
};

/// Text-only reasoning model. complete() must be safe to call concurrently
/// from independent sessions.
class AgentBackend {
 public:
  virtual ~AgentBackend() = default;
  virtual std::string complete(const std::vector<ChatMessage>& messages, std::int64_t seed,
                               const SamplingConfig& sampling) const = 0;
};

// ---------------------------------------------------------------------------
// Scripted backend
//
// version: 1
// turns:
//   - match: "*rain*"   # glob over the first user message; default "*"
//     turn: 1           # 1-based assistant turn; absent matches every turn
//     seed: 3           # absent matches every seed
//     text: "<tool_call>{\"tool\":\"whisper\",\"audio\":\"{{audio}}\",\"prompt\":\"Transcribe\"}</tool_call>"
//
// Placeholders in `text`: {{audio}} first audio file of the task,
// {{question}} the question line, {{last_tool}} the latest tool message.

struct ScriptedTurn {
  std::string match = "*";
  std::optional<int> turn;
  std::optional<std::int64_t> seed;
  std::string text;
};

class ScriptedBackend final : public AgentBackend {
 public:
  explicit ScriptedBackend(std::vector<ScriptedTurn> rows) : rows_(std::move(rows)) {}

  std::string complete(const std::vector<ChatMessage>& messages, std::int64_t seed,
                       const SamplingConfig&) const override {
    const ChatMessage* user = nullptr;
    const ChatMessage* last_tool = nullptr;
    int assistant_turns = 0;
    for (const auto& m : messages) {
      if (m.role == Role::user && !user) user = &m;
      if (m.role == Role::tool) last_tool = &m;
      if (m.role == Role::assistant) ++assistant_turns;
    }
    const std::string first_user = user ? user->content : std::string();
    const int turn = assistant_turns + 1;

    for (const auto& row : rows_) {
      if (row.turn && *row.turn != turn) continue;
      if (row.seed && *row.seed != seed) continue;
      if (!glob_match(row.match, first_user)) continue;
      return substitute(row.text, first_user, last_tool ? last_tool->content : std::string());
    }
    throw BackendError("scripted backend has no row for turn " + std::to_string(turn));
  }

  const std::vector<ScriptedTurn>& rows() const { return rows_; }

 private:
  static std::string field_after(const std::string& message, std::string_view marker) {
    const auto at = message.find(marker);
    if (at == std::string::npos) return {};
    const auto start = at + marker.size();
    const auto end = message.find('\n', start);
    return message.substr(start, end == std::string::npos ? std::string::npos : end - start);
  }

  static void replace_all(std::string& s, std::string_view from, const std::string& to) {
    for (auto at = s.find(from); at != std::string::npos; at = s.find(from, at + to.size()))
      s.replace(at, from.size(), to);
  }

  static std::string substitute(std::string text, const std::string& user,
                                const std::string& last_tool) {
    replace_all(text, "{{audio}}", field_after(user, "Audio files:\n- "));
    replace_all(text, "{{question}}", field_after(user, "Question: "));
    replace_all(text, "{{last_tool}}", last_tool);
    return text;
  }

  std::vector<ScriptedTurn> rows_;
};

inline ScriptedBackend load_scripted_backend(const std::filesystem::path& path) {
  const auto root = yaml::load_file(path);
  yaml::expect_keys(root, {"version", "turns"}, "backend script");
  const auto turns = root["turns"];
  if (!turns || !turns.IsSequence())
    throw ConfigError("backend script needs a 'turns' list", "turns", yaml::line_of(root));
  std::vector<ScriptedTurn> rows;
  for (const auto& node : turns) {
    yaml::expect_keys(node, {"match", "turn", "seed", "text"}, "turn");
    ScriptedTurn row;
    row.match = yaml::get_opt<std::string>(node, "match", "string").value_or("*");
    row.turn = yaml::get_opt<int>(node, "turn", "integer");
    row.seed = yaml::get_opt<std::int64_t>(node, "seed", "integer");
    row.text = yaml::get<std::string>(node, "text", "string");
    rows.push_back(std::move(row));
  }
  return ScriptedBackend(std::move(rows));
}

// ---------------------------------------------------------------------------
// Agent configuration (the `agent` section of the config file)

enum class BackendKind { scripted, chat_completions };

struct AgentConfig {
  BackendKind kind = BackendKind::scripted;
  std::optional<std::filesystem::path> script;
  std::optional<std::string> endpoint;
  std::string model_id;
  std::optional<std::string> auth_env;
  Seconds timeout{300.0};
  int max_retries = 2;
  int budget = kDefaultToolBudget;
  SamplingConfig sampling;
};

namespace detail {

inline nlohmann::json yaml_to_json(const YAML::Node& node) {
  switch (node.Type()) {
    case YAML::NodeType::Map: {
      auto obj = nlohmann::json::object();
      for (const auto& kv : node) obj[kv.first.as<std::string>()] = yaml_to_json(kv.second);
      return obj;
    }
    case YAML::NodeType::Sequence: {
      auto arr = nlohmann::json::array();
      for (const auto& item : node) arr.push_back(yaml_to_json(item));
      return arr;
    }
    case YAML::NodeType::Scalar: {
      const auto s = node.Scalar();
      if (node.Tag() == "!") return s;  // quoted
      if (s == "true" || s == "false") return s == "true";
      try {
        std::size_t used = 0;
        const long long i = std::stoll(s, &used);
        if (used == s.size()) return i;
      } catch (...) {
      }
      try {
        std::size_t used = 0;
        const double d = std::stod(s, &used);
        if (used == s.size()) return d;
      } catch (...) {
      }
      return s;
    }
    default:
      return nullptr;
  }
}

}  // namespace detail

inline AgentConfig load_agent_config(const std::filesystem::path& config_path) {
  const auto root = yaml::load_file(config_path);
  const auto node = root["agent"];
  if (!node) throw ConfigError("config has no 'agent' section", "agent", yaml::line_of(root));
  yaml::expect_keys(node,
                    {"kind", "script", "endpoint", "model_id", "auth_env", "temperature",
                     "timeout", "max_retries", "budget", "sampling"},
                    "agent");
  AgentConfig cfg;
  const auto kind = yaml::get<std::string>(node, "kind", "string");
  if (kind == "scripted") {
    cfg.kind = BackendKind::scripted;
    const auto script = yaml::get<std::string>(node, "script", "string");
    cfg.script = yaml::resolve(config_path, script).lexically_normal();
  } else if (kind == "chat_completions") {
    cfg.kind = BackendKind::chat_completions;
    cfg.endpoint = yaml::get<std::string>(node, "endpoint", "string");
    cfg.model_id = yaml::get<std::string>(node, "model_id", "string");
  } else {
    throw ConfigError("unknown agent kind '" + kind + "'", "kind", yaml::line_of(node["kind"]));
  }
  cfg.auth_env = yaml::get_opt<std::string>(node, "auth_env", "string");
  cfg.sampling.temperature = yaml::get_opt<double>(node, "temperature", "number");
  if (const auto t = yaml::get_opt<double>(node, "timeout", "number (seconds)")) {
    if (!(*t > 0)) throw ConfigError("timeout must be > 0", "timeout", yaml::line_of(node["timeout"]));
    cfg.timeout = Seconds(*t);
  }
  if (const auto r = yaml::get_opt<int>(node, "max_retries", "integer")) {
    if (*r < 0) throw ConfigError("max_retries must be >= 0", "max_retries");
    cfg.max_retries = *r;
  }
  if (const auto b = yaml::get_opt<int>(node, "budget", "integer")) {
    if (*b < 0) throw ConfigError("budget must be >= 0", "budget", yaml::line_of(node["budget"]));
    cfg.budget = *b;
  }
  if (const auto s = node["sampling"]; s && !s.IsNull()) {
    if (!s.IsMap()) throw ConfigError("sampling must be a mapping", "sampling", yaml::line_of(s));
    cfg.sampling.extra = detail::yaml_to_json(s);
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// System prompt

inline constexpr std::string_view kSystemPromptHeader =
    "You are an expert audio analyst with access to specialized tools. Answer the question "
    "given. Put the answer between <answer> and </answer> tags. If the question is multiple "
    "choice, there is always just one choice correct. If the tool says it can't listen to "
    "audio, try invoking the tool again. Use as many different tools as needed to answer the "
    "question, even using the same tool multiple times if needed. If initial tool outputs are "
    "conflicting or ambiguous, do not guess; instead, you must generate specific, follow-up "
    "tool calls to isolate the point of disagreement and gather more detailed evidence.";

inline std::string tool_block(const ToolSpec& spec) {
  ToolCallRequest example;
  example.tool_name = spec.name;
  switch (spec.kind) {
    case ToolKind::transcription:
      example.audio_refs = {"/path/to/audio.wav"};
      example.prompt = "Transcribe this audio.";
      break;
    case ToolKind::web_search:
      example.prompt = "search query";
      break;
    default:
      example.audio_refs = {"/path/to/audio.wav"};
      example.prompt = "Describe the sounds in this audio.";
      break;
  }
  std::string out = "## " + spec.name + "\n";
  out += "Kind: " + std::string(to_string(spec.kind)) + "\n";
  out += spec.description + "\n";
  if (!spec.multi_audio) out += "Accepts one audio file per call.\n";
  out += "Example: " + render_tool_call(example) + "\n";
  return out;
}

inline std::string build_system_prompt(const ToolRegistry& registry) {
  std::string out(kSystemPromptHeader);
  if (registry.empty()) {
    out += " No tools are available for this question; answer from the question and choices "
           "alone.\n";
    return out;
  }
  out += " The following tools are available:\n\n";
  for (const auto& spec : registry.specs()) out += tool_block(spec) + "\n";
  out +=
      "# Calling a tool\n"
      "Write one tool call per <tool_call> block. The body is a JSON object with the keys "
      "\"tool\" (tool name), \"audio\" (an audio file path, or a list of paths for tools that "
      "accept several files) and \"prompt\" (the instruction for the tool). You may issue "
      "several tool calls in one message; they run in order and each result is returned to you "
      "as a tool message. A message that contains a tool call is treated as evidence gathering, "
      "so give the final answer in a separate message.\n";
  return out;
}

// ---------------------------------------------------------------------------
// Session loop

enum class Outcome { answered, budget_exhausted, agent_error };

inline std::string_view to_string(Outcome o) {
  switch (o) {
    case Outcome::answered: return "answered";
    case Outcome::budget_exhausted: return "budget_exhausted";
    case Outcome::agent_error: return "agent_error";
  }
  return "unknown";
}

inline std::optional<Outcome> parse_outcome(std::string_view s) {
  if (s == "answered") return Outcome::answered;
  if (s == "budget_exhausted") return Outcome::budget_exhausted;
  if (s == "agent_error") return Outcome::agent_error;
  return std::nullopt;
}

struct Turn {
  ChatMessage message;
  std::optional<ToolCallRequest> call;
  std::optional<ToolResult> result;
};

struct SessionTrace {
  std::string task_id;
  std::vector<Turn> turns;
  int tool_call_count = 0;
  /// Calls the agent requested after the budget ran out.
  int skipped_calls = 0;
  Outcome outcome = Outcome::agent_error;
  std::optional<std::string> answer;
  std::optional<std::string> error;
  std::int64_t seed = 0;
  Seconds wall_time{0};

  std::vector<ChatMessage> messages() const {
    std::vector<ChatMessage> out;
    out.reserve(turns.size());
    for (const auto& t : turns) out.push_back(t.message);
    return out;
  }
};

struct SessionOptions {
  int budget = kDefaultToolBudget;
  std::int64_t seed = 0;
  SamplingConfig sampling;
  /// Consecutive turns with neither a tool call nor an answer before the
  /// session is abandoned as agent_error.
  int max_idle_turns = 2;
};

/// Optional live callbacks, invoked synchronously from the session thread.
struct SessionHooks {
  std::function<void(const std::string&)> assistant_text;
  std::function<void(const ToolCallRequest&)> tool_call_started;
  std::function<void(const ToolCallRequest&, const ToolResult&)> tool_result;
};

/// Runs one agent session to completion.
///
/// Per assistant turn: parse; a turn with tool calls runs them in order
/// (any answer in that turn is ignored) until the budget is spent; a turn
/// with only an answer ends the session. Once the budget hits zero the
/// agent gets one nudge for a final answer, and tool calls in its reply are
/// not executed.
inline SessionTrace run_session(const AudioTask& task, const AgentBackend& backend,
                                const ToolRegistry& registry, const SessionOptions& options = {},
                                const SessionHooks& hooks = {}) {
  using clock = std::chrono::steady_clock;
  const auto started = clock::now();

  SessionTrace trace;
  trace.task_id = task.id;
  trace.seed = options.seed;

  std::vector<ChatMessage> messages;
  const auto push = [&](Turn t) {
    messages.push_back(t.message);
    trace.turns.push_back(std::move(t));
  };
  push({{Role::system, build_system_prompt(registry), {}}, {}, {}});
  push({{Role::user, compose_user_message(task), {}}, {}, {}});

  int remaining = std::max(0, options.budget);
  bool nudged = false;
  int idle = 0;

  for (;;) {
    std::string text;
    try {
      text = backend.complete(messages, options.seed, options.sampling);
    } catch (const std::exception& e) {
      trace.outcome = Outcome::agent_error;
      trace.error = e.what();
      break;
    }
    push({{Role::assistant, text, {}}, {}, {}});
    if (hooks.assistant_text) hooks.assistant_text(text);

    const auto parsed = parse_turn(text);
    if (nudged) {
      trace.skipped_calls += static_cast<int>(parsed.tool_calls.size());
      trace.answer = parsed.answer;
      trace.outcome = parsed.answer ? Outcome::answered : Outcome::budget_exhausted;
      break;
    }

    if (parsed.tool_calls.empty()) {
      if (parsed.answer) {
        trace.answer = parsed.answer;
        trace.outcome = Outcome::answered;
        break;
      }
      if (++idle > options.max_idle_turns) {
        trace.outcome = Outcome::agent_error;
        trace.error = "agent produced neither a tool call nor an answer";
        break;
      }
      push({{Role::user, std::string(kContinueReminder), {}}, {}, {}});
      continue;
    }
    idle = 0;

    for (const auto& call : parsed.tool_calls) {
      if (remaining == 0) {
        ++trace.skipped_calls;
        continue;
      }
      if (hooks.tool_call_started) hooks.tool_call_started(call);
      auto result = invoke(registry, call);
      if (hooks.tool_result) hooks.tool_result(call, result);
      push({{Role::tool, result.agent_text(), call.tool_name}, call, std::move(result)});
      --remaining;
      ++trace.tool_call_count;
    }

    if (remaining == 0) {
      push({{Role::user, std::string(kFinalAnswerNudge), {}}, {}, {}});
      nudged = true;
    }
  }

  trace.wall_time = std::chrono::duration_cast<Seconds>(clock::now() - started);
  return trace;
}

inline std::optional<std::string> answer_of(const SessionTrace& trace) {
  if (trace.outcome != Outcome::answered) return std::nullopt;
  return trace.answer;
}

// ---------------------------------------------------------------------------
// Serialization (used by the CLI and the session server)

inline nlohmann::json to_json(const ToolCallRequest& r) {
  return {{"tool", r.tool_name}, {"audio", r.audio_refs}, {"prompt", r.prompt}};
}

inline nlohmann::json to_json(const ToolResult& r, bool include_timing = true) {
  nlohmann::json j = {{"tool", r.tool_name},
                      {"text", r.text},
                      {"attempts", r.attempts},
                      {"refusal", r.refusal}};
  if (include_timing) j["latency_s"] = r.latency.count();
  if (r.error) j["error"] = {{"code", to_string(r.error->code)}, {"message", r.error->message}};
  return j;
}

/// Timing fields are omitted when include_timing is false, which makes the
/// output byte-identical across repeated mock runs.
inline nlohmann::json to_json(const SessionTrace& t, bool include_timing = true) {
  nlohmann::json turns = nlohmann::json::array();
  for (const auto& turn : t.turns) {
    nlohmann::json j = {{"role", to_string(turn.message.role)}, {"content", turn.message.content}};
    if (!turn.message.name.empty()) j["name"] = turn.message.name;
    if (turn.call) j["call"] = to_json(*turn.call);
    if (turn.result) j["result"] = to_json(*turn.result, include_timing);
    turns.push_back(std::move(j));
  }
  nlohmann::json j = {{"task_id", t.task_id},
                      {"seed", t.seed},
                      {"outcome", to_string(t.outcome)},
                      {"tool_call_count", t.tool_call_count},
                      {"skipped_calls", t.skipped_calls},
                      {"turns", std::move(turns)}};
  j["answer"] = t.answer ? nlohmann::json(*t.answer) : nlohmann::json(nullptr);
  if (t.error) j["error"] = *t.error;
  if (include_timing) j["wall_time_s"] = t.wall_time.count();
  return j;
}

}  // namespace ata
