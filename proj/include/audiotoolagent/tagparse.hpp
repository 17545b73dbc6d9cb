// SPDX-License-Identifier: Apache-2.0
#pragma once

// Structured-tag protocol between the reasoning model and the framework.
//
//   <tool_call>{"tool": "whisper", "audio": "/a.wav", "prompt": "..."}</tool_call>
//   <answer>(b) rain</answer>
//
// The tool_call body is a flat JSON object. `audio` is a string or a list of
// strings and may be omitted for tools that take no audio. Rendering escapes
// '<' as < so a prompt can never terminate its own tag.

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace ata {

inline constexpr std::string_view kToolCallOpen = "<tool_call>";
inline constexpr std::string_view kToolCallClose = "</tool_call>";
inline constexpr std::string_view kAnswerOpen = "<answer>";
inline constexpr std::string_view kAnswerClose = "</answer>";

/// Half-open character range [start, end) in the parsed text.
struct Span {
  std::size_t start = 0;
  std::size_t end = 0;
  friend bool operator==(const Span&, const Span&) = default;
};

struct ToolCallRequest {
  std::string tool_name;
  std::vector<std::string> audio_refs;
  std::string prompt;
  Span span;

  friend bool operator==(const ToolCallRequest&, const ToolCallRequest&) = default;
};

/// Equality ignoring the source span.
inline bool same_request(const ToolCallRequest& a, const ToolCallRequest& b) {
  return a.tool_name == b.tool_name && a.audio_refs == b.audio_refs && a.prompt == b.prompt;
}

enum class DiagnosticKind { unclosed_tag, stray_close_tag, undecodable_body, missing_key };

inline std::string_view to_string(DiagnosticKind k) {
  switch (k) {
    case DiagnosticKind::unclosed_tag: return "unclosed_tag";
    case DiagnosticKind::stray_close_tag: return "stray_close_tag";
    case DiagnosticKind::undecodable_body: return "undecodable_body";
    case DiagnosticKind::missing_key: return "missing_key";
  }
  return "unknown";
}

struct Diagnostic {
  DiagnosticKind kind;
  std::size_t offset = 0;
  std::string message;
};

struct ParsedTurn {
  std::vector<ToolCallRequest> tool_calls;
  std::optional<std::string> answer;
  std::string free_text;
  std::vector<Diagnostic> diagnostics;
};

namespace detail {

inline std::string_view trim_view(std::string_view s) {
  constexpr std::string_view ws = " \t\r\n\f\v";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

// Decodes one tool_call body. Returns nullopt and appends a diagnostic when
// the body is not a usable request.
inline std::optional<ToolCallRequest> decode_tool_body(std::string_view body, std::size_t offset,
                                                       std::vector<Diagnostic>& diags) {
  using nlohmann::json;
  const auto trimmed = trim_view(body);
  json obj = json::parse(trimmed.begin(), trimmed.end(), nullptr, /*allow_exceptions=*/false);
  if (obj.is_discarded() || !obj.is_object()) {
    diags.push_back({DiagnosticKind::undecodable_body, offset,
                     "tool_call body is not a JSON object"});
    return std::nullopt;
  }

  ToolCallRequest req;
  const auto tool = obj.find("tool");
  if (tool == obj.end() || !tool->is_string() || tool->get_ref<const std::string&>().empty()) {
    diags.push_back({DiagnosticKind::missing_key, offset,
                     "tool_call body needs a non-empty string 'tool'"});
    return std::nullopt;
  }
  req.tool_name = tool->get<std::string>();

  const auto prompt = obj.find("prompt");
  if (prompt == obj.end() || !prompt->is_string() ||
      prompt->get_ref<const std::string&>().empty()) {
    diags.push_back({DiagnosticKind::missing_key, offset,
                     "tool_call body needs a non-empty string 'prompt'"});
    return std::nullopt;
  }
  req.prompt = prompt->get<std::string>();

  if (const auto audio = obj.find("audio"); audio != obj.end() && !audio->is_null()) {
    if (audio->is_string()) {
      req.audio_refs.push_back(audio->get<std::string>());
    } else if (audio->is_array()) {
      for (const auto& a : *audio) {
        if (!a.is_string()) {
          diags.push_back({DiagnosticKind::undecodable_body, offset,
                           "'audio' list entries must be strings"});
          return std::nullopt;
        }
        req.audio_refs.push_back(a.get<std::string>());
      }
    } else {
      diags.push_back({DiagnosticKind::undecodable_body, offset,
                       "'audio' must be a string or a list of strings"});
      return std::nullopt;
    }
  }
  return req;
}

}  // namespace detail

/// Extracts every well-formed tag pair from model output. Never throws;
/// problems are reported through ParsedTurn::diagnostics.
///
/// A pair is well formed when its closing tag appears before any further
/// opening tag of the same kind. Text inside a tool_call pair is opaque, so
/// an <answer> quoted inside a prompt is not an answer. When several answer
/// pairs exist the last one wins.
inline ParsedTurn parse_turn(std::string_view text) {
  ParsedTurn out;
  std::vector<Span> consumed;
  std::size_t pos = 0;

  while (pos < text.size()) {
    const auto tc = text.find(kToolCallOpen, pos);
    const auto an = text.find(kAnswerOpen, pos);
    if (tc == std::string_view::npos && an == std::string_view::npos) break;

    const bool is_tool = tc != std::string_view::npos && (an == std::string_view::npos || tc < an);
    const auto open_at = is_tool ? tc : an;
    const auto open_tag = is_tool ? kToolCallOpen : kAnswerOpen;
    const auto close_tag = is_tool ? kToolCallClose : kAnswerClose;
    const auto body_start = open_at + open_tag.size();

    const auto close_at = text.find(close_tag, body_start);
    const auto reopen_at = text.find(open_tag, body_start);
    if (close_at == std::string_view::npos ||
        (reopen_at != std::string_view::npos && reopen_at < close_at)) {
      out.diagnostics.push_back({DiagnosticKind::unclosed_tag, open_at,
                                 std::string(open_tag) + " without matching " +
                                     std::string(close_tag)});
      pos = body_start;
      continue;
    }

    const Span span{open_at, close_at + close_tag.size()};
    const auto body = text.substr(body_start, close_at - body_start);
    consumed.push_back(span);
    if (is_tool) {
      if (auto req = detail::decode_tool_body(body, open_at, out.diagnostics)) {
        req->span = span;
        out.tool_calls.push_back(std::move(*req));
      }
    } else {
      out.answer = std::string(detail::trim_view(body));
    }
    pos = span.end;
  }

  // Closing tags that did not terminate any pair.
  const auto inside_consumed = [&](std::size_t at) {
    for (const auto& s : consumed)
      if (at >= s.start && at < s.end) return true;
    return false;
  };
  for (const auto close_tag : {kToolCallClose, kAnswerClose}) {
    for (auto at = text.find(close_tag); at != std::string_view::npos;
         at = text.find(close_tag, at + 1)) {
      if (!inside_consumed(at))
        out.diagnostics.push_back({DiagnosticKind::stray_close_tag, at,
                                   std::string(close_tag) + " without opening tag"});
    }
  }

  std::size_t cursor = 0;
  for (const auto& s : consumed) {
    out.free_text.append(text.substr(cursor, s.start - cursor));
    cursor = s.end;
  }
  out.free_text.append(text.substr(cursor));
  return out;
}

/// Canonical tag rendering; parse_turn(render_tool_call(r)) yields r.
inline std::string render_tool_call(const ToolCallRequest& req) {
  nlohmann::ordered_json body;
  body["tool"] = req.tool_name;
  if (req.audio_refs.size() == 1) {
    body["audio"] = req.audio_refs.front();
  } else {
    body["audio"] = req.audio_refs;
  }
  body["prompt"] = req.prompt;

  const auto dumped = body.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
  std::string escaped;
  escaped.reserve(dumped.size() + 16);
  // '<' can only occur inside JSON strings, so < is always valid here.
  for (const char c : dumped) {
    if (c == '<') {
      escaped += "\\u003c";
    } else {
      escaped += c;
    }
  }
  return std::string(kToolCallOpen) + escaped + std::string(kToolCallClose);
}

inline std::string render_answer(std::string_view answer) {
  return std::string(kAnswerOpen) + std::string(answer) + std::string(kAnswerClose);
}

}  // namespace ata
