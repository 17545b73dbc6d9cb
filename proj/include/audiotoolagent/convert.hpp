// SPDX-License-Identifier: Apache-2.0
#pragma once

// Converters from the published layouts of the MMAU, MMAR and MMAU-Pro
// releases into the line-delimited dataset schema read by load_dataset.
//
// Input is a JSON array of records or one record per line. Field mapping:
//
//   format    audio key(s)                    category source
//   mmau      audio_id, audio_path, audio     task            ("sound")
//   mmar      audio_path, audio               modality        ("sound-music" -> [sound, music])
//   mmau-pro  audio_path, audio_paths, audio  category
//
// `id`, `question`, `choices` and `answer` keep their names in all three.
// Records that cannot be mapped are skipped with a warning.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "audiotoolagent/bench.hpp"
#include "json.hpp"

namespace ata {

enum class SourceFormat { mmau, mmar, mmau_pro };

inline std::optional<SourceFormat> parse_source_format(std::string_view s) {
  if (s == "mmau") return SourceFormat::mmau;
  if (s == "mmar") return SourceFormat::mmar;
  if (s == "mmau-pro" || s == "mmau_pro") return SourceFormat::mmau_pro;
  return std::nullopt;
}

struct ConversionResult {
  std::vector<nlohmann::json> records;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::string lower_trimmed(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  const auto e = s.find_last_not_of(" \t\r\n");
  s = b == std::string::npos ? "" : s.substr(b, e - b + 1);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

inline std::string strip_dot_slash(std::string s) {
  while (s.rfind("./", 0) == 0) s.erase(0, 2);
  return s;
}

inline const nlohmann::json* first_key(const nlohmann::json& rec, std::initializer_list<const char*> keys) {
  for (const auto* k : keys) {
    const auto it = rec.find(k);
    if (it != rec.end() && !it->is_null()) return &*it;
  }
  return nullptr;
}

inline std::vector<std::string> categories_of(const nlohmann::json& rec, SourceFormat format) {
  const char* key = format == SourceFormat::mmau ? "task" : format == SourceFormat::mmar ? "modality" : "category";
  const auto it = rec.find(key);
  if (it == rec.end() || !it->is_string()) return {};
  const auto value = lower_trimmed(it->get<std::string>());
  if (value.empty()) return {};
  if (format != SourceFormat::mmar) return {value};
  std::vector<std::string> out;
  std::string part;
  for (const char c : value + "-") {
    if (c == '-' || c == '_' || c == '&') {
      if (!part.empty() && std::find(out.begin(), out.end(), part) == out.end()) out.push_back(part);
      part.clear();
    } else {
      part += c;
    }
  }
  return out;
}

}  // namespace detail

inline ConversionResult convert_records(const std::vector<nlohmann::json>& input, SourceFormat format) {
  ConversionResult result;
  std::set<std::string> ids;
  for (std::size_t i = 0; i < input.size(); ++i) {
    const auto& rec = input[i];
    const auto where = "record " + std::to_string(i + 1) + ": ";
    if (!rec.is_object()) {
      result.warnings.push_back(where + "not an object");
      continue;
    }
    nlohmann::json out;

    std::string id;
    if (const auto* v = detail::first_key(rec, {"id", "question_id"})) {
      id = v->is_string() ? v->get<std::string>() : v->is_number_integer() ? std::to_string(v->get<long long>()) : "";
    }
    if (id.empty()) id = "item" + std::to_string(i + 1);
    if (!ids.insert(id).second) {
      result.warnings.push_back(where + "duplicate id '" + id + "'");
      continue;
    }
    out["id"] = id;

    const auto* audio = format == SourceFormat::mmau   ? detail::first_key(rec, {"audio_id", "audio_path", "audio"})
                        : format == SourceFormat::mmar ? detail::first_key(rec, {"audio_path", "audio"})
                                                       : detail::first_key(rec, {"audio_path", "audio_paths", "audio"});
    std::vector<std::string> refs;
    if (audio && audio->is_string()) {
      refs.push_back(detail::strip_dot_slash(audio->get<std::string>()));
    } else if (audio && audio->is_array()) {
      for (const auto& a : *audio)
        if (a.is_string()) refs.push_back(detail::strip_dot_slash(a.get<std::string>()));
    }
    if (refs.empty()) {
      result.warnings.push_back(where + "no audio path");
      continue;
    }
    out["audio"] = refs.size() == 1 ? nlohmann::json(refs[0]) : nlohmann::json(refs);

    const auto* question = detail::first_key(rec, {"question"});
    if (!question || !question->is_string() || question->get<std::string>().empty()) {
      result.warnings.push_back(where + "no question");
      continue;
    }
    out["question"] = *question;

    std::vector<std::string> choices;
    if (const auto* c = detail::first_key(rec, {"choices", "options"}); c && c->is_array()) {
      for (const auto& e : *c)
        if (e.is_string()) choices.push_back(e.get<std::string>());
    }

    std::optional<std::string> answer;
    if (const auto* a = detail::first_key(rec, {"answer"}); a && a->is_string()) answer = a->get<std::string>();
    if (!choices.empty()) {
      if (choices.size() < 2) {
        result.warnings.push_back(where + "fewer than two choices");
        continue;
      }
      if (answer && std::count(choices.begin(), choices.end(), *answer) != 1) {
        // Tolerate case and spacing differences.
        std::vector<std::size_t> hits;
        for (std::size_t k = 0; k < choices.size(); ++k)
          if (detail::lower_trimmed(choices[k]) == detail::lower_trimmed(*answer)) hits.push_back(k);
        if (hits.size() != 1) {
          result.warnings.push_back(where + "answer is not one of the choices");
          continue;
        }
        answer = choices[hits[0]];
      }
      out["choices"] = choices;
    }
    out["answer"] = answer ? nlohmann::json(*answer) : nlohmann::json(nullptr);
    out["categories"] = detail::categories_of(rec, format);
    result.records.push_back(std::move(out));
  }
  return result;
}

/// Reads a JSON array or a JSONL file.
inline std::vector<nlohmann::json> read_json_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '[') {
    const auto j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_array()) throw DatasetError("malformed JSON array in " + path.string());
    return j.get<std::vector<nlohmann::json>>();
  }
  std::vector<nlohmann::json> out;
  std::istringstream lines(text);
  std::size_t line = 0;
  for (std::string raw; std::getline(lines, raw);) {
    ++line;
    if (raw.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto j = nlohmann::json::parse(raw, nullptr, false);
    if (j.is_discarded()) throw DatasetError("malformed JSON record", line);
    out.push_back(std::move(j));
  }
  return out;
}

inline ConversionResult convert_dataset(const std::filesystem::path& in, const std::filesystem::path& out,
                                        SourceFormat format) {
  auto result = convert_records(read_json_records(in), format);
  std::ofstream os(out, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write " + out.string());
  for (const auto& r : result.records) os << r.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << "\n";
  if (!os) throw Error("cannot write " + out.string());
  return result;
}

}  // namespace ata
