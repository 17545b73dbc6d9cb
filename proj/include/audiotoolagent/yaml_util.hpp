// SPDX-License-Identifier: Apache-2.0
#pragma once

// Small helpers for schema-checked YAML config loading. Every error carries
// the field name and the 1-based line of the offending node.

#include <yaml-cpp/yaml.h>

#include <filesystem>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "audiotoolagent/errors.hpp"

namespace ata::yaml {

inline std::optional<int> line_of(const YAML::Node& node) {
  const auto mark = node.Mark();
  if (mark.line < 0) return std::nullopt;
  return mark.line + 1;
}

inline YAML::Node load_file(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) throw ConfigNotFound(path.string());
  try {
    return YAML::LoadFile(path.string());
  } catch (const YAML::ParserException& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.msg, {}, e.mark.line + 1);
  } catch (const YAML::BadFile&) {
    throw ConfigNotFound(path.string());
  }
}

/// Rejects keys outside `allowed`; catches typos and inline secrets alike.
inline void expect_keys(const YAML::Node& map, std::initializer_list<std::string_view> allowed,
                        std::string_view context) {
  if (!map.IsMap())
    throw ConfigError(std::string(context) + " must be a mapping", std::string(context),
                      line_of(map));
  for (const auto& kv : map) {
    const auto key = kv.first.as<std::string>();
    bool ok = false;
    for (const auto a : allowed) ok = ok || key == a;
    if (!ok)
      throw ConfigError("unknown key in " + std::string(context), key, line_of(kv.first));
  }
}

template <typename T>
T get(const YAML::Node& map, const std::string& key, std::string_view type_name) {
  const auto node = map[key];
  if (!node) throw ConfigError("missing required field", key, line_of(map));
  try {
    return node.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError("expected " + std::string(type_name), key, line_of(node));
  }
}

template <typename T>
std::optional<T> get_opt(const YAML::Node& map, const std::string& key,
                         std::string_view type_name) {
  const auto node = map[key];
  if (!node || node.IsNull()) return std::nullopt;
  try {
    return node.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError("expected " + std::string(type_name), key, line_of(node));
  }
}

inline std::vector<std::string> string_list(const YAML::Node& node, const std::string& key) {
  std::vector<std::string> out;
  if (!node || node.IsNull()) return out;
  if (node.IsScalar()) return {node.as<std::string>()};
  if (!node.IsSequence()) throw ConfigError("expected a string or list", key, line_of(node));
  for (const auto& item : node) {
    if (!item.IsScalar()) throw ConfigError("expected a list of strings", key, line_of(item));
    out.push_back(item.as<std::string>());
  }
  return out;
}

/// Resolves `p` against the directory holding the config file.
inline std::filesystem::path resolve(const std::filesystem::path& config_path,
                                     const std::string& p) {
  std::filesystem::path path(p);
  if (path.is_absolute()) return path;
  return config_path.parent_path() / path;
}

}  // namespace ata::yaml
