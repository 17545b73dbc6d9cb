// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <stdexcept>
#include <string>

namespace ata {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid or missing configuration. Carries the offending field and the
/// 1-based source line when the loader can locate it.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message, std::string field = {},
                       std::optional<int> line = std::nullopt)
      : Error(format(message, field, line)), field_(std::move(field)), line_(line) {}

  const std::string& field() const noexcept { return field_; }
  std::optional<int> line() const noexcept { return line_; }

 private:
  static std::string format(const std::string& message, const std::string& field,
                            std::optional<int> line) {
    std::string out = message;
    if (!field.empty()) out += " (field '" + field + "'";
    if (line) out += (field.empty() ? " (" : ", ") + std::string("line ") + std::to_string(*line);
    if (!field.empty() || line) out += ")";
    return out;
  }

  std::string field_;
  std::optional<int> line_;
};

/// The config file itself could not be opened.
class ConfigNotFound : public ConfigError {
 public:
  explicit ConfigNotFound(const std::string& path)
      : ConfigError("config file not found: " + path) {}
};

}  // namespace ata
