// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <unistd.h>

namespace ata::testing {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() /
            ("ata-test-" + std::to_string(::getpid()) + "-" + std::to_string(stamp) + "-" +
             std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

  std::filesystem::path write(const std::string& rel, const std::string& content) const {
    const auto p = path_ / rel;
    std::filesystem::create_directories(p.parent_path());
    std::ofstream(p, std::ios::binary) << content;
    return p;
  }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
}

/// Random valid UTF-8 text biased toward characters that stress the tag
/// protocol: angle brackets, quotes, backslashes, control characters and
/// fragments of the tags themselves.
inline std::string random_text(std::mt19937_64& rng, std::size_t max_len) {
  static const char* const fragments[] = {"<tool_call>", "</tool_call>", "<answer>", "</answer>",
                                          "<", ">", "\"", "\\", "{", "}", "\\u003c", "</"};
  std::uniform_int_distribution<std::size_t> len_dist(0, max_len);
  std::uniform_int_distribution<int> kind(0, 9);
  const auto len = len_dist(rng);
  std::string out;
  while (out.size() < len) {
    switch (kind(rng)) {
      case 0:
      case 1:
        out += fragments[rng() % std::size(fragments)];
        break;
      case 2:
        out += static_cast<char>(rng() % 32);  // control
        break;
      case 3: {
        char32_t cp = 0x80 + static_cast<char32_t>(rng() % 0x10F780);
        if (cp >= 0xD800 && cp <= 0xDFFF) cp = 0xE9;
        append_utf8(out, cp);
        break;
      }
      default:
        out += static_cast<char>(0x20 + rng() % 95);
    }
  }
  return out;
}

/// Arbitrary bytes, including invalid UTF-8.
inline std::string random_bytes(std::mt19937_64& rng, std::size_t max_len) {
  std::string out(rng() % (max_len + 1), '\0');
  for (auto& c : out) c = static_cast<char>(rng() & 0xFF);
  return out;
}

}  // namespace ata::testing
