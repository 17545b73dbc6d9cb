// SPDX-License-Identifier: Apache-2.0
#pragma once

// Generated mock benchmarks shared by the bench tests and the acceptance
// runner. Everything is written into a caller-owned directory.

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "test_util.hpp"

namespace ata::testing {

struct MockBench {
  std::filesystem::path config;
  std::filesystem::path dataset;
  /// Items whose scripted tool response equals the gold choice, counted
  /// from the generated script rows.
  std::size_t scripted_correct = 0;
  std::size_t n_items = 0;
};

inline std::string item_name(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "item%02zu", i);
  return buf;
}

/// 20 three-way items over sound/music/speech. The "oracle" mock tool
/// reports a choice for each clip; for items 3, 10 and 17 it reports a
/// wrong one. The scripted agent calls the tool once, then answers with
/// whatever the tool said.
inline MockBench write_twenty_item_bench(const TempDir& dir) {
  static const std::vector<std::vector<std::string>> choice_sets = {
      {"thunder", "rain", "wind"}, {"piano", "violin", "drums"}, {"happy", "sad", "angry"}};
  static const char* const cats[] = {"sound", "music", "speech"};

  MockBench b;
  std::string dataset;
  std::string script = "version: 1\nresponses:\n";
  for (std::size_t i = 0; i < 20; ++i) {
    const auto& choices = choice_sets[i % 3];
    const auto& gold = choices[(i * 7) % 3];
    const bool tool_right = !(i == 3 || i == 10 || i == 17);
    const auto& said = tool_right ? gold : choices[((i * 7) % 3 + 1) % 3];
    nlohmann::json rec = {{"id", item_name(i)},
                          {"audio", "clips/" + item_name(i) + ".wav"},
                          {"question", "Which label fits the clip?"},
                          {"choices", choices},
                          {"answer", gold},
                          {"categories", {cats[i % 3]}}};
    dataset += rec.dump() + "\n";
    script += "  - tool: oracle\n    audio: \"*/" + item_name(i) + ".wav\"\n    text: \"" + said + "\"\n";
    if (said == gold) ++b.scripted_correct;
  }
  b.n_items = 20;
  dir.write("bench/tool_script.yaml", script);
  dir.write("bench/agent_script.yaml", R"(version: 1
turns:
  - turn: 1
    text: 'Checking. <tool_call>{"tool":"oracle","audio":"{{audio}}","prompt":"Which label?"}</tool_call>'
  - turn: 2
    text: "<answer>{{last_tool}}</answer>"
)");
  b.config = dir.write("bench/config.yaml", R"(version: 1
agent:
  kind: scripted
  script: agent_script.yaml
tools:
  - name: oracle
    kind: mock
    description: Names the label that fits the clip.
    script: tool_script.yaml
)");
  b.dataset = dir.write("bench/dataset.jsonl", dataset);
  return b;
}

struct SeededBench {
  std::filesystem::path config;
  std::filesystem::path dataset;
  std::vector<std::int64_t> seeds;
};

/// 10 two-way items, tool-less. Under seed s the agent answers item i
/// correctly iff i < 5 + s, so seeds 1..5 give 6, 7, 8, 9, 10 correct.
inline SeededBench write_seeded_bench(const TempDir& dir) {
  SeededBench b;
  b.seeds = {1, 2, 3, 4, 5};
  std::string dataset;
  std::string agent = "version: 1\nturns:\n";
  for (std::size_t i = 0; i < 10; ++i) {
    nlohmann::json rec = {{"id", item_name(i)},
                          {"audio", "clips/" + item_name(i) + ".wav"},
                          {"question", "Is there speech?"},
                          {"choices", {"yes", "no"}},
                          {"answer", "yes"},
                          {"categories", {i < 5 ? "speech" : "sound"}}};
    dataset += rec.dump() + "\n";
    for (const auto s : b.seeds) {
      const bool right = static_cast<std::int64_t>(i) < 5 + s;
      agent += "  - match: \"*/" + item_name(i) + ".wav*\"\n    seed: " + std::to_string(s) +
               "\n    text: \"<answer>" + (right ? "(a)" : "(b)") + "</answer>\"\n";
    }
  }
  dir.write("seeded/agent_script.yaml", agent);
  b.config = dir.write("seeded/config.yaml", "version: 1\nagent:\n  kind: scripted\n  script: agent_script.yaml\ntools: []\n");
  b.dataset = dir.write("seeded/dataset.jsonl", dataset);
  return b;
}

}  // namespace ata::testing
