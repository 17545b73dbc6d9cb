// SPDX-License-Identifier: Apache-2.0
#pragma once

// Benchmark harness: dataset ingestion, answer matching, multi-seed runs and
// per-category accuracy reports.

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "audiotoolagent/agent.hpp"
#include "audiotoolagent/errors.hpp"
#include "audiotoolagent/rng.hpp"
#include "json.hpp"

namespace ata {

// ---------------------------------------------------------------------------
// Dataset
//
// One JSON object per line:
//   {"id": "mmau-0001", "audio": "clips/0001.wav", "question": "...",
//    "choices": ["thunder", "rain", "wind"], "answer": "rain",
//    "categories": ["sound"]}
// `audio` may be a list; `choices` is omitted for open-ended items. Blank
// lines are skipped.

class DatasetError : public Error {
 public:
  DatasetError(const std::string& message, std::optional<std::size_t> line = std::nullopt)
      : Error(line ? "line " + std::to_string(*line) + ": " + message : message), line_(line) {}
  std::optional<std::size_t> line() const noexcept { return line_; }

 private:
  std::optional<std::size_t> line_;
};

struct Dataset {
  std::string name;
  std::vector<AudioTask> items;
  std::vector<std::string> category_scheme;
  /// Ids of items whose audio could not be found. They stay in `items`.
  std::set<std::string> broken_audio;
  std::vector<std::string> warnings;
};

struct DatasetOptions {
  /// Base directory for relative audio paths; defaults to the file's directory.
  std::optional<std::filesystem::path> audio_root;
  /// Known categories. When absent the scheme is collected from the items.
  std::optional<std::vector<std::string>> category_scheme;
  bool check_audio = true;
};

namespace detail {

inline std::vector<std::string> json_string_list(const nlohmann::json& j, const char* field,
                                                 std::size_t line) {
  if (j.is_string()) return {j.get<std::string>()};
  if (!j.is_array()) throw DatasetError(std::string("'") + field + "' must be a string or list", line);
  std::vector<std::string> out;
  for (const auto& e : j) {
    if (!e.is_string()) throw DatasetError(std::string("'") + field + "' entries must be strings", line);
    out.push_back(e.get<std::string>());
  }
  return out;
}

}  // namespace detail

inline Dataset load_dataset(const std::filesystem::path& path, const DatasetOptions& options = {}) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open dataset " + path.string());

  Dataset ds;
  ds.name = path.stem().string();
  const auto audio_root = options.audio_root.value_or(path.parent_path());
  std::set<std::string> ids;
  std::set<std::string> scheme_seen;
  if (options.category_scheme) {
    ds.category_scheme = *options.category_scheme;
    scheme_seen.insert(ds.category_scheme.begin(), ds.category_scheme.end());
  }

  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    if (raw.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = nlohmann::json::parse(raw, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw DatasetError("malformed JSON record", line);

    AudioTask task;
    if (!j.contains("id")) throw DatasetError("missing 'id'", line);
    if (j["id"].is_string()) {
      task.id = j["id"].get<std::string>();
    } else if (j["id"].is_number_integer()) {
      task.id = std::to_string(j["id"].get<long long>());
    } else {
      throw DatasetError("'id' must be a string or integer", line);
    }
    if (!ids.insert(task.id).second) throw DatasetError("duplicate id '" + task.id + "'", line);

    if (!j.contains("audio")) throw DatasetError("missing 'audio'", line);
    for (auto ref : detail::json_string_list(j["audio"], "audio", line)) {
      std::filesystem::path p(ref);
      if (p.is_relative()) ref = (audio_root / p).lexically_normal().string();
      task.audio_refs.push_back(std::move(ref));
    }
    if (!j.contains("question") || !j["question"].is_string())
      throw DatasetError("missing string 'question'", line);
    task.question = j["question"].get<std::string>();
    if (j.contains("choices") && !j["choices"].is_null())
      task.choices = detail::json_string_list(j["choices"], "choices", line);
    if (j.contains("answer") && !j["answer"].is_null()) {
      if (!j["answer"].is_string()) throw DatasetError("'answer' must be a string", line);
      task.gold = j["answer"].get<std::string>();
    }
    if (j.contains("categories") && !j["categories"].is_null())
      task.categories = detail::json_string_list(j["categories"], "categories", line);

    try {
      validate(task);
    } catch (const Error& e) {
      throw DatasetError(e.what(), line);
    }

    for (const auto& c : task.categories) {
      if (scheme_seen.count(c)) continue;
      if (options.category_scheme)
        throw DatasetError("category '" + c + "' is not in the category scheme", line);
      scheme_seen.insert(c);
      ds.category_scheme.push_back(c);
    }

    if (options.check_audio) {
      for (const auto& ref : task.audio_refs) {
        std::error_code ec;
        if (!std::filesystem::is_regular_file(ref, ec)) {
          ds.broken_audio.insert(task.id);
          break;
        }
      }
    }
    ds.items.push_back(std::move(task));
  }

  if (ds.items.empty()) ds.warnings.push_back("dataset " + path.string() + " contains no items");
  if (!ds.broken_audio.empty())
    ds.warnings.push_back(std::to_string(ds.broken_audio.size()) +
                          " item(s) reference missing audio");
  return ds;
}

/// Seeded sample without replacement of round(fraction * n) items, returned
/// in original order. Uses StableRng so the subset is reproducible on any
/// platform.
inline Dataset subsample(const Dataset& dataset, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("subsample fraction must be in (0, 1]");
  const auto n = dataset.items.size();
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));

  Dataset out;
  out.name = dataset.name;
  out.category_scheme = dataset.category_scheme;
  StableRng rng(seed);
  for (const auto i : rng.sample_indices(n, k)) {
    const auto& item = dataset.items[i];
    if (dataset.broken_audio.count(item.id)) out.broken_audio.insert(item.id);
    out.items.push_back(item);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Answer matching

enum class MatchStage { exact, label, substring, overlap, judge, none };

inline std::string_view to_string(MatchStage s) {
  switch (s) {
    case MatchStage::exact: return "exact";
    case MatchStage::label: return "label";
    case MatchStage::substring: return "substring";
    case MatchStage::overlap: return "overlap";
    case MatchStage::judge: return "judge";
    case MatchStage::none: return "none";
  }
  return "unknown";
}

struct MatchResult {
  bool correct = false;
  std::optional<std::size_t> matched_choice;
  MatchStage stage = MatchStage::none;
};

inline constexpr double kMinTokenOverlap = 0.5;

namespace detail {

inline bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
inline bool is_punct(char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; }

/// Lowercase, trim, collapse runs of whitespace to one space.
inline std::string fold_whitespace(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (const char c : s) {
    if (is_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

inline std::string strip_punct(std::string s) {
  std::size_t b = 0;
  while (b < s.size() && (is_punct(s[b]) || is_space(s[b]))) ++b;
  std::size_t e = s.size();
  while (e > b && (is_punct(s[e - 1]) || is_space(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

struct Labeled {
  std::optional<std::size_t> label;
  std::string rest;
};

// Recognizes "(x) ...", "x) ...", "x. ..." and a bare "x".
inline Labeled split_label(const std::string& folded) {
  static const std::regex paren(R"(^\(([a-z])\)\s*(.*)$)");
  static const std::regex suffix(R"(^([a-z])[\).](?:\s+(.*))?$)");
  std::smatch m;
  if (std::regex_match(folded, m, paren) || std::regex_match(folded, m, suffix)) {
    return {static_cast<std::size_t>(m[1].str()[0] - 'a'), strip_punct(m[2].str())};
  }
  if (folded.size() == 1 && folded[0] >= 'a' && folded[0] <= 'z')
    return {static_cast<std::size_t>(folded[0] - 'a'), {}};
  return {std::nullopt, strip_punct(folded)};
}

inline std::set<std::string> tokens(std::string_view s) {
  std::set<std::string> out;
  std::string cur;
  for (const char c : s) {
    if (is_space(c) || is_punct(c)) {
      if (!cur.empty()) out.insert(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.insert(std::move(cur));
  return out;
}

/// Dice coefficient over token sets.
inline double token_overlap(std::string_view a, std::string_view b) {
  const auto ta = tokens(a);
  const auto tb = tokens(b);
  if (ta.empty() || tb.empty()) return 0.0;
  std::size_t common = 0;
  for (const auto& t : ta) common += tb.count(t);
  return 2.0 * static_cast<double>(common) / static_cast<double>(ta.size() + tb.size());
}

}  // namespace detail

/// Normalized form used by the matcher: lowercase, trimmed, whitespace
/// collapsed, surrounding punctuation stripped.
inline std::string normalize_answer(std::string_view s) {
  return detail::strip_punct(detail::fold_whitespace(s));
}

/// Maps an extracted answer onto one of `choices`.
///
/// Cascade, first hit wins:
///   exact     trimmed answer equals a trimmed choice verbatim, or the
///             whole normalized answer equals a normalized choice
///   label     leading "(x)", "x)", "x." or a bare "x" selects choice x
///   exact     label-stripped remainder equals a normalized choice
///   substring the remainder contains exactly one choice, or exactly one
///             choice contains the remainder
///   overlap   best token Dice score >= 0.5, ties to the lowest index
inline MatchResult match_answer(std::string_view extracted, const std::vector<std::string>& choices,
                                std::string_view gold) {
  MatchResult r;
  if (choices.empty()) return r;

  std::vector<std::string> norm;
  norm.reserve(choices.size());
  for (const auto& c : choices) norm.push_back(normalize_answer(c));

  std::optional<std::size_t> gold_index;
  for (std::size_t i = 0; i < choices.size() && !gold_index; ++i)
    if (choices[i] == gold) gold_index = i;
  if (!gold_index) {
    const auto ng = normalize_answer(gold);
    for (std::size_t i = 0; i < norm.size() && !gold_index; ++i)
      if (norm[i] == ng) gold_index = i;
  }

  const auto finish = [&](std::size_t idx, MatchStage stage) {
    r.matched_choice = idx;
    r.stage = stage;
    r.correct = gold_index && *gold_index == idx;
    return r;
  };

  // Verbatim choice text first: choices that only differ in punctuation
  // normalize to the same string.
  const auto trimmed = detail::trim_view(extracted);
  for (std::size_t i = 0; i < choices.size(); ++i)
    if (!trimmed.empty() && detail::trim_view(choices[i]) == trimmed) return finish(i, MatchStage::exact);

  const auto folded = detail::fold_whitespace(extracted);
  const auto whole = detail::strip_punct(folded);
  for (std::size_t i = 0; i < norm.size(); ++i)
    if (!whole.empty() && norm[i] == whole) return finish(i, MatchStage::exact);

  const auto labeled = detail::split_label(folded);
  if (labeled.label && *labeled.label < choices.size()) return finish(*labeled.label, MatchStage::label);

  const auto& rest = labeled.rest;
  if (rest.empty()) return r;
  for (std::size_t i = 0; i < norm.size(); ++i)
    if (norm[i] == rest) return finish(i, MatchStage::exact);

  std::vector<std::size_t> contained;
  for (std::size_t i = 0; i < norm.size(); ++i)
    if (!norm[i].empty() && rest.find(norm[i]) != std::string::npos) contained.push_back(i);
  if (contained.size() == 1) return finish(contained.front(), MatchStage::substring);
  if (contained.empty()) {
    std::vector<std::size_t> containing;
    for (std::size_t i = 0; i < norm.size(); ++i)
      if (norm[i].find(rest) != std::string::npos) containing.push_back(i);
    if (containing.size() == 1) return finish(containing.front(), MatchStage::substring);
  }

  double best = -1.0;
  std::size_t best_idx = 0;
  for (std::size_t i = 0; i < norm.size(); ++i) {
    const double s = detail::token_overlap(rest, norm[i]);
    if (s > best) {
      best = s;
      best_idx = i;
    }
  }
  if (best >= kMinTokenOverlap) return finish(best_idx, MatchStage::overlap);
  return r;
}

/// Open-ended items: the gold string acts as the only choice.
inline MatchResult match_open_ended(std::string_view extracted, std::string_view gold) {
  auto r = match_answer(extracted, {std::string(gold)}, gold);
  // A bare letter is not a label when there are no choices.
  if (r.stage == MatchStage::label) return {};
  r.matched_choice.reset();
  return r;
}

/// Pluggable grader for open-ended items (off by default).
class AnswerJudge {
 public:
  virtual ~AnswerJudge() = default;
  virtual bool judge(const AudioTask& task, const std::string& extracted) const = 0;
};

/// Asks a backend model for a YES/NO verdict.
class BackendJudge final : public AnswerJudge {
 public:
  explicit BackendJudge(std::shared_ptr<const AgentBackend> backend) : backend_(std::move(backend)) {}

  bool judge(const AudioTask& task, const std::string& extracted) const override {
    std::vector<ChatMessage> messages = {
        {Role::system,
         "You grade answers to audio questions. Reply with YES if the candidate answer means the "
         "same as the reference answer, otherwise reply with NO.",
         {}},
        {Role::user,
         "Question: " + task.question + "\nReference answer: " + task.gold.value_or("") +
             "\nCandidate answer: " + extracted,
         {}}};
    const auto reply = normalize_answer(backend_->complete(messages, 0, {}));
    return reply.rfind("yes", 0) == 0;
  }

 private:
  std::shared_ptr<const AgentBackend> backend_;
};

// ---------------------------------------------------------------------------
// Benchmark execution and reports

struct ItemResult {
  std::string task_id;
  std::int64_t seed = 0;
  std::vector<std::string> categories;
  std::optional<std::string> extracted;
  std::optional<std::size_t> matched_choice;
  MatchStage stage = MatchStage::none;
  bool correct = false;
  int tool_call_count = 0;
  Outcome outcome = Outcome::agent_error;

  friend bool operator==(const ItemResult&, const ItemResult&) = default;
};

struct CategoryStat {
  std::string category;
  std::size_t n = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
  friend bool operator==(const CategoryStat&, const CategoryStat&) = default;
};

struct SeedStat {
  std::int64_t seed = 0;
  std::size_t n = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
  friend bool operator==(const SeedStat&, const SeedStat&) = default;
};

struct BenchmarkReport {
  std::string dataset;
  /// Categories with at least one item, in scheme order. Items with several
  /// tags count towards each, so the n values may sum to more than n_items.
  std::vector<CategoryStat> per_category;
  std::size_t n_items = 0;
  std::size_t n_correct = 0;
  double micro_average = 0.0;
  double macro_average = 0.0;
  std::vector<SeedStat> per_seed;
  double mean_across_seeds = 0.0;
  std::vector<ItemResult> item_results;

  friend bool operator==(const BenchmarkReport&, const BenchmarkReport&) = default;
};

inline double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

/// Aggregates item results. Results are sorted by (seed, task_id) first, so
/// the report does not depend on execution order.
inline BenchmarkReport build_report(std::string dataset_name,
                                    const std::vector<std::string>& category_scheme,
                                    std::vector<ItemResult> results,
                                    const std::vector<std::int64_t>& seeds) {
  std::sort(results.begin(), results.end(), [](const ItemResult& a, const ItemResult& b) {
    return std::tie(a.seed, a.task_id) < std::tie(b.seed, b.task_id);
  });

  BenchmarkReport rep;
  rep.dataset = std::move(dataset_name);
  rep.n_items = results.size();

  std::map<std::string, CategoryStat> cats;
  std::map<std::int64_t, SeedStat> by_seed;
  for (const auto s : seeds) by_seed[s].seed = s;
  for (const auto& r : results) {
    rep.n_correct += r.correct ? 1 : 0;
    auto& s = by_seed[r.seed];
    s.seed = r.seed;
    ++s.n;
    s.correct += r.correct ? 1 : 0;
    for (const auto& c : r.categories) {
      auto& cs = cats[c];
      cs.category = c;
      ++cs.n;
      cs.correct += r.correct ? 1 : 0;
    }
  }
  rep.micro_average = ratio(rep.n_correct, rep.n_items);

  std::vector<std::string> order = category_scheme;
  for (const auto& [name, _] : cats)
    if (std::find(order.begin(), order.end(), name) == order.end()) order.push_back(name);
  double macro_sum = 0.0;
  for (const auto& name : order) {
    const auto it = cats.find(name);
    if (it == cats.end()) continue;
    auto stat = it->second;
    stat.accuracy = ratio(stat.correct, stat.n);
    macro_sum += stat.accuracy;
    rep.per_category.push_back(stat);
  }
  rep.macro_average = rep.per_category.empty() ? 0.0 : macro_sum / static_cast<double>(rep.per_category.size());

  // Keep the caller's seed order.
  std::vector<std::int64_t> seed_order = seeds;
  for (const auto& [s, _] : by_seed)
    if (std::find(seed_order.begin(), seed_order.end(), s) == seed_order.end()) seed_order.push_back(s);
  double seed_sum = 0.0;
  for (const auto s : seed_order) {
    auto stat = by_seed[s];
    stat.accuracy = ratio(stat.correct, stat.n);
    seed_sum += stat.accuracy;
    rep.per_seed.push_back(stat);
  }
  rep.mean_across_seeds = rep.per_seed.empty() ? 0.0 : seed_sum / static_cast<double>(rep.per_seed.size());
  rep.item_results = std::move(results);
  return rep;
}

struct BenchOptions {
  std::vector<std::int64_t> seeds = {1};
  std::size_t parallelism = 1;
  int budget = kDefaultToolBudget;
  SamplingConfig sampling;
  /// Grader for items without choices; string matching when null.
  std::shared_ptr<const AnswerJudge> judge;
};

inline ItemResult score_item(const AudioTask& task, const SessionTrace& trace,
                             const AnswerJudge* judge) {
  ItemResult r;
  r.task_id = task.id;
  r.seed = trace.seed;
  r.categories = task.categories;
  r.tool_call_count = trace.tool_call_count;
  r.outcome = trace.outcome;
  r.extracted = answer_of(trace);
  if (!r.extracted || !task.gold) return r;
  if (task.choices) {
    const auto m = match_answer(*r.extracted, *task.choices, *task.gold);
    r.matched_choice = m.matched_choice;
    r.stage = m.stage;
    r.correct = m.correct;
  } else if (judge) {
    r.correct = judge->judge(task, *r.extracted);
    r.stage = MatchStage::judge;
  } else {
    const auto m = match_open_ended(*r.extracted, *task.gold);
    r.stage = m.stage;
    r.correct = m.correct;
  }
  return r;
}

/// Runs every item once per seed with at most `parallelism` concurrent
/// sessions. Item-level failures become incorrect results; only bad
/// configuration throws.
inline BenchmarkReport run_benchmark(const Dataset& dataset, const AgentBackend& backend,
                                     const ToolRegistry& registry, const BenchOptions& options) {
  if (options.seeds.empty()) throw ConfigError("benchmark needs at least one seed", "seeds");
  if (options.parallelism == 0) throw ConfigError("parallelism must be positive", "parallelism");

  struct Job {
    std::int64_t seed;
    std::size_t item;
  };
  std::vector<Job> jobs;
  for (const auto s : options.seeds)
    for (std::size_t i = 0; i < dataset.items.size(); ++i) jobs.push_back({s, i});

  std::vector<ItemResult> results(jobs.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (auto j = next.fetch_add(1); j < jobs.size(); j = next.fetch_add(1)) {
      const auto& task = dataset.items[jobs[j].item];
      SessionOptions so;
      so.budget = options.budget;
      so.seed = jobs[j].seed;
      so.sampling = options.sampling;
      try {
        const auto trace = run_session(task, backend, registry, so);
        results[j] = score_item(task, trace, options.judge.get());
      } catch (const std::exception&) {
        ItemResult r;
        r.task_id = task.id;
        r.seed = jobs[j].seed;
        r.categories = task.categories;
        results[j] = std::move(r);
      }
    }
  };

  const auto n_threads = std::min<std::size_t>(options.parallelism, std::max<std::size_t>(jobs.size(), 1));
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(n_threads);
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  }
  return build_report(dataset.name, dataset.category_scheme, std::move(results), options.seeds);
}

// ---------------------------------------------------------------------------
// Report files
//
//   report.json  full report, lossless (read back with read_report)
//   summary.csv  category,n,correct,accuracy; one row per category plus an
//                "average" row holding the micro average
//   seeds.csv    seed,n,correct,accuracy; one row per run
//   mean.csv     runs,mean_accuracy; the across-seed mean

inline nlohmann::json to_json(const ItemResult& r) {
  nlohmann::json j = {{"task_id", r.task_id},
                      {"seed", r.seed},
                      {"categories", r.categories},
                      {"stage", to_string(r.stage)},
                      {"correct", r.correct},
                      {"tool_call_count", r.tool_call_count},
                      {"outcome", to_string(r.outcome)}};
  j["extracted"] = r.extracted ? nlohmann::json(*r.extracted) : nlohmann::json(nullptr);
  j["matched_choice"] = r.matched_choice ? nlohmann::json(*r.matched_choice) : nlohmann::json(nullptr);
  return j;
}

inline nlohmann::json to_json(const BenchmarkReport& rep) {
  nlohmann::json cats = nlohmann::json::array();
  for (const auto& c : rep.per_category)
    cats.push_back({{"category", c.category}, {"n", c.n}, {"correct", c.correct}, {"accuracy", c.accuracy}});
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& s : rep.per_seed)
    seeds.push_back({{"seed", s.seed}, {"n", s.n}, {"correct", s.correct}, {"accuracy", s.accuracy}});
  nlohmann::json items = nlohmann::json::array();
  for (const auto& r : rep.item_results) items.push_back(to_json(r));
  return {{"format", "audiotoolagent-report/1"},
          {"dataset", rep.dataset},
          {"n_items", rep.n_items},
          {"n_correct", rep.n_correct},
          {"micro_average", rep.micro_average},
          {"macro_average", rep.macro_average},
          {"mean_across_seeds", rep.mean_across_seeds},
          {"per_category", std::move(cats)},
          {"per_seed", std::move(seeds)},
          {"item_results", std::move(items)}};
}

inline BenchmarkReport report_from_json(const nlohmann::json& j) {
  try {
    BenchmarkReport rep;
    rep.dataset = j.at("dataset").get<std::string>();
    rep.n_items = j.at("n_items").get<std::size_t>();
    rep.n_correct = j.at("n_correct").get<std::size_t>();
    rep.micro_average = j.at("micro_average").get<double>();
    rep.macro_average = j.at("macro_average").get<double>();
    rep.mean_across_seeds = j.at("mean_across_seeds").get<double>();
    for (const auto& c : j.at("per_category"))
      rep.per_category.push_back({c.at("category").get<std::string>(), c.at("n").get<std::size_t>(),
                                  c.at("correct").get<std::size_t>(), c.at("accuracy").get<double>()});
    for (const auto& s : j.at("per_seed"))
      rep.per_seed.push_back({s.at("seed").get<std::int64_t>(), s.at("n").get<std::size_t>(),
                              s.at("correct").get<std::size_t>(), s.at("accuracy").get<double>()});
    for (const auto& r : j.at("item_results")) {
      ItemResult ir;
      ir.task_id = r.at("task_id").get<std::string>();
      ir.seed = r.at("seed").get<std::int64_t>();
      ir.categories = r.at("categories").get<std::vector<std::string>>();
      if (!r.at("extracted").is_null()) ir.extracted = r.at("extracted").get<std::string>();
      if (!r.at("matched_choice").is_null()) ir.matched_choice = r.at("matched_choice").get<std::size_t>();
      const auto stage = r.at("stage").get<std::string>();
      for (auto s : {MatchStage::exact, MatchStage::label, MatchStage::substring, MatchStage::overlap,
                     MatchStage::judge, MatchStage::none})
        if (to_string(s) == stage) ir.stage = s;
      ir.correct = r.at("correct").get<bool>();
      ir.tool_call_count = r.at("tool_call_count").get<int>();
      const auto outcome = parse_outcome(r.at("outcome").get<std::string>());
      if (!outcome) throw Error("unknown outcome in report");
      ir.outcome = *outcome;
      rep.item_results.push_back(std::move(ir));
    }
    return rep;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed report: ") + e.what());
  }
}

inline std::string format_accuracy(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

struct ReportFiles {
  std::filesystem::path report_json;
  std::filesystem::path summary_csv;
  std::filesystem::path seeds_csv;
  std::filesystem::path mean_csv;
};

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << content;
  out.flush();
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace detail

inline ReportFiles emit_report(const BenchmarkReport& rep, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error("cannot create output directory " + out_dir.string() + ": " + ec.message());

  ReportFiles files{out_dir / "report.json", out_dir / "summary.csv", out_dir / "seeds.csv",
                    out_dir / "mean.csv"};
  detail::write_text(files.report_json, to_json(rep).dump(2) + "\n");

  std::string summary = "category,n,correct,accuracy\n";
  for (const auto& c : rep.per_category)
    summary += c.category + "," + std::to_string(c.n) + "," + std::to_string(c.correct) + "," +
               format_accuracy(c.accuracy) + "\n";
  if (rep.n_items > 0)
    summary += "average," + std::to_string(rep.n_items) + "," + std::to_string(rep.n_correct) + "," +
               format_accuracy(rep.micro_average) + "\n";
  detail::write_text(files.summary_csv, summary);

  std::string seeds = "seed,n,correct,accuracy\n";
  for (const auto& s : rep.per_seed)
    seeds += std::to_string(s.seed) + "," + std::to_string(s.n) + "," + std::to_string(s.correct) +
             "," + format_accuracy(s.accuracy) + "\n";
  detail::write_text(files.seeds_csv, seeds);

  std::string mean = "runs,mean_accuracy\n";
  if (!rep.per_seed.empty())
    mean += std::to_string(rep.per_seed.size()) + "," + format_accuracy(rep.mean_across_seeds) + "\n";
  detail::write_text(files.mean_csv, mean);
  return files;
}

inline BenchmarkReport read_report(const std::filesystem::path& out_dir) {
  std::ifstream in(out_dir / "report.json");
  if (!in) throw Error("cannot open " + (out_dir / "report.json").string());
  const auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw Error("malformed report.json");
  return report_from_json(j);
}

}  // namespace ata
