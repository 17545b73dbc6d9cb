// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>

#include "audiotoolagent/bench.hpp"
#include "fixtures.hpp"
#include "test_util.hpp"

namespace {

using ata::MatchStage;
using ata::testing::TempDir;

const std::vector<std::string> kWeather = {"thunder", "rain", "wind"};

// Matcher ----------------------------------------------------------------

TEST(MatchAnswer, CascadeExamples) {
  auto r = ata::match_answer("(b) rain", kWeather, "rain");
  EXPECT_TRUE(r.correct);
  EXPECT_EQ(r.matched_choice, 1u);

  r = ata::match_answer("the sound is rain falling", kWeather, "rain");
  EXPECT_TRUE(r.correct);
  EXPECT_EQ(r.matched_choice, 1u);
  EXPECT_EQ(r.stage, MatchStage::substring);

  r = ata::match_answer("storm", kWeather, "rain");
  EXPECT_FALSE(r.correct);
  EXPECT_FALSE(r.matched_choice);
  EXPECT_EQ(r.stage, MatchStage::none);
}

TEST(MatchAnswer, StagesInOrder) {
  EXPECT_EQ(ata::match_answer("  RAIN. ", kWeather, "rain").stage, MatchStage::exact);
  EXPECT_EQ(ata::match_answer("(c)", kWeather, "rain").stage, MatchStage::label);
  EXPECT_EQ(ata::match_answer("(c)", kWeather, "rain").matched_choice, 2u);
  EXPECT_EQ(ata::match_answer("c) wind", kWeather, "rain").matched_choice, 2u);
  EXPECT_EQ(ata::match_answer("a. thunder", kWeather, "rain").matched_choice, 0u);
  EXPECT_EQ(ata::match_answer("B", kWeather, "rain").matched_choice, 1u);
  // A label beyond the choice list falls through to text matching.
  EXPECT_EQ(ata::match_answer("(e) wind", kWeather, "rain").matched_choice, 2u);
  // Label wins even when the text names another choice.
  EXPECT_EQ(ata::match_answer("(a) rain", kWeather, "rain").matched_choice, 0u);
}

TEST(MatchAnswer, AmbiguousSubstringFallsToOverlap) {
  const std::vector<std::string> choices = {"light rain", "heavy rain and thunder", "wind"};
  // Contains both "rain"-bearing choices? No: only checks whole choices.
  auto r = ata::match_answer("light rain with some heavy rain and thunder", choices, "light rain");
  EXPECT_EQ(r.stage, MatchStage::overlap);
  EXPECT_EQ(r.matched_choice, 1u);
  // Remainder contained in exactly one choice.
  r = ata::match_answer("heavy", choices, "light rain");
  EXPECT_EQ(r.stage, MatchStage::substring);
  EXPECT_EQ(r.matched_choice, 1u);
}

TEST(MatchAnswer, OverlapThresholdAndTies) {
  const std::vector<std::string> choices = {"a man speaking", "a woman speaking", "a dog"};
  auto r = ata::match_answer("man speaking loudly", choices, "a man speaking");
  EXPECT_EQ(r.stage, MatchStage::overlap);
  EXPECT_EQ(r.matched_choice, 0u);
  // "speaking" alone ties choices 0 and 1 (contained in both), overlap
  // ties go to the lowest index.
  r = ata::match_answer("speaking", choices, "a man speaking");
  EXPECT_EQ(r.stage, MatchStage::overlap);
  EXPECT_EQ(r.matched_choice, 0u);
  EXPECT_EQ(ata::match_answer("cat purring", choices, "a dog").stage, MatchStage::none);
}

TEST(MatchAnswer, EmptyAnswerNeverMatches) {
  EXPECT_FALSE(ata::match_answer("", kWeather, "rain").matched_choice);
  EXPECT_FALSE(ata::match_answer("  ...  ", kWeather, "rain").matched_choice);
}

TEST(MatchAnswer, GoldMatchesItselfForAwkwardChoices) {
  const std::vector<std::vector<std::string>> sets = {
      {"a", "b", "c"}, {"(a)", "(b)"}, {"b) cat", "a) dog"}, {"yes", "yes, loudly"},
      {"C", "A", "B"},  {"1", "2", "10"}, {"rain.", "rain!"}, {"The man", "the man speaking"}};
  for (const auto& choices : sets)
    for (std::size_t i = 0; i < choices.size(); ++i) {
      const auto r = ata::match_answer(choices[i], choices, choices[i]);
      EXPECT_TRUE(r.correct) << choices[i];
      EXPECT_EQ(r.matched_choice, i) << choices[i];
    }
}

TEST(MatchAnswerProperty, GoldAlwaysMatchesItself) {
  std::mt19937_64 rng(4);
  const char* const words[] = {"rain", "the", "a", "man", "woman", "(b)", "c.", "x", "1", "piano", "soft", "loud",
                               "speaking", "and", "b"};
  for (int t = 0; t < 2000; ++t) {
    std::vector<std::string> choices;
    const auto n = 2 + rng() % 5;
    while (choices.size() < n) {
      std::string c;
      const auto w = 1 + rng() % 4;
      for (std::size_t k = 0; k < w; ++k) c += (k ? " " : "") + std::string(words[rng() % std::size(words)]);
      // Distinct after normalization, as in real datasets.
      bool dup = false;
      for (const auto& o : choices) dup |= ata::normalize_answer(o) == ata::normalize_answer(c);
      if (!dup && !ata::normalize_answer(c).empty()) choices.push_back(c);
    }
    for (std::size_t i = 0; i < choices.size(); ++i) {
      const auto r = ata::match_answer(choices[i], choices, choices[i]);
      ASSERT_TRUE(r.correct) << choices[i];
      ASSERT_EQ(r.matched_choice, i);
    }
  }
}

TEST(MatchOpenEnded, UsesGoldAsOnlyChoice) {
  EXPECT_TRUE(ata::match_open_ended("It is a violin.", "violin").correct);
  EXPECT_FALSE(ata::match_open_ended("a", "violin").correct);
  EXPECT_FALSE(ata::match_open_ended("piano", "violin").correct);
}

// Dataset loading ----------------------------------------------------------

std::string record(const std::string& id, const std::string& audio, const std::vector<std::string>& cats) {
  return nlohmann::json{{"id", id},         {"audio", audio}, {"question", "q?"}, {"choices", {"x", "y"}},
                        {"answer", "y"},   {"categories", cats}}
             .dump() +
         "\n";
}

TEST(LoadDataset, ThousandItemsThreeCategories) {
  TempDir dir;
  std::string content;
  const char* const cats[] = {"sound", "music", "speech"};
  for (int i = 0; i < 1000; ++i) content += record("m" + std::to_string(i), "a.wav", {cats[i % 3]});
  dir.write("a.wav", "");
  const auto ds = ata::load_dataset(dir.write("mmau.jsonl", content));
  EXPECT_EQ(ds.items.size(), 1000u);
  EXPECT_EQ(ds.category_scheme, (std::vector<std::string>{"sound", "music", "speech"}));
  EXPECT_TRUE(ds.broken_audio.empty());
  EXPECT_EQ(ds.name, "mmau");
}

TEST(LoadDataset, FiveThousandItemsOneBrokenClip) {
  TempDir dir;
  std::string content;
  for (int i = 0; i < 5304; ++i) {
    const auto clip = "clips/" + std::to_string(i) + ".wav";
    if (i != 4242) dir.write(clip, "");
    content += record("p" + std::to_string(i), clip, {"tag" + std::to_string(i % 12)});
  }
  const auto ds = ata::load_dataset(dir.write("pro.jsonl", content));
  EXPECT_EQ(ds.items.size(), 5304u);
  EXPECT_EQ(ds.category_scheme.size(), 12u);
  EXPECT_EQ(ds.broken_audio, (std::set<std::string>{"p4242"}));
  EXPECT_FALSE(ds.warnings.empty());
}

TEST(LoadDataset, EmptyFileWarns) {
  TempDir dir;
  const auto ds = ata::load_dataset(dir.write("e.jsonl", "\n  \n"));
  EXPECT_TRUE(ds.items.empty());
  ASSERT_EQ(ds.warnings.size(), 1u);
}

TEST(LoadDataset, ErrorsCarryLineNumbers) {
  TempDir dir;
  struct Case {
    std::string content;
    std::size_t line;
  };
  const std::vector<Case> cases = {
      {record("a", "x.wav", {}) + "{not json\n", 2},
      {record("a", "x.wav", {}) + "\n" + record("a", "y.wav", {}), 3},
      {R"({"id":"a","question":"q"})" "\n", 1},
      {R"({"id":"a","audio":"x","question":"q","choices":["x","y"],"answer":"z"})" "\n", 1},
      {R"({"id":1.5,"audio":"x","question":"q"})" "\n", 1},
  };
  for (const auto& c : cases) {
    try {
      ata::load_dataset(dir.write("d.jsonl", c.content), {.check_audio = false});
      ADD_FAILURE() << c.content;
    } catch (const ata::DatasetError& e) {
      EXPECT_EQ(e.line(), c.line) << e.what();
    }
  }
}

TEST(LoadDataset, RelativeAudioResolvedAgainstRoot) {
  TempDir dir;
  dir.write("audio/x.wav", "");
  const auto p = dir.write("data/d.jsonl",
                           R"({"id":7,"audio":["x.wav","/abs/y.wav"],"question":"q","answer":"free text"})" "\n");
  ata::DatasetOptions opts;
  opts.audio_root = dir / "audio";
  const auto ds = ata::load_dataset(p, opts);
  ASSERT_EQ(ds.items.size(), 1u);
  EXPECT_EQ(ds.items[0].id, "7");
  EXPECT_EQ(ds.items[0].audio_refs[0], (dir / "audio/x.wav").string());
  EXPECT_EQ(ds.items[0].audio_refs[1], "/abs/y.wav");
  EXPECT_FALSE(ds.items[0].choices);
  EXPECT_EQ(ds.broken_audio.size(), 1u);
}

TEST(LoadDataset, CategorySchemeIsEnforcedWhenGiven) {
  TempDir dir;
  const auto p = dir.write("d.jsonl", record("a", "x", {"sound"}) + record("b", "x", {"noise"}));
  ata::DatasetOptions opts;
  opts.check_audio = false;
  opts.category_scheme = std::vector<std::string>{"sound", "music", "speech"};
  EXPECT_THROW(ata::load_dataset(p, opts), ata::DatasetError);
}

// Subsampling --------------------------------------------------------------

ata::Dataset synthetic(std::size_t n) {
  ata::Dataset ds;
  ds.name = "syn";
  for (std::size_t i = 0; i < n; ++i) {
    ata::AudioTask t;
    t.id = "i" + std::to_string(i);
    t.audio_refs = {"x"};
    t.question = "q";
    ds.items.push_back(t);
  }
  return ds;
}

std::vector<std::string> ids(const ata::Dataset& ds) {
  std::vector<std::string> out;
  for (const auto& t : ds.items) out.push_back(t.id);
  return out;
}

TEST(Subsample, TenPercentOfThousand) {
  const auto ds = synthetic(1000);
  const auto sub = ata::subsample(ds, 0.10, 0);
  EXPECT_EQ(sub.items.size(), 100u);
  EXPECT_EQ(ids(sub), ids(ata::subsample(ds, 0.10, 0)));
  EXPECT_NE(ids(sub), ids(ata::subsample(ds, 0.10, 1)));
  // Original order preserved.
  std::vector<std::size_t> pos;
  for (const auto& id : ids(sub)) pos.push_back(std::stoul(id.substr(1)));
  EXPECT_TRUE(std::is_sorted(pos.begin(), pos.end()));
}

TEST(Subsample, FullFractionIsIdentity) {
  const auto ds = synthetic(37);
  EXPECT_EQ(ids(ata::subsample(ds, 1.0, 99)), ids(ds));
}

TEST(Subsample, PinnedSelection) {
  // Guards against accidental changes to the sampling algorithm.
  const auto sub = ata::subsample(synthetic(1000), 0.01, 0);
  ata::StableRng rng(0);
  const auto expected = rng.sample_indices(1000, 10);
  std::vector<std::string> want;
  for (const auto i : expected) want.push_back("i" + std::to_string(i));
  EXPECT_EQ(ids(sub), want);
}

TEST(Subsample, RejectsBadFraction) {
  EXPECT_THROW(ata::subsample(synthetic(3), 0.0, 0), std::invalid_argument);
  EXPECT_THROW(ata::subsample(synthetic(3), 1.5, 0), std::invalid_argument);
}

// Benchmark runs -----------------------------------------------------------

struct Loaded {
  ata::ToolRegistry registry;
  ata::ScriptedBackend backend;
  ata::Dataset dataset;
};

Loaded load(const std::filesystem::path& config, const std::filesystem::path& dataset) {
  const auto agent = ata::load_agent_config(config);
  return {ata::load_registry(config), ata::load_scripted_backend(*agent.script),
          ata::load_dataset(dataset, {.check_audio = false})};
}

TEST(RunBenchmark, SeventeenOfTwenty) {
  TempDir dir;
  const auto b = ata::testing::write_twenty_item_bench(dir);
  ASSERT_EQ(b.scripted_correct, 17u);
  auto l = load(b.config, b.dataset);

  ata::BenchOptions opts;
  const auto rep = ata::run_benchmark(l.dataset, l.backend, l.registry, opts);
  EXPECT_EQ(rep.n_items, 20u);
  EXPECT_EQ(rep.n_correct, b.scripted_correct);
  EXPECT_EQ(rep.micro_average, 17.0 / 20.0);
  EXPECT_EQ(ata::format_accuracy(rep.micro_average), "0.8500");
  for (const auto& r : rep.item_results) {
    EXPECT_EQ(r.tool_call_count, 1);
    EXPECT_EQ(r.outcome, ata::Outcome::answered);
    if (r.correct) EXPECT_TRUE(r.matched_choice);
  }
}

TEST(RunBenchmark, ParallelismDoesNotChangeReport) {
  TempDir dir;
  const auto b = ata::testing::write_twenty_item_bench(dir);
  auto l = load(b.config, b.dataset);
  ata::BenchOptions serial;
  serial.seeds = {1, 2, 3, 4, 5};
  auto parallel = serial;
  parallel.parallelism = 8;
  const auto a = ata::run_benchmark(l.dataset, l.backend, l.registry, serial);
  const auto c = ata::run_benchmark(l.dataset, l.backend, l.registry, parallel);
  EXPECT_EQ(a, c);
  ASSERT_EQ(a.per_seed.size(), 5u);
  for (const auto& s : a.per_seed) EXPECT_EQ(s.accuracy, 0.85);
  EXPECT_EQ(a.mean_across_seeds, 0.85);
}

TEST(RunBenchmark, SeedDependentOutcomes) {
  TempDir dir;
  const auto b = ata::testing::write_seeded_bench(dir);
  auto l = load(b.config, b.dataset);
  ata::BenchOptions opts;
  opts.seeds = b.seeds;
  opts.parallelism = 3;
  const auto rep = ata::run_benchmark(l.dataset, l.backend, l.registry, opts);
  const std::vector<double> expected = {0.6, 0.7, 0.8, 0.9, 1.0};
  ASSERT_EQ(rep.per_seed.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(rep.per_seed[i].seed, b.seeds[i]);
    EXPECT_EQ(rep.per_seed[i].accuracy, expected[i]);
  }
  EXPECT_DOUBLE_EQ(rep.mean_across_seeds, 0.8);
  EXPECT_EQ(rep.micro_average, 40.0 / 50.0);
  // speech items (0-4) always right, sound items (5-9) right 15 of 25 times
  ASSERT_EQ(rep.per_category.size(), 2u);
  EXPECT_EQ(rep.per_category[0].category, "speech");
  EXPECT_EQ(rep.per_category[0].accuracy, 1.0);
  EXPECT_EQ(rep.per_category[1].accuracy, 15.0 / 25.0);
  EXPECT_DOUBLE_EQ(rep.macro_average, 0.8);
}

TEST(RunBenchmark, ConfigErrors) {
  ata::ScriptedBackend backend({});
  ata::BenchOptions opts;
  opts.seeds.clear();
  EXPECT_THROW(ata::run_benchmark(synthetic(2), backend, {}, opts), ata::ConfigError);
  opts.seeds = {1};
  opts.parallelism = 0;
  EXPECT_THROW(ata::run_benchmark(synthetic(2), backend, {}, opts), ata::ConfigError);
}

TEST(RunBenchmark, FailingItemsScoreIncorrect) {
  ata::ScriptedBackend backend({});  // every session is an agent_error
  auto ds = synthetic(4);
  for (auto& t : ds.items) t.gold = "x";
  const auto rep = ata::run_benchmark(ds, backend, {}, {});
  EXPECT_EQ(rep.n_items, 4u);
  EXPECT_EQ(rep.n_correct, 0u);
  for (const auto& r : rep.item_results) EXPECT_EQ(r.outcome, ata::Outcome::agent_error);
}

TEST(ScoreItem, JudgeIsUsedForOpenEndedItems) {
  struct Always final : ata::AnswerJudge {
    bool judge(const ata::AudioTask&, const std::string&) const override { return true; }
  };
  ata::AudioTask t;
  t.id = "o";
  t.audio_refs = {"x"};
  t.question = "q";
  t.gold = "violin";
  ata::SessionTrace tr;
  tr.outcome = ata::Outcome::answered;
  tr.answer = "a stringed instrument";
  EXPECT_FALSE(ata::score_item(t, tr, nullptr).correct);
  Always judge;
  const auto r = ata::score_item(t, tr, &judge);
  EXPECT_TRUE(r.correct);
  EXPECT_EQ(r.stage, MatchStage::judge);
}

// Reports ------------------------------------------------------------------

ata::ItemResult result(std::string id, std::int64_t seed, std::vector<std::string> cats, bool correct) {
  ata::ItemResult r;
  r.task_id = std::move(id);
  r.seed = seed;
  r.categories = std::move(cats);
  r.correct = correct;
  r.outcome = correct ? ata::Outcome::answered : ata::Outcome::budget_exhausted;
  if (correct) {
    r.extracted = "(a)";
    r.matched_choice = 0;
    r.stage = MatchStage::label;
  }
  return r;
}

TEST(BuildReport, MultiTagItemsCountInEveryCategory) {
  const auto rep = ata::build_report("d", {"sound", "music", "speech"},
                                     {result("a", 1, {"sound", "music"}, true), result("b", 1, {"speech"}, false)}, {1});
  std::size_t total = 0;
  for (const auto& c : rep.per_category) total += c.n;
  EXPECT_GE(total, rep.n_items);
  EXPECT_EQ(total, 3u);
  EXPECT_EQ(rep.micro_average, 0.5);
  EXPECT_DOUBLE_EQ(rep.macro_average, 2.0 / 3.0);
}

TEST(BuildReportProperty, AccuracyBoundsAndMonotonicity) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 200; ++t) {
    std::vector<ata::ItemResult> items;
    const auto n = rng() % 30;
    for (std::size_t i = 0; i < n; ++i)
      items.push_back(result("i" + std::to_string(i), static_cast<std::int64_t>(rng() % 3), {rng() % 2 ? "a" : "b"},
                             rng() % 2 == 0));
    const auto rep = ata::build_report("d", {}, items, {0, 1, 2});
    for (double v : {rep.micro_average, rep.macro_average, rep.mean_across_seeds}) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
    const double count = rep.micro_average * static_cast<double>(rep.n_items);
    ASSERT_NEAR(count, std::round(count), 1e-9);
    ASSERT_EQ(rep.micro_average, ata::ratio(rep.n_correct, rep.n_items));
    auto more = items;
    more.push_back(result("extra", 0, {"a"}, true));
    ASSERT_GE(ata::build_report("d", {}, more, {0, 1, 2}).micro_average, rep.micro_average);
    // Input order does not matter.
    std::shuffle(items.begin(), items.end(), rng);
    ASSERT_EQ(ata::build_report("d", {}, items, {0, 1, 2}), rep);
  }
}

TEST(EmitReport, TableLayoutAndRoundTrip) {
  TempDir dir;
  const auto rep = ata::build_report(
      "mmau", {"sound", "music", "speech"},
      {result("a", 1, {"sound"}, true), result("b", 1, {"music"}, false), result("c", 1, {"speech"}, true),
       result("a", 2, {"sound"}, true), result("b", 2, {"music"}, true), result("c", 2, {"speech"}, true)},
      {1, 2});
  const auto files = ata::emit_report(rep, dir / "out");
  EXPECT_EQ(ata::testing::read_file(files.summary_csv),
            "category,n,correct,accuracy\nsound,2,2,1.0000\nmusic,2,1,0.5000\nspeech,2,2,1.0000\naverage,6,5,0.8333\n");
  EXPECT_EQ(ata::testing::read_file(files.seeds_csv), "seed,n,correct,accuracy\n1,3,2,0.6667\n2,3,3,1.0000\n");
  EXPECT_EQ(ata::testing::read_file(files.mean_csv), "runs,mean_accuracy\n2,0.8333\n");
  EXPECT_EQ(ata::read_report(dir / "out"), rep);
}

TEST(EmitReport, EmptyReportWritesHeadersOnly) {
  TempDir dir;
  const auto files = ata::emit_report(ata::build_report("e", {}, {}, {}), dir.path());
  EXPECT_EQ(ata::testing::read_file(files.summary_csv), "category,n,correct,accuracy\n");
  EXPECT_EQ(ata::testing::read_file(files.seeds_csv), "seed,n,correct,accuracy\n");
  EXPECT_EQ(ata::testing::read_file(files.mean_csv), "runs,mean_accuracy\n");
  EXPECT_EQ(ata::read_report(dir.path()), ata::build_report("e", {}, {}, {}));
}

TEST(EmitReport, SeventeenOfTwentyAverageRow) {
  TempDir dir;
  const auto b = ata::testing::write_twenty_item_bench(dir);
  auto l = load(b.config, b.dataset);
  const auto rep = ata::run_benchmark(l.dataset, l.backend, l.registry, {});
  const auto files = ata::emit_report(rep, dir / "out");
  const auto summary = ata::testing::read_file(files.summary_csv);
  EXPECT_NE(summary.find("\naverage,20,17,0.8500\n"), std::string::npos) << summary;
  EXPECT_EQ(ata::read_report(dir / "out"), rep);
}

TEST(EmitReport, UnwritableDirectoryThrows) {
  TempDir dir;
  dir.write("file", "x");
  EXPECT_THROW(ata::emit_report(ata::build_report("e", {}, {}, {}), dir / "file" / "sub"), ata::Error);
}

}  // namespace
