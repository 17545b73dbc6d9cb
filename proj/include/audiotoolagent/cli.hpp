// SPDX-License-Identifier: Apache-2.0
#pragma once

// Command implementations behind the audiotoolagent executable.
//
// Exit codes: 0 success, 1 the agent gave no answer (run only),
// 2 configuration or usage error, 3 runtime failure.

#include <atomic>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "audiotoolagent/adapters.hpp"
#include "audiotoolagent/agent.hpp"
#include "audiotoolagent/bench.hpp"
#include "audiotoolagent/convert.hpp"
#include "audiotoolagent/http.hpp"
#include "audiotoolagent/serve.hpp"
#include "audiotoolagent/shapley.hpp"

namespace ata::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitNoAnswer = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

struct RunArgs {
  std::filesystem::path config;
  std::vector<std::string> audio;
  std::string question;
  std::vector<std::string> choices;
  std::optional<int> budget;
  std::int64_t seed = 1;
  std::optional<std::filesystem::path> trace_out;
};

struct BenchArgs {
  std::filesystem::path config;
  std::filesystem::path dataset;
  std::optional<std::filesystem::path> audio_root;
  std::vector<std::int64_t> seeds = {1};
  double fraction = 1.0;
  std::uint64_t subsample_seed = 0;
  std::size_t parallelism = 1;
  std::optional<int> budget;
  std::filesystem::path out;
};

struct ShapleyArgs {
  std::optional<std::filesystem::path> config;
  std::optional<std::filesystem::path> dataset;
  std::optional<std::filesystem::path> audio_root;
  std::optional<std::filesystem::path> synthetic;
  std::vector<std::string> tools;
  std::size_t n_permutations = 100;
  std::size_t min_predecessor_size = 2;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> cache;
  std::filesystem::path out = "shapley.csv";
  std::size_t parallelism = 1;
  std::vector<std::int64_t> bench_seeds = {1};
  double fraction = 1.0;
  std::uint64_t subsample_seed = 0;
  bool exact = false;
};

struct ServeArgs {
  std::filesystem::path config;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::optional<std::filesystem::path> ui_dir;
  std::optional<std::filesystem::path> upload_dir;
  std::size_t max_retained = 64;
};

namespace detail {

inline bool uses_remote_tools(const ToolRegistry& registry) {
  for (const auto& s : registry.specs())
    if (s.kind != ToolKind::mock) return true;
  return false;
}

inline std::string one_line(std::string s, std::size_t max_len = 100) {
  for (auto& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  if (s.size() > max_len) s = s.substr(0, max_len - 3) + "...";
  return s;
}

inline void print_config_error(std::ostream& err, const std::exception& e) {
  err << "error: " << e.what();
  if (const auto* ce = dynamic_cast<const ConfigError*>(&e)) {
    if (ce->line()) err << " (line " << *ce->line() << ")";
  }
  err << "\n";
}

/// Checks that `dir` exists or can be created and accepts a file.
inline bool writable_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) return false;
  const auto probe = dir / ".write-probe";
  {
    std::ofstream out(probe);
    if (!out) return false;
  }
  std::filesystem::remove(probe, ec);
  return true;
}

struct Loaded {
  ToolRegistry registry;
  AgentConfig agent;
  std::shared_ptr<const AgentBackend> backend;
};

inline Loaded load_all(const std::filesystem::path& config) {
  auto transport = make_http_client();
  Loaded l{load_registry(config, transport), load_agent_config(config), nullptr};
  l.backend = make_backend(l.agent, transport);
  return l;
}

}  // namespace detail

inline int cmd_check(const std::filesystem::path& config, std::ostream& out, std::ostream& err) {
  try {
    const auto l = detail::load_all(config);
    out << "config ok: " << l.registry.size() << " tool(s), agent backend "
        << (l.agent.kind == BackendKind::scripted ? "scripted" : "chat_completions");
    if (!l.agent.model_id.empty()) out << " (" << l.agent.model_id << ")";
    out << ", budget " << l.agent.budget << "\n";
    for (const auto& s : l.registry.specs()) {
      out << "  " << s.name << "  [" << to_string(s.kind) << "]";
      if (!s.model_id.empty()) out << "  " << s.model_id;
      if (s.auth_env && !std::getenv(s.auth_env->c_str())) out << "  (warning: " << *s.auth_env << " unset)";
      out << "\n";
    }
    return kExitOk;
  } catch (const Error& e) {
    detail::print_config_error(err, e);
    return kExitConfig;
  }
}

inline int cmd_run(const RunArgs& args, std::ostream& out, std::ostream& err) {
  detail::Loaded l;
  try {
    l = detail::load_all(args.config);
  } catch (const Error& e) {
    detail::print_config_error(err, e);
    return kExitConfig;
  }

  AudioTask task;
  task.id = "cli";
  task.audio_refs = args.audio;
  task.question = args.question;
  if (!args.choices.empty()) task.choices = args.choices;
  try {
    validate(task);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  if (detail::uses_remote_tools(l.registry)) {
    for (const auto& a : task.audio_refs) {
      if (!std::filesystem::is_regular_file(a)) {
        err << "error: audio file not found: " << a << "\n";
        return kExitConfig;
      }
    }
  }

  SessionOptions opts;
  opts.budget = args.budget.value_or(l.agent.budget);
  opts.seed = args.seed;
  opts.sampling = l.agent.sampling;

  int index = 0;
  SessionHooks hooks;
  hooks.tool_result = [&](const ToolCallRequest& call, const ToolResult& r) {
    char latency[32];
    std::snprintf(latency, sizeof latency, "%.2fs", r.latency.count());
    out << "[" << ++index << "] " << call.tool_name << " (" << r.attempts
        << (r.attempts == 1 ? " attempt, " : " attempts, ") << latency << "): "
        << detail::one_line(r.agent_text()) << "\n";
  };
  const auto trace = run_session(task, *l.backend, l.registry, opts, hooks);

  if (args.trace_out) {
    std::ofstream t(*args.trace_out);
    if (!t) {
      err << "error: cannot write trace to " << args.trace_out->string() << "\n";
    } else {
      t << to_json(trace).dump(2) << "\n";
    }
  }

  switch (trace.outcome) {
    case Outcome::answered:
      out << "answer: " << *trace.answer << "\n";
      return kExitOk;
    case Outcome::budget_exhausted:
      out << "no answer: tool budget exhausted after " << trace.tool_call_count << " call(s)\n";
      return kExitNoAnswer;
    case Outcome::agent_error:
      out << "no answer: " << trace.error.value_or("agent error") << "\n";
      return kExitNoAnswer;
  }
  return kExitNoAnswer;
}

inline void print_report(const BenchmarkReport& rep, std::ostream& out) {
  out << "dataset " << rep.dataset << ": " << rep.n_items << " scored item(s) over " << rep.per_seed.size()
      << " seed(s)\n";
  for (const auto& c : rep.per_category)
    out << "  " << c.category << "  " << c.correct << "/" << c.n << "  " << format_accuracy(c.accuracy) << "\n";
  out << "  micro " << format_accuracy(rep.micro_average) << "  macro " << format_accuracy(rep.macro_average)
      << "\n";
  for (const auto& s : rep.per_seed)
    out << "  seed " << s.seed << "  " << s.correct << "/" << s.n << "  " << format_accuracy(s.accuracy) << "\n";
  out << "  mean across seeds " << format_accuracy(rep.mean_across_seeds) << "\n";
}

inline int cmd_bench(const BenchArgs& args, std::ostream& out, std::ostream& err) {
  if (!detail::writable_dir(args.out)) {
    err << "error: output directory is not writable: " << args.out.string() << "\n";
    return kExitConfig;
  }
  detail::Loaded l;
  Dataset ds;
  try {
    l = detail::load_all(args.config);
    DatasetOptions dopts;
    dopts.audio_root = args.audio_root;
    dopts.check_audio = detail::uses_remote_tools(l.registry);
    ds = subsample(load_dataset(args.dataset, dopts), args.fraction, args.subsample_seed);
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const Error& e) {
    detail::print_config_error(err, e);
    return kExitConfig;
  }
  for (const auto& w : ds.warnings) err << "warning: " << w << "\n";
  if (!ds.broken_audio.empty())
    err << "warning: " << ds.broken_audio.size() << " item(s) reference missing audio and will be scored incorrect\n";

  BenchOptions bopts;
  bopts.seeds = args.seeds;
  bopts.parallelism = args.parallelism;
  bopts.budget = args.budget.value_or(l.agent.budget);
  bopts.sampling = l.agent.sampling;
  try {
    const auto rep = run_benchmark(ds, *l.backend, l.registry, bopts);
    emit_report(rep, args.out);
    print_report(rep, out);
    out << "wrote " << (args.out / "report.json").string() << "\n";
  } catch (const ConfigError& e) {
    detail::print_config_error(err, e);
    return kExitConfig;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

inline void print_estimates(const std::vector<ShapleyEstimate>& est, std::ostream& out) {
  char buf[128];
  for (const auto& e : sorted_for_plot(est)) {
    std::snprintf(buf, sizeof buf, "  %-24s %+.6f  se %.6f  n %zu", e.tool_name.c_str(), e.value, e.std_error,
                  e.n_samples);
    out << buf << "\n";
  }
}

inline int cmd_shapley(const ShapleyArgs& args, std::ostream& out, std::ostream& err) {
  std::vector<std::string> tools;
  CoalitionValueFn fn;

  // Kept alive for the duration of the estimate.
  std::optional<detail::Loaded> loaded;
  Dataset ds;
  BenchOptions bopts;
  try {
    if (args.synthetic) {
      auto game = std::make_shared<SyntheticGame>(load_synthetic_game(*args.synthetic));
      tools = args.tools.empty() ? game->tools : args.tools;
      fn = [game](const Coalition& c) { return (*game)(c); };
    } else {
      if (!args.config || !args.dataset) {
        err << "error: --config and --dataset are required unless --synthetic is given\n";
        return kExitConfig;
      }
      loaded = detail::load_all(*args.config);
      DatasetOptions dopts;
      dopts.audio_root = args.audio_root;
      dopts.check_audio = detail::uses_remote_tools(loaded->registry);
      ds = subsample(load_dataset(*args.dataset, dopts), args.fraction, args.subsample_seed);
      tools = args.tools.empty() ? loaded->registry.names() : args.tools;
      for (const auto& t : tools)
        if (!loaded->registry.find(t)) throw ConfigError("unknown tool '" + t + "'", "tools");
      bopts.seeds = args.bench_seeds;
      bopts.parallelism = 1;
      bopts.budget = loaded->agent.budget;
      bopts.sampling = loaded->agent.sampling;
      fn = [&](const Coalition& c) {
        const auto rep = run_benchmark(ds, *loaded->backend, loaded->registry.restricted_to(c), bopts);
        err << "evaluated " << coalition_key(c) << " = " << format_accuracy(rep.micro_average) << "\n";
        return rep.micro_average;
      };
    }
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const Error& e) {
    detail::print_config_error(err, e);
    return kExitConfig;
  }

  EstimatorConfig cfg;
  cfg.n_permutations = args.n_permutations;
  cfg.min_predecessor_size = args.min_predecessor_size;
  cfg.seed = args.seed;
  cfg.cache_path = args.cache;
  cfg.parallelism = args.parallelism;

  std::optional<CoalitionCache> cache;
  try {
    cache.emplace(fn, args.cache);
    if (cache->loaded() > 0) err << "restored " << cache->loaded() << " coalition value(s) from cache\n";
    const auto est = estimate_shapley(tools, *cache, cfg);
    err << "evaluations: " << cache->evaluations() << " new, " << cache->loaded() << " from cache\n";
    if (est.empty()) {
      err << "error: no tool had a qualifying marginal sample; lower --min-predecessor-size or add tools\n";
      return kExitRuntime;
    }
    const auto files = emit_attribution_plot_data(est, args.out);
    out << "shapley estimates (" << args.n_permutations << " permutations, min predecessors "
        << args.min_predecessor_size << "):\n";
    print_estimates(est, out);
    if (args.exact) {
      const auto ex = exact_shapley(tools, [&](const Coalition& c) { return cache->value(c); },
                                    args.min_predecessor_size);
      out << "exact values:\n";
      print_estimates(ex, out);
      double worst = 0.0;
      for (const auto& e : est)
        for (const auto& x : ex)
          if (x.tool_name == e.tool_name) worst = std::max(worst, std::abs(x.value - e.value));
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.6f", worst);
      out << "max |estimate - exact| = " << buf << "\n";
    }
    out << "wrote " << files.csv.string() << " and " << files.svg.string() << "\n";
  } catch (const ShapleyError& e) {
    err << "error: " << e.what() << "\n";
    if (cache) err << "evaluations: " << cache->evaluations() << " attempted before failure\n";
    return kExitRuntime;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

inline int cmd_convert(const std::string& format, const std::filesystem::path& in, const std::filesystem::path& out,
                       std::ostream& outs, std::ostream& err) {
  const auto f = parse_source_format(format);
  if (!f) {
    err << "error: unknown format '" << format << "' (expected mmau, mmar or mmau-pro)\n";
    return kExitConfig;
  }
  try {
    const auto result = convert_dataset(in, out, *f);
    constexpr std::size_t kShown = 20;
    for (std::size_t i = 0; i < result.warnings.size() && i < kShown; ++i)
      err << "warning: " << result.warnings[i] << "\n";
    if (result.warnings.size() > kShown) err << "warning: " << result.warnings.size() - kShown << " more\n";
    outs << "converted " << result.records.size() << " record(s), skipped " << result.warnings.size() << "; wrote "
         << out.string() << "\n";
  } catch (const DatasetError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

inline std::atomic<bool> g_interrupted{false};

inline int cmd_serve(const ServeArgs& args, std::ostream& out, std::ostream& err) {
  detail::Loaded l;
  try {
    l = detail::load_all(args.config);
  } catch (const Error& e) {
    detail::print_config_error(err, e);
    return kExitConfig;
  }
  ServeOptions sopts;
  sopts.ui_dir = args.ui_dir;
  sopts.upload_dir = args.upload_dir;
  sopts.max_retained = args.max_retained;
  sopts.session.budget = l.agent.budget;
  sopts.session.sampling = l.agent.sampling;
  if (args.ui_dir && !std::filesystem::is_directory(*args.ui_dir)) {
    err << "error: UI directory not found: " << args.ui_dir->string() << "\n";
    return kExitConfig;
  }

  SessionServer server(l.registry, l.backend, sopts);
  const int port = server.bind(args.host, args.port);
  if (port < 0) {
    err << "error: cannot bind " << args.host << ":" << args.port << "\n";
    return kExitRuntime;
  }
  out << "listening on http://" << args.host << ":" << port << "\n" << std::flush;

  std::signal(SIGINT, [](int) { g_interrupted = true; });
  std::signal(SIGTERM, [](int) { g_interrupted = true; });
  std::jthread watcher([&](std::stop_token st) {
    while (!st.stop_requested() && !g_interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    server.stop();
  });
  server.listen();
  watcher.request_stop();
  return kExitOk;
}

/// Parses argv and dispatches to a command.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Tool-orchestrating agent for audio question answering"};
  app.require_subcommand(1);

  std::filesystem::path check_config;
  auto* check = app.add_subcommand("check", "Validate a configuration file");
  check->add_option("-c,--config", check_config, "Configuration file")->required();

  RunArgs run_args;
  auto* run = app.add_subcommand("run", "Answer one question");
  run->add_option("-c,--config", run_args.config, "Configuration file")->required();
  run->add_option("-a,--audio", run_args.audio, "Audio file (repeatable)");
  run->add_option("-q,--question", run_args.question, "Question text")->required();
  run->add_option("--choice", run_args.choices, "Answer choice (repeatable, in order)");
  run->add_option("--budget", run_args.budget, "Tool-call budget");
  run->add_option("--seed", run_args.seed, "Sampling seed");
  run->add_option("--trace", run_args.trace_out, "Write the session trace as JSON");

  BenchArgs bench_args;
  auto* bench = app.add_subcommand("bench", "Run a benchmark dataset");
  bench->add_option("-c,--config", bench_args.config, "Configuration file")->required();
  bench->add_option("-d,--dataset", bench_args.dataset, "Dataset JSONL file")->required();
  bench->add_option("--audio-root", bench_args.audio_root, "Directory for relative audio paths");
  bench->add_option("--seeds", bench_args.seeds, "Comma-separated seeds")->delimiter(',');
  bench->add_option("--fraction", bench_args.fraction, "Fraction of items to keep")->check(CLI::Range(0.0, 1.0));
  bench->add_option("--subsample-seed", bench_args.subsample_seed, "Seed for subsampling");
  bench->add_option("-j,--parallelism", bench_args.parallelism, "Concurrent sessions")->check(CLI::PositiveNumber);
  bench->add_option("--budget", bench_args.budget, "Tool-call budget");
  bench->add_option("-o,--out", bench_args.out, "Output directory")->required();

  ShapleyArgs sh_args;
  auto* shapley = app.add_subcommand("shapley", "Estimate per-tool Shapley values");
  shapley->add_option("-c,--config", sh_args.config, "Configuration file");
  shapley->add_option("-d,--dataset", sh_args.dataset, "Dataset JSONL file");
  shapley->add_option("--audio-root", sh_args.audio_root, "Directory for relative audio paths");
  shapley->add_option("--synthetic", sh_args.synthetic, "Synthetic game file instead of a benchmark");
  shapley->add_option("--tools", sh_args.tools, "Tools to attribute (default: all)")->delimiter(',');
  shapley->add_option("-n,--n-permutations", sh_args.n_permutations, "Sampled permutations")
      ->check(CLI::PositiveNumber);
  shapley->add_option("--min-predecessor-size", sh_args.min_predecessor_size, "Smallest predecessor set used");
  shapley->add_option("--seed", sh_args.seed, "Permutation seed");
  shapley->add_option("--cache", sh_args.cache, "Persistent coalition value cache");
  shapley->add_option("-o,--out", sh_args.out, "Output CSV (an .svg is written alongside)");
  shapley->add_option("-j,--parallelism", sh_args.parallelism, "Concurrent coalition evaluations")
      ->check(CLI::PositiveNumber);
  shapley->add_option("--bench-seeds", sh_args.bench_seeds, "Seeds per coalition benchmark")->delimiter(',');
  shapley->add_option("--fraction", sh_args.fraction, "Fraction of dataset items")->check(CLI::Range(0.0, 1.0));
  shapley->add_option("--subsample-seed", sh_args.subsample_seed, "Seed for subsampling");
  shapley->add_flag("--exact", sh_args.exact, "Also enumerate all permutations and compare");

  std::string conv_format;
  std::filesystem::path conv_in, conv_out;
  auto* convert = app.add_subcommand("convert", "Convert a public benchmark release to the dataset format");
  convert->add_option("-f,--format", conv_format, "mmau, mmar or mmau-pro")->required();
  convert->add_option("-i,--input", conv_in, "JSON array or JSONL file")->required();
  convert->add_option("-o,--out", conv_out, "Output JSONL file")->required();

  ServeArgs serve_args;
  auto* serve = app.add_subcommand("serve", "Start the streaming session server");
  serve->add_option("-c,--config", serve_args.config, "Configuration file")->required();
  serve->add_option("--host", serve_args.host, "Bind address");
  serve->add_option("-p,--port", serve_args.port, "Port (0 picks a free port)");
  serve->add_option("--ui", serve_args.ui_dir, "Directory of static UI files");
  serve->add_option("--upload-dir", serve_args.upload_dir, "Where uploaded audio is stored");
  serve->add_option("--max-retained", serve_args.max_retained, "Finished sessions kept for replay");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  if (*check) return cmd_check(check_config, out, err);
  if (*run) return cmd_run(run_args, out, err);
  if (*bench) return cmd_bench(bench_args, out, err);
  if (*shapley) return cmd_shapley(sh_args, out, err);
  if (*convert) return cmd_convert(conv_format, conv_in, conv_out, out, err);
  if (*serve) return cmd_serve(serve_args, out, err);
  return kExitConfig;
}

}  // namespace ata::cli
