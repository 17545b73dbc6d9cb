// SPDX-License-Identifier: Apache-2.0
#pragma once

// Tool attribution by Monte Carlo permutation sampling of Shapley values.
//
// Stage 1 samples permutations of the tool set and records, for every
// position, the predecessor set S and the tool i at that position. Only
// pairs with |S| >= min_predecessor_size qualify; with the default of 2 both
// evaluated coalitions S and S+{i} contain at least two tools. Stage 2
// evaluates each distinct coalition once through a memo cache and averages
// the marginal contributions v(S+{i}) - v(S) per tool.

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "audiotoolagent/errors.hpp"
#include "audiotoolagent/rng.hpp"
#include "audiotoolagent/yaml_util.hpp"

namespace ata {

/// Sorted, duplicate-free set of tool names.
using Coalition = std::vector<std::string>;
using CoalitionValueFn = std::function<double(const Coalition&)>;

inline Coalition make_coalition(std::vector<std::string> tools) {
  std::sort(tools.begin(), tools.end());
  tools.erase(std::unique(tools.begin(), tools.end()), tools.end());
  return tools;
}

/// Canonical cache key: "{a,b,c}" over the sorted names; "{}" when empty.
inline std::string coalition_key(const Coalition& c) {
  std::string out = "{";
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (i) out += ",";
    out += c[i];
  }
  return out + "}";
}

inline std::optional<Coalition> parse_coalition_key(const std::string& key) {
  if (key.size() < 2 || key.front() != '{' || key.back() != '}') return std::nullopt;
  Coalition out;
  std::stringstream ss(key.substr(1, key.size() - 2));
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return make_coalition(std::move(out));
}

class ShapleyError : public Error {
 public:
  explicit ShapleyError(const std::string& message, std::string coalition = {})
      : Error(message), coalition_(std::move(coalition)) {}
  /// Key of the coalition whose evaluation failed, if any.
  const std::string& coalition() const noexcept { return coalition_; }

 private:
  std::string coalition_;
};

/// Memoizes a coalition value function. Each distinct coalition is
/// evaluated at most once; concurrent requests for the same coalition wait
/// on the first evaluation.
///
/// With a cache file, values survive restarts. The file is append-only, one
/// record per line:  <key> TAB <value %.17g> TAB <unix seconds>
/// Unparseable lines (e.g. a torn final write) are ignored on load.
class CoalitionCache {
 public:
  explicit CoalitionCache(CoalitionValueFn fn,
                          std::optional<std::filesystem::path> cache_path = std::nullopt)
      : fn_(std::move(fn)), cache_path_(std::move(cache_path)) {
    if (cache_path_) load();
  }

  CoalitionCache(const CoalitionCache&) = delete;
  CoalitionCache& operator=(const CoalitionCache&) = delete;

  double value(const Coalition& coalition) {
    const auto key = coalition_key(coalition);
    std::shared_future<double> fut;
    std::promise<double> promise;
    bool owner = false;
    {
      std::lock_guard lock(mu_);
      if (const auto it = memo_.find(key); it != memo_.end()) {
        fut = it->second;
      } else {
        fut = promise.get_future().share();
        memo_.emplace(key, fut);
        owner = true;
      }
    }
    if (owner) {
      try {
        evaluations_.fetch_add(1);
        const double v = fn_(coalition);
        if (!std::isfinite(v) || v < 0.0 || v > 1.0)
          throw ShapleyError("value " + std::to_string(v) + " outside [0, 1]", key);
        persist(key, v);
        promise.set_value(v);
      } catch (const ShapleyError&) {
        promise.set_exception(std::current_exception());
      } catch (const std::exception& e) {
        promise.set_exception(std::make_exception_ptr(
            ShapleyError("evaluation of coalition " + key + " failed: " + e.what(), key)));
      }
    }
    return fut.get();
  }

  /// Calls made to the wrapped value function by this object.
  std::size_t evaluations() const { return evaluations_.load(); }
  /// Records restored from the cache file at construction.
  std::size_t loaded() const { return loaded_; }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return memo_.size();
  }

 private:
  void load() {
    std::ifstream in(*cache_path_);
    if (!in) return;
    std::string line;
    while (std::getline(in, line)) {
      const auto t1 = line.find('\t');
      if (t1 == std::string::npos) continue;
      const auto t2 = line.find('\t', t1 + 1);
      const auto key = line.substr(0, t1);
      const auto value_str = line.substr(t1 + 1, t2 == std::string::npos ? std::string::npos : t2 - t1 - 1);
      if (!parse_coalition_key(key)) continue;
      char* end = nullptr;
      const double v = std::strtod(value_str.c_str(), &end);
      if (end == value_str.c_str() || *end != '\0' || t2 == std::string::npos) continue;
      std::promise<double> p;
      p.set_value(v);
      if (memo_.insert_or_assign(key, p.get_future().share()).second) ++loaded_;
    }
  }

  void persist(const std::string& key, double v) {
    if (!cache_path_) return;
    std::lock_guard lock(file_mu_);
    std::ofstream out(*cache_path_, std::ios::app);
    if (!out) throw ShapleyError("cannot append to cache file " + cache_path_->string(), key);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    const auto now = std::chrono::duration_cast<std::chrono::seconds>(
                         std::chrono::system_clock::now().time_since_epoch())
                         .count();
    out << key << '\t' << buf << '\t' << now << '\n';
    out.flush();
  }

  CoalitionValueFn fn_;
  std::optional<std::filesystem::path> cache_path_;
  mutable std::mutex mu_;
  std::mutex file_mu_;
  std::map<std::string, std::shared_future<double>> memo_;
  std::atomic<std::size_t> evaluations_{0};
  std::size_t loaded_ = 0;
};

struct ShapleyEstimate {
  std::string tool_name;
  double value = 0.0;
  double std_error = 0.0;
  std::size_t n_samples = 0;
};

struct EstimatorConfig {
  std::size_t n_permutations = 100;
  std::size_t min_predecessor_size = 2;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> cache_path;
  /// Concurrent coalition evaluations.
  std::size_t parallelism = 1;
};

namespace detail {

using Mask = std::uint64_t;

inline void check_tools(const std::vector<std::string>& tools, std::size_t max_tools) {
  if (tools.size() < 2) throw ShapleyError("Shapley estimation needs at least two tools");
  if (tools.size() > max_tools)
    throw ShapleyError("too many tools (" + std::to_string(tools.size()) + " > " +
                       std::to_string(max_tools) + ")");
  const std::set<std::string> unique(tools.begin(), tools.end());
  if (unique.size() != tools.size()) throw ShapleyError("tool names must be unique");
}

inline Coalition coalition_of(const std::vector<std::string>& sorted_tools, Mask mask) {
  Coalition c;
  for (std::size_t i = 0; i < sorted_tools.size(); ++i)
    if (mask & (Mask{1} << i)) c.push_back(sorted_tools[i]);
  return c;
}

/// Evaluates all masks through the cache with bounded parallelism.
inline std::map<Mask, double> evaluate_all(const std::vector<std::string>& sorted_tools,
                                           const std::vector<Mask>& masks, CoalitionCache& cache,
                                           std::size_t parallelism) {
  std::vector<double> values(masks.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex err_mu;
  const auto worker = [&] {
    for (auto j = next.fetch_add(1); j < masks.size(); j = next.fetch_add(1)) {
      try {
        values[j] = cache.value(coalition_of(sorted_tools, masks[j]));
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!first_error) first_error = std::current_exception();
        next.store(masks.size());
      }
    }
  };
  const auto n_threads = std::min(std::max<std::size_t>(parallelism, 1), std::max<std::size_t>(masks.size(), 1));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  }
  if (first_error) std::rethrow_exception(first_error);

  std::map<Mask, double> out;
  for (std::size_t j = 0; j < masks.size(); ++j) out.emplace(masks[j], values[j]);
  return out;
}

}  // namespace detail

/// Monte Carlo estimate; see the file comment for the procedure. Tools are
/// processed in sorted order, so the result does not depend on input order.
/// Tools that never received a qualifying sample are left out.
inline std::vector<ShapleyEstimate> estimate_shapley(const std::vector<std::string>& tools,
                                                     CoalitionCache& cache,
                                                     const EstimatorConfig& cfg) {
  detail::check_tools(tools, 64);
  if (cfg.n_permutations < 1) throw ShapleyError("n_permutations must be >= 1");

  auto sorted = tools;
  std::sort(sorted.begin(), sorted.end());
  const auto n = sorted.size();

  // Stage 1: permutations and qualifying (tool, predecessor) pairs.
  struct Sample {
    std::size_t tool;
    detail::Mask pred;
  };
  std::vector<Sample> samples;
  std::set<detail::Mask> needed;
  StableRng rng(cfg.seed);
  std::vector<std::size_t> perm(n);
  for (std::size_t p = 0; p < cfg.n_permutations; ++p) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(perm));
    detail::Mask pred = 0;
    for (std::size_t k = 0; k < n; ++k) {
      const auto i = perm[k];
      if (k >= cfg.min_predecessor_size) {
        samples.push_back({i, pred});
        needed.insert(pred);
        needed.insert(pred | (detail::Mask{1} << i));
      }
      pred |= detail::Mask{1} << i;
    }
  }

  // Stage 2: evaluate each distinct coalition once, then average.
  const auto values = detail::evaluate_all(sorted, {needed.begin(), needed.end()}, cache,
                                           cfg.parallelism);
  std::vector<std::vector<double>> deltas(n);
  for (const auto& s : samples)
    deltas[s.tool].push_back(values.at(s.pred | (detail::Mask{1} << s.tool)) - values.at(s.pred));

  std::vector<ShapleyEstimate> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& d = deltas[i];
    if (d.empty()) continue;
    const auto m = static_cast<double>(d.size());
    // Shifted by the first sample so constant samples give their value exactly.
    double shifted = 0.0;
    for (const double x : d) shifted += x - d.front();
    const double mean = d.front() + shifted / m;
    double ss = 0.0;
    for (const double x : d) ss += (x - mean) * (x - mean);
    const double sd = d.size() > 1 ? std::sqrt(ss / (m - 1.0)) : 0.0;
    out.push_back({sorted[i], mean, sd / std::sqrt(m), d.size()});
  }
  return out;
}

inline std::vector<ShapleyEstimate> estimate_shapley(const std::vector<std::string>& tools,
                                                     CoalitionValueFn v,
                                                     const EstimatorConfig& cfg) {
  CoalitionCache cache(std::move(v), cfg.cache_path);
  return estimate_shapley(tools, cache, cfg);
}

inline constexpr std::size_t kMaxExactTools = 10;

/// Exact values by enumerating all n! permutations with the same
/// qualification rule as estimate_shapley. std_error is the population
/// standard deviation of the qualifying marginals over sqrt(count).
///
/// Marginals are summed in sorted order, so tools with identical marginal
/// multisets (symmetric players) get bit-identical values.
inline std::vector<ShapleyEstimate> exact_shapley(const std::vector<std::string>& tools,
                                                  CoalitionValueFn v,
                                                  std::size_t min_predecessor_size) {
  detail::check_tools(tools, kMaxExactTools);
  auto sorted = tools;
  std::sort(sorted.begin(), sorted.end());
  const auto n = sorted.size();
  const std::size_t n_masks = std::size_t{1} << n;

  // occurrences[i * n_masks + S]: permutations in which tool i follows exactly S.
  std::vector<std::uint64_t> occurrences(n * n_masks, 0);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  do {
    detail::Mask pred = 0;
    for (std::size_t k = 0; k < n; ++k) {
      if (k >= min_predecessor_size) ++occurrences[perm[k] * n_masks + pred];
      pred |= detail::Mask{1} << perm[k];
    }
  } while (std::next_permutation(perm.begin(), perm.end()));

  CoalitionCache cache(std::move(v));
  std::vector<detail::Mask> needed;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t s = 0; s < n_masks; ++s)
      if (occurrences[i * n_masks + s]) {
        needed.push_back(s);
        needed.push_back(s | (detail::Mask{1} << i));
      }
  std::sort(needed.begin(), needed.end());
  needed.erase(std::unique(needed.begin(), needed.end()), needed.end());
  const auto values = detail::evaluate_all(sorted, needed, cache, 1);

  std::vector<ShapleyEstimate> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::pair<double, std::uint64_t>> weighted;
    std::uint64_t total = 0;
    for (std::size_t s = 0; s < n_masks; ++s) {
      const auto count = occurrences[i * n_masks + s];
      if (!count) continue;
      weighted.emplace_back(values.at(s | (detail::Mask{1} << i)) - values.at(s), count);
      total += count;
    }
    if (total == 0) continue;
    std::sort(weighted.begin(), weighted.end());
    const auto m = static_cast<double>(total);
    const double base = weighted.front().first;
    double shifted = 0.0;
    for (const auto& [d, c] : weighted) shifted += (d - base) * static_cast<double>(c);
    const double mean = base + shifted / m;
    double ss = 0.0;
    for (const auto& [d, c] : weighted) ss += (d - mean) * (d - mean) * static_cast<double>(c);
    out.push_back({sorted[i], mean, std::sqrt(ss / m) / std::sqrt(m), static_cast<std::size_t>(total)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Plot data
//
// CSV (tool,value,std_error,n_samples) sorted ascending by value, ties by
// tool name, plus an SVG bar chart with error bars next to it.

inline std::vector<ShapleyEstimate> sorted_for_plot(std::vector<ShapleyEstimate> estimates) {
  std::stable_sort(estimates.begin(), estimates.end(),
                   [](const ShapleyEstimate& a, const ShapleyEstimate& b) {
                     if (a.value != b.value) return a.value < b.value;
                     return a.tool_name < b.tool_name;
                   });
  return estimates;
}

inline std::string render_attribution_svg(const std::vector<ShapleyEstimate>& sorted) {
  constexpr double kLabelWidth = 180, kPlotWidth = 420, kRowHeight = 24, kTop = 20, kBottom = 40;
  double lo = 0.0, hi = 0.0;
  for (const auto& e : sorted) {
    lo = std::min(lo, e.value - e.std_error);
    hi = std::max(hi, e.value + e.std_error);
  }
  const double pad = (hi - lo) * 0.05 + 1e-9;
  lo -= pad;
  hi += pad;
  const auto x_of = [&](double v) { return kLabelWidth + (v - lo) / (hi - lo) * kPlotWidth; };
  const double height = kTop + kBottom + kRowHeight * static_cast<double>(sorted.size());
  const double width = kLabelWidth + kPlotWidth + 20;

  const auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };
  const auto escape = [](const std::string& s) {
    std::string out;
    for (const char c : s) {
      switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
      }
    }
    return out;
  };

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(width) +
                    "\" height=\"" + num(height) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  const double zero = x_of(0.0);
  svg += "  <line x1=\"" + num(zero) + "\" y1=\"" + num(kTop) + "\" x2=\"" + num(zero) + "\" y2=\"" +
         num(height - kBottom) + "\" stroke=\"#888\"/>\n";
  for (std::size_t r = 0; r < sorted.size(); ++r) {
    const auto& e = sorted[r];
    const double y = kTop + kRowHeight * static_cast<double>(r);
    const double x0 = std::min(zero, x_of(e.value));
    const double w = std::abs(x_of(e.value) - zero);
    const double cy = y + kRowHeight / 2;
    svg += "  <text x=\"" + num(kLabelWidth - 6) + "\" y=\"" + num(cy + 4) +
           "\" text-anchor=\"end\">" + escape(e.tool_name) + "</text>\n";
    svg += "  <rect x=\"" + num(x0) + "\" y=\"" + num(y + 4) + "\" width=\"" + num(w) +
           "\" height=\"" + num(kRowHeight - 8) + "\" fill=\"#4169e1\"/>\n";
    svg += "  <line x1=\"" + num(x_of(e.value - e.std_error)) + "\" y1=\"" + num(cy) + "\" x2=\"" +
           num(x_of(e.value + e.std_error)) + "\" y2=\"" + num(cy) + "\" stroke=\"black\"/>\n";
  }
  svg += "  <text x=\"" + num(kLabelWidth + kPlotWidth / 2) + "\" y=\"" + num(height - 10) +
         "\" text-anchor=\"middle\">Shapley value</text>\n";
  svg += "</svg>\n";
  return svg;
}

struct AttributionFiles {
  std::filesystem::path csv;
  std::filesystem::path svg;
};

inline AttributionFiles emit_attribution_plot_data(const std::vector<ShapleyEstimate>& estimates,
                                                   const std::filesystem::path& out_path) {
  if (estimates.empty()) throw Error("no estimates to write");
  const auto sorted = sorted_for_plot(estimates);
  if (out_path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(out_path.parent_path(), ec);
  }
  AttributionFiles files{out_path, std::filesystem::path(out_path).replace_extension(".svg")};

  std::ofstream csv(files.csv, std::ios::trunc);
  if (!csv) throw Error("cannot write " + files.csv.string());
  csv << "tool,value,std_error,n_samples\n";
  char buf[96];
  for (const auto& e : sorted) {
    std::snprintf(buf, sizeof buf, "%.6f,%.6f,%zu", e.value, e.std_error, e.n_samples);
    csv << e.tool_name << ',' << buf << '\n';
  }
  csv.flush();
  if (!csv) throw Error("write failed for " + files.csv.string());

  std::ofstream svg(files.svg, std::ios::trunc);
  if (!svg) throw Error("cannot write " + files.svg.string());
  svg << render_attribution_svg(sorted);
  if (!svg) throw Error("write failed for " + files.svg.string());
  return files;
}

// ---------------------------------------------------------------------------
// Synthetic games (declared value tables, for testing the estimator)
//
// tools: [a, b, c]
// default: 0.0            # optional; value for coalitions not listed
// values:
//   - coalition: [a, b]
//     value: 0.6

struct SyntheticGame {
  std::vector<std::string> tools;
  std::map<std::string, double> values;
  std::optional<double> fallback;

  double operator()(const Coalition& c) const {
    const auto key = coalition_key(c);
    if (const auto it = values.find(key); it != values.end()) return it->second;
    if (fallback) return *fallback;
    throw ShapleyError("synthetic game has no value for coalition " + key, key);
  }
};

inline SyntheticGame load_synthetic_game(const std::filesystem::path& path) {
  const auto root = yaml::load_file(path);
  yaml::expect_keys(root, {"tools", "default", "values"}, "game");
  SyntheticGame game;
  game.tools = yaml::string_list(root["tools"], "tools");
  game.fallback = yaml::get_opt<double>(root, "default", "number");
  const auto values = root["values"];
  if (!values || !values.IsSequence())
    throw ConfigError("game needs a 'values' list", "values", yaml::line_of(root));
  for (const auto& node : values) {
    yaml::expect_keys(node, {"coalition", "value"}, "value entry");
    auto c = make_coalition(yaml::string_list(node["coalition"], "coalition"));
    for (const auto& t : c)
      if (std::find(game.tools.begin(), game.tools.end(), t) == game.tools.end())
        throw ConfigError("coalition names unknown tool '" + t + "'", "coalition",
                          yaml::line_of(node));
    game.values[coalition_key(c)] = yaml::get<double>(node, "value", "number");
  }
  return game;
}

}  // namespace ata
