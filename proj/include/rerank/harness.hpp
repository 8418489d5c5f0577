#pragma once

// Experiment runner: for each run, build a task, estimate relevance with
// every configured method, assemble an arrangement, ask the target, and
// record error and rank utility. Aggregates, proximities and plots come
// after.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "json.hpp"
#include "rerank/backend.hpp"
#include "rerank/backends.hpp"
#include "rerank/core.hpp"
#include "rerank/error.hpp"
#include "rerank/exposure.hpp"
#include "rerank/parallel.hpp"
#include "rerank/prompt.hpp"
#include "rerank/random.hpp"
#include "rerank/relevance.hpp"
#include "rerank/simulator.hpp"
#include "rerank/tasks.hpp"

namespace rerank {

struct TaskSpec {
  std::string family = "graph";  // graph | table
  std::size_t n_nodes = 20;
  double p_edge = 0.2;
  std::size_t max_edges = kDefaultMaxEdges;
  std::string csv;
  std::string predicate;
  std::size_t sample_rows = kDefaultSampleRows;
};

inline const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> m{"random", "warmup", "bipartite", "optimum"};
  return m;
}

struct ExperimentConfig {
  TaskSpec task;
  LlmSpec target;
  LlmSpec helper;
  std::vector<std::string> methods{"random", "warmup", "bipartite", "optimum"};
  std::size_t runs = 10;
  std::size_t m = 5;
  std::size_t sigma = 4;
  std::uint64_t seed = 0;
  // Profile used to assemble arrangements: a shape name or a profile file.
  std::string exposure_profile = "inverse_rank";
  int helper_retries = 3;
  // Runs in flight at once. Not part of the serialized config: results do
  // not depend on it.
  std::size_t parallelism = 1;
};

struct Cell {
  std::string method;
  std::size_t run = 0;
  std::size_t n_elements = 0;
  double true_answer = 0.0;
  double error = 0.0;
  double utility = 0.0;
  bool complete = false;
  std::string failure;
  std::vector<std::size_t> arrangement;
};

struct Aggregate {
  std::string method;
  std::size_t completed = 0;
  double mean_utility = 0.0;
  double mean_error = 0.0;
  double normalized_error = 0.0;
  std::optional<double> utility_proximity;
  std::optional<double> error_proximity;
  bool bounds_violated = false;
};

struct Report {
  ExperimentConfig config;
  std::vector<std::uint64_t> task_seeds;
  std::vector<Cell> cells;  // run-major, then config.methods order
  std::vector<Aggregate> aggregates;
  bool normalization_degenerate = false;
  bool profile_resampled = false;
  bool incomplete = false;
  // Assembly profile of run 0, for the exposure plot.
  std::vector<double> exposure_curve;
};

struct Normalized {
  std::vector<double> values;
  bool degenerate = false;
};

// Min-max within one group; a constant group maps to zeros and is flagged.
inline Normalized normalize_errors(std::span<const double> cells) {
  Normalized out;
  out.values.assign(cells.begin(), cells.end());
  if (out.values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(out.values.begin(), out.values.end());
  const double a = *lo, b = *hi;
  if (!(b > a)) {
    std::fill(out.values.begin(), out.values.end(), 0.0);
    out.degenerate = true;
    return out;
  }
  for (auto& v : out.values) v = (v - a) / (b - a);
  return out;
}

// ---- config <-> json ----------------------------------------------------

inline nlohmann::ordered_json config_to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["experiment"] = {{"runs", c.runs},
                     {"methods", c.methods},
                     {"m", c.m},
                     {"sigma", c.sigma},
                     {"seed", c.seed},
                     {"exposure_profile", c.exposure_profile},
                     {"helper_retries", c.helper_retries}};
  nlohmann::ordered_json t;
  t["family"] = c.task.family;
  if (c.task.family == "graph") {
    t["n_nodes"] = c.task.n_nodes;
    t["p_edge"] = c.task.p_edge;
    t["max_edges"] = c.task.max_edges;
  } else {
    t["csv"] = c.task.csv;
    t["predicate"] = c.task.predicate;
    t["sample_rows"] = c.task.sample_rows;
  }
  j["task"] = std::move(t);
  j["target"] = llm_spec_to_json(c.target);
  j["helper"] = llm_spec_to_json(c.helper);
  return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    const auto exp = j.value("experiment", nlohmann::json::object());
    c.runs = exp.value("runs", c.runs);
    if (exp.contains("methods")) c.methods = exp["methods"].get<std::vector<std::string>>();
    c.m = exp.value("m", c.m);
    c.sigma = exp.value("sigma", c.sigma);
    c.seed = exp.value("seed", c.seed);
    c.exposure_profile = exp.value("exposure_profile", c.exposure_profile);
    c.helper_retries = exp.value("helper_retries", c.helper_retries);
    c.parallelism = exp.value("parallelism", c.parallelism);

    const auto task = j.value("task", nlohmann::json::object());
    c.task.family = task.value("family", c.task.family);
    c.task.n_nodes = task.value("n_nodes", c.task.n_nodes);
    c.task.p_edge = task.value("p_edge", c.task.p_edge);
    c.task.max_edges = task.value("max_edges", c.task.max_edges);
    c.task.csv = task.value("csv", c.task.csv);
    c.task.predicate = task.value("predicate", c.task.predicate);
    c.task.sample_rows = task.value("sample_rows", c.task.sample_rows);

    const auto defaults = j.value("backend", nlohmann::json::object());
    if (j.contains("target")) c.target = llm_spec_from_json(j["target"], defaults);
    if (j.contains("helper")) c.helper = llm_spec_from_json(j["helper"], defaults);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::usage, "invalid_config", e.what());
  }
  if (c.runs == 0) throw Error(ErrorKind::usage, "invalid_config", "runs must be >= 1");
  if (c.methods.empty()) throw Error(ErrorKind::usage, "invalid_config", "methods is empty");
  for (const auto& m : c.methods) {
    if (std::find(known_methods().begin(), known_methods().end(), m) == known_methods().end()) {
      throw Error(ErrorKind::usage, "invalid_config", "unknown method '" + m + "'");
    }
  }
  if (c.task.family != "graph" && c.task.family != "table") {
    throw Error(ErrorKind::usage, "invalid_config", "task.family must be graph or table");
  }
  return c;
}

// ---- running ------------------------------------------------------------

inline Task build_run_task(const ExperimentConfig& cfg, std::size_t run) {
  const auto seed = derive_seed(cfg.seed, "task", run);
  if (cfg.task.family == "table") {
    return load_table_task(cfg.task.csv, parse_predicate(cfg.task.predicate), cfg.task.sample_rows,
                           seed)
        .task;
  }
  auto g = gen_graph_task(cfg.task.n_nodes, cfg.task.p_edge, 0, seed, cfg.task.max_edges);
  const auto deg = degrees(g);
  std::vector<long> candidates;
  for (std::size_t v = 0; v < deg.size(); ++v) {
    if (deg[v] > 0) candidates.push_back(static_cast<long>(v));
  }
  if (candidates.empty()) return g.task;
  Rng rng(derive_seed(cfg.seed, "target_node", run));
  const long target = candidates[rng.below(candidates.size())];
  return make_graph_task(g.n_nodes, std::move(g.edges), target).task;
}

struct AssemblyProfile {
  ExposureProfile profile;
  bool resampled = false;
};

inline AssemblyProfile assembly_profile(const std::string& name, std::size_t tokens) {
  if (sim::is_profile_shape(name)) return {make_profile(sim::profile_shape(name, tokens)), false};
  const auto prof = read_profile(name);
  if (prof.size() == tokens) return {prof, false};
  return {make_profile(resample(prof.values, tokens)), true};
}

// Utility of an order under the 1/i element-level profile with unit lengths,
// scored against ground-truth relevance.
inline double rank_utility(std::span<const std::size_t> order, const RelevanceVector& truth) {
  const std::size_t n = order.size();
  const auto prof = make_profile(sim::profile_shape("inverse_rank", n));
  const std::vector<std::size_t> ones(n, 1);
  return utility(order, truth, prof, ones);
}

namespace detail {

struct RunResult {
  std::vector<Cell> cells;
  bool resampled = false;
  std::vector<double> curve;
};

inline RunResult run_one(const ExperimentConfig& cfg, const BackendFactory& factory,
                         std::size_t run) {
  RunResult out;
  const Task task = build_run_task(cfg, run);
  const std::size_t n = task.size();
  RelevanceVector truth{task.truth, RelevanceMethod::ground_truth};
  const auto lens = task.token_lengths();
  const auto truth_answer = task.true_answer();

  const auto assembly = assembly_profile(cfg.exposure_profile, task.total_tokens());
  out.resampled = assembly.resampled;
  out.curve = assembly.profile.values;

  const auto shuffled = Rng(derive_seed(cfg.seed, "random", run)).permutation(n);
  const auto query_seed = derive_seed(cfg.seed, "query", run);

  std::unique_ptr<Backend> target;
  std::string target_failure;
  try {
    target = factory.target(cfg.target, task, derive_seed(cfg.seed, "target", run));
  } catch (const Error& e) {
    target_failure = e.what();
  }

  for (const auto& method : cfg.methods) {
    Cell cell;
    cell.method = method;
    cell.run = run;
    cell.n_elements = n;
    const auto ta = truth_answer.find(std::string(kScalarKey));
    cell.true_answer = ta == truth_answer.end() ? 0.0 : ta->second;
    try {
      if (!target) throw Error(ErrorKind::backend, "target_unavailable", target_failure);
      std::vector<std::size_t> arrangement;
      std::vector<std::size_t> order;
      if (method == "random") {
        arrangement = shuffled;
        order = shuffled;
      } else {
        RelevanceVector rel;
        if (method == "optimum") {
          rel = truth;
        } else {
          const auto helper_seed = derive_seed(cfg.seed, method, run);
          auto helper = factory.helper(cfg.helper, truth, helper_seed);
          RelevanceOptions opts;
          opts.m = std::min(cfg.m, n);
          opts.sigma = cfg.sigma;
          opts.seed = helper_seed;
          opts.retries = cfg.helper_retries;
          rel = method == "warmup" ? warmup_estimate(task, *helper, opts.m, opts)
                                   : bipartite_estimate(task, *helper, opts);
        }
        arrangement = optimal_ranking(rel, assembly.profile, lens).perm;
        order = relevance_order(rel);
      }
      cell.utility = rank_utility(order, truth);

      std::vector<Element> arranged;
      arranged.reserve(n);
      for (std::size_t id : arrangement) arranged.push_back(task.elements[id]);
      const auto [first, second] = prompt::render_task(arranged, task.query, task.answer_format);
      ChatRequest req;
      req.messages = {{"user", first}, {"user", second}};
      req.seed = query_seed;
      req.purpose = "answer";
      const auto reported = with_retries(cfg.helper_retries, [&](int attempt) {
        req.attempt = attempt;
        return prompt::parse_count_reply(target->complete(req).text);
      });
      cell.error = task.distance(reported, truth_answer);
      cell.arrangement = std::move(arrangement);
      cell.complete = true;
    } catch (const Error& e) {
      cell.failure = e.what();
      spdlog::warn("cell ({}, run {}) incomplete: {}", method, run, e.what());
    }
    out.cells.push_back(std::move(cell));
  }
  return out;
}

}  // namespace detail

inline Report run_experiment(const ExperimentConfig& cfg,
                             const BackendFactory& factory = simulated_factory()) {
  if (cfg.methods.empty()) throw Error(ErrorKind::usage, "invalid_config", "methods is empty");
  if (cfg.runs == 0) throw Error(ErrorKind::usage, "invalid_config", "runs must be >= 1");

  std::vector<detail::RunResult> results(cfg.runs);
  parallel_for(cfg.runs, cfg.parallelism,
               [&](std::size_t r) { results[r] = detail::run_one(cfg, factory, r); });

  Report rep;
  rep.config = cfg;
  for (std::size_t r = 0; r < cfg.runs; ++r) {
    rep.task_seeds.push_back(derive_seed(cfg.seed, "task", r));
    rep.profile_resampled = rep.profile_resampled || results[r].resampled;
    for (auto& c : results[r].cells) {
      rep.incomplete = rep.incomplete || !c.complete;
      rep.cells.push_back(std::move(c));
    }
  }
  rep.exposure_curve = results.front().curve;

  for (const auto& method : cfg.methods) {
    Aggregate a;
    a.method = method;
    double u = 0.0, e = 0.0;
    for (const auto& c : rep.cells) {
      if (c.method != method || !c.complete) continue;
      ++a.completed;
      u += c.utility;
      e += c.error;
    }
    if (a.completed > 0) {
      a.mean_utility = u / static_cast<double>(a.completed);
      a.mean_error = e / static_cast<double>(a.completed);
    }
    rep.aggregates.push_back(a);
  }

  std::vector<double> errors;
  for (const auto& a : rep.aggregates) errors.push_back(a.mean_error);
  const auto norm = normalize_errors(errors);
  rep.normalization_degenerate = norm.degenerate;
  for (std::size_t i = 0; i < rep.aggregates.size(); ++i) {
    rep.aggregates[i].normalized_error = norm.values[i];
  }

  const auto find = [&](const std::string& m) -> const Aggregate* {
    for (const auto& a : rep.aggregates) {
      if (a.method == m && a.completed > 0) return &a;
    }
    return nullptr;
  };
  const auto* lo = find("random");
  const auto* hi = find("optimum");
  if (lo && hi) {
    for (auto& a : rep.aggregates) {
      if (a.completed == 0) continue;
      if (lo->mean_utility < hi->mean_utility) {
        const auto p = proximity(a.mean_utility, lo->mean_utility, hi->mean_utility);
        a.utility_proximity = p.value;
        a.bounds_violated = a.bounds_violated || p.bounds_violated;
      }
      if (hi->mean_error < lo->mean_error) {
        const auto p = proximity(-a.mean_error, -lo->mean_error, -hi->mean_error);
        a.error_proximity = p.value;
        a.bounds_violated = a.bounds_violated || p.bounds_violated;
      }
    }
  }
  return rep;
}

// ---- output -------------------------------------------------------------

inline nlohmann::ordered_json report_to_json(const Report& rep, bool deterministic,
                                             const std::string& created_at = {}) {
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  if (deterministic) {
    j["created_at"] = nullptr;
  } else {
    j["created_at"] = created_at;
  }
  j["config"] = config_to_json(rep.config);
  j["seeds"] = {{"root", rep.config.seed}, {"tasks", rep.task_seeds}};
  j["flags"] = {{"incomplete_cells", rep.incomplete},
                {"normalization_degenerate", rep.normalization_degenerate},
                {"profile_resampled", rep.profile_resampled}};
  auto cells = nlohmann::ordered_json::array();
  for (const auto& c : rep.cells) {
    nlohmann::ordered_json cj;
    cj["method"] = c.method;
    cj["run"] = c.run;
    cj["n_elements"] = c.n_elements;
    cj["complete"] = c.complete;
    if (c.complete) {
      cj["true_answer"] = c.true_answer;
      cj["error"] = c.error;
      cj["utility"] = c.utility;
      cj["arrangement"] = c.arrangement;
    } else {
      cj["failure"] = c.failure;
    }
    cells.push_back(std::move(cj));
  }
  j["cells"] = std::move(cells);
  auto aggs = nlohmann::ordered_json::array();
  for (const auto& a : rep.aggregates) {
    nlohmann::ordered_json aj;
    aj["method"] = a.method;
    aj["completed_runs"] = a.completed;
    aj["mean_utility"] = a.mean_utility;
    aj["mean_error"] = a.mean_error;
    aj["normalized_error"] = a.normalized_error;
    if (a.utility_proximity) aj["utility_proximity"] = *a.utility_proximity;
    if (a.error_proximity) aj["error_proximity"] = *a.error_proximity;
    aj["bounds_violated"] = a.bounds_violated;
    aggs.push_back(std::move(aj));
  }
  j["aggregates"] = std::move(aggs);
  return j;
}

inline std::string tables_csv(const Report& rep) {
  std::string out = "method,mean_utility,utility_proximity,mean_error,normalized_error\n";
  for (const auto& a : rep.aggregates) {
    out += fmt::format("{},{:.6f},{},{:.6f},{:.6f}\n", a.method, a.mean_utility,
                       a.utility_proximity ? fmt::format("{:.6f}", *a.utility_proximity) : "",
                       a.mean_error, a.normalized_error);
  }
  return out;
}

namespace detail {

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

inline constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                           "#ff7f0e", "#8c564b"};

// Minimal SVG chart: axes, min/max tick labels, one colour per series.
inline std::string svg_chart(const std::string& title, const std::string& x_label,
                             const std::string& y_label, const std::vector<Series>& series,
                             bool lines) {
  const double w = 640, h = 400, left = 70, right = 150, top = 40, bottom = 50;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool first = true;
  for (const auto& s : series) {
    for (const auto& [x, y] : s.points) {
      if (first) {
        x0 = x1 = x;
        y0 = y1 = y;
        first = false;
      }
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  y0 = std::min(y0, 0.0);
  if (x1 <= x0) x1 = x0 + 1;
  if (y1 <= y0) y1 = y0 + 1;
  const auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * (w - left - right); };
  const auto py = [&](double y) { return h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom); };

  std::string svg = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" "
      "font-family=\"sans-serif\" font-size=\"12\">\n"
      "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      "<text x=\"{}\" y=\"22\" font-size=\"15\">{}</text>\n",
      w, h, left, title);
  svg += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n",
                     left, h - bottom, w - right);
  svg += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n",
                     left, top, h - bottom);
  svg += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
                     (left + w - right) / 2, h - 12, x_label);
  svg += fmt::format(
      "<text x=\"16\" y=\"{0}\" transform=\"rotate(-90 16 {0})\" text-anchor=\"middle\">{1}</text>\n",
      (top + h - bottom) / 2, y_label);
  svg += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{:.4g}</text>\n", left,
                     h - bottom + 16, x0);
  svg += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{:.4g}</text>\n", w - right,
                     h - bottom + 16, x1);
  svg += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.4g}</text>\n", left - 6,
                     h - bottom, y0);
  svg += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.4g}</text>\n", left - 6,
                     top + 4, y1);

  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto* colour = kPalette[k % std::size(kPalette)];
    const auto& s = series[k];
    if (lines) {
      std::string pts;
      for (const auto& [x, y] : s.points) pts += fmt::format("{:.2f},{:.2f} ", px(x), py(y));
      svg += fmt::format("<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>\n",
                         colour, pts);
    } else {
      for (const auto& [x, y] : s.points) {
        svg += fmt::format("<circle cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"3\" fill=\"{}\"/>\n", px(x),
                           py(y), colour);
      }
    }
    svg += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n",
                       w - right + 12, top + 18 * static_cast<double>(k), colour);
    svg += fmt::format("<text x=\"{}\" y=\"{}\">{}</text>\n", w - right + 28,
                       top + 9 + 18 * static_cast<double>(k), s.label);
  }
  svg += "</svg>\n";
  return svg;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "unwritable", path.string());
  out << text;
  if (!out) throw Error(ErrorKind::io, "unwritable", path.string());
}

}  // namespace detail

inline std::string errors_svg(const Report& rep) {
  std::vector<detail::Series> series;
  for (const auto& m : rep.config.methods) {
    detail::Series s{m, {}};
    for (const auto& c : rep.cells) {
      if (c.method == m && c.complete) {
        s.points.emplace_back(static_cast<double>(c.n_elements), c.error);
      }
    }
    series.push_back(std::move(s));
  }
  return detail::svg_chart("Error vs input size", "elements", "absolute error", series, false);
}

inline std::string exposure_svg(std::span<const double> values, const std::string& label) {
  detail::Series s{label, {}};
  for (std::size_t i = 0; i < values.size(); ++i) {
    s.points.emplace_back(static_cast<double>(i + 1), values[i]);
  }
  return detail::svg_chart("Exposure profile", "token position", "exposure", {s}, true);
}

struct EmittedFiles {
  std::filesystem::path report_json, tables_csv, errors_svg, exposure_svg;
};

inline EmittedFiles emit_report(const Report& rep, const std::filesystem::path& out_dir,
                                bool deterministic, const std::string& created_at = {}) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorKind::io, "unwritable", out_dir.string() + ": " + ec.message());
  EmittedFiles f{out_dir / "report.json", out_dir / "tables.csv", out_dir / "errors.svg",
                 out_dir / "exposure.svg"};
  detail::write_text(f.report_json, report_to_json(rep, deterministic, created_at).dump(2) + "\n");
  detail::write_text(f.tables_csv, tables_csv(rep));
  detail::write_text(f.errors_svg, errors_svg(rep));
  detail::write_text(f.exposure_svg, exposure_svg(rep.exposure_curve, rep.config.exposure_profile));
  return f;
}

}  // namespace rerank
