#pragma once

// Command-line front end. run_cli() is the whole program minus main(), so
// tests can drive it in-process.
//
// Exit codes: 0 ok, 1 usage or I/O, 2 backend, 3 numeric.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <fmt/chrono.h>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "rerank/backends.hpp"
#include "rerank/config.hpp"
#include "rerank/exposure.hpp"
#include "rerank/harness.hpp"
#include "rerank/http_backend.hpp"
#include "rerank/relevance.hpp"
#include "rerank/tasks.hpp"

namespace rerank::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitBackend = 2;
inline constexpr int kExitNumeric = 3;

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage:
    case ErrorKind::io: return kExitUsage;
    case ErrorKind::backend: return kExitBackend;
    case ErrorKind::numeric: return kExitNumeric;
  }
  return kExitUsage;
}

// Fixed stamp written under --deterministic.
inline constexpr const char* kEpochStamp = "1970-01-01T00:00:00Z";

inline std::string timestamp(bool deterministic) {
  if (deterministic) return kEpochStamp;
  return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(std::time(nullptr)));
}

inline HttpConfig http_config(const LlmSpec& spec) {
  HttpConfig c;
  c.base_url = spec.base_url;
  c.model_id = spec.model_id;
  c.timeout_ms = spec.timeout_ms;
  c.retry_budget = spec.retry_budget;
  c.parallelism = spec.parallelism;
  return c;
}

// Simulated backends plus the HTTP client.
inline BackendFactory full_factory() {
  BackendFactory f;
  f.target = [](const LlmSpec& spec, const Task& task,
                std::uint64_t seed) -> std::unique_ptr<Backend> {
    if (spec.kind == BackendKind::http) return std::make_unique<HttpBackend>(http_config(spec));
    return make_simulated_target(spec, task, seed);
  };
  f.helper = [](const LlmSpec& spec, const RelevanceVector& truth,
                std::uint64_t seed) -> std::unique_ptr<Backend> {
    if (spec.kind == BackendKind::http) return std::make_unique<HttpBackend>(http_config(spec));
    return make_simulated_helper(spec, truth, seed);
  };
  return f;
}

namespace detail {

inline nlohmann::json backend_defaults(const std::string& config_path) {
  if (config_path.empty()) return nlohmann::json::object();
  const auto cfg = config::load(config_path);
  return cfg.value("backend", nlohmann::json::object());
}

// Flag wins; then the [backend] table of --config; then the fallback.
inline LlmSpec resolve_spec(const std::string& flag, const std::string& config_path,
                            const std::string& fallback) {
  if (!flag.empty()) return parse_llm_spec(flag);
  const auto defaults = backend_defaults(config_path);
  if (!defaults.empty()) return llm_spec_from_json(nlohmann::json::object(), defaults);
  return parse_llm_spec(fallback);
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "unwritable", path);
  out << text;
  if (!out) throw Error(ErrorKind::io, "unwritable", path);
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string csv_line(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    out += csv_field(fields[i]);
  }
  return out + "\n";
}

}  // namespace detail

struct DiscoverArgs {
  std::string llm;
  std::size_t n = 50;
  std::size_t alphabet = 5;
  std::size_t window = 1;
  std::size_t p0 = 0;
  std::size_t p_max = 0;
  double target_var = 1e-7;
  std::uint64_t seed = 0;
  std::string out = "profile.json";
  std::string config;
  std::string variance = "unbiased";
  bool deterministic = false;
  std::size_t parallelism = 0;
};

inline int cmd_exposure_discover(const DiscoverArgs& a, std::ostream& out) {
  auto spec = detail::resolve_spec(a.llm, a.config, "simulated:inverse_rank");
  if (!spec.miss) spec.miss = sim::MissModel::inverse_error;
  if (a.parallelism > 0) spec.parallelism = a.parallelism;
  if (a.variance != "unbiased" && a.variance != "literal") {
    throw Error(ErrorKind::usage, "invalid_argument", "--variance must be unbiased or literal");
  }

  const auto probe = make_probe(a.alphabet, a.n, a.seed, a.window);
  const auto task = to_task(probe);
  auto llm = full_factory().target(spec, task, derive_seed(a.seed, "target"));

  DiscoveryOptions opts;
  opts.p0 = a.p0 ? a.p0 : 2 * a.n;
  opts.p_max = a.p_max ? a.p_max : 8 * opts.p0;
  opts.target_var = a.target_var;
  opts.seed = a.seed;
  opts.variance = a.variance == "literal" ? VarianceMode::literal : VarianceMode::unbiased;
  auto d = estimate_with_confidence(*llm, task, opts);
  auto prof = expand_windows(d.profile, a.window);
  prof.llm_id = llm->model_id();
  write_profile(a.out, prof, timestamp(a.deterministic));

  out << fmt::format("wrote {} ({} positions, {} samples, max variance {:.3g}{})\n", a.out,
                     prof.size(), d.sample_counts.back(), d.max_variances.back(),
                     prof.target_not_met ? ", target not met" : "");
  return kExitOk;
}

struct RerankArgs {
  std::string elements;
  std::string format = "auto";
  std::string query;
  std::optional<long> target;
  std::string predicate;
  std::string profile = "inverse_rank";
  std::string helper;
  std::string method = "bipartite";
  std::size_t m = 5;
  std::size_t sigma = 4;
  std::uint64_t seed = 0;
  std::string out;
  std::string scores_out;
  std::string config;
  std::size_t parallelism = 0;
};

inline int cmd_rerank(const RerankArgs& a, std::ostream& out) {
  if (a.method != "bipartite" && a.method != "warmup") {
    throw Error(ErrorKind::usage, "invalid_argument", "--method must be bipartite or warmup");
  }
  std::string format = a.format;
  if (format == "auto") {
    const auto ext = std::filesystem::path(a.elements).extension().string();
    format = ext == ".csv" ? "csv" : "edges";
  }

  Task task;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::optional<GraphTask> graph;
  if (format == "edges") {
    graph = read_edge_list(a.elements, a.target);
    task = graph->task;
  } else if (format == "csv") {
    const auto table = read_csv(a.elements);
    if (a.predicate.empty()) {
      throw Error(ErrorKind::usage, "missing_argument", "--predicate is required for CSV input");
    }
    auto tt = make_table_task(table, parse_predicate(a.predicate), table.rows.size(), a.seed);
    header = tt.header;
    rows = tt.rows;
    task = std::move(tt.task);
  } else {
    throw Error(ErrorKind::usage, "invalid_argument", "--format must be auto, edges or csv");
  }
  if (!a.query.empty()) task.query = a.query;

  auto spec = detail::resolve_spec(a.helper, a.config, "simulated:perfect");
  if (a.parallelism > 0) spec.parallelism = a.parallelism;
  RelevanceVector truth{task.truth, RelevanceMethod::ground_truth};
  auto helper = full_factory().helper(spec, truth, derive_seed(a.seed, "helper"));
  if (helper->kind() == BackendKind::http) assign_token_lengths(task, *helper);

  RelevanceOptions opts;
  opts.m = std::min(a.m, task.size());
  opts.sigma = a.sigma;
  opts.seed = a.seed;
  std::optional<EvaluationGraph> eval_graph;
  RelevanceVector rel;
  if (a.method == "warmup") {
    rel = warmup_estimate(task, *helper, opts.m, opts);
  } else {
    auto res = bipartite_estimate_detailed(task, *helper, opts);
    rel = std::move(res.relevance);
    eval_graph = std::move(res.graph);
  }

  const auto assembly = assembly_profile(a.profile, task.total_tokens());
  if (assembly.resampled) {
    spdlog::info("profile resampled to {} token positions", task.total_tokens());
  }
  const auto ranking = optimal_ranking(rel, assembly.profile, task.token_lengths());

  std::string text;
  if (graph) {
    text = fmt::format("# target: {}\n", graph->target_node);
    for (std::size_t id : ranking.perm) text += task.elements[id].text + "\n";
  } else {
    text = detail::csv_line(header);
    for (std::size_t id : ranking.perm) text += detail::csv_line(rows[id]);
  }
  const std::string out_path = a.out.empty() ? "reranked" + std::filesystem::path(a.elements)
                                                                 .extension()
                                                                 .string()
                                             : a.out;
  detail::write_file(out_path, text);

  nlohmann::ordered_json side;
  side["method"] = a.method;
  side["helper"] = helper->model_id();
  side["profile"] = a.profile;
  side["seed"] = a.seed;
  side["query"] = task.query;
  side["order"] = ranking.perm;
  side["utility"] = ranking.utility;
  side["scores"] = rel.scores;
  if (eval_graph) {
    side["converged"] = eval_graph->converged;
    side["iterations"] = eval_graph->iterations;
    side["s_bar"] = eval_graph->s_bar;
    side["beta"] = eval_graph->beta;
  }
  const std::string scores_path = a.scores_out.empty() ? out_path + ".scores.json" : a.scores_out;
  detail::write_file(scores_path, side.dump(2) + "\n");

  out << fmt::format("wrote {} and {}\n", out_path, scores_path);
  return kExitOk;
}

struct EvalArgs {
  std::string config;
  std::string out = "report";
  bool deterministic = false;
  std::size_t parallelism = 0;
  std::optional<std::size_t> runs;
  std::optional<std::uint64_t> seed;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  auto cfg = config_from_json(config::load(a.config));
  if (a.parallelism > 0) cfg.parallelism = a.parallelism;
  if (a.runs) cfg.runs = *a.runs;
  if (a.seed) cfg.seed = *a.seed;
  if (cfg.task.family == "table" && !cfg.task.csv.empty()) {
    const auto p = std::filesystem::path(cfg.task.csv);
    if (p.is_relative() && !std::filesystem::exists(p)) {
      cfg.task.csv = (std::filesystem::path(a.config).parent_path() / p).string();
    }
  }
  const auto rep = run_experiment(cfg, full_factory());
  const auto files = emit_report(rep, a.out, a.deterministic, timestamp(false));
  out << tables_csv(rep);
  out << fmt::format("wrote {}\n", files.report_json.string());
  return kExitOk;
}

struct GenTaskArgs {
  std::size_t nodes = 20;
  double p_edge = 0.2;
  long target = 0;
  std::uint64_t seed = 0;
  std::size_t max_edges = kDefaultMaxEdges;
  std::string out;
};

inline int cmd_gen_task(const GenTaskArgs& a, std::ostream& out) {
  const auto g = gen_graph_task(a.nodes, a.p_edge, a.target, a.seed, a.max_edges);
  const auto text = edge_list_text(g);
  if (a.out.empty()) {
    out << text;
  } else {
    detail::write_file(a.out, text);
    out << fmt::format("wrote {} ({} edges, degree of {} is {})\n", a.out, g.edges.size(),
                       a.target, g.task.true_answer().at(std::string(kScalarKey)));
  }
  return kExitOk;
}

inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Rerank the elements of order-insensitive LLM tasks by relevance and exposure."};
  app.name("rerank");
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Log debug output");

  DiscoverArgs d;
  auto* discover = app.add_subcommand("exposure-discover", "Estimate a target model's exposure profile");
  discover->add_option("--llm", d.llm, "Target spec, e.g. simulated:hump or http:<model>");
  discover->add_option("--n", d.n, "Probe slots")->capture_default_str();
  discover->add_option("--alphabet", d.alphabet, "Distinct probe tokens")->capture_default_str();
  discover->add_option("--window", d.window, "Copies of a token per slot")->capture_default_str();
  discover->add_option("--p0", d.p0, "Initial samples (default 2n)");
  discover->add_option("--p-max", d.p_max, "Sample budget (default 8*p0)");
  discover->add_option("--target-var", d.target_var, "Stop once every variance is below this")
      ->capture_default_str();
  discover->add_option("--seed", d.seed, "Root seed")->capture_default_str();
  discover->add_option("--out", d.out, "Profile JSON path")->capture_default_str();
  discover->add_option("--config", d.config, "Config file with a [backend] table");
  discover->add_option("--variance", d.variance, "unbiased or literal")->capture_default_str();
  discover->add_flag("--deterministic", d.deterministic, "Fixed created_at stamp");
  discover->add_option("--parallelism", d.parallelism, "Concurrent model calls");

  RerankArgs r;
  long target_node = -1;
  auto* rerank = app.add_subcommand("rerank", "Rerank an edge list or CSV file");
  rerank->add_option("--elements", r.elements, "Edge list or CSV file")->required();
  rerank->add_option("--format", r.format, "auto, edges or csv")->capture_default_str();
  rerank->add_option("--query", r.query, "Query text (default derived from the task)");
  auto* target_opt = rerank->add_option("--target", target_node, "Target node for edge lists");
  rerank->add_option("--predicate", r.predicate, "column,op,literal for CSV input");
  rerank->add_option("--profile", r.profile, "Profile JSON or a shape name")->capture_default_str();
  rerank->add_option("--helper", r.helper, "Helper spec (default simulated:perfect)");
  rerank->add_option("--method", r.method, "bipartite or warmup")->capture_default_str();
  rerank->add_option("--m", r.m, "Chunks per shuffle")->capture_default_str();
  rerank->add_option("--sigma", r.sigma, "Shuffles")->capture_default_str();
  rerank->add_option("--seed", r.seed, "Root seed")->capture_default_str();
  rerank->add_option("--out", r.out, "Output path (default reranked.<ext>)");
  rerank->add_option("--scores-out", r.scores_out, "Scores sidecar (default <out>.scores.json)");
  rerank->add_option("--config", r.config, "Config file with a [backend] table");
  rerank->add_option("--parallelism", r.parallelism, "Concurrent helper calls");

  EvalArgs e;
  std::size_t runs = 0;
  std::uint64_t eval_seed = 0;
  auto* eval = app.add_subcommand("eval", "Run an experiment config and write a report");
  eval->add_option("--config", e.config, "Experiment config (TOML or JSON)")->required();
  eval->add_option("--out", e.out, "Report directory")->capture_default_str();
  eval->add_flag("--deterministic", e.deterministic, "Omit timestamps from report.json");
  eval->add_option("--parallelism", e.parallelism, "Runs in flight");
  auto* runs_opt = eval->add_option("--runs", runs, "Override experiment.runs");
  auto* seed_opt = eval->add_option("--seed", eval_seed, "Override experiment.seed");

  GenTaskArgs g;
  auto* gen = app.add_subcommand("gen-task", "Generate a random graph-degree task");
  gen->add_option("--nodes", g.nodes, "Node count")->capture_default_str();
  gen->add_option("--p-edge", g.p_edge, "Edge probability")->capture_default_str();
  gen->add_option("--target", g.target, "Target node")->capture_default_str();
  gen->add_option("--seed", g.seed, "Seed")->capture_default_str();
  gen->add_option("--max-edges", g.max_edges, "Edge cap")->capture_default_str();
  gen->add_option("--out", g.out, "Edge list path (default stdout)");

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::warn);

  try {
    if (*discover) return cmd_exposure_discover(d, out);
    if (*rerank) {
      if (*target_opt) r.target = target_node;
      return cmd_rerank(r, out);
    }
    if (*eval) {
      if (*runs_opt) e.runs = runs;
      if (*seed_opt) e.seed = eval_seed;
      return cmd_eval(e, out);
    }
    if (*gen) return cmd_gen_task(g, out);
  } catch (const Error& ex) {
    err << "error: " << ex.what() << '\n';
    return exit_code(ex.kind());
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace rerank::cli
