#pragma once

// Relevance estimation with a helper model.
//
// warmup_estimate: one pass over m chunks, the helper names the relevant ids,
// scores are binary.
//
// bipartite_estimate: sigma independent shuffles, each cut into m chunks and
// scored 1..5 by the helper. Every (shuffle, chunk) evaluation j is assumed
// to scale its scores by an unknown constant beta_j. Elements and
// evaluations form a bipartite graph; solve_bias alternates
//   S_i    <- (1/sigma) sum_j w_ij / beta_j
//   beta_j <- (1/deg_j) sum_i w_ij / S_i
// which is alternate row/column scaling of W towards row sums sigma and
// column sums deg_j.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "rerank/backend.hpp"
#include "rerank/core.hpp"
#include "rerank/error.hpp"
#include "rerank/parallel.hpp"
#include "rerank/prompt.hpp"
#include "rerank/random.hpp"

namespace rerank {

struct Partitioning {
  std::vector<std::vector<std::size_t>> chunks;
  std::size_t m = 0;
  std::optional<std::uint64_t> shuffle_seed;
};

// Chunk k holds positions [k*c, (k+1)*c) of the (optionally shuffled) id list,
// c = ceil(n/m). When m does not divide n nicely the trailing chunks can be
// short or even empty; they are kept so chunk k always has index k.
inline Partitioning partition(std::size_t n, std::size_t m,
                              std::optional<std::uint64_t> seed = std::nullopt) {
  if (m == 0) throw Error(ErrorKind::usage, "invalid_partitions", "m must be >= 1");
  if (m > n) {
    throw Error(ErrorKind::usage, "too_many_partitions",
                "m=" + std::to_string(m) + " exceeds n=" + std::to_string(n));
  }
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  if (seed) Rng(*seed).shuffle(ids);
  const std::size_t c = (n + m - 1) / m;
  Partitioning p;
  p.m = m;
  p.shuffle_seed = seed;
  p.chunks.resize(m);
  for (std::size_t k = 0; k < m; ++k) {
    const std::size_t lo = std::min(n, k * c);
    const std::size_t hi = std::min(n, lo + c);
    p.chunks[k].assign(ids.begin() + static_cast<std::ptrdiff_t>(lo),
                       ids.begin() + static_cast<std::ptrdiff_t>(hi));
  }
  return p;
}

struct Edge {
  std::size_t u = 0;  // element id
  std::size_t v = 0;  // evaluation id
  double w = 0.0;
};

struct EvaluationGraph {
  std::size_t n = 0;
  std::size_t sigma = 0;
  std::size_t m = 0;
  std::vector<Edge> edges;
  std::vector<double> s_bar;
  std::vector<double> beta;
  bool converged = false;
  std::size_t iterations = 0;

  std::size_t evaluations() const noexcept { return sigma * m; }

  std::vector<std::size_t> element_degrees() const {
    std::vector<std::size_t> d(n, 0);
    for (const auto& e : edges) ++d[e.u];
    return d;
  }

  std::vector<std::size_t> evaluation_degrees() const {
    std::vector<std::size_t> d(evaluations(), 0);
    for (const auto& e : edges) ++d[e.v];
    return d;
  }
};

struct SolveOptions {
  double tol = 1e-8;
  std::size_t max_iter = 10'000;
};

inline constexpr double kSolverGuard = 1e-12;

// Called after every half step with the current iterates; `beta_step` is
// false right after the S update and true right after the beta update.
using SolveObserver =
    std::function<void(std::span<const double> s_bar, std::span<const double> beta, bool beta_step)>;

inline EvaluationGraph solve_bias(EvaluationGraph graph, SolveOptions opts = {},
                                  const SolveObserver& observer = {}) {
  for (const auto& e : graph.edges) {
    if (!(e.w > 0.0) || !std::isfinite(e.w)) {
      throw Error(ErrorKind::numeric, "invalid_weight",
                  "edge (" + std::to_string(e.u) + "," + std::to_string(e.v) + ")");
    }
    if (e.u >= graph.n || e.v >= graph.evaluations()) {
      throw Error(ErrorKind::usage, "invalid_edge");
    }
  }
  const auto deg_u = graph.element_degrees();
  const auto deg_v = graph.evaluation_degrees();
  const double sigma = static_cast<double>(graph.sigma);

  std::vector<double> s(graph.n, 0.0);
  std::vector<double> beta(graph.evaluations(), 1.0);
  std::vector<double> s_acc(graph.n), b_acc(graph.evaluations());
  bool have_s = false;

  const auto rel_change = [](double now, double before) {
    return std::abs(now - before) / std::max(std::abs(before), kSolverGuard);
  };

  graph.converged = false;
  graph.iterations = 0;
  while (graph.iterations < opts.max_iter) {
    ++graph.iterations;
    double change = have_s ? 0.0 : std::numeric_limits<double>::infinity();

    std::fill(s_acc.begin(), s_acc.end(), 0.0);
    for (const auto& e : graph.edges) s_acc[e.u] += e.w / std::max(beta[e.v], kSolverGuard);
    for (std::size_t i = 0; i < graph.n; ++i) {
      const double next = deg_u[i] == 0 ? 0.0 : s_acc[i] / sigma;
      if (have_s) change = std::max(change, rel_change(next, s[i]));
      s[i] = next;
    }
    have_s = true;
    if (observer) observer(s, beta, false);

    std::fill(b_acc.begin(), b_acc.end(), 0.0);
    for (const auto& e : graph.edges) b_acc[e.v] += e.w / std::max(s[e.u], kSolverGuard);
    for (std::size_t j = 0; j < beta.size(); ++j) {
      if (deg_v[j] == 0) continue;
      const double next = b_acc[j] / static_cast<double>(deg_v[j]);
      change = std::max(change, rel_change(next, beta[j]));
      beta[j] = next;
    }
    if (observer) observer(s, beta, true);

    if (change < opts.tol) {
      graph.converged = true;
      break;
    }
  }
  if (!graph.converged) {
    spdlog::warn("bias solver stopped after {} iterations without converging", graph.iterations);
  }
  graph.s_bar = std::move(s);
  graph.beta = std::move(beta);
  return graph;
}

// Min-max to [0,1]; a constant vector maps to 0.5 everywhere.
inline std::vector<double> min_max_normalize(std::span<const double> xs) {
  std::vector<double> out(xs.begin(), xs.end());
  if (out.empty()) return out;
  const auto [lo, hi] = std::minmax_element(out.begin(), out.end());
  const double a = *lo, b = *hi;
  for (auto& x : out) x = b > a ? (x - a) / (b - a) : 0.5;
  return out;
}

// Per-element mean of raw scores, ignoring evaluation bias.
inline std::vector<double> mean_raw_scores(const EvaluationGraph& graph) {
  std::vector<double> sum(graph.n, 0.0);
  const auto deg = graph.element_degrees();
  for (const auto& e : graph.edges) sum[e.u] += e.w;
  for (std::size_t i = 0; i < graph.n; ++i) sum[i] = deg[i] ? sum[i] / deg[i] : 0.0;
  return sum;
}

struct RelevanceOptions {
  std::size_t m = 5;
  std::size_t sigma = 4;
  std::uint64_t seed = 0;
  SolveOptions solve;
  int retries = 3;
  double temperature = 0.0;
  prompt::Templates templates;
};

// Seed shared by every attempt of evaluation j. Simulated helpers key their
// per-evaluation bias on it.
inline std::uint64_t evaluation_seed(std::uint64_t seed, std::size_t j) {
  return derive_seed(seed, "evaluation", j);
}

inline std::uint64_t warmup_seed(std::uint64_t seed, std::size_t k) {
  return derive_seed(seed, "warmup", k);
}

namespace detail {

inline void check_task_ids(const Task& task) {
  if (task.size() == 0) throw Error(ErrorKind::usage, "empty_task");
  for (std::size_t i = 0; i < task.size(); ++i) {
    if (task.elements[i].id != i) {
      throw Error(ErrorKind::usage, "invalid_ids", "element ids must be 0..n-1 in order");
    }
  }
}

inline std::vector<Element> chunk_elements(const Task& task, std::span<const std::size_t> ids) {
  std::vector<Element> out;
  out.reserve(ids.size());
  for (std::size_t id : ids) out.push_back(task.elements[id]);
  return out;
}

inline ChatRequest chunk_request(std::string text, std::uint64_t seed, int attempt,
                                 double temperature, std::string purpose) {
  ChatRequest req;
  req.messages.push_back({"user", std::move(text)});
  req.seed = seed;
  req.attempt = attempt;
  req.temperature = temperature;
  req.purpose = std::move(purpose);
  return req;
}

}  // namespace detail

inline RelevanceVector warmup_estimate(const Task& task, Backend& helper, std::size_t m,
                                       const RelevanceOptions& opts = {}) {
  detail::check_task_ids(task);
  const auto parts = partition(task.size(), m);
  std::vector<std::set<std::size_t>> picked(parts.chunks.size());

  parallel_for(parts.chunks.size(), helper.parallelism(), [&](std::size_t k) {
    const auto& chunk = parts.chunks[k];
    if (chunk.empty()) return;
    const auto text =
        prompt::render_chunk(opts.templates.select, task.query, detail::chunk_elements(task, chunk));
    try {
      picked[k] = with_retries(opts.retries, [&](int attempt) {
        const auto reply = helper.complete(detail::chunk_request(
            text, warmup_seed(opts.seed, k), attempt, opts.temperature, "select"));
        return prompt::parse_relevant_ids(reply.text);
      });
    } catch (const Error& e) {
      throw Error(ErrorKind::backend, "helper_unavailable",
                  "chunk " + std::to_string(k) + ": " + e.what(), k);
    }
  });

  RelevanceVector rel;
  rel.method = RelevanceMethod::warmup;
  rel.scores.assign(task.size(), 0.0);
  for (std::size_t k = 0; k < parts.chunks.size(); ++k) {
    const auto& chunk = parts.chunks[k];
    for (std::size_t id : picked[k]) {
      if (std::find(chunk.begin(), chunk.end(), id) == chunk.end()) {
        spdlog::warn("helper named id {} outside chunk {}; ignored", id, k);
        continue;
      }
      rel.scores[id] = 1.0;
    }
  }
  return rel;
}

inline EvaluationGraph build_evaluation_graph(const Task& task, Backend& helper,
                                              const RelevanceOptions& opts) {
  detail::check_task_ids(task);
  if (opts.sigma == 0) throw Error(ErrorKind::usage, "invalid_sigma", "sigma must be >= 1");
  const std::size_t n = task.size();
  std::vector<Partitioning> shuffles;
  shuffles.reserve(opts.sigma);
  for (std::size_t s = 0; s < opts.sigma; ++s) {
    shuffles.push_back(partition(n, opts.m, derive_seed(opts.seed, "shuffle", s)));
  }

  const std::size_t evals = opts.sigma * opts.m;
  std::vector<std::vector<Edge>> per_eval(evals);

  parallel_for(evals, helper.parallelism(), [&](std::size_t j) {
    const auto& chunk = shuffles[j / opts.m].chunks[j % opts.m];
    if (chunk.empty()) return;
    const auto text =
        prompt::render_chunk(opts.templates.score, task.query, detail::chunk_elements(task, chunk));
    try {
      per_eval[j] = with_retries(opts.retries, [&](int attempt) {
        const auto reply = helper.complete(detail::chunk_request(
            text, evaluation_seed(opts.seed, j), attempt, opts.temperature, "score"));
        const auto scores = prompt::parse_scores(reply.text);
        std::vector<Edge> edges;
        edges.reserve(chunk.size());
        for (std::size_t id : chunk) {
          const auto it = std::find_if(scores.begin(), scores.end(),
                                       [&](const auto& sc) { return sc.first == id; });
          if (it == scores.end()) {
            throw Error(ErrorKind::backend, "score_parse_failed",
                        "no score for element " + std::to_string(id), j);
          }
          edges.push_back({id, j, static_cast<double>(it->second)});
        }
        for (const auto& [id, score] : scores) {
          if (std::find(chunk.begin(), chunk.end(), id) == chunk.end()) {
            spdlog::warn("helper scored id {} outside evaluation {}; ignored", id, j);
          }
        }
        return edges;
      });
    } catch (const Error& e) {
      if (e.code() == "score_parse_failed") {
        throw Error(ErrorKind::backend, "score_parse_failed",
                    "evaluation " + std::to_string(j) + ": " + e.what(), j);
      }
      throw Error(ErrorKind::backend, "helper_unavailable",
                  "evaluation " + std::to_string(j) + ": " + e.what(), j);
    }
  });

  EvaluationGraph g;
  g.n = n;
  g.sigma = opts.sigma;
  g.m = opts.m;
  for (auto& edges : per_eval) g.edges.insert(g.edges.end(), edges.begin(), edges.end());
  return g;
}

struct BipartiteResult {
  RelevanceVector relevance;
  EvaluationGraph graph;
};

inline BipartiteResult bipartite_estimate_detailed(const Task& task, Backend& helper,
                                                   const RelevanceOptions& opts) {
  auto graph = solve_bias(build_evaluation_graph(task, helper, opts), opts.solve);
  RelevanceVector rel;
  rel.method = RelevanceMethod::bipartite;
  rel.scores = min_max_normalize(graph.s_bar);
  return {std::move(rel), std::move(graph)};
}

inline RelevanceVector bipartite_estimate(const Task& task, Backend& helper,
                                          const RelevanceOptions& opts) {
  return bipartite_estimate_detailed(task, helper, opts).relevance;
}

}  // namespace rerank
