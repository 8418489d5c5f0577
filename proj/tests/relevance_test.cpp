#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "rerank/relevance.hpp"
#include "rerank/simulator.hpp"
#include "rerank/stats.hpp"
#include "rerank/tasks.hpp"
#include "test_support.hpp"

using namespace rerank;

namespace {

std::vector<std::size_t> sizes(const Partitioning& p) {
  std::vector<std::size_t> s;
  for (const auto& c : p.chunks) s.push_back(c.size());
  return s;
}

// Complete bipartite graph: every element appears in every evaluation.
EvaluationGraph dense_graph(const std::vector<std::vector<double>>& w) {
  EvaluationGraph g;
  g.n = w.size();
  g.sigma = w.front().size();
  g.m = 1;
  for (std::size_t i = 0; i < g.n; ++i) {
    for (std::size_t j = 0; j < g.sigma; ++j) g.edges.push_back({i, j, w[i][j]});
  }
  return g;
}

sim::SimulatorConfig helper_config(double lo, double hi, double noise, std::uint64_t seed) {
  sim::SimulatorConfig c;
  c.helper_bias_law = lo == hi ? sim::BiasLaw::constant(lo) : sim::BiasLaw::log_uniform(lo, hi);
  c.score_noise_std = noise;
  c.seed = seed;
  return c;
}

// n elements with arbitrary text; truth supplied separately.
Task plain_task(std::size_t n) {
  Task t;
  for (std::size_t i = 0; i < n; ++i) t.elements.push_back({i, "item " + std::to_string(i), 2});
  t.query = "which items matter?";
  t.oracle = [](std::span<const Element> es) {
    return Answer{{"answer", static_cast<double>(es.size())}};
  };
  return t;
}

}  // namespace

TEST(Partition, UnshuffledHalves) {
  const auto p = partition(10, 2);
  ASSERT_EQ(p.chunks.size(), 2u);
  EXPECT_EQ(p.chunks[0], (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  EXPECT_EQ(p.chunks[1], (std::vector<std::size_t>{5, 6, 7, 8, 9}));
}

TEST(Partition, RemainderInLastChunk) {
  EXPECT_EQ(sizes(partition(10, 3)), (std::vector<std::size_t>{4, 4, 2}));
}

TEST(Partition, SeededIsDeterministicPermutation) {
  const auto a = partition(10, 3, 7);
  const auto b = partition(10, 3, 7);
  EXPECT_EQ(a.chunks, b.chunks);
  EXPECT_EQ(sizes(a), (std::vector<std::size_t>{4, 4, 2}));
  std::vector<std::size_t> all;
  for (const auto& c : a.chunks) all.insert(all.end(), c.begin(), c.end());
  std::sort(all.begin(), all.end());
  std::vector<std::size_t> expect(10);
  std::iota(expect.begin(), expect.end(), std::size_t{0});
  EXPECT_EQ(all, expect);
  EXPECT_NE(partition(10, 3, 8).chunks, a.chunks);
}

TEST(Partition, TrailingChunksMayBeEmpty) {
  EXPECT_EQ(sizes(partition(9, 4)), (std::vector<std::size_t>{3, 3, 3, 0}));
}

TEST(Partition, TooManyPartitions) {
  try {
    partition(3, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "too_many_partitions");
  }
}

TEST(SolveBias, ConstantWeightsAreAFixedPoint) {
  const auto g = solve_bias(dense_graph(std::vector<std::vector<double>>(5, {3, 3, 3, 3})));
  EXPECT_TRUE(g.converged);
  EXPECT_LE(g.iterations, 2u);
  for (double s : g.s_bar) EXPECT_DOUBLE_EQ(s, 3.0);
  for (double b : g.beta) EXPECT_DOUBLE_EQ(b, 1.0);
}

TEST(SolveBias, RecoversNoiselessScoresUpToScale) {
  const std::vector<double> s_star{1.0, 2.5, 0.7, 4.0};
  const std::vector<double> b_star{0.6, 1.3, 2.0, 0.9};
  std::vector<std::vector<double>> w(4, std::vector<double>(4));
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) w[i][j] = b_star[j] * s_star[i];
  }
  const auto g = solve_bias(dense_graph(w));
  ASSERT_TRUE(g.converged);
  std::vector<double> ratio;
  for (int i = 0; i < 4; ++i) ratio.push_back(g.s_bar[i] / s_star[i]);
  auto sorted = ratio;
  std::sort(sorted.begin(), sorted.end());
  const double median = (sorted[1] + sorted[2]) / 2;
  for (double r : ratio) EXPECT_LT(std::abs(r - median) / median, 1e-6);
}

TEST(SolveBias, MatchesAlternateScalingOnTwoByTwo) {
  const std::vector<std::vector<double>> w{{1.0, 4.0}, {2.0, 3.0}};
  auto g = dense_graph(w);
  // Independent alternate scaling: rows to sigma, then columns to column degree.
  std::vector<std::vector<double>> m = w;
  std::vector<std::vector<std::vector<double>>> expected;
  for (int it = 0; it < 60; ++it) {
    for (auto& row : m) {
      const double s = row[0] + row[1];
      for (auto& x : row) x *= 2.0 / s;
    }
    expected.push_back(m);
    for (int j = 0; j < 2; ++j) {
      const double s = m[0][j] + m[1][j];
      for (auto& row : m) row[j] *= 2.0 / s;
    }
    expected.push_back(m);
  }
  std::size_t step = 0;
  const auto observer = [&](std::span<const double> s, std::span<const double> b, bool) {
    ASSERT_LT(step, expected.size());
    for (int i = 0; i < 2; ++i) {
      for (int j = 0; j < 2; ++j) {
        EXPECT_NEAR(w[i][j] / (s[i] * b[j]), expected[step][i][j], 1e-9);
      }
    }
    ++step;
  };
  const auto solved = solve_bias(g, {1e-12, 60}, observer);
  EXPECT_GT(step, 0u);
  double r0 = 0, r1 = 0, c0 = 0, c1 = 0;
  for (const auto& e : solved.edges) {
    const double a = e.w / (solved.s_bar[e.u] * solved.beta[e.v]);
    (e.u == 0 ? r0 : r1) += a;
    (e.v == 0 ? c0 : c1) += a;
  }
  EXPECT_NEAR(r0, 2.0, 1e-9);
  EXPECT_NEAR(r1, 2.0, 1e-9);
  EXPECT_NEAR(c0, 2.0, 1e-9);
  EXPECT_NEAR(c1, 2.0, 1e-9);
}

TEST(SolveBias, ScaleEquivariance) {
  Rng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<double>> w(5, std::vector<double>(3));
    for (auto& row : w) {
      for (auto& x : row) x = 1.0 + 4.0 * rng.uniform();
    }
    const double c = 0.1 + 10 * rng.uniform();
    auto scaled = w;
    for (auto& row : scaled) {
      for (auto& x : row) x *= c;
    }
    const auto a = solve_bias(dense_graph(w));
    const auto b = solve_bias(dense_graph(scaled));
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(b.s_bar[i], c * a.s_bar[i], 1e-6 * c * a.s_bar[i]);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(b.beta[j], a.beta[j], 1e-6);
  }
}

TEST(SolveBias, RejectsNonPositiveWeights) {
  auto g = dense_graph({{1.0, 0.0}, {1.0, 1.0}});
  try {
    solve_bias(g);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "invalid_weight");
  }
}

TEST(SolveBias, ReportsNonConvergence) {
  const auto g = solve_bias(dense_graph({{1.0, 4.0}, {2.0, 3.0}}), {1e-15, 1});
  EXPECT_FALSE(g.converged);
  EXPECT_EQ(g.iterations, 1u);
}

TEST(EvaluationGraph, DegreeInvariant) {
  const auto task = plain_task(12);
  RelevanceVector truth{std::vector<double>(12, 0.5), RelevanceMethod::ground_truth};
  sim::SimulatedHelper helper(helper_config(1, 1, 0, 1), truth);
  RelevanceOptions opts;
  opts.m = 3;
  opts.sigma = 2;
  opts.seed = 5;
  const auto g = build_evaluation_graph(task, helper, opts);
  EXPECT_EQ(g.evaluations(), 6u);
  for (auto d : g.element_degrees()) EXPECT_EQ(d, 2u);
  for (auto d : g.evaluation_degrees()) EXPECT_EQ(d, 4u);
}

TEST(EvaluationGraph, WeightsFollowTheBiasLaw) {
  const std::size_t n = 20;
  const auto task = plain_task(n);
  Rng rng(2);
  RelevanceVector truth;
  for (std::size_t i = 0; i < n; ++i) truth.scores.push_back(rng.uniform());
  const auto config = helper_config(0.5, 2.0, 0.0, 77);
  sim::SimulatedHelper helper(config, truth);
  RelevanceOptions opts;
  opts.m = 4;
  opts.sigma = 3;
  opts.seed = 9;
  const auto g = build_evaluation_graph(task, helper, opts);
  ASSERT_EQ(g.edges.size(), n * 3);
  for (const auto& e : g.edges) {
    const double beta = sim::helper_bias(config, evaluation_seed(opts.seed, e.v));
    const double expect = std::clamp(std::round(beta * truth.scores[e.u] * 5.0), 1.0, 5.0);
    EXPECT_EQ(e.w, expect);
  }
}

TEST(EvaluationGraph, DeterministicEdgeList) {
  const auto task = plain_task(15);
  RelevanceVector truth{std::vector<double>(15, 0.3), RelevanceMethod::ground_truth};
  truth.scores[3] = 0.9;
  RelevanceOptions opts;
  opts.m = 3;
  opts.sigma = 4;
  opts.seed = 12;
  const auto config = helper_config(0.5, 2.0, 0.3, 4);
  sim::SimulatedHelper h1(config, truth);
  sim::SimulatedHelper h2(config, truth, "again", 4);
  const auto a = build_evaluation_graph(task, h1, opts);
  const auto b = build_evaluation_graph(task, h2, opts);
  ASSERT_EQ(a.edges.size(), b.edges.size());
  for (std::size_t k = 0; k < a.edges.size(); ++k) {
    EXPECT_EQ(a.edges[k].u, b.edges[k].u);
    EXPECT_EQ(a.edges[k].v, b.edges[k].v);
    EXPECT_EQ(a.edges[k].w, b.edges[k].w);
  }
}

TEST(EvaluationGraph, UnparseableRepliesFailWithEvaluationIndex) {
  const auto task = plain_task(6);
  fakes::ScriptedBackend helper([](const ChatRequest&) { return ChatReply{"no idea", {}}; });
  RelevanceOptions opts;
  opts.m = 2;
  opts.sigma = 1;
  try {
    build_evaluation_graph(task, helper, opts);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "score_parse_failed");
    ASSERT_TRUE(e.index().has_value());
    EXPECT_EQ(*e.index(), 0u);
  }
  // 1 + 3 retries for the failing evaluation.
  EXPECT_EQ(helper.calls(), 4);
}

TEST(EvaluationGraph, RetriesRecoverFromJunk) {
  const auto task = plain_task(10);
  RelevanceVector truth{std::vector<double>(10, 0.6), RelevanceMethod::ground_truth};
  auto config = helper_config(1, 1, 0, 3);
  config.junk_rate = 0.5;
  sim::SimulatedHelper helper(config, truth);
  RelevanceOptions opts;
  opts.m = 2;
  opts.sigma = 5;
  opts.seed = 1;
  opts.retries = 10;
  const auto g = build_evaluation_graph(task, helper, opts);
  EXPECT_EQ(g.edges.size(), 50u);
}

TEST(Bipartite, SingleEvaluationIsMinMaxOfRawScores) {
  const auto task = plain_task(8);
  RelevanceVector truth{{0.1, 0.9, 0.5, 0.3, 0.7, 0.2, 0.8, 0.4}, RelevanceMethod::ground_truth};
  sim::SimulatedHelper helper(helper_config(1, 1, 0, 0), truth);
  RelevanceOptions opts;
  opts.m = 1;
  opts.sigma = 1;
  const auto res = bipartite_estimate_detailed(task, helper, opts);
  std::vector<double> raw(8);
  for (const auto& e : res.graph.edges) raw[e.u] = e.w;
  const auto expected = min_max_normalize(raw);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(res.relevance.scores[i], expected[i], 1e-12);
  EXPECT_EQ(res.relevance.method, RelevanceMethod::bipartite);
}

TEST(Bipartite, ExampleGraphRanksIncidentEdgesFirst) {
  const auto g = example_graph_task();
  RelevanceVector truth{g.task.truth, RelevanceMethod::ground_truth};
  sim::SimulatedHelper helper(helper_config(0.5, 2.0, 0.0, 8), truth);
  RelevanceOptions opts;
  opts.m = 2;
  opts.sigma = 4;
  opts.seed = 3;
  const auto rel = bipartite_estimate(g.task, helper, opts);
  double min_relevant = 2, max_other = -1;
  for (std::size_t i = 0; i < rel.size(); ++i) {
    if (truth.scores[i] > 0) {
      min_relevant = std::min(min_relevant, rel.scores[i]);
    } else {
      max_other = std::max(max_other, rel.scores[i]);
    }
  }
  EXPECT_GT(min_relevant, max_other);
}

TEST(Bipartite, OutputInUnitInterval) {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 5 + rng.below(30);
    const auto task = plain_task(n);
    RelevanceVector truth;
    for (std::size_t i = 0; i < n; ++i) truth.scores.push_back(rng.uniform());
    sim::SimulatedHelper helper(helper_config(0.5, 2, 0.3, trial), truth);
    RelevanceOptions opts;
    opts.m = 1 + rng.below(5);
    opts.sigma = 1 + rng.below(5);
    opts.seed = trial;
    const auto rel = bipartite_estimate(task, helper, opts);
    ASSERT_EQ(rel.size(), n);
    for (double s : rel.scores) {
      EXPECT_GE(s, 0.0);
      EXPECT_LE(s, 1.0);
    }
  }
}

TEST(Bipartite, DebiasingBeatsRawAveraging) {
  // Noisy, biased helper: removing per-evaluation bias should order elements
  // better than averaging raw scores.
  double tau_solved = 0, tau_raw = 0;
  const int seeds = 40;
  for (int seed = 0; seed < seeds; ++seed) {
    Rng rng(derive_seed(1000, "truth", seed));
    const std::size_t n = 50;
    RelevanceVector truth;
    for (std::size_t i = 0; i < n; ++i) truth.scores.push_back(rng.uniform(0.1, 0.5));
    const auto task = plain_task(n);
    sim::SimulatedHelper helper(helper_config(0.5, 2.0, 0.1, seed), truth);
    RelevanceOptions opts;
    opts.m = 5;
    opts.sigma = 4;
    opts.seed = seed;
    const auto res = bipartite_estimate_detailed(task, helper, opts);
    tau_solved += stats::kendall_tau(res.graph.s_bar, truth.scores);
    tau_raw += stats::kendall_tau(mean_raw_scores(res.graph), truth.scores);
  }
  EXPECT_GT(tau_solved / seeds, tau_raw / seeds);
}

TEST(Warmup, PerfectHelperOnExampleGraph) {
  const auto g = example_graph_task();
  RelevanceVector truth{g.task.truth, RelevanceMethod::ground_truth};
  sim::SimulatedHelper helper(sim::SimulatorConfig{}, truth);
  const auto rel = warmup_estimate(g.task, helper, 3);
  EXPECT_EQ(rel.scores, g.task.truth);
  EXPECT_EQ(rel.method, RelevanceMethod::warmup);
  EXPECT_EQ(rel.scores[0], 1.0);
  EXPECT_EQ(rel.scores[2], 1.0);
  EXPECT_EQ(rel.scores[4], 1.0);
}

TEST(Warmup, NothingRelevant) {
  const auto g = example_graph_task();
  RelevanceVector truth{g.task.truth, RelevanceMethod::ground_truth};
  sim::SimulatorConfig config;
  config.answer_none = true;
  sim::SimulatedHelper helper(config, truth);
  const auto rel = warmup_estimate(g.task, helper, 2);
  EXPECT_EQ(rel.scores, std::vector<double>(10, 0.0));
}

TEST(Warmup, IgnoresIdsOutsideTheChunk) {
  const auto task = plain_task(6);
  fakes::ScriptedBackend helper([](const ChatRequest&) { return ChatReply{"ids: 0, 99", {}}; });
  const auto rel = warmup_estimate(task, helper, 2);
  EXPECT_EQ(rel.scores, (std::vector<double>{1, 0, 0, 0, 0, 0}));
}

TEST(Warmup, HelperFailureNamesTheChunk) {
  const auto task = plain_task(6);
  fakes::ScriptedBackend helper([](const ChatRequest& req) -> ChatReply {
    if (req.messages.front().content.find("[4]") != std::string::npos) {
      throw Error(ErrorKind::backend, "backend_unavailable");
    }
    return {"ids: none", {}};
  });
  try {
    warmup_estimate(task, helper, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "helper_unavailable");
    ASSERT_TRUE(e.index().has_value());
    EXPECT_EQ(*e.index(), 2u);
  }
}

TEST(Warmup, RecallMatchesFalseNegativeRate) {
  const std::size_t n = 50;
  const auto task = plain_task(n);
  RelevanceVector truth{std::vector<double>(n, 0.0), RelevanceMethod::ground_truth};
  for (std::size_t i : {3, 11, 24, 37, 45}) truth.scores[i] = 1.0;
  double recalled = 0;
  const int runs = 500;
  for (int run = 0; run < runs; ++run) {
    sim::SimulatorConfig config;
    config.false_negative_rate = 0.2;
    config.seed = static_cast<std::uint64_t>(run);
    sim::SimulatedHelper helper(config, truth);
    RelevanceOptions opts;
    opts.seed = static_cast<std::uint64_t>(run);
    const auto rel = warmup_estimate(task, helper, 5, opts);
    for (std::size_t i = 0; i < n; ++i) {
      if (truth.scores[i] > 0) recalled += rel.scores[i];
      if (truth.scores[i] == 0) ASSERT_EQ(rel.scores[i], 0.0);
    }
  }
  EXPECT_NEAR(recalled / (runs * 5.0), 0.8, 0.05);
}

TEST(Warmup, OutputIsBinary) {
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 3 + rng.below(40);
    const auto task = plain_task(n);
    RelevanceVector truth;
    for (std::size_t i = 0; i < n; ++i) truth.scores.push_back(rng.uniform());
    sim::SimulatorConfig config;
    config.false_negative_rate = 0.3;
    config.false_positive_rate = 0.2;
    config.seed = trial;
    sim::SimulatedHelper helper(config, truth);
    const auto rel = warmup_estimate(task, helper, 1 + rng.below(n));
    for (double s : rel.scores) EXPECT_TRUE(s == 0.0 || s == 1.0);
  }
}
