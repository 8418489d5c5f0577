// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "rerank/core.hpp"
#include "rerank/exposure.hpp"
#include "rerank/harness.hpp"
#include "rerank/relevance.hpp"
#include "rerank/simulator.hpp"
#include "rerank/stats.hpp"
#include "rerank/tasks.hpp"

using namespace rerank;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

int failures = 0;

void report(int id, const std::string& name, double limit_s, const std::function<Outcome()>& fn) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  const bool in_time = limit_s <= 0 || secs < limit_s;
  const bool pass = o.pass && in_time;
  if (!pass) ++failures;
  std::string timing = fmt::format("{:.3f}s", secs);
  if (limit_s > 0) timing += fmt::format(" (limit {}s)", limit_s);
  std::printf("%s criterion %d %s: %s [%s]\n", pass ? "PASS" : "FAIL", id, name.c_str(),
              o.detail.c_str(), timing.c_str());
  std::fflush(stdout);
}

// ---- 1 ------------------------------------------------------------------

Outcome example_utilities() {
  const auto g = example_graph_task();
  const RelevanceVector rel{g.task.truth, RelevanceMethod::ground_truth};
  const auto prof = make_profile(sim::profile_shape("inverse_rank", 10));
  const std::vector<std::size_t> lens(10, 1);
  std::vector<std::size_t> identity(10);
  std::iota(identity.begin(), identity.end(), std::size_t{0});
  const double u_id = utility(identity, rel, prof, lens);
  const double u_opt = optimal_ranking(rel, prof, lens).utility;
  const bool ok = std::abs(u_id - 23.0 / 15.0) < 1e-12 && std::abs(u_opt - 11.0 / 6.0) < 1e-12;
  return {ok, fmt::format("identity {:.15f} (want 23/15), optimum {:.15f} (want 11/6)", u_id, u_opt)};
}

// ---- 2 ------------------------------------------------------------------

struct TableCell {
  double value, lb, ub;
  int printed;
};

// Ranking-utility table: every Bipartite and Warm-up cell with its column's
// Random (lower) and Optimum (upper) values.
const std::vector<TableCell> kUtilityTable = {
    // synthetic graph
    {2.95, 0.31, 3.02, 97}, {0.67, 0.31, 3.02, 13}, {1.87, 0.31, 2.98, 58}, {2.58, 0.31, 2.98, 85},
    {2.22, 0.32, 3.01, 70}, {1.70, 0.32, 3.01, 51}, {2.49, 0.33, 3.00, 81}, {2.03, 0.33, 3.00, 63},
    {1.03, 0.32, 2.98, 26}, {0.72, 0.32, 2.98, 15},
    // IMDB
    {2.63, 0.57, 2.76, 94}, {1.30, 0.57, 2.76, 33}, {2.50, 0.48, 2.60, 95}, {2.58, 0.48, 2.60, 99},
    {2.48, 0.58, 2.69, 90}, {1.68, 0.58, 2.69, 52}, {2.22, 0.55, 2.52, 84}, {2.22, 0.55, 2.52, 84},
    {1.60, 0.58, 2.67, 48}, {1.50, 0.58, 2.67, 44},
    // OULAD
    {2.76, 0.31, 2.78, 99}, {0.99, 0.31, 2.78, 27}, {2.73, 0.38, 2.74, 99}, {0.63, 0.38, 2.74, 10},
    {2.67, 0.30, 2.78, 95}, {1.10, 0.30, 2.78, 32}, {2.73, 0.35, 2.94, 92}, {2.90, 0.35, 2.94, 98},
    {1.50, 0.37, 2.83, 45}, {1.44, 0.37, 2.83, 43},
    // Adults
    {0.99, 0.12, 1.01, 97}, {0.39, 0.12, 1.01, 30}, {1.46, 0.13, 1.53, 95}, {1.39, 0.13, 1.53, 90},
    {1.03, 0.13, 1.04, 99}, {0.26, 0.13, 1.04, 14}, {1.50, 0.19, 1.60, 92}, {1.57, 0.19, 1.60, 98},
    {0.72, 0.11, 1.24, 54}, {0.59, 0.11, 1.24, 42},
};

Outcome proximity_cells() {
  const double headline = proximity(2.95, 0.31, 3.02).value;
  int within = 0;
  double worst = 0.0;
  for (const auto& c : kUtilityTable) {
    const double pct = 100.0 * proximity(c.value, c.lb, c.ub).value;
    worst = std::max(worst, std::abs(pct - c.printed));
    within += std::abs(pct - c.printed) <= 1.0;
  }
  const bool ok = std::abs(headline - 0.974) <= 0.005 &&
                  within == static_cast<int>(kUtilityTable.size());
  return {ok, fmt::format("proximity(2.95, 0.31, 3.02) = {:.4f}; {}/{} table cells within 1 point "
                          "(worst {:.2f})",
                          headline, within, kUtilityTable.size(), worst)};
}

// ---- 3 ------------------------------------------------------------------

struct SyntheticGraph {
  EvaluationGraph graph;
  std::vector<double> truth;
};

bool connected(const EvaluationGraph& g) {
  const std::size_t total = g.n + g.evaluations();
  std::vector<std::size_t> parent(total);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  const std::function<std::size_t(std::size_t)> find = [&](std::size_t x) {
    return parent[x] == x ? x : parent[x] = find(parent[x]);
  };
  for (const auto& e : g.edges) parent[find(e.u)] = find(g.n + e.v);
  const auto deg_v = g.evaluation_degrees();
  const std::size_t root = find(0);
  for (std::size_t i = 0; i < g.n; ++i) {
    if (find(i) != root) return false;
  }
  for (std::size_t j = 0; j < g.evaluations(); ++j) {
    if (deg_v[j] > 0 && find(g.n + j) != root) return false;
  }
  return true;
}

// Noiseless scores w_ij = beta_j * S_i on sigma shuffled partitions. Redraws
// until the graph is connected: scale is only identifiable per component.
SyntheticGraph synthetic_graph(std::uint64_t seed) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng(mix_seed(seed, attempt));
    SyntheticGraph out;
    auto& g = out.graph;
    g.n = 4 + rng.below(27);
    g.sigma = 1 + rng.below(5);
    g.m = 1 + rng.below(std::min<std::size_t>(5, g.n));
    for (std::size_t i = 0; i < g.n; ++i) out.truth.push_back(rng.uniform(0.05, 1.0));
    std::vector<double> bias(g.evaluations());
    for (auto& b : bias) b = std::exp(rng.uniform(std::log(0.5), std::log(2.0)));
    for (std::size_t s = 0; s < g.sigma; ++s) {
      const auto p = partition(g.n, g.m, rng.next());
      for (std::size_t k = 0; k < g.m; ++k) {
        const std::size_t j = s * g.m + k;
        for (std::size_t i : p.chunks[k]) g.edges.push_back({i, j, bias[j] * out.truth[i]});
      }
    }
    if (connected(g)) return out;
  }
}

// Independent alternate scaling on a dense matrix with NaN for missing edges:
// rows scaled to sum sigma, then columns to their edge count.
std::vector<std::vector<std::vector<double>>> alternate_scaling(const EvaluationGraph& g,
                                                                std::size_t half_steps) {
  const std::size_t cols = g.evaluations();
  std::vector<std::vector<double>> a(g.n, std::vector<double>(cols, std::nan("")));
  for (const auto& e : g.edges) a[e.u][e.v] = e.w;
  std::vector<std::vector<std::vector<double>>> trace;
  for (std::size_t step = 0; step < half_steps; ++step) {
    if (step % 2 == 0) {
      for (auto& row : a) {
        double sum = 0;
        for (double x : row) sum += std::isnan(x) ? 0.0 : x;
        for (double& x : row) x *= static_cast<double>(g.sigma) / sum;
      }
    } else {
      for (std::size_t j = 0; j < cols; ++j) {
        double sum = 0, count = 0;
        for (const auto& row : a) {
          if (!std::isnan(row[j])) {
            sum += row[j];
            count += 1;
          }
        }
        if (count == 0) continue;
        for (auto& row : a) row[j] *= count / sum;
      }
    }
    trace.push_back(a);
  }
  return trace;
}

Outcome solver_oracle() {
  const int graphs = 25;
  double worst_recovery = 0.0, worst_trace = 0.0;
  bool all_converged = true;
  for (int t = 0; t < graphs; ++t) {
    const auto syn = synthetic_graph(derive_seed(77, "solver", t));
    const std::size_t kSteps = 200;
    const auto trace = alternate_scaling(syn.graph, kSteps);
    std::size_t step = 0;
    const auto observer = [&](std::span<const double> s, std::span<const double> b, bool) {
      if (step < kSteps) {
        for (const auto& e : syn.graph.edges) {
          const double mine = e.w / (s[e.u] * b[e.v]);
          worst_trace = std::max(worst_trace, std::abs(mine - trace[step][e.u][e.v]));
        }
      }
      ++step;
    };
    const auto solved = solve_bias(syn.graph, {1e-13, 100000}, observer);
    all_converged = all_converged && solved.converged;
    // S recovered up to one global scale
    std::vector<double> ratio;
    for (std::size_t i = 0; i < syn.graph.n; ++i) ratio.push_back(solved.s_bar[i] / syn.truth[i]);
    const double ref = ratio.front();
    for (double r : ratio) worst_recovery = std::max(worst_recovery, std::abs(r - ref) / ref);
  }
  const bool ok = all_converged && worst_recovery < 1e-6 && worst_trace <= 1e-9;
  return {ok, fmt::format("{} graphs, max relative deviation {:.2e}, max trace mismatch {:.2e}{}",
                          graphs, worst_recovery, worst_trace,
                          all_converged ? "" : ", some runs did not converge")};
}

// ---- 4 ------------------------------------------------------------------

Task plain_task(std::size_t n) {
  Task t;
  for (std::size_t i = 0; i < n; ++i) t.elements.push_back({i, "item " + std::to_string(i), 2});
  t.query = "which items matter?";
  t.oracle = [](std::span<const Element> es) {
    return Answer{{"answer", static_cast<double>(es.size())}};
  };
  return t;
}

Outcome debiasing_under_noise() {
  const int seeds = 100;
  const std::size_t n = 50;
  double tau = 0.0, tau_raw = 0.0, worst = 1.0;
  for (int seed = 0; seed < seeds; ++seed) {
    Rng rng(derive_seed(4242, "truth", seed));
    RelevanceVector truth;
    for (std::size_t i = 0; i < n; ++i) truth.scores.push_back(rng.uniform());
    sim::SimulatorConfig cfg;
    cfg.helper_bias_law = sim::BiasLaw::log_uniform(0.5, 2.0);
    cfg.score_noise_std = 0.1;
    cfg.seed = static_cast<std::uint64_t>(seed);
    sim::SimulatedHelper helper(cfg, truth);
    RelevanceOptions opts;
    opts.m = 5;
    opts.sigma = 4;
    opts.seed = static_cast<std::uint64_t>(seed);
    const auto res = bipartite_estimate_detailed(plain_task(n), helper, opts);
    const double t = stats::kendall_tau(res.graph.s_bar, truth.scores);
    tau += t;
    worst = std::min(worst, t);
    tau_raw += stats::kendall_tau(mean_raw_scores(res.graph), truth.scores);
  }
  tau /= seeds;
  tau_raw /= seeds;
  return {tau >= 0.9, fmt::format("mean Kendall tau {:.4f} (need >= 0.9; min {:.4f}; raw-average "
                                  "baseline {:.4f})",
                                  tau, worst, tau_raw)};
}

// ---- 5 ------------------------------------------------------------------

double rel_l2(std::span<const double> got, std::span<const double> want) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < want.size(); ++i) {
    num += (got[i] - want[i]) * (got[i] - want[i]);
    den += want[i] * want[i];
  }
  return std::sqrt(num / den);
}

Outcome exposure_recovery() {
  const std::size_t n = 50;
  const int seeds = 20;
  double worst = 0.0;
  int monotone = 0, runs = 0;
  std::string per_shape;
  for (const char* shape : {"uniform", "inverse_rank", "hump"}) {
    auto want = sim::profile_shape(shape, n);
    const double total = std::accumulate(want.begin(), want.end(), 0.0);
    for (auto& v : want) v /= total;
    double shape_worst = 0.0;
    for (int seed = 0; seed < seeds; ++seed) {
      const auto useed = static_cast<std::uint64_t>(seed);
      const auto task = to_task(make_probe(5, n, useed));
      LlmSpec spec = parse_llm_spec(std::string("simulated:") + shape);
      spec.miss = sim::MissModel::inverse_error;
      spec.noise = 0.01;
      auto llm = make_simulated_target(spec, task, useed);

      DiscoveryOptions opts;
      opts.p0 = 4 * n;
      opts.p_max = 32 * n;
      opts.target_var = 0.0;
      opts.seed = useed;
      const auto d = estimate_with_confidence(*llm, task, opts);
      // the first fit uses exactly p = 4n samples
      const auto first = estimate_profile(sample_errors(*llm, task, 4 * n, useed));
      const double err = rel_l2(first.values, want);
      shape_worst = std::max(shape_worst, err);

      ++runs;
      bool strictly = d.max_variances.size() == 4;
      for (std::size_t k = 1; strictly && k < d.max_variances.size(); ++k) {
        strictly = d.max_variances[k] < d.max_variances[k - 1];
      }
      monotone += strictly;
    }
    worst = std::max(worst, shape_worst);
    per_shape += fmt::format("{}{} {:.4f}", per_shape.empty() ? "" : ", ", shape, shape_worst);
  }
  const bool ok = worst <= 0.05 && monotone == runs;
  return {ok, fmt::format("worst relative L2 per profile: {}; variance fell at every doubling in "
                          "{}/{} runs",
                          per_shape, monotone, runs)};
}

// ---- 6 ------------------------------------------------------------------

ExperimentConfig hump_experiment(std::uint64_t seed) {
  ExperimentConfig c;
  c.task.n_nodes = 20;
  c.task.p_edge = 0.2;
  c.target = parse_llm_spec("simulated:hump");
  c.helper = parse_llm_spec("simulated:perfect");
  c.exposure_profile = "hump";
  c.methods = {"random", "bipartite", "optimum"};
  c.runs = 10;
  c.seed = seed;
  return c;
}

Outcome end_to_end() {
  const int cells = 100;
  int ordered = 0;
  double e_rand = 0, e_bip = 0, e_opt = 0;
  for (int s = 0; s < cells; ++s) {
    const auto rep = run_experiment(hump_experiment(derive_seed(606, "cell", s)));
    double r = 0, b = 0, o = 0;
    for (const auto& a : rep.aggregates) {
      if (a.method == "random") r = a.mean_error;
      if (a.method == "bipartite") b = a.mean_error;
      if (a.method == "optimum") o = a.mean_error;
    }
    if (rep.incomplete) return {false, "incomplete cells in experiment " + std::to_string(s)};
    ordered += (o <= b && b < r);
    e_rand += r;
    e_bip += b;
    e_opt += o;
  }
  const double prox = proximity(-e_bip, -e_rand, -e_opt).value;
  const double frac = static_cast<double>(ordered) / cells;
  const bool ok = frac >= 0.95 && prox >= 0.9;
  return {ok, fmt::format("optimum <= bipartite < random in {}/{} cells; bipartite error proximity "
                          "{:.3f} (mean errors random {:.3f}, bipartite {:.3f}, optimum {:.3f})",
                          ordered, cells, prox, e_rand / cells, e_bip / cells, e_opt / cells)};
}

// ---- 7 ------------------------------------------------------------------

Outcome exposure_ablation() {
  const int seeds = 50;
  double aware = 0, descending = 0;
  for (int s = 0; s < seeds; ++s) {
    auto cfg = hump_experiment(derive_seed(707, "ablation", s));
    const Task task = build_run_task(cfg, 0);
    const RelevanceVector truth{task.truth, RelevanceMethod::ground_truth};
    const auto lens = task.token_lengths();
    const auto prof = make_profile(sim::profile_shape("hump", task.total_tokens()));
    sim::SimulatorConfig sc;
    sc.exposure_truth = prof.values;
    sc.seed = cfg.seed;
    const auto truth_answer = task.true_answer();
    const auto query_seed = derive_seed(cfg.seed, "query", 0);
    const auto a = optimal_ranking(truth, prof, lens).perm;
    const auto d = relevance_order(truth);
    aware += task.distance(sim::simulate_answer(sc, task, a, query_seed), truth_answer);
    descending += task.distance(sim::simulate_answer(sc, task, d, query_seed), truth_answer);
  }
  aware /= seeds;
  descending /= seeds;
  return {aware < descending, fmt::format("mean error exposure-aware {:.3f} vs relevance-descending "
                                          "{:.3f} over {} seeds",
                                          aware, descending, seeds)};
}

// ---- 8 ------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism() {
  const auto dir = fs::temp_directory_path() / "rerank_acceptance_determinism";
  fs::remove_all(dir);
  const std::string config = (fs::path(RERANK_SOURCE_DIR) / "configs" / "sim-graph.toml").string();
  std::vector<std::string> reports;
  int k = 0;
  for (const char* par : {"1", "1", "8", "8"}) {
    const auto out = (dir / std::to_string(k++)).string();
    std::ostringstream sink, err;
    const int code = cli::run_cli({"eval", "--config", config, "--deterministic", "--parallelism",
                                   par, "--seed", "11", "--out", out},
                                  sink, err);
    if (code != 0) return {false, "eval exited " + std::to_string(code) + ": " + err.str()};
    reports.push_back(slurp(fs::path(out) / "report.json"));
  }
  fs::remove_all(dir);
  bool same = !reports.front().empty();
  for (const auto& r : reports) same = same && r == reports.front();
  return {same, fmt::format("report.json byte-identical across 2 runs each at parallelism 1 and 8 "
                            "({} bytes): {}",
                            reports.front().size(), same ? "yes" : "no")};
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::err);
  report(1, "worked-example utilities", 0.001, example_utilities);
  report(2, "proximity table cells", 0, proximity_cells);
  report(3, "bias solver vs alternate scaling", 1.0, solver_oracle);
  report(4, "debiasing under noise", 30.0, debiasing_under_noise);
  report(5, "exposure recovery", 60.0, exposure_recovery);
  report(6, "end-to-end improvement", 120.0, end_to_end);
  report(7, "exposure-effect ablation", 0, exposure_ablation);
  report(8, "deterministic reports", 0, determinism);
  std::printf("%d of 8 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
