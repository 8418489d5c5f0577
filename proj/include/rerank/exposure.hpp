#pragma once

// Exposure discovery for a black-box target model.
//
// A probe task (token counting) is shown to the model under many random
// permutations. Each reply yields one sample per answer key: the binary row
// of slots that hold the key's tokens, and the inverse of the error on that
// key. Inverse error is modelled as proportional to the exposure captured by
// the relevant slots, so the profile is the least-squares solution of
//   R^T x = inv_error
// with one row of R^T per sample.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/students_t.hpp>

#include "json.hpp"
#include "rerank/backend.hpp"
#include "rerank/core.hpp"
#include "rerank/error.hpp"
#include "rerank/parallel.hpp"
#include "rerank/prompt.hpp"
#include "rerank/random.hpp"

namespace rerank {

// Count errors are integers, so anything below 1 is as good as exact.
inline constexpr double kMinError = 0.5;

inline constexpr std::string_view kProbeQuery =
    "Count the number of occurrences of each token in the list above.";

struct ProbeTask {
  // One symbol per slot; a slot holds `window` copies of its symbol.
  std::vector<std::string> tokens;
  std::map<std::string, double> counts;
  std::size_t window = 1;
  std::string query{kProbeQuery};
};

inline std::string probe_symbol(std::size_t k) {
  if (k < 26) return std::string(1, static_cast<char>('a' + k));
  return "t" + std::to_string(k);
}

inline ProbeTask probe_from_tokens(std::vector<std::string> tokens, std::size_t window = 1) {
  if (window == 0) throw Error(ErrorKind::usage, "invalid_window", "window must be >= 1");
  ProbeTask p;
  p.window = window;
  for (const auto& t : tokens) p.counts[t] += static_cast<double>(window);
  p.tokens = std::move(tokens);
  return p;
}

// n slots over an alphabet of a symbols. Every symbol occurs at least once;
// the rest of the multiplicities are drawn uniformly.
inline ProbeTask make_probe(std::size_t alphabet, std::size_t n, std::uint64_t seed,
                            std::size_t window = 1) {
  if (alphabet == 0) throw Error(ErrorKind::usage, "invalid_alphabet", "alphabet must be >= 1");
  if (n < alphabet) throw Error(ErrorKind::usage, "invalid_probe", "need n >= alphabet");
  Rng rng(derive_seed(seed, "probe"));
  std::vector<std::string> tokens;
  tokens.reserve(n);
  for (std::size_t k = 0; k < alphabet; ++k) tokens.push_back(probe_symbol(k));
  while (tokens.size() < n) tokens.push_back(probe_symbol(rng.below(alphabet)));
  rng.shuffle(tokens);
  return probe_from_tokens(std::move(tokens), window);
}

// Census of whitespace tokens over a sub-bag of elements.
inline Answer count_tokens(std::span<const Element> elements) {
  Answer out;
  for (const auto& e : elements) {
    std::size_t i = 0;
    const auto& s = e.text;
    while (i < s.size()) {
      while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
      std::size_t j = i;
      while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
      if (j > i) out[s.substr(i, j - i)] += 1.0;
      i = j;
    }
  }
  return out;
}

inline Task to_task(const ProbeTask& probe) {
  Task t;
  t.query = probe.query;
  std::string fmt_hint;
  for (const auto& [sym, _] : probe.counts) {
    if (!fmt_hint.empty()) fmt_hint += ", ";
    fmt_hint += sym + ": <count>";
  }
  t.answer_format = fmt_hint;
  for (std::size_t i = 0; i < probe.tokens.size(); ++i) {
    std::string text;
    for (std::size_t k = 0; k < probe.window; ++k) {
      if (k) text += ' ';
      text += probe.tokens[i];
    }
    t.elements.push_back({i, std::move(text), probe.window});
  }
  t.oracle = [](std::span<const Element> es) { return count_tokens(es); };
  t.facet = [](const Element& e) {
    const auto end = e.text.find(' ');
    return e.text.substr(0, end);
  };
  return t;
}

struct ExposureSample {
  std::vector<std::size_t> perm;
  std::vector<double> rel_row;
  double inv_error = 0.0;
};

struct SamplingOptions {
  int retries = 3;
  double temperature = 0.0;
};

// Issues probe calls lazily and keeps every reply, so asking for more rows
// later extends the earlier sample instead of redrawing it.
class ProbeSampler {
 public:
  ProbeSampler(Backend& llm, const Task& task, std::uint64_t seed, SamplingOptions opts = {})
      : llm_(llm), task_(task), seed_(seed), opts_(opts) {
    if (task_.size() == 0) throw Error(ErrorKind::usage, "empty_task");
    const auto truth = task_.true_answer();
    rows_per_call_ = task_.facet ? std::max<std::size_t>(truth.size(), 1) : 1;
  }

  std::size_t rows_per_call() const noexcept { return rows_per_call_; }
  std::size_t calls_issued() const noexcept { return calls_.size(); }

  // The permutation used by call j.
  std::vector<std::size_t> permutation(std::size_t j) const {
    return Rng(mix_seed(seed_, j, fnv1a("perm"))).permutation(task_.size());
  }

  std::vector<ExposureSample> rows(std::size_t p) {
    if (p == 0) throw Error(ErrorKind::usage, "invalid_sample_count", "p must be >= 1");
    const std::size_t need = (p + rows_per_call_ - 1) / rows_per_call_;
    const std::size_t have = calls_.size();
    if (need > have) {
      calls_.resize(need);
      parallel_for(need - have, llm_.parallelism(),
                   [&](std::size_t k) { calls_[have + k] = run_call(have + k); });
    }
    std::vector<ExposureSample> out;
    out.reserve(p);
    for (const auto& call : calls_) {
      for (const auto& row : call) {
        if (out.size() == p) return out;
        out.push_back(row);
      }
    }
    return out;
  }

 private:
  std::vector<ExposureSample> run_call(std::size_t j) const {
    const auto perm = permutation(j);
    std::vector<Element> arranged;
    arranged.reserve(perm.size());
    for (std::size_t id : perm) arranged.push_back(task_.elements[id]);
    const auto [first, second] = prompt::render_task(arranged, task_.query, task_.answer_format);

    Answer reported;
    try {
      reported = with_retries(opts_.retries, [&](int attempt) {
        ChatRequest req;
        req.messages = {{"user", first}, {"user", second}};
        req.seed = mix_seed(seed_, j);
        req.attempt = attempt;
        req.temperature = opts_.temperature;
        req.purpose = "answer";
        return prompt::parse_count_reply(llm_.complete(req).text);
      });
    } catch (const Error& e) {
      throw Error(e.kind(), e.code(), "permutation " + std::to_string(j) + ": " + e.what(), j);
    }

    const auto truth = task_.true_answer();
    std::vector<ExposureSample> out;
    if (task_.facet) {
      for (const auto& [key, value] : truth) {
        ExposureSample s;
        s.perm = perm;
        s.rel_row.resize(perm.size());
        for (std::size_t slot = 0; slot < perm.size(); ++slot) {
          s.rel_row[slot] = task_.facet(arranged[slot]) == key ? 1.0 : 0.0;
        }
        const auto it = reported.find(key);
        const double err = std::abs((it == reported.end() ? 0.0 : it->second) - value);
        s.inv_error = 1.0 / std::max(err, kMinError);
        out.push_back(std::move(s));
      }
    } else {
      ExposureSample s;
      s.perm = perm;
      s.rel_row.resize(perm.size());
      for (std::size_t slot = 0; slot < perm.size(); ++slot) {
        const auto id = perm[slot];
        s.rel_row[slot] = id < task_.truth.size() ? task_.truth[id] : 0.0;
      }
      s.inv_error = 1.0 / std::max(task_.distance(reported, truth), kMinError);
      out.push_back(std::move(s));
    }
    return out;
  }

  Backend& llm_;
  const Task& task_;
  std::uint64_t seed_;
  SamplingOptions opts_;
  std::size_t rows_per_call_ = 1;
  std::vector<std::vector<ExposureSample>> calls_;
};

inline std::vector<ExposureSample> sample_errors(Backend& llm, const Task& task, std::size_t p,
                                                 std::uint64_t seed, SamplingOptions opts = {}) {
  ProbeSampler sampler(llm, task, seed, opts);
  return sampler.rows(p);
}

enum class VarianceMode {
  // sigma^2 = ||r||^2 / (p - n), the unbiased residual variance.
  unbiased,
  // sigma = ||r|| / (p - n), squared.
  literal,
};

struct LinearFit {
  std::vector<double> coefficients;
  std::vector<double> variances;  // NaN when df == 0
  long df = 0;
  double residual_norm = 0.0;
  double condition = 0.0;
};

inline constexpr double kMaxCondition = 1e12;

// Least squares for R^T x = inv_error via column-pivoted QR. The diagonal of
// (R R^T)^{-1} comes from the triangular factor, never from an explicit
// normal-equations inverse.
inline LinearFit fit_exposure(std::span<const ExposureSample> samples,
                              VarianceMode mode = VarianceMode::unbiased) {
  if (samples.empty()) throw Error(ErrorKind::usage, "underdetermined", "no samples");
  const std::size_t n = samples.front().rel_row.size();
  const std::size_t p = samples.size();
  if (n == 0) throw Error(ErrorKind::usage, "invalid_sample", "empty relevance row");
  if (p < n) {
    throw Error(ErrorKind::usage, "underdetermined",
                "p=" + std::to_string(p) + " samples for n=" + std::to_string(n) + " positions");
  }
  Eigen::MatrixXd a(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(n));
  Eigen::VectorXd b(static_cast<Eigen::Index>(p));
  for (std::size_t j = 0; j < p; ++j) {
    if (samples[j].rel_row.size() != n) {
      throw Error(ErrorKind::usage, "invalid_sample", "rows differ in length", j);
    }
    for (std::size_t i = 0; i < n; ++i) {
      a(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = samples[j].rel_row[i];
    }
    b(static_cast<Eigen::Index>(j)) = samples[j].inv_error;
  }

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  const auto ni = static_cast<Eigen::Index>(n);
  if (qr.rank() < ni) {
    throw Error(ErrorKind::numeric, "singular_design",
                "rank " + std::to_string(qr.rank()) + " < " + std::to_string(n));
  }
  const Eigen::MatrixXd r = qr.matrixR().topLeftCorner(ni, ni).triangularView<Eigen::Upper>();
  const Eigen::VectorXd sv = Eigen::JacobiSVD<Eigen::MatrixXd>(r).singularValues();
  const double cond_a = sv(0) / sv(ni - 1);
  // cond(R R^T) = cond(R^T)^2
  if (!std::isfinite(cond_a) || cond_a * cond_a > kMaxCondition) {
    throw Error(ErrorKind::numeric, "singular_design",
                "condition number " + std::to_string(cond_a * cond_a));
  }

  const Eigen::VectorXd x = qr.solve(b);
  const double rnorm = (a * x - b).norm();

  LinearFit fit;
  fit.coefficients.assign(x.data(), x.data() + n);
  fit.df = static_cast<long>(p) - static_cast<long>(n);
  fit.residual_norm = rnorm;
  fit.condition = cond_a * cond_a;

  const Eigen::MatrixXd r_inv = r.triangularView<Eigen::Upper>().solve(
      Eigen::MatrixXd::Identity(ni, ni));
  double sigma2 = std::numeric_limits<double>::quiet_NaN();
  if (fit.df > 0) {
    const double df = static_cast<double>(fit.df);
    sigma2 = mode == VarianceMode::unbiased ? rnorm * rnorm / df : (rnorm / df) * (rnorm / df);
  }
  fit.variances.assign(n, 0.0);
  const auto& cols = qr.colsPermutation().indices();
  for (Eigen::Index k = 0; k < ni; ++k) {
    fit.variances[static_cast<std::size_t>(cols(k))] = sigma2 * r_inv.row(k).squaredNorm();
  }
  return fit;
}

// Clamps tiny and negative coefficients to zero and rescales to sum 1.
inline ExposureProfile normalized_profile(const LinearFit& fit) {
  ExposureProfile prof;
  prof.values = fit.coefficients;
  for (auto& v : prof.values) v = clamp_exposure(v);
  double sum = 0.0;
  for (double v : prof.values) sum += v;
  if (!(sum > 0.0)) {
    throw Error(ErrorKind::numeric, "degenerate_profile", "all fitted exposures are <= 0");
  }
  for (auto& v : prof.values) v /= sum;
  prof.variances = fit.variances;
  for (auto& v : prof.variances) v /= sum * sum;
  prof.df = fit.df;
  prof.normalized = true;
  return prof;
}

inline ExposureProfile estimate_profile(std::span<const ExposureSample> samples,
                                        VarianceMode mode = VarianceMode::unbiased) {
  auto prof = normalized_profile(fit_exposure(samples, mode));
  prof.samples = samples.size();
  return prof;
}

inline double max_variance(const ExposureProfile& prof) {
  double m = 0.0;
  for (double v : prof.variances) {
    if (std::isnan(v)) return std::numeric_limits<double>::infinity();
    m = std::max(m, v);
  }
  return m;
}

// Half-width of the two-sided t interval for one coordinate.
inline double confidence_halfwidth(double variance, long df, double level = 0.95) {
  if (df <= 0 || std::isnan(variance)) return std::numeric_limits<double>::infinity();
  boost::math::students_t dist(static_cast<double>(df));
  const double q = boost::math::quantile(dist, 0.5 + level / 2.0);
  return q * std::sqrt(std::max(variance, 0.0));
}

struct DiscoveryOptions {
  double target_var = 1e-7;
  std::size_t p0 = 0;
  std::size_t p_max = 0;
  std::uint64_t seed = 0;
  VarianceMode variance = VarianceMode::unbiased;
  SamplingOptions sampling;
};

struct Discovery {
  ExposureProfile profile;
  std::vector<std::size_t> sample_counts;
  std::vector<double> max_variances;
};

// Fits at p0 samples and keeps doubling p (reusing earlier samples) while
// the largest coordinate variance exceeds target_var and 2p fits the budget.
inline Discovery estimate_with_confidence(Backend& llm, const Task& task,
                                          const DiscoveryOptions& opts) {
  const std::size_t n = task.size();
  if (opts.p0 < n + 1) {
    throw Error(ErrorKind::usage, "underdetermined",
                "p0=" + std::to_string(opts.p0) + " needs to be at least n+1=" +
                    std::to_string(n + 1));
  }
  ProbeSampler sampler(llm, task, opts.seed, opts.sampling);
  Discovery d;
  std::size_t p = opts.p0;
  for (;;) {
    const auto samples = sampler.rows(p);
    d.profile = estimate_profile(samples, opts.variance);
    d.sample_counts.push_back(p);
    d.max_variances.push_back(max_variance(d.profile));
    if (d.max_variances.back() <= opts.target_var) break;
    if (2 * p > opts.p_max) {
      d.profile.target_not_met = true;
      break;
    }
    p *= 2;
  }
  d.profile.llm_id = llm.model_id();
  return d;
}

// Linear interpolation of `values` (sampled at x = 0..k-1) at position x,
// flat beyond the ends.
inline double interpolate_at(std::span<const double> values, double x) {
  if (values.empty()) return 0.0;
  if (x <= 0.0) return values.front();
  const double last = static_cast<double>(values.size() - 1);
  if (x >= last) return values.back();
  const auto i = static_cast<std::size_t>(std::floor(x));
  const double f = x - static_cast<double>(i);
  return values[i] * (1.0 - f) + values[i + 1] * f;
}

// Expands a per-window profile to per-token resolution. Each window's value
// sits at its centre token; tokens in between are linearly interpolated.
inline ExposureProfile expand_windows(const ExposureProfile& prof, std::size_t window) {
  if (window <= 1) return prof;
  const std::size_t tokens = prof.size() * window;
  ExposureProfile out = prof;
  out.values.resize(tokens);
  out.variances.resize(tokens);
  const double centre = (static_cast<double>(window) - 1.0) / 2.0;
  double sum = 0.0;
  for (std::size_t t = 0; t < tokens; ++t) {
    const double x = (static_cast<double>(t) - centre) / static_cast<double>(window);
    out.values[t] = interpolate_at(prof.values, x);
    out.variances[t] = interpolate_at(prof.variances, x);
    sum += out.values[t];
  }
  if (prof.normalized && sum > 0.0) {
    for (auto& v : out.values) v /= sum;
    for (auto& v : out.variances) v /= sum * sum;
  }
  return out;
}

// Stretches or shrinks a profile to `len` positions by linear interpolation
// over relative position.
inline std::vector<double> resample(std::span<const double> values, std::size_t len) {
  std::vector<double> out(len);
  if (values.empty() || len == 0) return out;
  if (values.size() == len) return {values.begin(), values.end()};
  for (std::size_t t = 0; t < len; ++t) {
    const double rel = len == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(len - 1);
    out[t] = interpolate_at(values, rel * static_cast<double>(values.size() - 1));
  }
  return out;
}

// Mean exposure of each element's token block under an arrangement.
inline std::vector<double> element_profile(const ExposureProfile& prof,
                                           std::span<const std::size_t> lens,
                                           std::span<const std::size_t> arrangement) {
  if (lens.size() != arrangement.size() || !is_permutation(arrangement)) {
    throw Error(ErrorKind::usage, "invalid_permutation");
  }
  std::vector<std::size_t> block_lens;
  block_lens.reserve(arrangement.size());
  for (std::size_t id : arrangement) block_lens.push_back(lens[id]);
  return block_exposures(prof.values, block_lens);
}

// ---- profile files ------------------------------------------------------

inline nlohmann::ordered_json profile_to_json(const ExposureProfile& prof,
                                              const std::string& created_at) {
  nlohmann::ordered_json j;
  j["llm_id"] = prof.llm_id;
  j["n_positions"] = prof.size();
  j["values"] = prof.values;
  auto vars = nlohmann::ordered_json::array();
  for (double v : prof.variances) {
    if (std::isfinite(v)) {
      vars.push_back(v);
    } else {
      vars.push_back(nullptr);
    }
  }
  j["variances"] = std::move(vars);
  j["df"] = prof.df;
  j["created_at"] = created_at;
  j["normalized"] = prof.normalized;
  j["target_not_met"] = prof.target_not_met;
  j["samples"] = prof.samples;
  return j;
}

inline ExposureProfile profile_from_json(const nlohmann::json& j) {
  ExposureProfile prof;
  try {
    prof.values = j.at("values").get<std::vector<double>>();
    if (j.contains("variances")) {
      for (const auto& v : j.at("variances")) {
        prof.variances.push_back(v.is_null() ? std::numeric_limits<double>::quiet_NaN()
                                             : v.get<double>());
      }
    } else {
      prof.variances.assign(prof.values.size(), 0.0);
    }
    prof.df = j.value("df", 0L);
    prof.llm_id = j.value("llm_id", std::string{});
    prof.normalized = j.value("normalized", false);
    prof.target_not_met = j.value("target_not_met", false);
    prof.samples = j.value("samples", std::size_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::io, "invalid_profile", e.what());
  }
  if (prof.variances.size() != prof.values.size()) {
    throw Error(ErrorKind::io, "invalid_profile", "values and variances differ in length");
  }
  for (double v : prof.values) {
    if (!(v >= 0.0)) throw Error(ErrorKind::io, "invalid_profile", "negative exposure value");
  }
  return prof;
}

inline void write_profile(const std::string& path, const ExposureProfile& prof,
                          const std::string& created_at) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::io, "unwritable", path);
  out << profile_to_json(prof, created_at).dump(2) << '\n';
  if (!out) throw Error(ErrorKind::io, "unwritable", path);
}

inline ExposureProfile read_profile(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "unreadable", path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::io, "invalid_profile", path + ": " + e.what());
  }
  return profile_from_json(j);
}

}  // namespace rerank
