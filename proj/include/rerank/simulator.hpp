#pragma once

// Deterministic stand-ins for the target and helper models.
//
// The simulated target reads the "[id] text" listing out of the prompt,
// decides which listed elements it "misses" according to a ground-truth
// exposure curve, and answers the task oracle on what is left. The simulated
// helper scores or selects elements from a ground-truth relevance vector
// with a per-evaluation multiplicative bias. All randomness derives from
// (config seed, request seed, attempt), never from call order.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rerank/backend.hpp"
#include "rerank/core.hpp"
#include "rerank/error.hpp"
#include "rerank/prompt.hpp"
#include "rerank/random.hpp"

namespace rerank::sim {

enum class MissModel {
  // Each element is kept with probability equal to the mean ground-truth
  // exposure of its token block (one draw per slot, shared across calls
  // with the same request seed).
  bernoulli_per_token,
  // Kept iff the block's mean exposure reaches `threshold`.
  threshold,
  // Inverse-error law: for each answer key the reciprocal error equals the
  // share of total exposure held by the key's relevant tokens, times
  // lognormal noise with mean 1. Reported values are off by exactly that
  // error.
  inverse_error,
};

inline MissModel parse_miss_model(std::string_view s) {
  if (s == "bernoulli_per_token" || s == "bernoulli") return MissModel::bernoulli_per_token;
  if (s == "threshold") return MissModel::threshold;
  if (s == "inverse_error") return MissModel::inverse_error;
  throw Error(ErrorKind::usage, "unknown_miss_model", std::string(s));
}

inline std::string_view to_string(MissModel m) {
  switch (m) {
    case MissModel::bernoulli_per_token: return "bernoulli_per_token";
    case MissModel::threshold: return "threshold";
    case MissModel::inverse_error: return "inverse_error";
  }
  return "unknown";
}

struct BiasLaw {
  enum class Kind { degenerate, log_uniform } kind = Kind::degenerate;
  double lo = 1.0;
  double hi = 1.0;

  static BiasLaw constant(double beta) { return {Kind::degenerate, beta, beta}; }
  static BiasLaw log_uniform(double lo, double hi) { return {Kind::log_uniform, lo, hi}; }
};

struct SimulatorConfig {
  std::vector<double> exposure_truth;
  MissModel miss_model = MissModel::bernoulli_per_token;
  double threshold = 0.5;
  double error_noise_std = 0.0;

  BiasLaw helper_bias_law;
  double score_noise_std = 0.0;
  double false_negative_rate = 0.0;
  double false_positive_rate = 0.0;
  bool answer_none = false;
  double junk_rate = 0.0;

  std::uint64_t seed = 0;
};

// Named ground-truth curves over n token positions.
//   uniform       1
//   inverse_rank  1/i
//   hump          middle remembered, start forgotten
//   decay         strong start, fading end
inline std::vector<double> profile_shape(std::string_view name, std::size_t n) {
  std::vector<double> v(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double i = static_cast<double>(k + 1);
    const double t = (static_cast<double>(k) + 0.5) / static_cast<double>(n);
    if (name == "uniform") {
      v[k] = 1.0;
    } else if (name == "inverse_rank") {
      v[k] = 1.0 / i;
    } else if (name == "hump") {
      const double z = (t - 0.5) / 0.18;
      v[k] = 0.15 + 0.8 * std::exp(-z * z);
    } else if (name == "decay") {
      v[k] = 0.95 - 0.75 * t;
    } else {
      throw Error(ErrorKind::usage, "unknown_profile", std::string(name));
    }
  }
  return v;
}

inline bool is_profile_shape(std::string_view name) {
  return name == "uniform" || name == "inverse_rank" || name == "hump" || name == "decay";
}

namespace detail {

inline std::vector<Element> arranged_elements(const Task& task,
                                              std::span<const std::size_t> arrangement) {
  std::vector<Element> out;
  out.reserve(arrangement.size());
  std::vector<char> seen(task.size(), 0);
  for (std::size_t id : arrangement) {
    if (id >= task.size() || task.elements[id].id != id || seen[id]) {
      throw Error(ErrorKind::backend, "unknown_element", "id " + std::to_string(id));
    }
    seen[id] = 1;
    out.push_back(task.elements[id]);
  }
  return out;
}

}  // namespace detail

// The target's answer for one arrangement of the task.
inline Answer simulate_answer(const SimulatorConfig& config, const Task& task,
                              std::span<const std::size_t> arrangement,
                              std::uint64_t request_seed = 0, int attempt = 0) {
  const auto arranged = detail::arranged_elements(task, arrangement);
  std::vector<std::size_t> lens;
  lens.reserve(arranged.size());
  for (const auto& e : arranged) lens.push_back(e.token_len);
  const auto blocks = block_exposures(config.exposure_truth, lens);
  Rng rng(mix_seed(config.seed, request_seed, static_cast<std::uint64_t>(attempt)));

  if (config.miss_model == MissModel::inverse_error) {
    const Answer truth = task.oracle(arranged);
    double total_exposure = 0.0;
    for (std::size_t s = 0; s < arranged.size(); ++s) total_exposure += blocks[s] * lens[s];
    Answer reported;
    for (const auto& [key, value] : truth) {
      double captured = 0.0;
      for (std::size_t s = 0; s < arranged.size(); ++s) {
        const auto& e = arranged[s];
        double rel = 0.0;
        if (task.facet) {
          rel = task.facet(e) == key ? 1.0 : 0.0;
        } else if (e.id < task.truth.size()) {
          rel = task.truth[e.id];
        }
        captured += rel * blocks[s] * static_cast<double>(lens[s]);
      }
      const double share = total_exposure > 0.0 ? captured / total_exposure : 0.0;
      const double sd = config.error_noise_std;
      const double noise = std::exp(sd * rng.normal() - 0.5 * sd * sd);
      const double inv = share * noise;
      const double err = inv > 0.0 ? 1.0 / inv : std::abs(value);
      reported[key] = value - err >= 0.0 ? value - err : value + err;
    }
    return reported;
  }

  std::vector<Element> kept;
  kept.reserve(arranged.size());
  for (std::size_t s = 0; s < arranged.size(); ++s) {
    const double u = rng.uniform();
    const bool keep = config.miss_model == MissModel::threshold ? blocks[s] >= config.threshold
                                                                : u < blocks[s];
    if (keep) kept.push_back(arranged[s]);
  }
  return task.oracle(kept);
}

// The bias coefficient a simulated helper applies throughout evaluation `eval_id`.
inline double helper_bias(const SimulatorConfig& config, std::uint64_t eval_id) {
  const auto& law = config.helper_bias_law;
  if (law.kind == BiasLaw::Kind::degenerate) return law.lo;
  Rng rng(mix_seed(config.seed, eval_id, fnv1a("bias")));
  return std::exp(rng.uniform(std::log(law.lo), std::log(law.hi)));
}

// score = clip(round(5 * beta_j * truth_i + noise), 1, 5)
inline std::vector<std::pair<std::size_t, int>> simulate_helper_scores(
    const SimulatorConfig& config, std::span<const std::size_t> chunk,
    const RelevanceVector& truth, std::uint64_t eval_id, int attempt = 0) {
  const double beta = helper_bias(config, eval_id);
  Rng rng(mix_seed(config.seed, eval_id, static_cast<std::uint64_t>(attempt), fnv1a("noise")));
  std::vector<std::pair<std::size_t, int>> out;
  out.reserve(chunk.size());
  for (std::size_t id : chunk) {
    if (id >= truth.size()) throw Error(ErrorKind::backend, "unknown_element", std::to_string(id));
    const double noise = config.score_noise_std > 0.0 ? config.score_noise_std * rng.normal() : 0.0;
    const double raw = 5.0 * beta * truth.scores[id] + noise;
    const long rounded = std::lround(raw);
    out.emplace_back(id, static_cast<int>(std::clamp<long>(rounded, 1, 5)));
  }
  return out;
}

// Binary selection with false-negative / false-positive noise.
inline std::set<std::size_t> simulate_helper_selection(const SimulatorConfig& config,
                                                       std::span<const std::size_t> chunk,
                                                       const RelevanceVector& truth,
                                                       std::uint64_t request_seed,
                                                       int attempt = 0) {
  std::set<std::size_t> picked;
  if (config.answer_none) return picked;
  Rng rng(mix_seed(config.seed, request_seed, static_cast<std::uint64_t>(attempt),
                   fnv1a("select")));
  for (std::size_t id : chunk) {
    if (id >= truth.size()) throw Error(ErrorKind::backend, "unknown_element", std::to_string(id));
    const double u = rng.uniform();
    const bool relevant = truth.scores[id] >= 0.5;
    if (relevant ? u >= config.false_negative_rate : u < config.false_positive_rate) {
      picked.insert(id);
    }
  }
  return picked;
}

namespace detail {

inline std::string all_text(const ChatRequest& req) {
  std::string out;
  for (const auto& m : req.messages) {
    out += m.content;
    out += '\n';
  }
  return out;
}

}  // namespace detail

class SimulatedTarget final : public Backend {
 public:
  SimulatedTarget(SimulatorConfig config, Task world, std::string model_id = "simulated-target",
                  std::size_t parallelism = 1)
      : Backend(parallelism),
        config_(std::move(config)),
        world_(std::move(world)),
        model_id_(std::move(model_id)) {}

  BackendKind kind() const override { return BackendKind::simulated; }
  std::string model_id() const override { return model_id_; }
  const SimulatorConfig& config() const noexcept { return config_; }

 protected:
  ChatReply do_complete(const ChatRequest& req) override {
    const auto ids = prompt::listed_ids(req.messages.front().content);
    const auto answer = simulate_answer(config_, world_, ids, req.seed, req.attempt);
    return {prompt::format_answer(answer), {}};
  }

 private:
  SimulatorConfig config_;
  Task world_;
  std::string model_id_;
};

class SimulatedHelper final : public Backend {
 public:
  SimulatedHelper(SimulatorConfig config, RelevanceVector truth,
                  std::string model_id = "simulated-helper", std::size_t parallelism = 1)
      : Backend(parallelism),
        config_(std::move(config)),
        truth_(std::move(truth)),
        model_id_(std::move(model_id)) {}

  BackendKind kind() const override { return BackendKind::simulated; }
  std::string model_id() const override { return model_id_; }
  const SimulatorConfig& config() const noexcept { return config_; }

 protected:
  ChatReply do_complete(const ChatRequest& req) override {
    if (config_.junk_rate > 0.0) {
      Rng rng(mix_seed(config_.seed, req.seed, static_cast<std::uint64_t>(req.attempt),
                       fnv1a("junk")));
      if (rng.bernoulli(config_.junk_rate)) return {"Sorry, I cannot help with that.", {}};
    }
    const auto ids = prompt::listed_ids(detail::all_text(req));
    if (req.purpose == "select") {
      const auto picked = simulate_helper_selection(config_, ids, truth_, req.seed, req.attempt);
      if (picked.empty()) return {"ids: none", {}};
      std::string text = "ids: ";
      bool first = true;
      for (std::size_t id : picked) {
        if (!first) text += ", ";
        text += std::to_string(id);
        first = false;
      }
      return {text, {}};
    }
    if (req.purpose == "score") {
      std::string text;
      for (const auto& [id, score] :
           simulate_helper_scores(config_, ids, truth_, req.seed, req.attempt)) {
        text += std::to_string(id) + ": " + std::to_string(score) + "\n";
      }
      return {text, {}};
    }
    throw Error(ErrorKind::backend, "unsupported_request",
                "simulated helper needs purpose select or score");
  }

 private:
  SimulatorConfig config_;
  RelevanceVector truth_;
  std::string model_id_;
};

}  // namespace rerank::sim
