#pragma once

// Backend specs as they appear on the command line and in config files, and
// the factory the harness uses to turn them into live backends.
//
//   simulated:<shape>[,key=value...]   shape = uniform | inverse_rank | hump |
//                                      decay | <profile.json> for targets,
//                                      perfect | biased | none for helpers
//   http:<model>[,key=value...]

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

#include "json.hpp"
#include "rerank/backend.hpp"
#include "rerank/core.hpp"
#include "rerank/error.hpp"
#include "rerank/exposure.hpp"
#include "rerank/simulator.hpp"

namespace rerank {

struct LlmSpec {
  BackendKind kind = BackendKind::simulated;
  std::string shape = "uniform";

  // simulated target
  // Unset means the caller's default: Bernoulli retention for experiments,
  // the inverse-error law for exposure discovery.
  std::optional<sim::MissModel> miss;
  double threshold = 0.5;
  // Target: lognormal error noise (inverse_error model). Helper: score noise.
  double noise = 0.0;

  // simulated helper
  double bias_lo = 1.0;
  double bias_hi = 1.0;
  double fnr = 0.0;
  double fpr = 0.0;
  bool answer_none = false;
  double junk = 0.0;

  // http
  std::string model_id;
  std::string base_url = "http://127.0.0.1:8000";
  long timeout_ms = 60'000;
  int retry_budget = 3;

  std::size_t parallelism = 1;
};

namespace detail {

inline double spec_number(std::string_view key, std::string_view value) {
  try {
    std::size_t used = 0;
    const std::string s(value);
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw Error(ErrorKind::usage, "invalid_llm_spec",
              std::string(key) + " expects a number, got '" + std::string(value) + "'");
}

inline bool spec_bool(std::string_view value) {
  return value == "1" || value == "true" || value == "yes" || value == "on";
}

inline void apply_helper_shape(LlmSpec& spec) {
  if (spec.shape == "biased") {
    spec.bias_lo = 0.5;
    spec.bias_hi = 2.0;
  } else if (spec.shape == "none") {
    spec.answer_none = true;
  }
}

inline void set_spec_key(LlmSpec& spec, std::string_view key, std::string_view value) {
  if (key == "noise") {
    spec.noise = spec_number(key, value);
  } else if (key == "miss") {
    spec.miss = sim::parse_miss_model(value);
  } else if (key == "threshold") {
    spec.threshold = spec_number(key, value);
  } else if (key == "bias_lo") {
    spec.bias_lo = spec_number(key, value);
  } else if (key == "bias_hi") {
    spec.bias_hi = spec_number(key, value);
  } else if (key == "fnr") {
    spec.fnr = spec_number(key, value);
  } else if (key == "fpr") {
    spec.fpr = spec_number(key, value);
  } else if (key == "none" || key == "answer_none") {
    spec.answer_none = spec_bool(value);
  } else if (key == "junk") {
    spec.junk = spec_number(key, value);
  } else if (key == "base_url") {
    spec.base_url = std::string(value);
  } else if (key == "timeout_ms") {
    spec.timeout_ms = static_cast<long>(spec_number(key, value));
  } else if (key == "retries" || key == "retry_budget") {
    spec.retry_budget = static_cast<int>(spec_number(key, value));
  } else if (key == "parallelism") {
    spec.parallelism = static_cast<std::size_t>(spec_number(key, value));
  } else {
    throw Error(ErrorKind::usage, "invalid_llm_spec", "unknown key '" + std::string(key) + "'");
  }
}

}  // namespace detail

inline LlmSpec parse_llm_spec(std::string_view text) {
  LlmSpec spec;
  const auto colon = text.find(':');
  const auto kind = text.substr(0, colon);
  if (kind == "simulated") {
    spec.kind = BackendKind::simulated;
  } else if (kind == "http") {
    spec.kind = BackendKind::http;
  } else {
    throw Error(ErrorKind::usage, "invalid_llm_spec",
                "expected simulated:... or http:..., got '" + std::string(text) + "'");
  }
  std::string_view rest = colon == std::string_view::npos ? "" : text.substr(colon + 1);
  const auto comma = rest.find(',');
  const auto head = rest.substr(0, comma);
  if (spec.kind == BackendKind::http) {
    if (head.empty()) throw Error(ErrorKind::usage, "invalid_llm_spec", "http needs a model id");
    spec.model_id = std::string(head);
  } else if (!head.empty()) {
    spec.shape = std::string(head);
    detail::apply_helper_shape(spec);
  }
  rest = comma == std::string_view::npos ? "" : rest.substr(comma + 1);
  while (!rest.empty()) {
    const auto next = rest.find(',');
    const auto item = rest.substr(0, next);
    const auto eq = item.find('=');
    if (eq == std::string_view::npos) {
      throw Error(ErrorKind::usage, "invalid_llm_spec", "expected key=value, got '" +
                                                            std::string(item) + "'");
    }
    detail::set_spec_key(spec, item.substr(0, eq), item.substr(eq + 1));
    rest = next == std::string_view::npos ? "" : rest.substr(next + 1);
  }
  return spec;
}

// Config-file form: either a spec string or a table. `defaults` (the
// [backend] table) fills keys the table leaves out.
inline LlmSpec llm_spec_from_json(const nlohmann::json& j,
                                  const nlohmann::json& defaults = nlohmann::json::object()) {
  if (j.is_string()) return parse_llm_spec(j.get<std::string>());
  if (!j.is_object()) throw Error(ErrorKind::usage, "invalid_llm_spec", "expected string or table");
  nlohmann::json merged = defaults.is_object() ? defaults : nlohmann::json::object();
  for (const auto& [k, v] : j.items()) merged[k] = v;

  LlmSpec spec;
  const auto kind = merged.value("kind", std::string("simulated"));
  if (kind == "http") {
    spec.kind = BackendKind::http;
  } else if (kind != "simulated") {
    throw Error(ErrorKind::usage, "invalid_llm_spec", "unknown kind '" + kind + "'");
  }
  if (merged.contains("profile")) spec.shape = merged["profile"].get<std::string>();
  if (merged.contains("shape")) spec.shape = merged["shape"].get<std::string>();
  detail::apply_helper_shape(spec);
  for (const auto& [k, v] : merged.items()) {
    if (k == "kind" || k == "profile" || k == "shape") continue;
    if (k == "model_id") {
      spec.model_id = v.get<std::string>();
      continue;
    }
    const std::string value = v.is_string() ? v.get<std::string>() : v.dump();
    detail::set_spec_key(spec, k, value);
  }
  if (spec.kind == BackendKind::http && spec.model_id.empty()) {
    throw Error(ErrorKind::usage, "invalid_llm_spec", "http backend needs model_id");
  }
  return spec;
}

inline nlohmann::ordered_json llm_spec_to_json(const LlmSpec& spec) {
  nlohmann::ordered_json j;
  if (spec.kind == BackendKind::http) {
    j["kind"] = "http";
    j["model_id"] = spec.model_id;
    j["base_url"] = spec.base_url;
    j["timeout_ms"] = spec.timeout_ms;
    j["retry_budget"] = spec.retry_budget;
    return j;
  }
  j["kind"] = "simulated";
  j["shape"] = spec.shape;
  if (spec.miss) j["miss"] = sim::to_string(*spec.miss);
  j["threshold"] = spec.threshold;
  j["noise"] = spec.noise;
  j["bias_lo"] = spec.bias_lo;
  j["bias_hi"] = spec.bias_hi;
  j["fnr"] = spec.fnr;
  j["fpr"] = spec.fpr;
  j["answer_none"] = spec.answer_none;
  j["junk"] = spec.junk;
  return j;
}

// Ground-truth exposure over `tokens` positions for a simulated target. A
// profile file is resampled to length and scaled so its peak is 1, which
// keeps it usable as a retention probability.
inline std::vector<double> simulated_exposure(const LlmSpec& spec, std::size_t tokens) {
  if (sim::is_profile_shape(spec.shape)) return sim::profile_shape(spec.shape, tokens);
  const auto prof = read_profile(spec.shape);
  auto values = resample(prof.values, tokens);
  double peak = 0.0;
  for (double v : values) peak = std::max(peak, v);
  if (peak > 0.0) {
    for (auto& v : values) v /= peak;
  }
  return values;
}

inline sim::SimulatorConfig simulator_config(const LlmSpec& spec, std::uint64_t seed) {
  sim::SimulatorConfig c;
  c.seed = seed;
  c.miss_model = spec.miss.value_or(sim::MissModel::bernoulli_per_token);
  c.threshold = spec.threshold;
  c.error_noise_std = spec.noise;
  c.score_noise_std = spec.noise;
  c.helper_bias_law = spec.bias_lo == spec.bias_hi ? sim::BiasLaw::constant(spec.bias_lo)
                                                   : sim::BiasLaw::log_uniform(spec.bias_lo,
                                                                               spec.bias_hi);
  c.false_negative_rate = spec.fnr;
  c.false_positive_rate = spec.fpr;
  c.answer_none = spec.answer_none;
  c.junk_rate = spec.junk;
  return c;
}

struct BackendFactory {
  // A target bound to the task it will be asked about (simulated targets
  // need the oracle).
  std::function<std::unique_ptr<Backend>(const LlmSpec&, const Task&, std::uint64_t seed)> target;
  // A helper; simulated helpers read the ground-truth relevance.
  std::function<std::unique_ptr<Backend>(const LlmSpec&, const RelevanceVector& truth,
                                         std::uint64_t seed)>
      helper;
};

inline std::unique_ptr<Backend> make_simulated_target(const LlmSpec& spec, const Task& task,
                                                      std::uint64_t seed) {
  auto config = simulator_config(spec, seed);
  config.exposure_truth = simulated_exposure(spec, task.total_tokens());
  return std::make_unique<sim::SimulatedTarget>(std::move(config), task,
                                                "simulated:" + spec.shape, spec.parallelism);
}

inline std::unique_ptr<Backend> make_simulated_helper(const LlmSpec& spec,
                                                      const RelevanceVector& truth,
                                                      std::uint64_t seed) {
  return std::make_unique<sim::SimulatedHelper>(simulator_config(spec, seed), truth,
                                                "simulated:" + spec.shape, spec.parallelism);
}

// Simulated backends only; http specs are rejected.
inline BackendFactory simulated_factory() {
  BackendFactory f;
  f.target = [](const LlmSpec& spec, const Task& task, std::uint64_t seed) {
    if (spec.kind != BackendKind::simulated) {
      throw Error(ErrorKind::usage, "unsupported_backend", "http backends are not available here");
    }
    return make_simulated_target(spec, task, seed);
  };
  f.helper = [](const LlmSpec& spec, const RelevanceVector& truth, std::uint64_t seed) {
    if (spec.kind != BackendKind::simulated) {
      throw Error(ErrorKind::usage, "unsupported_backend", "http backends are not available here");
    }
    return make_simulated_helper(spec, truth, seed);
  };
  return f;
}

}  // namespace rerank
