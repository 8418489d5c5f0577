#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rerank/error.hpp"

namespace rerank {

// Exposure values below this are treated as zero.
inline constexpr double kExposureEpsilon = 1e-9;

struct Element {
  std::size_t id = 0;
  std::string text;
  std::size_t token_len = 1;
};

// Whitespace-separated token count, at least 1.
inline std::size_t whitespace_tokens(std::string_view text) {
  std::size_t count = 0;
  bool in_token = false;
  for (char c : text) {
    const bool space = c == ' ' || c == '\t' || c == '\n' || c == '\r';
    if (!space && !in_token) ++count;
    in_token = !space;
  }
  return std::max<std::size_t>(count, 1);
}

// An answer is a set of named numeric facts. Scalar answers use the single
// key "answer"; the token-counting probe uses one key per token.
using Answer = std::map<std::string, double>;

inline constexpr std::string_view kScalarKey = "answer";

// Mean absolute difference over the keys of `truth`; a key missing from the
// reported answer counts as 0.
inline double mean_abs_distance(const Answer& reported, const Answer& truth) {
  if (truth.empty()) return 0.0;
  double total = 0.0;
  for (const auto& [key, value] : truth) {
    const auto it = reported.find(key);
    total += std::abs((it == reported.end() ? 0.0 : it->second) - value);
  }
  return total / static_cast<double>(truth.size());
}

// A symmetric task: a bag of elements and a query whose true answer does not
// depend on element order.
struct Task {
  std::vector<Element> elements;
  std::string query;
  // Shown to the model after the query, e.g. "answer: <number>".
  std::string answer_format;
  // Ground truth over any sub-bag of `elements`.
  std::function<Answer(std::span<const Element>)> oracle;
  std::function<double(const Answer&, const Answer&)> distance = mean_abs_distance;
  // Ground-truth relevance by element id; empty when unknown.
  std::vector<double> truth;
  // For tasks made of independent sub-problems: the answer key an element
  // contributes to. Empty for single-answer tasks.
  std::function<std::string(const Element&)> facet;

  std::size_t size() const noexcept { return elements.size(); }

  Answer true_answer() const { return oracle(elements); }

  std::vector<std::size_t> token_lengths() const {
    std::vector<std::size_t> lens;
    lens.reserve(elements.size());
    for (const auto& e : elements) lens.push_back(e.token_len);
    return lens;
  }

  std::size_t total_tokens() const {
    std::size_t total = 0;
    for (const auto& e : elements) total += e.token_len;
    return total;
  }
};

enum class RelevanceMethod { warmup, bipartite, ground_truth, random };

inline std::string_view to_string(RelevanceMethod m) {
  switch (m) {
    case RelevanceMethod::warmup: return "warmup";
    case RelevanceMethod::bipartite: return "bipartite";
    case RelevanceMethod::ground_truth: return "ground_truth";
    case RelevanceMethod::random: return "random";
  }
  return "unknown";
}

struct RelevanceVector {
  std::vector<double> scores;
  RelevanceMethod method = RelevanceMethod::ground_truth;

  std::size_t size() const noexcept { return scores.size(); }
};

inline void validate(const RelevanceVector& rel) {
  for (double s : rel.scores) {
    if (!(s >= 0.0 && s <= 1.0)) {
      throw Error(ErrorKind::usage, "invalid_relevance", "scores must lie in [0,1]");
    }
  }
}

// Per-token-position exposure of a target model. Index 0 is the first token.
struct ExposureProfile {
  std::vector<double> values;
  std::vector<double> variances;
  long df = 0;
  bool normalized = false;
  bool target_not_met = false;
  std::size_t samples = 0;
  std::string llm_id;

  std::size_t size() const noexcept { return values.size(); }
};

// Profile with per-position values and no uncertainty.
inline ExposureProfile make_profile(std::vector<double> values) {
  ExposureProfile p;
  p.variances.assign(values.size(), 0.0);
  p.values = std::move(values);
  return p;
}

struct Ranking {
  // perm[slot] = id of the element placed at that slot.
  std::vector<std::size_t> perm;
  double utility = 0.0;
};

inline bool is_permutation(std::span<const std::size_t> perm) {
  std::vector<char> seen(perm.size(), 0);
  for (std::size_t v : perm) {
    if (v >= perm.size() || seen[v]) return false;
    seen[v] = 1;
  }
  return true;
}

inline double clamp_exposure(double v) { return v < kExposureEpsilon ? 0.0 : v; }

// Mean exposure of each consecutive token block. `block_lens[s]` is the token
// length of whatever occupies slot s.
inline std::vector<double> block_exposures(std::span<const double> values,
                                           std::span<const std::size_t> block_lens) {
  std::size_t total = 0;
  for (std::size_t len : block_lens) {
    if (len == 0) throw Error(ErrorKind::usage, "invalid_length", "token lengths must be >= 1");
    total += len;
  }
  if (total > values.size()) {
    throw Error(ErrorKind::usage, "profile_too_short",
                "profile covers " + std::to_string(values.size()) + " tokens, need " +
                    std::to_string(total));
  }
  std::vector<double> out;
  out.reserve(block_lens.size());
  std::size_t pos = 0;
  for (std::size_t len : block_lens) {
    double sum = 0.0;
    for (std::size_t k = 0; k < len; ++k) sum += clamp_exposure(values[pos + k]);
    out.push_back(sum / static_cast<double>(len));
    pos += len;
  }
  return out;
}

namespace detail {

inline void check_inputs(std::size_t n, const RelevanceVector& rel,
                         std::span<const std::size_t> lens) {
  if (rel.size() != n || lens.size() != n) {
    throw Error(ErrorKind::usage, "size_mismatch",
                "relevance, lengths and permutation must have equal size");
  }
}

inline std::vector<std::size_t> lens_in_slot_order(std::span<const std::size_t> perm,
                                                   std::span<const std::size_t> lens) {
  std::vector<std::size_t> out;
  out.reserve(perm.size());
  for (std::size_t id : perm) out.push_back(lens[id]);
  return out;
}

}  // namespace detail

// Expected utility of an arrangement: sum over slots of the mean exposure of
// the slot's token block times the relevance of the element placed there.
inline double utility(std::span<const std::size_t> perm, const RelevanceVector& rel,
                      const ExposureProfile& prof, std::span<const std::size_t> lens) {
  detail::check_inputs(perm.size(), rel, lens);
  if (!is_permutation(perm)) {
    throw Error(ErrorKind::usage, "invalid_permutation");
  }
  const auto blocks = block_exposures(prof.values, detail::lens_in_slot_order(perm, lens));
  double total = 0.0;
  for (std::size_t slot = 0; slot < perm.size(); ++slot) {
    total += blocks[slot] * rel.scores[perm[slot]];
  }
  return total;
}

// Element ids sorted by relevance descending, ties by ascending id.
inline std::vector<std::size_t> relevance_order(const RelevanceVector& rel) {
  std::vector<std::size_t> order(rel.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return rel.scores[a] > rel.scores[b];
  });
  return order;
}

// Assigns high-relevance elements to high-exposure blocks.
//
// Block boundaries are frozen from the relevance-descending arrangement, the
// blocks are ranked by mean exposure and matched to elements in relevance
// order. With equal token lengths this is the exact maximizer of utility().
// Elements of equal relevance take their group's slots in ascending id order,
// so a flat relevance vector yields the identity arrangement.
inline Ranking optimal_ranking(const RelevanceVector& rel, const ExposureProfile& prof,
                               std::span<const std::size_t> lens) {
  const std::size_t n = rel.size();
  detail::check_inputs(n, rel, lens);

  const auto by_rel = relevance_order(rel);
  const auto blocks = block_exposures(prof.values, detail::lens_in_slot_order(by_rel, lens));

  std::vector<std::size_t> slot_rank(n);
  std::iota(slot_rank.begin(), slot_rank.end(), std::size_t{0});
  std::stable_sort(slot_rank.begin(), slot_rank.end(),
                   [&](std::size_t a, std::size_t b) { return blocks[a] > blocks[b]; });

  Ranking r;
  r.perm.assign(n, 0);
  std::size_t begin = 0;
  while (begin < n) {
    std::size_t end = begin + 1;
    while (end < n && rel.scores[by_rel[end]] == rel.scores[by_rel[begin]]) ++end;
    std::vector<std::size_t> slots(slot_rank.begin() + static_cast<std::ptrdiff_t>(begin),
                                   slot_rank.begin() + static_cast<std::ptrdiff_t>(end));
    std::sort(slots.begin(), slots.end());
    std::vector<std::size_t> ids(by_rel.begin() + static_cast<std::ptrdiff_t>(begin),
                                 by_rel.begin() + static_cast<std::ptrdiff_t>(end));
    std::sort(ids.begin(), ids.end());
    for (std::size_t k = 0; k < slots.size(); ++k) r.perm[slots[k]] = ids[k];
    begin = end;
  }
  r.utility = utility(r.perm, rel, prof, lens);
  return r;
}

struct Proximity {
  double value = 0.0;
  bool bounds_violated = false;
};

// Position of x between a lower and an upper bound, clamped to [0,1].
inline Proximity proximity(double x, double lower, double upper) {
  if (!(lower < upper)) {
    throw Error(ErrorKind::numeric, "degenerate_bounds",
                "lower bound must be strictly below upper bound");
  }
  const double p = (x - lower) / (upper - lower);
  if (p < 0.0) return {0.0, true};
  if (p > 1.0) return {1.0, true};
  return {p, false};
}

}  // namespace rerank
