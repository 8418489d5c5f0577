#pragma once

// Prompt construction and reply parsing shared by every backend.
//
// Elements are always rendered one per line as "[id] text" so that replies
// can refer to them by integer id. Reply grammars:
//   answers / counts   "key: value" pairs separated by commas or newlines
//   relevance          a line "ids: 3, 7" (or "ids: none")
//   scores             one "id: score" line per element, score in 1..5

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <fmt/format.h>

#include "rerank/core.hpp"
#include "rerank/error.hpp"

namespace rerank::prompt {

inline constexpr std::string_view kDefaultSelectTemplate =
    "You are given a list of elements. Each line starts with the element id in square "
    "brackets.\n\n"
    "{elements}\n\n"
    "Question: {query}\n\n"
    "Which of these elements are relevant for answering the question? Reply with a single "
    "line of the form `ids: <id>, <id>, ...` listing only the relevant ids, or `ids: none` "
    "if no element is relevant.";

inline constexpr std::string_view kDefaultScoreTemplate =
    "You are given a list of elements. Each line starts with the element id in square "
    "brackets.\n\n"
    "{elements}\n\n"
    "Question: {query}\n\n"
    "Rate how relevant each element is for answering the question on a scale from 1 (not "
    "relevant) to 5 (essential). Reply with exactly one line per element of the form "
    "`<id>: <score>`.";

inline constexpr std::string_view kElementsPreamble =
    "Here is a list of elements, one per line:\n\n";

struct Templates {
  std::string select{kDefaultSelectTemplate};
  std::string score{kDefaultScoreTemplate};
};

inline std::string read_template(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "template_unreadable", path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Replaces every {name} placeholder; unknown placeholders are left alone.
inline std::string fill(std::string_view tmpl,
                        std::span<const std::pair<std::string_view, std::string_view>> values) {
  std::string out;
  out.reserve(tmpl.size());
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      const auto close = tmpl.find('}', i);
      if (close != std::string_view::npos) {
        const auto name = tmpl.substr(i + 1, close - i - 1);
        const auto it = std::find_if(values.begin(), values.end(),
                                     [&](const auto& kv) { return kv.first == name; });
        if (it != values.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out += tmpl[i++];
  }
  return out;
}

inline std::string render_elements(std::span<const Element> elements) {
  std::string out;
  for (const auto& e : elements) {
    if (!out.empty()) out += '\n';
    out += fmt::format("[{}] {}", e.id, e.text);
  }
  return out;
}

inline std::string render_chunk(std::string_view tmpl, std::string_view query,
                                std::span<const Element> elements) {
  const std::string listing = render_elements(elements);
  const std::pair<std::string_view, std::string_view> values[] = {{"query", query},
                                                                   {"elements", listing}};
  return fill(tmpl, values);
}

// Two-message protocol for the target model: the list first, then the query.
inline std::pair<std::string, std::string> render_task(std::span<const Element> arranged,
                                                       std::string_view query,
                                                       std::string_view answer_format) {
  std::string first{kElementsPreamble};
  first += render_elements(arranged);
  std::string second{query};
  if (!answer_format.empty()) {
    second += "\nReply only with the answer in the form: ";
    second += answer_format;
  }
  return {std::move(first), std::move(second)};
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto is_junk = [](char c) {
    return std::isspace(static_cast<unsigned char>(c)) || c == '`' || c == '"' || c == '\'' ||
           c == '*';
  };
  while (!s.empty() && is_junk(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_junk(s.back())) s.remove_suffix(1);
  return s;
}

inline std::optional<double> to_double(std::string_view s) {
  s = trim(s);
  if (!s.empty() && s.back() == '.') s.remove_suffix(1);
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc{} || ptr != end || !std::isfinite(v)) return std::nullopt;
  return v;
}

inline std::optional<std::size_t> to_index(std::string_view s) {
  s = trim(s);
  if (!s.empty() && s.front() == '[' && s.back() == ']') s = s.substr(1, s.size() - 2);
  if (s.empty()) return std::nullopt;
  std::size_t v = 0;
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc{} || ptr != end) return std::nullopt;
  return v;
}

inline std::vector<std::string_view> split_any(std::string_view s, std::string_view seps) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || seps.find(s[i]) != std::string_view::npos) {
      if (i > start) out.push_back(s.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

inline std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace detail

// "a:4, b:3, c:2" -> {a:4, b:3, c:2}. Also accepts one pair per line.
inline Answer parse_count_reply(std::string_view text) {
  Answer out;
  for (auto piece : detail::split_any(text, ",\n;")) {
    const auto colon = piece.rfind(':');
    if (colon == std::string_view::npos) continue;
    const auto key = detail::trim(piece.substr(0, colon));
    const auto value = detail::to_double(piece.substr(colon + 1));
    if (key.empty() || !value) continue;
    out[std::string(key)] = *value;
  }
  if (out.empty()) throw Error(ErrorKind::backend, "score_parse_failed", "no key: value pairs");
  return out;
}

// Finds the "ids:" line. "ids: none" and an empty list both mean no element.
inline std::set<std::size_t> parse_relevant_ids(std::string_view text) {
  for (auto line : detail::split_any(text, "\n")) {
    const auto trimmed = detail::trim(line);
    const auto lowered = detail::lower(trimmed);
    if (lowered.rfind("ids:", 0) != 0) continue;
    std::set<std::size_t> ids;
    for (auto tok : detail::split_any(trimmed.substr(4), ", \t")) {
      if (auto id = detail::to_index(tok)) ids.insert(*id);
    }
    return ids;
  }
  throw Error(ErrorKind::backend, "score_parse_failed", "no ids: line in reply");
}

inline std::vector<std::pair<std::size_t, int>> parse_scores(std::string_view text) {
  std::vector<std::pair<std::size_t, int>> out;
  for (auto line : detail::split_any(text, "\n")) {
    auto trimmed = detail::trim(line);
    if (!trimmed.empty() && trimmed.front() == '-') trimmed = detail::trim(trimmed.substr(1));
    const auto colon = trimmed.find(':');
    if (colon == std::string_view::npos) continue;
    const auto id = detail::to_index(trimmed.substr(0, colon));
    const auto score = detail::to_double(trimmed.substr(colon + 1));
    if (!id || !score) continue;
    if (*score != std::floor(*score) || *score < 1 || *score > 5) continue;
    out.emplace_back(*id, static_cast<int>(*score));
  }
  if (out.empty()) throw Error(ErrorKind::backend, "score_parse_failed", "no id: score lines");
  return out;
}

// Element ids in the order they are listed in a rendered prompt.
inline std::vector<std::size_t> listed_ids(std::string_view text) {
  std::vector<std::size_t> ids;
  for (auto line : detail::split_any(text, "\n")) {
    if (line.empty() || line.front() != '[') continue;
    const auto close = line.find(']');
    if (close == std::string_view::npos) continue;
    if (auto id = detail::to_index(line.substr(1, close - 1))) ids.push_back(*id);
  }
  return ids;
}

inline std::string format_number(double v) {
  if (v == std::floor(v) && std::abs(v) < 1e15) return fmt::format("{}", static_cast<long long>(v));
  return fmt::format("{}", v);
}

// Inverse of parse_count_reply.
inline std::string format_answer(const Answer& answer) {
  std::string out;
  for (const auto& [key, value] : answer) {
    if (!out.empty()) out += ", ";
    out += key;
    out += ": ";
    out += format_number(value);
  }
  return out;
}

}  // namespace rerank::prompt
