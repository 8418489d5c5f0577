#pragma once

// The two task families: node degree on a random graph, and predicate counts
// over a table. Both are symmetric; the oracle and the ground-truth
// relevance look elements up by id.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <fmt/format.h>

#include "rerank/core.hpp"
#include "rerank/error.hpp"
#include "rerank/random.hpp"

namespace rerank {

// ---- graph degree -------------------------------------------------------

struct GraphTask {
  std::size_t n_nodes = 0;
  std::vector<std::pair<long, long>> edges;
  long target_node = 0;
  Task task;
};

inline constexpr std::size_t kDefaultMaxEdges = 500;

inline GraphTask make_graph_task(std::size_t n_nodes, std::vector<std::pair<long, long>> edges,
                                 long target) {
  GraphTask g;
  g.n_nodes = n_nodes;
  g.target_node = target;
  g.edges = std::move(edges);

  auto incident = std::make_shared<std::vector<char>>();
  for (std::size_t i = 0; i < g.edges.size(); ++i) {
    const auto [u, v] = g.edges[i];
    if (u == v) throw Error(ErrorKind::usage, "self_loop", fmt::format("{} -- {}", u, v), i);
    incident->push_back(u == target || v == target);
    g.task.elements.push_back({i, fmt::format("{} -- {}", u, v), 3});
    g.task.truth.push_back(incident->back() ? 1.0 : 0.0);
  }
  g.task.query = fmt::format("What is the degree of node {}?", target);
  g.task.answer_format = "answer: <number>";
  g.task.oracle = [incident](std::span<const Element> es) {
    double degree = 0.0;
    for (const auto& e : es) {
      if (e.id < incident->size() && (*incident)[e.id]) degree += 1.0;
    }
    return Answer{{std::string(kScalarKey), degree}};
  };
  return g;
}

// Every unordered pair {u, v}, u < v, is an edge with probability p_edge.
inline GraphTask gen_graph_task(std::size_t n_nodes, double p_edge, long target,
                                std::uint64_t seed, std::size_t max_edges = kDefaultMaxEdges) {
  if (target < 0 || static_cast<std::size_t>(target) >= n_nodes) {
    throw Error(ErrorKind::usage, "bad_target",
                fmt::format("target {} outside [0, {})", target, n_nodes));
  }
  if (!(p_edge > 0.0 && p_edge <= 1.0)) {
    throw Error(ErrorKind::usage, "invalid_probability", "p_edge must lie in (0, 1]");
  }
  Rng rng(derive_seed(seed, "graph"));
  std::vector<std::pair<long, long>> edges;
  for (std::size_t u = 0; u < n_nodes; ++u) {
    for (std::size_t v = u + 1; v < n_nodes; ++v) {
      if (rng.uniform() < p_edge) edges.emplace_back(static_cast<long>(u), static_cast<long>(v));
    }
  }
  if (edges.size() > max_edges) {
    throw Error(ErrorKind::usage, "too_many_edges",
                fmt::format("{} edges exceed the cap of {}", edges.size(), max_edges));
  }
  return make_graph_task(n_nodes, std::move(edges), target);
}

// Six nodes, ten edges; node 1 has degree 3 via the first, third and fifth edge.
inline GraphTask example_graph_task() {
  return make_graph_task(7,
                         {{1, 2}, {2, 4}, {1, 4}, {3, 4}, {1, 3},
                          {2, 5}, {3, 5}, {3, 6}, {5, 6}, {2, 6}},
                         1);
}

inline std::vector<std::size_t> degrees(const GraphTask& g) {
  std::vector<std::size_t> d(g.n_nodes, 0);
  for (const auto& [u, v] : g.edges) {
    ++d[static_cast<std::size_t>(u)];
    ++d[static_cast<std::size_t>(v)];
  }
  return d;
}

inline std::string edge_list_text(const GraphTask& g) {
  std::string out = fmt::format("# target: {}\n", g.target_node);
  for (const auto& [u, v] : g.edges) out += fmt::format("{} -- {}\n", u, v);
  return out;
}

namespace detail {

inline std::string_view trim_ws(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline std::optional<long> to_long(std::string_view s) {
  s = trim_ws(s);
  long v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::optional<double> to_number(std::string_view s) {
  s = trim_ws(s);
  double v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "unreadable", path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

// Parses "u -- v", "u v" or "u,v" per line. A "# target: t" comment sets the
// target unless one is given explicitly.
inline GraphTask parse_edge_list(std::string_view text, std::optional<long> target = std::nullopt) {
  std::vector<std::pair<long, long>> edges;
  std::optional<long> file_target;
  std::size_t line_no = 0;
  long max_node = -1;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto end = std::min(text.find('\n', pos), text.size());
    auto line = detail::trim_ws(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (line.empty()) {
      if (end == text.size()) break;
      continue;
    }
    if (line.front() == '#') {
      const auto key = line.find("target:");
      if (key != std::string_view::npos) file_target = detail::to_long(line.substr(key + 7));
      continue;
    }
    std::string norm(line);
    std::replace(norm.begin(), norm.end(), ',', ' ');
    if (const auto dash = norm.find("--"); dash != std::string::npos) norm.replace(dash, 2, "  ");
    std::istringstream ss(norm);
    std::string a, b, extra;
    ss >> a >> b;
    const auto u = detail::to_long(a);
    const auto v = detail::to_long(b);
    if (!u || !v || (ss >> extra) || *u < 0 || *v < 0) {
      throw Error(ErrorKind::io, "malformed_row", "line " + std::to_string(line_no), line_no);
    }
    edges.emplace_back(*u, *v);
    max_node = std::max({max_node, *u, *v});
    if (end == text.size()) break;
  }
  const long t = target ? *target : file_target.value_or(0);
  if (t < 0) throw Error(ErrorKind::usage, "bad_target", std::to_string(t));
  const auto n_nodes = static_cast<std::size_t>(std::max(max_node, t) + 1);
  return make_graph_task(n_nodes, std::move(edges), t);
}

inline GraphTask read_edge_list(const std::string& path, std::optional<long> target = std::nullopt) {
  return parse_edge_list(detail::read_file(path), target);
}

// ---- tables -------------------------------------------------------------

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  // Source line on which each row starts (1-based).
  std::vector<std::size_t> lines;
};

// RFC 4180: quoted fields may hold commas, doubled quotes and line breaks;
// CRLF and LF both end a record.
inline CsvTable parse_csv(std::string_view text) {
  CsvTable table;
  std::vector<std::vector<std::string>> records;
  std::vector<std::size_t> starts;
  std::vector<std::string> record;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  std::size_t line = 1;
  std::size_t record_line = 1;

  const auto end_field = [&] {
    record.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  const auto end_record = [&] {
    end_field();
    const bool blank = record.size() == 1 && record.front().empty();
    if (!blank) {
      records.push_back(std::move(record));
      starts.push_back(record_line);
    }
    record.clear();
  };

  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line;
        field += c;
      }
      continue;
    }
    if (c == '"' && !field_started) {
      in_quotes = true;
      field_started = true;
    } else if (c == ',') {
      end_field();
    } else if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') {
      continue;
    } else if (c == '\n') {
      end_record();
      ++line;
      record_line = line;
    } else {
      field += c;
      field_started = true;
    }
  }
  if (in_quotes) {
    throw Error(ErrorKind::io, "malformed_row", "unterminated quote at line " +
                                                    std::to_string(record_line),
                record_line);
  }
  if (!field.empty() || !record.empty() || field_started) end_record();

  if (records.empty()) throw Error(ErrorKind::io, "malformed_row", "missing header", 1);
  table.header = std::move(records.front());
  for (std::size_t r = 1; r < records.size(); ++r) {
    if (records[r].size() != table.header.size()) {
      throw Error(ErrorKind::io, "malformed_row",
                  fmt::format("line {}: {} fields, header has {}", starts[r], records[r].size(),
                              table.header.size()),
                  starts[r]);
    }
    table.rows.push_back(std::move(records[r]));
    table.lines.push_back(starts[r]);
  }
  return table;
}

inline CsvTable read_csv(const std::string& path) { return parse_csv(detail::read_file(path)); }

struct Predicate {
  enum class Op { eq, ge } op = Op::eq;
  std::string column;
  std::string literal;
};

// "rating,ge,8.2" / "genre,eq,Drama". Also accepts "=", "==" and ">=".
inline Predicate parse_predicate(std::string_view spec) {
  const auto first = spec.find(',');
  const auto second = first == std::string_view::npos ? first : spec.find(',', first + 1);
  if (second == std::string_view::npos) {
    throw Error(ErrorKind::usage, "invalid_predicate", "expected column,op,literal");
  }
  Predicate p;
  p.column = std::string(detail::trim_ws(spec.substr(0, first)));
  const auto op = detail::trim_ws(spec.substr(first + 1, second - first - 1));
  p.literal = std::string(detail::trim_ws(spec.substr(second + 1)));
  if (op == "eq" || op == "=" || op == "==") {
    p.op = Predicate::Op::eq;
  } else if (op == "ge" || op == ">=") {
    p.op = Predicate::Op::ge;
  } else {
    throw Error(ErrorKind::usage, "invalid_predicate", "unknown operator " + std::string(op));
  }
  if (p.column.empty()) throw Error(ErrorKind::usage, "invalid_predicate", "empty column");
  return p;
}

// Numeric comparison when both sides parse as numbers, string comparison
// otherwise. Both sides are trimmed.
inline bool matches(const Predicate& p, std::string_view value) {
  const auto v = detail::trim_ws(value);
  const auto lit = std::string_view(p.literal);
  const auto vn = detail::to_number(v);
  const auto ln = detail::to_number(lit);
  if (vn && ln) return p.op == Predicate::Op::eq ? *vn == *ln : *vn >= *ln;
  return p.op == Predicate::Op::eq ? v == lit : v >= lit;
}

struct TableTask {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  Predicate predicate;
  Task task;
};

inline constexpr std::size_t kDefaultSampleRows = 60;

// Seeded uniform sample of `sample_rows` rows (kept in file order).
inline TableTask make_table_task(const CsvTable& table, const Predicate& predicate,
                                 std::size_t sample_rows, std::uint64_t seed) {
  const auto col_it = std::find(table.header.begin(), table.header.end(), predicate.column);
  if (col_it == table.header.end()) {
    throw Error(ErrorKind::usage, "unknown_column", predicate.column);
  }
  const auto col = static_cast<std::size_t>(col_it - table.header.begin());

  std::vector<std::size_t> picked(table.rows.size());
  std::iota(picked.begin(), picked.end(), std::size_t{0});
  if (sample_rows < picked.size()) {
    Rng(derive_seed(seed, "rows")).shuffle(picked);
    picked.resize(sample_rows);
    std::sort(picked.begin(), picked.end());
  }

  TableTask t;
  t.header = table.header;
  t.predicate = predicate;
  auto hit = std::make_shared<std::vector<char>>();
  for (std::size_t i = 0; i < picked.size(); ++i) {
    const auto& row = table.rows[picked[i]];
    t.rows.push_back(row);
    std::string text;
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) text += ", ";
      text += row[c];
    }
    Element e{i, std::move(text), 1};
    e.token_len = whitespace_tokens(e.text);
    t.task.elements.push_back(std::move(e));
    hit->push_back(matches(predicate, row[col]));
    t.task.truth.push_back(hit->back() ? 1.0 : 0.0);
  }
  std::string header_line;
  for (std::size_t c = 0; c < table.header.size(); ++c) {
    if (c) header_line += ", ";
    header_line += table.header[c];
  }
  t.task.query = fmt::format("The rows have columns: {}. How many rows have {} {} {}?",
                             header_line, predicate.column,
                             predicate.op == Predicate::Op::eq ? "equal to" : "at least",
                             predicate.literal);
  t.task.answer_format = "answer: <number>";
  t.task.oracle = [hit](std::span<const Element> es) {
    double count = 0.0;
    for (const auto& e : es) {
      if (e.id < hit->size() && (*hit)[e.id]) count += 1.0;
    }
    return Answer{{std::string(kScalarKey), count}};
  };
  return t;
}

inline TableTask load_table_task(const std::string& csv_path, const Predicate& predicate,
                                 std::size_t sample_rows = kDefaultSampleRows,
                                 std::uint64_t seed = 0) {
  return make_table_task(read_csv(csv_path), predicate, sample_rows, seed);
}

}  // namespace rerank
