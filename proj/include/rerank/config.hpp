#pragma once

// Config files. JSON is parsed directly; anything else is read as a small
// TOML subset: [section] / [a.b] headers, key = value with basic or literal
// strings, integers, floats, booleans and (possibly multi-line) arrays of
// those. Both end up as the same JSON tree.

#include <cctype>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

#include "json.hpp"
#include "rerank/error.hpp"

namespace rerank::config {

namespace detail {

class TomlParser {
 public:
  explicit TomlParser(std::string_view text) : text_(text) {}

  nlohmann::json parse() {
    nlohmann::json root = nlohmann::json::object();
    nlohmann::json* table = &root;
    while (!at_end()) {
      skip_blank_and_comments();
      if (at_end()) break;
      if (peek() == '[') {
        ++pos_;
        skip_inline_space();
        std::string path;
        while (!at_end() && peek() != ']' && peek() != '\n') path += text_[pos_++];
        expect(']');
        table = &root;
        for (const auto& part : split_key(path)) {
          auto& next = (*table)[part];
          if (next.is_null()) next = nlohmann::json::object();
          if (!next.is_object()) fail("key '" + part + "' is not a table");
          table = &next;
        }
        end_of_line();
        continue;
      }
      std::string key;
      while (!at_end() && peek() != '=' && peek() != '\n') key += text_[pos_++];
      expect('=');
      const auto parts = split_key(key);
      nlohmann::json* target = table;
      for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        auto& next = (*target)[parts[i]];
        if (next.is_null()) next = nlohmann::json::object();
        target = &next;
      }
      skip_inline_space();
      (*target)[parts.back()] = value();
      end_of_line();
    }
    return root;
  }

 private:
  bool at_end() const { return pos_ >= text_.size(); }
  char peek() const { return text_[pos_]; }

  [[noreturn]] void fail(const std::string& what) const {
    std::size_t line = 1;
    for (std::size_t i = 0; i < pos_ && i < text_.size(); ++i) line += text_[i] == '\n';
    throw Error(ErrorKind::io, "invalid_config", "line " + std::to_string(line) + ": " + what,
                line);
  }

  void expect(char c) {
    if (at_end() || peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }

  void skip_inline_space() {
    while (!at_end() && (peek() == ' ' || peek() == '\t')) ++pos_;
  }

  void skip_comment() {
    if (!at_end() && peek() == '#') {
      while (!at_end() && peek() != '\n') ++pos_;
    }
  }

  void skip_blank_and_comments() {
    for (;;) {
      while (!at_end() && std::isspace(static_cast<unsigned char>(peek()))) ++pos_;
      if (!at_end() && peek() == '#') {
        skip_comment();
        continue;
      }
      return;
    }
  }

  void end_of_line() {
    skip_inline_space();
    skip_comment();
    if (!at_end() && peek() == '\r') ++pos_;
    if (!at_end() && peek() != '\n') fail("unexpected trailing characters");
    if (!at_end()) ++pos_;
  }

  std::vector<std::string> split_key(std::string_view raw) const {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : raw) {
      if (c == '.') {
        parts.push_back(trimmed(cur));
        cur.clear();
      } else {
        cur += c;
      }
    }
    parts.push_back(trimmed(cur));
    for (auto& p : parts) {
      if (p.size() >= 2 && (p.front() == '"' || p.front() == '\'') && p.back() == p.front()) {
        p = p.substr(1, p.size() - 2);
      }
      if (p.empty()) fail("empty key");
    }
    return parts;
  }

  static std::string trimmed(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return std::string(s);
  }

  nlohmann::json value() {
    if (at_end()) fail("missing value");
    const char c = peek();
    if (c == '"') return basic_string();
    if (c == '\'') return literal_string();
    if (c == '[') return array();
    std::string raw;
    while (!at_end() && peek() != ',' && peek() != ']' && peek() != '\n' && peek() != '#' &&
           peek() != '\r') {
      raw += text_[pos_++];
    }
    raw = trimmed(raw);
    if (raw == "true") return true;
    if (raw == "false") return false;
    std::string digits;
    for (char d : raw) {
      if (d != '_') digits += d;
    }
    if (digits.empty()) fail("missing value");
    try {
      std::size_t used = 0;
      if (digits.find_first_of(".eE") == std::string::npos || digits.rfind("0x", 0) == 0) {
        const long long v = std::stoll(digits, &used, 0);
        if (used == digits.size()) return v;
      } else {
        const double v = std::stod(digits, &used);
        if (used == digits.size()) return v;
      }
    } catch (const std::exception&) {
    }
    fail("cannot parse value '" + raw + "'");
  }

  nlohmann::json basic_string() {
    ++pos_;
    std::string out;
    while (!at_end() && peek() != '"') {
      char c = text_[pos_++];
      if (c == '\n') fail("newline in string");
      if (c == '\\') {
        if (at_end()) fail("dangling escape");
        const char e = text_[pos_++];
        switch (e) {
          case 'n': c = '\n'; break;
          case 't': c = '\t'; break;
          case 'r': c = '\r'; break;
          case '"': c = '"'; break;
          case '\\': c = '\\'; break;
          default: fail(std::string("unsupported escape \\") + e);
        }
      }
      out += c;
    }
    expect('"');
    return out;
  }

  nlohmann::json literal_string() {
    ++pos_;
    std::string out;
    while (!at_end() && peek() != '\'') {
      if (peek() == '\n') fail("newline in string");
      out += text_[pos_++];
    }
    expect('\'');
    return out;
  }

  nlohmann::json array() {
    ++pos_;
    nlohmann::json arr = nlohmann::json::array();
    for (;;) {
      skip_blank_and_comments();
      if (at_end()) fail("unterminated array");
      if (peek() == ']') {
        ++pos_;
        return arr;
      }
      arr.push_back(value());
      skip_blank_and_comments();
      if (!at_end() && peek() == ',') {
        ++pos_;
        continue;
      }
      skip_blank_and_comments();
      expect(']');
      return arr;
    }
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline nlohmann::json parse_toml(std::string_view text) { return detail::TomlParser(text).parse(); }

inline nlohmann::json parse_json(std::string_view text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::io, "invalid_config", e.what());
  }
}

inline nlohmann::json load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "missing_config", path);
  std::ostringstream ss;
  ss << in.rdbuf();
  const auto text = ss.str();
  const bool is_json = path.size() >= 5 && path.compare(path.size() - 5, 5, ".json") == 0;
  return is_json ? parse_json(text) : parse_toml(text);
}

}  // namespace rerank::config
