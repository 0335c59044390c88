#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

namespace clear {

// Class tokens emitted for literals. They contain '<'/'>' so they can never
// collide with a token lexed out of source text (the lexer splits brackets
// into single characters).
inline constexpr const char* kNumToken = "<NUM>";
inline constexpr const char* kStrToken = "<STR>";

namespace detail {

inline bool is_ident_start(char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_' || c == '$';
}
inline bool is_ident_char(char c) { return is_ident_start(c) || (c >= '0' && c <= '9'); }
inline bool is_digit(char c) { return c >= '0' && c <= '9'; }
inline bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

// Multi-character operators, longest first within each leading character.
inline const std::array<std::string_view, 24>& multi_char_ops() {
  static const std::array<std::string_view, 24> ops = {
      ">>=", "<<=", "**=", "==", "!=", "<=", ">=", "&&", "||", "+=", "-=", "*=",
      "/=",  "%=",  "|=",  "&=", "^=", "=>", "->", "++", "--", "<<", ">>", "**"};
  return ops;
}

}  // namespace detail

// Total, deterministic lexer for contract-like source text. Comments and
// whitespace are dropped, numeric and string literals collapse to class
// tokens, identifiers and operators pass through.
inline std::vector<std::string> tokenize(std::string_view source) {
  using namespace detail;
  std::vector<std::string> out;
  std::size_t i = 0;
  const std::size_t n = source.size();
  while (i < n) {
    const char c = source[i];
    if (is_space(c)) {
      ++i;
      continue;
    }
    // comments
    if (c == '/' && i + 1 < n && source[i + 1] == '/') {
      i += 2;
      while (i < n && source[i] != '\n') ++i;
      continue;
    }
    if (c == '/' && i + 1 < n && source[i + 1] == '*') {
      i += 2;
      while (i + 1 < n && !(source[i] == '*' && source[i + 1] == '/')) ++i;
      i = (i + 1 < n) ? i + 2 : n;  // unterminated comment swallows the rest
      continue;
    }
    // string literals
    if (c == '"' || c == '\'') {
      const char quote = c;
      ++i;
      while (i < n && source[i] != quote) {
        if (source[i] == '\\' && i + 1 < n) ++i;
        ++i;
      }
      if (i < n) ++i;  // closing quote
      out.emplace_back(kStrToken);
      continue;
    }
    // numeric literals: a leading digit absorbs the alphanumeric tail,
    // which covers decimal, hex (0x1F) and exponent (1e18) forms
    if (is_digit(c)) {
      ++i;
      while (i < n && (is_digit(source[i]) || is_ident_char(source[i]))) ++i;
      out.emplace_back(kNumToken);
      continue;
    }
    if (is_ident_start(c)) {
      const std::size_t start = i;
      ++i;
      while (i < n && is_ident_char(source[i])) ++i;
      out.emplace_back(source.substr(start, i - start));
      continue;
    }
    // multi-character operators, longest match
    bool matched = false;
    for (std::string_view op : multi_char_ops()) {
      if (source.substr(i, op.size()) == op) {
        out.emplace_back(op);
        i += op.size();
        matched = true;
        break;
      }
    }
    if (matched) continue;
    // anything else (punctuation, unknown bytes) is a single-character token
    out.emplace_back(1, c);
    ++i;
  }
  return out;
}

}  // namespace clear
