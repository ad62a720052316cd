// Flat `key = value` text format used by run configs and manifest sidecars.
// One pair per line; '#' starts a comment; values may be double-quoted to
// preserve leading/trailing spaces (with \" and \\ escapes inside).
#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "uasr/errors.hpp"

namespace uasr {

using KvMap = std::map<std::string, std::string>;

namespace detail {

inline std::string strip(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

inline KvMap parse_kv_text(const std::string& text, const std::string& origin) {
  KvMap out;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string s = detail::strip(line);
    if (s.empty() || s[0] == '#') continue;
    std::size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    std::string key = detail::strip(s.substr(0, eq));
    std::string raw = detail::strip(s.substr(eq + 1));
    if (key.empty())
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    std::string value;
    if (!raw.empty() && raw[0] == '"') {
      // Quoted value; unescape and require a closing quote.
      bool closed = false;
      for (std::size_t i = 1; i < raw.size(); ++i) {
        char c = raw[i];
        if (c == '\\' && i + 1 < raw.size()) {
          value.push_back(raw[++i]);
        } else if (c == '"') {
          std::string rest = detail::strip(raw.substr(i + 1));
          if (!rest.empty() && rest[0] != '#')
            throw ConfigError(origin + ":" + std::to_string(lineno) +
                              ": trailing characters after closing quote");
          closed = true;
          break;
        } else {
          value.push_back(c);
        }
      }
      if (!closed)
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": unterminated quote");
    } else {
      std::size_t hash = raw.find('#');
      value = detail::strip(hash == std::string::npos ? raw : raw.substr(0, hash));
    }
    if (out.count(key))
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    out[key] = value;
  }
  return out;
}

inline KvMap parse_kv_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_kv_text(buf.str(), path);
}

// Quotes a value when needed so parse_kv_text round-trips it exactly.
inline std::string format_kv_value(const std::string& v) {
  bool needs_quote = v.empty() || v.front() == ' ' || v.back() == ' ' ||
                     v.find('#') != std::string::npos || v.find('"') != std::string::npos ||
                     v.front() == '"';
  if (!needs_quote) return v;
  std::string out = "\"";
  for (char c : v) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

}  // namespace uasr
