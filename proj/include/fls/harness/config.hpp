#pragma once

// Plain-text experiment configuration:
//
//   # comment
//   n = 100
//   spectrum = "exp:10"
//   lr_grid = [0.01, 0.03, 0.1]
//   methods = [full, diagonal, "block:5"]
//
// Keys map to a scalar or a flat array. Strings may be bare or double-quoted.

#include "fls/core.hpp"

#include <json.hpp>

#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace fls::harness {

class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

class Config {
public:
  struct Item {
    std::string text;
    bool quoted = false;
  };
  struct Value {
    std::vector<Item> items;
    bool array = false;
  };

  static Config parse(const std::string& text) {
    Config c;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      line = strip_comment(line);
      if (trim(line).empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) fail(lineno, "expected 'key = value'");
      const std::string key = trim(line.substr(0, eq));
      if (key.empty()) fail(lineno, "empty key");
      if (c.values_.count(key)) fail(lineno, "duplicate key '" + key + "'");
      c.values_[key] = parse_value(trim(line.substr(eq + 1)), lineno);
    }
    return c;
  }

  static Config load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::vector<std::string> keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_) out.push_back(k);
    return out;
  }

  /// Rejects keys outside `allowed`.
  void check_keys(const std::set<std::string>& allowed) const {
    for (const auto& [k, v] : values_)
      if (!allowed.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }

  void set(const std::string& key, const std::string& raw) { values_[key] = parse_value(raw, 0); }

  double number(const std::string& key, double fallback) const {
    if (!has(key)) return fallback;
    return to_number(key, scalar(key).text);
  }

  Index integer(const std::string& key, Index fallback) const {
    if (!has(key)) return fallback;
    const double d = number(key, 0.0);
    if (d != std::floor(d)) throw ConfigError("config key '" + key + "' must be an integer");
    return static_cast<Index>(d);
  }

  std::string string(const std::string& key, const std::string& fallback) const {
    if (!has(key)) return fallback;
    return scalar(key).text;
  }

  bool boolean(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string s = scalar(key).text;
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError("config key '" + key + "' must be true or false");
  }

  std::vector<double> numbers(const std::string& key, std::vector<double> fallback) const {
    if (!has(key)) return fallback;
    std::vector<double> out;
    for (const auto& it : values_.at(key).items) out.push_back(to_number(key, it.text));
    return out;
  }

  std::vector<std::string> strings(const std::string& key, std::vector<std::string> fallback) const {
    if (!has(key)) return fallback;
    std::vector<std::string> out;
    for (const auto& it : values_.at(key).items) out.push_back(it.text);
    return out;
  }

  /// Canonical text: sorted keys, one per line. Stable input for hashing.
  std::string canonical() const {
    std::ostringstream out;
    for (const auto& [k, v] : values_) {
      out << k << " = ";
      if (v.array) out << '[';
      for (std::size_t i = 0; i < v.items.size(); ++i) {
        if (i) out << ", ";
        if (v.items[i].quoted)
          out << '"' << v.items[i].text << '"';
        else
          out << v.items[i].text;
      }
      if (v.array) out << ']';
      out << '\n';
    }
    return out.str();
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [k, v] : values_) {
      auto item = [&](const Item& it) -> nlohmann::ordered_json {
        if (!it.quoted) {
          try {
            std::size_t pos = 0;
            const double d = std::stod(it.text, &pos);
            if (pos == it.text.size()) return d;
          } catch (const std::exception&) {
          }
        }
        return it.text;
      };
      if (v.array) {
        auto arr = nlohmann::ordered_json::array();
        for (const auto& it : v.items) arr.push_back(item(it));
        j[k] = arr;
      } else {
        j[k] = item(v.items.front());
      }
    }
    return j;
  }

private:
  [[noreturn]] static void fail(int lineno, const std::string& what) {
    throw ConfigError("config line " + std::to_string(lineno) + ": " + what);
  }

  static std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
  }

  static std::string strip_comment(const std::string& s) {
    bool in_quote = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '"') in_quote = !in_quote;
      if (s[i] == '#' && !in_quote) return s.substr(0, i);
    }
    return s;
  }

  static Item parse_item(const std::string& raw, int lineno) {
    const std::string t = trim(raw);
    if (t.empty()) fail(lineno, "empty value");
    if (t.front() == '"') {
      if (t.size() < 2 || t.back() != '"') fail(lineno, "unterminated string");
      return {t.substr(1, t.size() - 2), true};
    }
    return {t, false};
  }

  static Value parse_value(const std::string& raw, int lineno) {
    Value v;
    if (!raw.empty() && raw.front() == '[') {
      if (raw.back() != ']') fail(lineno, "unterminated array");
      v.array = true;
      const std::string body = raw.substr(1, raw.size() - 2);
      std::string cur;
      bool in_quote = false;
      for (char ch : body) {
        if (ch == '"') in_quote = !in_quote;
        if (ch == ',' && !in_quote) {
          v.items.push_back(parse_item(cur, lineno));
          cur.clear();
        } else {
          cur += ch;
        }
      }
      if (!trim(cur).empty()) v.items.push_back(parse_item(cur, lineno));
      return v;
    }
    v.items.push_back(parse_item(raw, lineno));
    return v;
  }

  const Item& scalar(const std::string& key) const {
    const Value& v = values_.at(key);
    if (v.array || v.items.size() != 1) throw ConfigError("config key '" + key + "' must be a scalar");
    return v.items.front();
  }

  static double to_number(const std::string& key, const std::string& s) {
    try {
      std::size_t pos = 0;
      const double d = std::stod(s, &pos);
      if (pos == s.size()) return d;
    } catch (const std::exception&) {
    }
    throw ConfigError("config key '" + key + "': '" + s + "' is not a number");
  }

  std::map<std::string, Value> values_;
};

}  // namespace fls::harness
