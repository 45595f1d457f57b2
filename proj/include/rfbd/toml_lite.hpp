#pragma once

#include <cctype>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace rfbd {

// Minimal TOML reader covering the subset used by experiment configs:
// [table] headers, dotted keys are not supported, values are strings,
// integers, floats, booleans, or flat arrays thereof. Comments start with #.
// The result is a JSON object so both config formats share one code path.
namespace toml_lite {

inline std::string strip(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline std::string strip_comment(const std::string& line) {
  bool in_str = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') in_str = !in_str;
    if (line[i] == '#' && !in_str) return line.substr(0, i);
  }
  return line;
}

inline nlohmann::json parse_scalar(const std::string& raw) {
  const std::string v = strip(raw);
  if (v.empty()) throw std::invalid_argument("toml: empty value");
  if (v.front() == '"') {
    if (v.size() < 2 || v.back() != '"') throw std::invalid_argument("toml: unterminated string");
    return v.substr(1, v.size() - 2);
  }
  if (v == "true") return true;
  if (v == "false") return false;
  // Integer or float.
  try {
    std::size_t used = 0;
    if (v.find_first_of(".eE") == std::string::npos) {
      const long long i = std::stoll(v, &used);
      if (used == v.size()) return i;
    }
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw std::invalid_argument("toml: cannot parse value: " + v);
}

inline nlohmann::json parse_value(const std::string& raw) {
  const std::string v = strip(raw);
  if (!v.empty() && v.front() == '[') {
    if (v.back() != ']') throw std::invalid_argument("toml: unterminated array");
    nlohmann::json arr = nlohmann::json::array();
    std::string body = v.substr(1, v.size() - 2);
    std::string item;
    bool in_str = false;
    for (char c : body) {
      if (c == '"') in_str = !in_str;
      if (c == ',' && !in_str) {
        if (!strip(item).empty()) arr.push_back(parse_scalar(item));
        item.clear();
      } else {
        item += c;
      }
    }
    if (!strip(item).empty()) arr.push_back(parse_scalar(item));
    return arr;
  }
  return parse_scalar(v);
}

inline nlohmann::json parse(const std::string& text) {
  nlohmann::json root = nlohmann::json::object();
  nlohmann::json* table = &root;
  std::size_t pos = 0;
  int line_no = 0;
  while (pos <= text.size()) {
    const std::size_t end = text.find('\n', pos);
    std::string line = text.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
    pos = end == std::string::npos ? text.size() + 1 : end + 1;
    ++line_no;
    line = strip(strip_comment(line));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::invalid_argument("toml: bad table header at line " + std::to_string(line_no));
      const std::string name = strip(line.substr(1, line.size() - 2));
      if (name.empty())
        throw std::invalid_argument("toml: empty table name at line " + std::to_string(line_no));
      table = &root[name];
      if (table->is_null()) *table = nlohmann::json::object();
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("toml: expected key = value at line " + std::to_string(line_no));
    const std::string key = strip(line.substr(0, eq));
    if (key.empty())
      throw std::invalid_argument("toml: empty key at line " + std::to_string(line_no));
    (*table)[key] = parse_value(line.substr(eq + 1));
  }
  return root;
}

}  // namespace toml_lite
}  // namespace rfbd
