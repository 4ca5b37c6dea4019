#pragma once

#include <charconv>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mprcnn/binary_io.hpp"

namespace mprcnn {

/// Flat `key = value` text with `#` comments. Keys are kept sorted so the
/// written form is canonical.
class KeyValues {
 public:
  static KeyValues parse(std::istream& is, const std::string& origin = "<stream>") {
    KeyValues kv;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string t = trim(line);
      if (t.empty() || t.front() == '[') continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) {
        throw FormatError(origin + ":" + std::to_string(lineno) + ": expected key = value");
      }
      const std::string key = trim(t.substr(0, eq));
      if (key.empty()) throw FormatError(origin + ":" + std::to_string(lineno) + ": empty key");
      kv.values_[key] = trim(t.substr(eq + 1));
    }
    return kv;
  }

  static KeyValues load(const std::string& path) {
    auto is = io::open_in(path, std::ios::in);
    return parse(is, path);
  }

  void save(const std::string& path) const {
    auto os = io::open_out(path, std::ios::out);
    os << str();
  }

  [[nodiscard]] std::string str() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
    return os.str();
  }

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  [[nodiscard]] bool has(const std::string& key) const { return values_.count(key) != 0; }
  [[nodiscard]] const std::map<std::string, std::string>& values() const { return values_; }

  template <class T>
  [[nodiscard]] T get(const std::string& key, T fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return convert<T>(key, it->second);
  }

  template <class T>
  [[nodiscard]] std::vector<T> get_list(const std::string& key, std::vector<T> fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<T> out;
    std::stringstream ss(it->second);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(convert<T>(key, trim(item)));
    return out;
  }

 private:
  static std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
  }

  template <class T>
  static T convert(const std::string& key, const std::string& text) {
    if constexpr (std::is_same_v<T, std::string>) {
      return text;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (text == "1" || text == "true" || text == "yes" || text == "on") return true;
      if (text == "0" || text == "false" || text == "no" || text == "off") return false;
      throw FormatError("key '" + key + "': expected boolean, got '" + text + "'");
    } else {
      T v{};
      const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
      if (ec != std::errc{} || ptr != text.data() + text.size()) {
        throw FormatError("key '" + key + "': cannot parse '" + text + "'");
      }
      return v;
    }
  }

  std::map<std::string, std::string> values_;
};

/// Shortest decimal text that parses back to exactly `v`.
inline std::string format_exact(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace mprcnn
