#pragma once

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "s3m/types.hpp"

namespace s3m {

// Flat "key = value" text files (configs, manifests). '#' starts a comment.
class KeyValues {
 public:
  KeyValues() = default;

  static KeyValues parse_text(const std::string& text) {
    KeyValues kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      kv.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return kv;
  }

  void set(const std::string& key, const std::string& value) {
    if (!values_.count(key)) order_.push_back(key);
    values_[key] = value;
  }
  void set_double(const std::string& key, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    set(key, buf);
  }
  void set_int(const std::string& key, long long v) { set(key, std::to_string(v)); }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }
  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : std::stod(it->second);
  }
  long long get_int(const std::string& key, long long fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : std::stoll(it->second);
  }
  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return it->second == "1" || it->second == "true" || it->second == "yes";
  }

  std::string emit() const {
    std::ostringstream os;
    for (const auto& k : order_) os << k << " = " << values_.at(k) << "\n";
    return os.str();
  }

  const std::vector<std::string>& keys() const { return order_; }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
  std::vector<std::string> order_;
};

KeyValues read_kv_file(const std::string& path);
void write_kv_file(const KeyValues& kv, const std::string& path);
std::string read_text_file(const std::string& path);
void write_text_file(const std::string& text, const std::string& path);

}  // namespace s3m
