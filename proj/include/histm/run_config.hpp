#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>

#include "histm/error.hpp"
#include "histm/io_util.hpp"

namespace histm {

/// Flat `key = value` settings. Values set later (flags) override earlier
/// ones (file). Every typed read records the effective value so the resolved
/// run can be echoed and replayed.
class RunConfig {
 public:
  explicit RunConfig(std::set<std::string> known = {}) : known_(std::move(known)) {}

  /// Lines are `key = value`; blank lines and `#` comments are skipped.
  void parse(std::string_view text, const std::string& source = "run config") {
    std::size_t line_no = 0;
    for (auto line : io::split(text, '\n')) {
      ++line_no;
      line = io::trim(line);
      if (line.empty() || line.front() == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos)
        throw ValidationError(source + " line " + std::to_string(line_no) + ": expected 'key = value'");
      const auto key = io::trim(line.substr(0, eq));
      if (key.empty()) throw ValidationError(source + " line " + std::to_string(line_no) + ": empty key");
      set(std::string(key), std::string(io::trim(line.substr(eq + 1))));
    }
  }

  void load(const std::filesystem::path& path) { parse(io::read_file(path), path.string()); }

  void set(const std::string& key, std::string value) {
    if (!known_.empty() && !known_.count(key)) throw ValidationError("unknown config key '" + key + "'");
    values_[key] = std::move(value);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string str(const std::string& key, const std::string& fallback) {
    auto it = values_.find(key);
    const std::string v = it == values_.end() ? fallback : it->second;
    resolved_[key] = v;
    return v;
  }

  std::string required(const std::string& key) {
    if (!has(key)) throw UsageError("missing required key '" + key + "'");
    return str(key, "");
  }

  std::size_t count(const std::string& key, std::size_t fallback) {
    const std::string v = str(key, std::to_string(fallback));
    std::size_t out = 0;
    if (!io::parse_int(v, out)) throw ValidationError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
    return out;
  }

  double real(const std::string& key, double fallback) {
    const std::string v = str(key, io::format_double(fallback));
    double out = 0;
    if (!io::parse_double(v, out)) throw ValidationError("key '" + key + "': expected a number, got '" + v + "'");
    return out;
  }

  bool flag(const std::string& key, bool fallback) {
    const std::string v = str(key, fallback ? "true" : "false");
    bool out = false;
    if (v == "true" || v == "1" || v == "yes") {
      out = true;
    } else if (v != "false" && v != "0" && v != "no") {
      throw ValidationError("key '" + key + "': expected true or false, got '" + v + "'");
    }
    resolved_[key] = out ? "true" : "false";
    return out;
  }

  /// Effective values of every key read so far, one `key = value` per line.
  std::string dump() const {
    std::string out;
    for (const auto& [k, v] : resolved_) out += k + " = " + v + "\n";
    return out;
  }

 private:
  std::set<std::string> known_;
  std::map<std::string, std::string> values_;
  std::map<std::string, std::string> resolved_;
};

}  // namespace histm
