#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace crfill {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A key the configuration schema does not know.
class UnknownKeyError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Flat `key = value` text. `#` starts a comment; blank lines are ignored; later keys override earlier ones.
class Config {
 public:
  static Config parse(std::istream& in, const std::string& origin = "<stream>");
  static Config parse_string(const std::string& text);
  static Config load(const std::string& path);

  /// `key=value` override as given on a command line.
  void apply_override(const std::string& assignment);
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  const std::map<std::string, std::string>& entries() const { return values_; }

  /// Sorted `key=value` lines.
  std::string serialize() const;

 private:
  std::map<std::string, std::string> values_;
};

/// Typed reads with error messages that name the key.
int parse_int(const std::string& key, const std::string& value);
std::uint64_t parse_uint(const std::string& key, const std::string& value);
double parse_double(const std::string& key, const std::string& value);
bool parse_switch(const std::string& key, const std::string& value);  // on/off, true/false, 1/0
std::vector<std::string> split_list(const std::string& value);         // comma separated

/// 64-bit FNV-1a.
std::uint64_t fnv1a(const std::string& text);

}  // namespace crfill
