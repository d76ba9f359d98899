#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "juap/common.hpp"

namespace juap {

/// Flat key-value document.
///
/// Text form is one `key = value` per line; `#` starts a comment and a
/// `[section]` header prefixes the following keys with `section.`. Later
/// assignments override earlier ones, so CLI overrides can simply be merged
/// on top of the file.
class Config {
 public:
  Config() = default;

  static Config parse(const std::string& text, const std::string& origin = "<string>");
  static Config load(const fs::path& path);

  void set(const std::string& key, std::string value);
  /// Applies `key=value` strings (as given on a command line).
  void merge_overrides(const std::vector<std::string>& assignments);
  void merge(const Config& other);

  bool contains(const std::string& key) const;
  std::optional<std::string> find(const std::string& key) const;

  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  int64_t get_int(const std::string& key) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  /// Canonical text form (sorted keys), suitable for persisting next to artifacts.
  std::string dump() const;
  const std::map<std::string, std::string>& entries() const { return entries_; }

 private:
  std::map<std::string, std::string> entries_;
};

}  // namespace juap
