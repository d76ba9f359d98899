#include "juap/config.hpp"

#include <charconv>
#include <sstream>

namespace juap {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::string unquote(std::string v) {
  if (v.size() >= 2 && ((v.front() == '"' && v.back() == '"') ||
                        (v.front() == '\'' && v.back() == '\''))) {
    return v.substr(1, v.size() - 2);
  }
  return v;
}

}  // namespace

Config Config::parse(const std::string& text, const std::string& origin) {
  Config cfg;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    // Only strip comments outside quotes.
    bool quoted = false;
    for (size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw InputError(origin + ":" + std::to_string(lineno) + ": malformed section header");
      }
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw InputError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    auto key = trim(line.substr(0, eq));
    if (key.empty()) {
      throw InputError(origin + ":" + std::to_string(lineno) + ": empty key");
    }
    if (!section.empty()) key = section + "." + key;
    cfg.entries_[key] = unquote(trim(line.substr(eq + 1)));
  }
  return cfg;
}

Config Config::load(const fs::path& path) {
  if (!fs::exists(path)) throw InputError("config file not found: " + path.string());
  return parse(read_file(path), path.string());
}

void Config::set(const std::string& key, std::string value) { entries_[key] = std::move(value); }

void Config::merge_overrides(const std::vector<std::string>& assignments) {
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw InputError("override must look like key=value: " + a);
    }
    set(trim(a.substr(0, eq)), unquote(trim(a.substr(eq + 1))));
  }
}

void Config::merge(const Config& other) {
  for (const auto& [k, v] : other.entries_) entries_[k] = v;
}

bool Config::contains(const std::string& key) const { return entries_.count(key) > 0; }

std::optional<std::string> Config::find(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

std::string Config::get_string(const std::string& key) const {
  auto v = find(key);
  if (!v) throw InputError("missing config key: " + key);
  return *v;
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
  return find(key).value_or(fallback);
}

double Config::get_double(const std::string& key) const {
  const auto v = get_string(key);
  try {
    size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw InputError("config key " + key + " is not a number: " + v);
  }
}

double Config::get_double(const std::string& key, double fallback) const {
  return contains(key) ? get_double(key) : fallback;
}

int64_t Config::get_int(const std::string& key) const {
  const auto v = get_string(key);
  int64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw InputError("config key " + key + " is not an integer: " + v);
  }
  return out;
}

int64_t Config::get_int(const std::string& key, int64_t fallback) const {
  return contains(key) ? get_int(key) : fallback;
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  auto v = find(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
  if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
  throw InputError("config key " + key + " is not a boolean: " + *v);
}

std::string Config::dump() const {
  std::ostringstream out;
  for (const auto& [k, v] : entries_) out << k << " = " << v << "\n";
  return out.str();
}

}  // namespace juap
