#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace crt {

/// Flat `key = value` configuration. Lines starting with '#' are comments;
/// `include = path` pulls in another file (relative to the including file),
/// whose keys may be overridden by later lines.
class KeyValueConfig {
public:
  static KeyValueConfig load(const std::filesystem::path& path);
  static KeyValueConfig parse(std::string_view text,
                              const std::filesystem::path& base_dir = ".");

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::optional<std::string> get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  long get_int(const std::string& key, long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<std::string> get_list(const std::string& key) const;

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  const std::map<std::string, std::string>& values() const { return values_; }

  /// Keys that were never read through a getter; used to flag typos.
  std::vector<std::string> unknown_keys(const std::vector<std::string>& allowed) const;

  /// Canonical `key=value\n` rendering in key order.
  std::string canonical() const;

private:
  void parse_into(std::string_view text, const std::filesystem::path& base_dir, int depth);
  std::map<std::string, std::string> values_;
};

std::vector<std::string> split(std::string_view text, char sep);
std::string trim(std::string_view text);

/// 64-bit FNV-1a; used for spec hashes and report manifests.
std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

} // namespace crt
