#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace s2diff {

/// Flat `key = value` text store shared by system constants files and run
/// configs. Lines starting with `#` are comments; list values are
/// comma-separated. Keys may be dotted (`sampler.num_candidates`).
class KeyValueFile {
 public:
  KeyValueFile() = default;

  static KeyValueFile parse(std::string_view text, const std::string& origin = "<string>");
  static KeyValueFile load(const std::filesystem::path& path);

  bool contains(const std::string& key) const;
  const std::string& raw(const std::string& key) const;

  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_real(const std::string& key) const;
  double get_real(const std::string& key, double fallback) const;
  long long get_int(const std::string& key) const;
  long long get_int(const std::string& key, long long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<double> get_reals(const std::string& key) const;
  std::vector<double> get_reals(const std::string& key, std::vector<double> fallback) const;

  void set(const std::string& key, const std::string& value);
  void erase(const std::string& key);
  /// Keys in lexicographic order.
  std::vector<std::string> keys() const;
  /// Keys under `prefix.` with the prefix stripped.
  KeyValueFile section(const std::string& prefix) const;
  /// Serializes as `key = value` lines in key order.
  std::string to_string() const;

  const std::string& origin() const { return origin_; }

 private:
  std::map<std::string, std::string> entries_;
  std::string origin_ = "<string>";
};

/// Shortest decimal form that parses back to the same double.
std::string format_real(double value);
/// Parses a full token as a double; throws ConfigError naming `key` on failure.
double parse_real(std::string_view token, const std::string& key);

}  // namespace s2diff
