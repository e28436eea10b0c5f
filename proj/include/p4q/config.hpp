// SPDX-License-Identifier: Apache-2.0
#pragma once

// Flat `key = value` text files. '#' starts a comment, blank lines are
// ignored, and later assignments override earlier ones.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace p4q {

class KeyValues {
 public:
  static KeyValues parse(const std::string& text);
  static KeyValues load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, double value);
  void set(const std::string& key, long long value);
  /// Copies every entry of `other` over this one.
  void merge(const KeyValues& other);

  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  std::optional<std::string> get(const std::string& key) const;
  /// Throws FormatError when the key is missing.
  std::string require(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  double require_double(const std::string& key) const;
  long long require_int(const std::string& key) const;

  const std::map<std::string, std::string>& entries() const { return values_; }

  /// Sorted `key = value` lines.
  std::string str() const;
  void save(const std::filesystem::path& path) const;

 private:
  std::map<std::string, std::string> values_;
};

/// Full-string numeric parsing; throws FormatError naming `what`.
double parse_double(const std::string& s, const std::string& what);
long long parse_int(const std::string& s, const std::string& what);

/// Splits on any of `seps`, dropping empty pieces.
std::vector<std::string> split(const std::string& s, const std::string& seps);
std::string trim(const std::string& s);

}  // namespace p4q
