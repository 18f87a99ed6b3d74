#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace etide {

/// Ordered key=value pairs. Lines are `key=value`; blank lines and lines
/// starting with '#' are ignored. Duplicate keys are an error.
class KeyValues {
 public:
  static KeyValues parse(std::string_view text, std::string_view origin = "config");
  static KeyValues load(const std::filesystem::path& path);

  void set(const std::string& key, std::string value);
  bool contains(const std::string& key) const { return values_.contains(key); }
  const std::string& at(const std::string& key) const;
  const std::map<std::string, std::string>& items() const { return values_; }
  std::string to_text() const;

 private:
  std::map<std::string, std::string> values_;
};

int parse_int(const std::string& key, const std::string& value);
double parse_double(const std::string& key, const std::string& value);
bool parse_bool(const std::string& key, const std::string& value);
std::vector<int> parse_int_list(const std::string& key, const std::string& value);
std::string format_double(double v);

}  // namespace etide
