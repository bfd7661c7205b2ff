#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace fpcnn::config {

// Flat key=value settings with # comments. Typed getters consume keys;
// whatever is left unconsumed afterwards is an unknown key and gets
// rejected, so typos never silently fall back to defaults.
class KeyValueConfig {
 public:
  KeyValueConfig() = default;
  static KeyValueConfig from_file(const std::string& path);
  static KeyValueConfig from_text(const std::string& text);

  void set(const std::string& key, const std::string& value);  // overrides
  bool has(const std::string& key) const;

  double get_double(const std::string& key, double fallback);
  std::size_t get_size(const std::string& key, std::size_t fallback);
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback);
  bool get_bool(const std::string& key, bool fallback);  // true/false/1/0
  std::string get_string(const std::string& key, const std::string& fallback);

  // Keys never touched by a getter; callers turn these into an error.
  std::vector<std::string> unconsumed() const;

 private:
  const std::string* lookup(const std::string& key);
  std::map<std::string, std::string> values_;
  std::set<std::string> consumed_;
};

// The exact settings a run used, one key=value per line, written next to
// the run's outputs.
void write_resolved(
    const std::vector<std::pair<std::string, std::string>>& entries,
    const std::string& path);

std::string format_double(double v);  // round-trip-exact decimal form

}  // namespace fpcnn::config
