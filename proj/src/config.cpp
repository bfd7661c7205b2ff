#include "fpcnn/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "fpcnn/error.hpp"

namespace fpcnn::config {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

}  // namespace

KeyValueConfig KeyValueConfig::from_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::file_not_found, "cannot open: " + path);
  std::ostringstream text;
  text << in.rdbuf();
  return from_text(text.str());
}

KeyValueConfig KeyValueConfig::from_text(const std::string& text) {
  KeyValueConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorCode::invalid_argument,
           "config line " + std::to_string(lineno) + " has no '=': " + line);
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || key.find_first_of(" \t") != std::string::npos) {
      fail(ErrorCode::invalid_argument,
           "bad config key on line " + std::to_string(lineno) + ": " + line);
    }
    if (cfg.values_.count(key) != 0) {
      fail(ErrorCode::invalid_argument, "duplicate config key: " + key);
    }
    cfg.values_[key] = value;
  }
  return cfg;
}

void KeyValueConfig::set(const std::string& key, const std::string& value) {
  values_[key] = value;
}

bool KeyValueConfig::has(const std::string& key) const {
  return values_.count(key) != 0;
}

const std::string* KeyValueConfig::lookup(const std::string& key) {
  const auto it = values_.find(key);
  if (it == values_.end()) return nullptr;
  consumed_.insert(key);
  return &it->second;
}

double KeyValueConfig::get_double(const std::string& key, double fallback) {
  const std::string* raw = lookup(key);
  if (raw == nullptr) return fallback;
  try {
    std::size_t used = 0;
    const double v = std::stod(*raw, &used);
    if (used != raw->size()) throw std::invalid_argument(*raw);
    return v;
  } catch (const std::exception&) {
    fail(ErrorCode::invalid_argument, "bad number for " + key + ": " + *raw);
  }
}

std::uint64_t KeyValueConfig::get_u64(const std::string& key,
                                      std::uint64_t fallback) {
  const std::string* raw = lookup(key);
  if (raw == nullptr) return fallback;
  try {
    std::size_t used = 0;
    if (!raw->empty() && (*raw)[0] == '-') throw std::invalid_argument(*raw);
    const std::uint64_t v = std::stoull(*raw, &used);
    if (used != raw->size()) throw std::invalid_argument(*raw);
    return v;
  } catch (const std::exception&) {
    fail(ErrorCode::invalid_argument, "bad integer for " + key + ": " + *raw);
  }
}

std::size_t KeyValueConfig::get_size(const std::string& key,
                                     std::size_t fallback) {
  return static_cast<std::size_t>(get_u64(key, fallback));
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) {
  const std::string* raw = lookup(key);
  if (raw == nullptr) return fallback;
  if (*raw == "true" || *raw == "1") return true;
  if (*raw == "false" || *raw == "0") return false;
  fail(ErrorCode::invalid_argument, "bad boolean for " + key + ": " + *raw);
}

std::string KeyValueConfig::get_string(const std::string& key,
                                       const std::string& fallback) {
  const std::string* raw = lookup(key);
  return raw == nullptr ? fallback : *raw;
}

std::vector<std::string> KeyValueConfig::unconsumed() const {
  std::vector<std::string> out;
  for (const auto& [key, value] : values_) {
    if (consumed_.count(key) == 0) out.push_back(key);
  }
  return out;
}

void write_resolved(
    const std::vector<std::pair<std::string, std::string>>& entries,
    const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::io_failure, "cannot open for write: " + path);
  for (const auto& [key, value] : entries) {
    out << key << " = " << value << '\n';
  }
  if (!out.flush()) fail(ErrorCode::io_failure, "write failed: " + path);
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace fpcnn::config
