// Flat key=value run configuration with dotted keys. '#' starts a comment,
// blank lines are skipped, later assignments win. Commands reject keys they
// do not understand so typos fail loudly.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>

namespace tivode {

class RunConfig {
 public:
  static RunConfig parse_text(const std::string& text);
  static RunConfig parse_file(const std::filesystem::path& path);

  bool has(const std::string& key) const { return kv_.count(key) != 0; }
  void set(const std::string& key, std::string value) { kv_[key] = std::move(value); }

  // Typed getters fall back to the default when the key is absent and throw
  // InputError on a malformed value.
  std::string get_string(const std::string& key, const std::string& def) const;
  double get_double(const std::string& key, double def) const;
  std::size_t get_size(const std::string& key, std::size_t def) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t def) const;
  bool get_bool(const std::string& key, bool def) const;  // 1/0/true/false

  // Throws InputError naming every key outside the allowed set.
  void check_known(std::span<const std::string> known) const;

  // Sorted key=value lines, one per entry.
  std::string text() const;
  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

}  // namespace tivode
