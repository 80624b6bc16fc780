#include "tivode/config.hpp"

#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "tivode/errors.hpp"

namespace tivode {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

RunConfig RunConfig::parse_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw InputError("config line " + std::to_string(lineno) + " is not key=value: " + line);
    }
    cfg.kv_[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return cfg;
}

RunConfig RunConfig::parse_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file: " + path.string());
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_text(buf.str());
}

std::string RunConfig::get_string(const std::string& key, const std::string& def) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? def : it->second;
}

double RunConfig::get_double(const std::string& key, double def) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return def;
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(it->second.c_str(), &end);
  if (errno != 0 || end == it->second.c_str() || *end != '\0') {
    throw InputError("config key " + key + " has a non-numeric value: " + it->second);
  }
  return v;
}

std::size_t RunConfig::get_size(const std::string& key, std::size_t def) const {
  return static_cast<std::size_t>(get_u64(key, def));
}

std::uint64_t RunConfig::get_u64(const std::string& key, std::uint64_t def) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return def;
  errno = 0;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(it->second.c_str(), &end, 10);
  if (errno != 0 || end == it->second.c_str() || *end != '\0' ||
      it->second.find('-') != std::string::npos) {
    throw InputError("config key " + key + " has a non-integer value: " + it->second);
  }
  return v;
}

bool RunConfig::get_bool(const std::string& key, bool def) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return def;
  const std::string& v = it->second;
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw InputError("config key " + key + " has a non-boolean value: " + v);
}

void RunConfig::check_known(std::span<const std::string> known) const {
  std::string bad;
  for (const auto& [k, v] : kv_) {
    bool ok = false;
    for (const auto& allowed : known) {
      if (k == allowed) {
        ok = true;
        break;
      }
    }
    if (!ok) bad += (bad.empty() ? "" : ", ") + k;
  }
  if (!bad.empty()) throw InputError("unknown config keys: " + bad);
}

std::string RunConfig::text() const {
  std::string out;
  for (const auto& [k, v] : kv_) out += k + "=" + v + "\n";
  return out;
}

}  // namespace tivode
