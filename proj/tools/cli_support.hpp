#pragma once

#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include <coopsurface/coopsurface.hpp>

namespace cli {

namespace fs = std::filesystem;
using namespace coopsurface;

// Bad configuration (exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct KeySpec {
  std::string name;
  std::string value;  // default
  std::string help;
};

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(trim(item));
  if (!s.empty() && s.back() == sep) out.push_back({});
  return out;
}

// Resolved key/value configuration of one subcommand: defaults, then the
// config file, then command-line flags.
class Config {
 public:
  Config(std::string command, const std::vector<KeySpec>& keys) : command_(std::move(command)) {
    for (const auto& k : keys) values_[k.name] = k.value;
  }

  const std::string& command() const { return command_; }
  const std::map<std::string, std::string>& values() const { return values_; }

  void set(const std::string& key, const std::string& value, const std::string& origin) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError(origin + ": unknown key '" + key + "' for '" + command_ + "'");
    it->second = trim(value);
  }

  // key = value lines; '#' starts a comment.
  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    std::string line;
    int n = 0;
    std::map<std::string, int> seen;
    while (std::getline(in, line)) {
      ++n;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      const std::string where = path + ":" + std::to_string(n);
      if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
      const std::string key = trim(line.substr(0, eq));
      if (seen.count(key)) throw ConfigError(where + ": duplicate key '" + key + "'");
      seen[key] = n;
      set(key, line.substr(eq + 1), where);
    }
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw std::logic_error("undeclared key " + key);
    return it->second;
  }

  double num(const std::string& key) const { return parse_double(key, str(key)); }

  long integer(const std::string& key, long lo = std::numeric_limits<long>::min(),
               long hi = std::numeric_limits<long>::max()) const {
    const std::string& s = str(key);
    char* end = nullptr;
    errno = 0;
    const long v = std::strtol(s.c_str(), &end, 10);
    if (s.empty() || *end != '\0' || errno != 0) throw ConfigError(key + ": '" + s + "' is not an integer");
    if (v < lo || v > hi)
      throw ConfigError(key + ": " + s + " outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    return v;
  }

  std::uint64_t seed(const std::string& key = "seed") const {
    const std::string& s = str(key);
    char* end = nullptr;
    errno = 0;
    const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
    if (s.empty() || s[0] == '-' || *end != '\0' || errno != 0)
      throw ConfigError(key + ": '" + s + "' is not a non-negative integer");
    return v;
  }

  bool flag(const std::string& key) const {
    const std::string& s = str(key);
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError(key + ": '" + s + "' is not a boolean");
  }

  std::vector<double> list(const std::string& key) const {
    std::vector<double> out;
    const std::string& s = str(key);
    if (trim(s).empty()) return out;
    for (const auto& item : split(s, ',')) out.push_back(parse_double(key, item));
    return out;
  }

  std::vector<std::string> words(const std::string& key) const {
    std::vector<std::string> out;
    const std::string& s = str(key);
    if (trim(s).empty()) return out;
    for (const auto& item : split(s, ','))
      if (!item.empty()) out.push_back(item);
    return out;
  }

  static double parse_double(const std::string& key, const std::string& s) {
    // physical inputs are plain numbers in lambda / Gamma0 units
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || *end != '\0' || errno != 0 || !std::isfinite(v))
      throw ConfigError(key + ": '" + s + "' is not a finite number (units are lambda and Gamma0)");
    return v;
  }

 private:
  std::string command_;
  std::map<std::string, std::string> values_;
};

// "square:0.8", "triangular:0.6", "honeycomb:0.9"
inline Lattice parse_lattice(const std::string& spec) {
  const auto colon = spec.find(':');
  if (colon == std::string::npos) throw ConfigError("lattice: expected kind:spacing, got '" + spec + "'");
  const std::string kind = trim(spec.substr(0, colon));
  const double a = Config::parse_double("lattice", trim(spec.substr(colon + 1)));
  LatticeKind k;
  if (kind == "square") k = LatticeKind::Square;
  else if (kind == "triangular") k = LatticeKind::Triangular;
  else if (kind == "honeycomb") k = LatticeKind::Honeycomb;
  else throw ConfigError("lattice: unknown kind '" + kind + "'");
  try {
    return make_lattice(k, a);
  } catch (const Error& e) {
    throw ConfigError(std::string("lattice: ") + e.what());
  }
}

inline CVec2 parse_polarization(const Config& c, const std::string& key) {
  const auto v = c.list(key);
  if (v.size() != 2) throw ConfigError(key + ": expected two components 'Ex,Ey'");
  if (v[0] == 0.0 && v[1] == 0.0) throw ConfigError(key + ": input polarization is zero");
  return CVec2(v[0], v[1]);
}

inline ZeemanField parse_field(const Config& c, const std::string& prefix = "muB") {
  return ZeemanField(c.num(prefix + "x"), c.num(prefix + "y"), c.num(prefix + "z"));
}

inline ScanAxis parse_axis(const Config& c, const std::string& name, const std::string& prefix) {
  ScanAxis a{name, c.num(prefix + "_min"), c.num(prefix + "_max"),
             static_cast<int>(c.integer(prefix + "_count", 1, 100000))};
  try {
    a.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return a;
}

// ---------------------------------------------------------------------------
// Output

inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

class CsvWriter {
 public:
  CsvWriter(const fs::path& path, const std::vector<std::string>& header) : out_(path, std::ios::binary) {
    if (!out_) throw Error(ErrorKind::InvalidParameter, "cannot write " + path.string());
    row_strings(header);
  }
  void row(const std::vector<double>& v) {
    std::vector<std::string> s;
    s.reserve(v.size());
    for (double x : v) s.push_back(fmt(x));
    row_strings(s);
  }
  void row_strings(const std::vector<std::string>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) out_ << (i ? "," : "") << v[i];
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::InvalidParameter, "cannot write " + path.string());
  out << text;
}

inline void write_json(const fs::path& path, const nlohmann::ordered_json& j) { write_text(path, j.dump(2) + "\n"); }

inline std::string fnv1a64(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::uint64_t h = 1469598103934665603ull;
  char c;
  while (in.get(c)) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Keys that change scheduling only and stay out of the manifest.
inline bool runtime_only(const std::string& key) { return key == "threads" || key == "out"; }

// run.cfg re-creates the job: coopsurface <command> --config run.cfg --out <dir>
inline void write_manifest(const fs::path& dir, const Config& cfg, const std::vector<std::string>& outputs,
                           int exit_code, const std::string& message) {
  std::ostringstream rc;
  rc << "# coopsurface " << kVersion << " " << cfg.command() << "\n";
  nlohmann::ordered_json conf = nlohmann::ordered_json::object();
  for (const auto& [k, v] : cfg.values()) {
    if (runtime_only(k)) continue;
    conf[k] = v;
    rc << k << " = " << v << "\n";
  }
  write_text(dir / "run.cfg", rc.str());

  nlohmann::ordered_json m;
  m["tool"] = "coopsurface";
  m["version"] = std::string(kVersion);
  m["command"] = cfg.command();
  m["seed"] = cfg.values().count("seed") ? cfg.str("seed") : "none";
  m["units"] = "lengths in lambda, rates and detunings in Gamma0";
  m["rerun"] = "coopsurface " + cfg.command() + " --config run.cfg";
  m["config"] = conf;
  m["exit_code"] = exit_code;
  m["status"] = exit_code == 0 ? "ok" : message;
  nlohmann::ordered_json files = nlohmann::ordered_json::array();
  for (const auto& f : outputs) {
    nlohmann::ordered_json e;
    e["file"] = f;
    e["bytes"] = fs::file_size(dir / f);
    e["fnv1a64"] = fnv1a64(dir / f);
    files.push_back(e);
  }
  m["outputs"] = files;
  write_json(dir / "manifest.json", m);
}

}  // namespace cli
