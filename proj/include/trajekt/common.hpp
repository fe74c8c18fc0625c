#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace trajekt {

// Exit codes used by the CLI: 0 success, 2 config, 3 data, 4 stage
// dependency, 5 numeric failure.
struct error : std::runtime_error {
  explicit error(const std::string& msg) : std::runtime_error(msg) {}
  virtual int exit_code() const { return 1; }
};

struct config_error : error {
  using error::error;
  int exit_code() const override { return 2; }
};

struct data_error : error {
  using error::error;
  int exit_code() const override { return 3; }
};

struct stage_error : error {
  using error::error;
  int exit_code() const override { return 4; }
};

struct numeric_error : error {
  using error::error;
  int exit_code() const override { return 5; }
};

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  size_t start = 0;
  for (size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == sep) {
      out.emplace_back(s.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

inline std::string trim(std::string_view s) {
  size_t a = 0, b = s.size();
  while (a < b && (s[a] == ' ' || s[a] == '\t' || s[a] == '\r')) ++a;
  while (b > a && (s[b - 1] == ' ' || s[b - 1] == '\t' || s[b - 1] == '\r')) --b;
  return std::string(s.substr(a, b - a));
}

// Shortest decimal string that parses back to the same double. Keeps CSV
// artifacts byte-stable across runs.
inline std::string fmt_double(double x) {
  if (x == 0.0) return "0";
  char buf[40];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, x);
    if (std::strtod(buf, nullptr) == x) return buf;
  }
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline uint64_t fnv1a(std::string_view s, uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace trajekt
