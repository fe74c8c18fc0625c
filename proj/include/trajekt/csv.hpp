#pragma once

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "trajekt/common.hpp"

namespace trajekt {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int col(const std::string& name) const {
    for (size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  }

  int require_col(const std::string& name, const std::string& file) const {
    int c = col(name);
    if (c < 0) throw data_error(file + ": missing column '" + name + "'");
    return c;
  }
};

// Plain comma-separated values; fields in our schemas never embed commas or
// quotes, so no quoting dialect is needed.
inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open " + path);
  CsvTable t;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (first) {
      t.header = split(line, ',');
      first = false;
      continue;
    }
    if (line.empty()) continue;
    t.rows.push_back(split(line, ','));
  }
  if (first) throw data_error(path + ": empty file (no header)");
  return t;
}

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header)
      : out_(path) {
    if (!out_) throw data_error("cannot write " + path);
    write_row_raw(header);
  }

  void write_row(const std::vector<std::string>& fields) { write_row_raw(fields); }

 private:
  void write_row_raw(const std::vector<std::string>& fields) {
    for (size_t i = 0; i < fields.size(); ++i) {
      if (i) out_ << ',';
      out_ << fields[i];
    }
    out_ << '\n';
  }
  std::ofstream out_;
};

inline double parse_double(const std::string& s, const std::string& context) {
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0' || !std::isfinite(v))
    throw data_error(context + ": bad numeric value '" + s + "'");
  return v;
}

inline int64_t parse_int(const std::string& s, const std::string& context) {
  char* end = nullptr;
  long long v = std::strtoll(s.c_str(), &end, 10);
  if (end == s.c_str() || *end != '\0')
    throw data_error(context + ": bad integer '" + s + "'");
  return v;
}

}  // namespace trajekt
