#ifndef CRVKIT_CSV_HPP
#define CRVKIT_CSV_HPP

// CSV ingestion and serialization. Dialect: comma separator, first row is the
// header, "." decimal point, UTF-8 passthrough, RFC-4180 quoting. Header names
// must be nonempty and unique. A column is numeric when every nonempty cell
// parses fully as a double; empty cells in a numeric column become NaN and are
// written back as empty cells, so write/read round-trips preserve tables.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "crvkit/error.hpp"
#include "crvkit/table.hpp"

namespace crvkit {

// Fixed significant digits: 17 round-trips doubles exactly (data files, JSON
// reports), 10 keeps tabular output readable (human tables).
inline std::string format_number(double v, int digits) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
  return buf;
}

namespace detail {

inline bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  const char* begin = s.c_str();
  char* end = nullptr;
  out = std::strtod(begin, &end);
  return end == begin + s.size();
}

inline std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"' && field.empty()) {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(field));
      field.clear();
    } else {
      field += c;
    }
  }
  if (quoted)
    throw Error(ErrorCode::DataError,
                "unterminated quote on line " + std::to_string(line_no));
  out.push_back(std::move(field));
  return out;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

// Core reader; `source` names the input in diagnostics when nonempty.
inline Table read_csv_stream(std::istream& in, const std::string& source) {
  const std::string where = source.empty() ? "" : " of '" + source + "'";
  std::vector<std::string> names;
  std::vector<std::vector<std::string>> cells;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1 && line.size() >= 3 && line.compare(0, 3, "\xef\xbb\xbf") == 0)
      line.erase(0, 3);
    if (line_no == 1) {
      names = split_csv_line(line, line_no);
      for (std::size_t i = 0; i < names.size(); ++i) {
        if (names[i].empty())
          throw Error(ErrorCode::DataError, "empty column name in the header" + where);
        for (std::size_t j = i + 1; j < names.size(); ++j)
          if (names[i] == names[j])
            throw Error(ErrorCode::DataError,
                        "duplicate column '" + names[i] + "' in the header" + where);
      }
      cells.resize(names.size());
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> fields = split_csv_line(line, line_no);
    if (fields.size() != names.size())
      throw Error(ErrorCode::DataError, "line " + std::to_string(line_no) + where + " has " +
                                            std::to_string(fields.size()) + " fields, header has " +
                                            std::to_string(names.size()));
    for (std::size_t i = 0; i < fields.size(); ++i) cells[i].push_back(std::move(fields[i]));
  }
  if (names.empty()) {
    if (source.empty()) throw Error(ErrorCode::DataError, "empty CSV input");
    throw Error(ErrorCode::DataError, "data file '" + source + "' has no header");
  }

  Table t;
  for (std::size_t i = 0; i < names.size(); ++i) {
    bool numeric = true;
    std::vector<double> nums;
    nums.reserve(cells[i].size());
    for (const std::string& s : cells[i]) {
      double v = std::numeric_limits<double>::quiet_NaN();
      if (!s.empty() && !parse_double(s, v)) {
        numeric = false;
        break;
      }
      nums.push_back(v);
    }
    if (numeric)
      t.add_numeric(names[i], std::move(nums));
    else
      t.add_text(names[i], std::move(cells[i]));
  }
  return t;
}

}  // namespace detail

inline Table read_csv(std::istream& in) { return detail::read_csv_stream(in, ""); }

inline Table read_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::DataError, "cannot open data file '" + path + "'");
  return detail::read_csv_stream(in, path);
}

inline void write_csv(std::ostream& out, const Table& t, int digits = 17) {
  const auto& names = t.names();
  for (std::size_t j = 0; j < names.size(); ++j) {
    if (j) out << ',';
    out << detail::csv_escape(names[j]);
  }
  out << '\n';
  for (std::size_t i = 0; i < t.nrows(); ++i) {
    for (std::size_t j = 0; j < names.size(); ++j) {
      if (j) out << ',';
      const Column& c = t.col(j);
      if (c.type == Column::Type::Numeric) {
        if (!std::isnan(c.num[i])) out << format_number(c.num[i], digits);
      } else {
        out << detail::csv_escape(c.text[i]);
      }
    }
    out << '\n';
  }
}

// Human tables render at ten significant digits.
inline std::string render_csv(const Table& t, int digits = 10) {
  std::ostringstream os;
  write_csv(os, t, digits);
  return os.str();
}

inline void write_csv_file(const Table& t, const std::string& path, int digits = 17) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::DataError, "cannot write output file '" + path + "'");
  write_csv(f, t, digits);
  if (!f) throw Error(ErrorCode::DataError, "failed while writing '" + path + "'");
}

}  // namespace crvkit

#endif
