#ifndef CRVKIT_TABLE_HPP
#define CRVKIT_TABLE_HPP

// Column-oriented data table. Columns are numeric or text; factor handling
// (cluster ids, absorbed factors) works off canonical string labels so that
// numeric and text id columns behave identically.

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "crvkit/error.hpp"

namespace crvkit {

struct Column {
  enum class Type { Numeric, Text };
  Type type = Type::Numeric;
  std::vector<double> num;
  std::vector<std::string> text;
  std::size_t size() const { return type == Type::Numeric ? num.size() : text.size(); }
};

// Minimal decimal form of a numeric label: integers print without a decimal
// point so a cluster id column holding 3.0 labels as "3".
inline std::string format_label(double v) {
  if (std::isnan(v)) throw Error(ErrorCode::DataError, "missing value used as a label");
  if (v == static_cast<long long>(v) && std::fabs(v) < 9.0e15)
    return std::to_string(static_cast<long long>(v));
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

class Table {
 public:
  std::size_t nrows() const { return rows_; }
  std::size_t ncols() const { return cols_.size(); }
  const std::vector<std::string>& names() const { return names_; }

  void add_numeric(const std::string& name, std::vector<double> data) {
    check_new(name, data.size());
    Column c;
    c.type = Column::Type::Numeric;
    c.num = std::move(data);
    names_.push_back(name);
    cols_.push_back(std::move(c));
  }

  void add_text(const std::string& name, std::vector<std::string> data) {
    check_new(name, data.size());
    Column c;
    c.type = Column::Type::Text;
    c.text = std::move(data);
    names_.push_back(name);
    cols_.push_back(std::move(c));
  }

  const Column* find(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return &cols_[i];
    return nullptr;
  }
  bool has(const std::string& name) const { return find(name) != nullptr; }

  // Numeric access for outcome/covariate/weight columns.
  const std::vector<double>& numeric(const std::string& name) const {
    const Column* c = find(name);
    if (!c) throw Error(ErrorCode::ConfigError, "column '" + name + "' not found in data");
    if (c->type != Column::Type::Numeric)
      throw Error(ErrorCode::DataError, "column '" + name + "' is not numeric");
    return c->num;
  }

  // Label view for cluster ids and factor columns.
  std::vector<std::string> labels(const std::string& name) const {
    const Column* c = find(name);
    if (!c) throw Error(ErrorCode::ConfigError, "column '" + name + "' not found in data");
    if (c->type == Column::Type::Text) return c->text;
    std::vector<std::string> out;
    out.reserve(c->num.size());
    for (double v : c->num) {
      if (std::isnan(v))
        throw Error(ErrorCode::DataError, "column '" + name + "' has a missing value");
      out.push_back(format_label(v));
    }
    return out;
  }

  const Column& col(std::size_t i) const { return cols_[i]; }

 private:
  void check_new(const std::string& name, std::size_t n) {
    if (has(name)) throw Error(ErrorCode::InvalidInput, "duplicate column '" + name + "'");
    if (!cols_.empty() && n != rows_)
      throw Error(ErrorCode::InvalidInput, "column '" + name + "' has " + std::to_string(n) +
                                               " rows, table has " + std::to_string(rows_));
    rows_ = n;
  }

  std::vector<std::string> names_;
  std::vector<Column> cols_;
  std::size_t rows_ = 0;
};

}  // namespace crvkit

#endif
