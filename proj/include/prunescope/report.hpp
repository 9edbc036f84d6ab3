#pragma once

// Tabular experiment reports and their CSV / JSON emitters.
//
// CSV layout: `<index_column>,branch,space,<value columns...>`, numbers with
// 17 significant digits, rows sorted by (index, branch, space). JSON carries
// the same rows after a leading "metadata" object.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "prunescope/errors.hpp"

namespace prunescope {

inline constexpr std::string_view kToolVersion = "prunescope 0.1.0";

enum class ReportFormat { csv, json };

struct ReportRow {
  std::int64_t index = 0;
  std::string branch;
  std::string space;
  std::vector<double> values;  // aligned with Report::value_columns

  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

struct Report {
  nlohmann::ordered_json metadata = nlohmann::ordered_json::object();
  std::string index_column = "index";
  std::vector<std::string> value_columns;
  std::vector<ReportRow> rows;

  std::size_t column(std::string_view name) const {
    auto it = std::find(value_columns.begin(), value_columns.end(), name);
    if (it == value_columns.end()) throw SchemaError("report has no column '" + std::string(name) + "'");
    return static_cast<std::size_t>(it - value_columns.begin());
  }

  double value(std::size_t row, std::string_view name) const { return rows.at(row).values[column(name)]; }

  void validate() const {
    for (const ReportRow& r : rows) {
      if (r.values.size() != value_columns.size())
        throw InvariantError("report row has " + std::to_string(r.values.size()) +
                             " values for " + std::to_string(value_columns.size()) + " columns");
      for (double v : r.values)
        if (!std::isfinite(v)) throw InvariantError("report row holds a non-finite value");
      if (r.branch.find_first_of(",\n\"") != std::string::npos ||
          r.space.find_first_of(",\n\"") != std::string::npos)
        throw InvariantError("report labels must not contain CSV delimiters");
    }
  }

  /// Orders rows by (index, branch, space); ties keep insertion order.
  void sort_rows();
};

namespace detail {

inline int space_rank(std::string_view s) {
  constexpr std::string_view order[] = {"embedding", "logit", "probability", "kl",
                                        "linear"};
  for (int i = 0; i < static_cast<int>(std::size(order)); ++i)
    if (order[i] == s) return i;
  return static_cast<int>(std::size(order));
}

/// Integers compare numerically and sort before other labels.
inline bool label_less(const std::string& a, const std::string& b) {
  std::int64_t x = 0, y = 0;
  const bool an = std::from_chars(a.data(), a.data() + a.size(), x).ptr == a.data() + a.size() && !a.empty();
  const bool bn = std::from_chars(b.data(), b.data() + b.size(), y).ptr == b.data() + b.size() && !b.empty();
  if (an && bn) return x < y;
  if (an != bn) return an;
  return a < b;
}

inline std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline void Report::sort_rows() {
  std::stable_sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
    if (a.index != b.index) return a.index < b.index;
    if (a.branch != b.branch) return detail::label_less(a.branch, b.branch);
    const int ra = detail::space_rank(a.space), rb = detail::space_rank(b.space);
    if (ra != rb) return ra < rb;
    return a.space < b.space;
  });
}

inline void write_csv(std::ostream& os, const Report& report) {
  report.validate();
  os << report.index_column << ",branch,space";
  for (const auto& c : report.value_columns) os << ',' << c;
  os << '\n';
  for (const ReportRow& r : report.rows) {
    os << r.index << ',' << r.branch << ',' << r.space;
    for (double v : r.values) os << ',' << detail::format_number(v);
    os << '\n';
  }
}

inline void write_json(std::ostream& os, const Report& report) {
  report.validate();
  nlohmann::ordered_json j;
  j["metadata"] = report.metadata;
  nlohmann::ordered_json cols = nlohmann::ordered_json::array({report.index_column, "branch", "space"});
  for (const auto& c : report.value_columns) cols.push_back(c);
  j["columns"] = cols;
  auto& rows = j["rows"] = nlohmann::ordered_json::array();
  for (const ReportRow& r : report.rows) {
    nlohmann::ordered_json row;
    row[report.index_column] = r.index;
    row["branch"] = r.branch;
    row["space"] = r.space;
    for (std::size_t i = 0; i < r.values.size(); ++i) row[report.value_columns[i]] = r.values[i];
    rows.push_back(std::move(row));
  }
  os << j.dump(2) << '\n';
}

inline std::string render_report(const Report& report, ReportFormat format) {
  std::ostringstream os;
  if (format == ReportFormat::csv)
    write_csv(os, report);
  else
    write_json(os, report);
  return os.str();
}

/// Writes to `destination`, or to stdout when it is "-" or empty.
inline void emit_report(const Report& report, ReportFormat format, const std::string& destination) {
  const std::string text = render_report(report, format);
  if (destination.empty() || destination == "-") {
    std::cout << text;
    return;
  }
  std::ofstream os(destination, std::ios::binary);
  if (!os) throw IoError("cannot open '" + destination + "' for writing");
  os << text;
  if (!os) throw IoError("failed writing '" + destination + "'");
}

/// Parses a CSV produced by write_csv. Metadata is not part of CSV.
inline Report parse_csv_report(std::istream& is) {
  Report report;
  std::string line;
  if (!std::getline(is, line)) throw ParseError("report CSV: missing header");
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(s);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!s.empty() && s.back() == ',') out.emplace_back();
    return out;
  };
  const auto header = split(line);
  if (header.size() < 3 || header[1] != "branch" || header[2] != "space")
    throw ParseError("report CSV: malformed header");
  report.index_column = header[0];
  report.value_columns.assign(header.begin() + 3, header.end());
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != header.size())
      throw ParseError("report CSV line " + std::to_string(line_no) + ": expected " +
                       std::to_string(header.size()) + " cells");
    ReportRow row;
    try {
      row.index = std::stoll(cells[0]);
      row.branch = cells[1];
      row.space = cells[2];
      for (std::size_t i = 3; i < cells.size(); ++i) row.values.push_back(std::stod(cells[i]));
    } catch (const std::exception&) {
      throw ParseError("report CSV line " + std::to_string(line_no) + ": bad number");
    }
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace prunescope
