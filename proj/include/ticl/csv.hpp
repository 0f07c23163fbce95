#pragma once

// Plain numeric CSV ingestion for tabular tasks. One named label column maps
// to contiguous 0-based class indices in first-appearance order; every other
// column must parse as a finite number. No imputation: a missing or
// non-numeric feature cell is an ingestion error naming its coordinates.

#include <cctype>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "ticl/errors.hpp"
#include "ticl/tensor.hpp"

namespace ticl {

struct CsvDataset {
  std::vector<std::string> feature_names;
  std::string label_name;
  std::vector<std::string> class_names;  // class index -> original label text
  MatD X;
  std::vector<int> y;

  int rows() const { return static_cast<int>(X.rows()); }
  int features() const { return static_cast<int>(X.cols()); }
  int classes() const { return static_cast<int>(class_names.size()); }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(trim(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  cells.push_back(trim(cur));
  return cells;
}

inline bool parse_number(const std::string& cell, double& out) {
  const char* b = cell.data();
  const char* e = b + cell.size();
  auto [p, ec] = std::from_chars(b, e, out);
  return ec == std::errc{} && p == e && std::isfinite(out);
}

}  // namespace detail

// With label_required=false a file lacking the label column loads as pure
// features (empty y) — the shape query rows arrive in.
inline CsvDataset load_csv(const std::string& path, const std::string& label_column = "label",
                           bool label_required = true) {
  std::ifstream is(path);
  if (!is) throw DataError("load_csv: cannot open " + path);

  std::string line;
  if (!std::getline(is, line)) throw DataError("load_csv: " + path + " is empty");
  const std::vector<std::string> header = detail::split_csv_line(line);

  int label_col = -1;
  for (std::size_t j = 0; j < header.size(); ++j)
    if (header[j] == label_column) {
      label_col = static_cast<int>(j);
      break;
    }
  if (label_col < 0 && label_required)
    throw DataError("load_csv: " + path + " has no label column '" + label_column + "'");

  CsvDataset d;
  d.label_name = label_column;
  for (std::size_t j = 0; j < header.size(); ++j)
    if (static_cast<int>(j) != label_col) d.feature_names.push_back(header[j]);

  std::vector<std::vector<double>> rows;
  std::vector<std::string> labels;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::vector<std::string> cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw DataError("load_csv: " + path + " row " + std::to_string(line_no) + " has " +
                      std::to_string(cells.size()) + " cells, header has " +
                      std::to_string(header.size()));
    std::vector<double> feats;
    feats.reserve(header.size() - 1);
    for (std::size_t j = 0; j < cells.size(); ++j) {
      if (static_cast<int>(j) == label_col) {
        if (cells[j].empty())
          throw DataError("load_csv: " + path + " row " + std::to_string(line_no) +
                          " has an empty label");
        labels.push_back(cells[j]);
        continue;
      }
      double v = 0;
      if (cells[j].empty())
        throw DataError("load_csv: " + path + " row " + std::to_string(line_no) +
                        " is missing a value in column '" + header[j] +
                        "' (missing values are not supported)");
      if (!detail::parse_number(cells[j], v))
        throw DataError("load_csv: " + path + " row " + std::to_string(line_no) +
                        " column '" + header[j] + "': non-numeric cell '" + cells[j] + "'");
      feats.push_back(v);
    }
    rows.push_back(std::move(feats));
  }
  if (rows.empty()) throw DataError("load_csv: " + path + " has a header but no data rows");

  d.X = MatD(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d.feature_names.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      d.X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];

  d.y.reserve(labels.size());
  for (const std::string& lab : labels) {
    int idx = -1;
    for (std::size_t k = 0; k < d.class_names.size(); ++k)
      if (d.class_names[k] == lab) {
        idx = static_cast<int>(k);
        break;
      }
    if (idx < 0) {
      idx = static_cast<int>(d.class_names.size());
      d.class_names.push_back(lab);
    }
    d.y.push_back(idx);
  }
  return d;
}

// Inverse of load_csv, label column last. Numbers are written with enough
// digits to round-trip exactly.
inline void save_csv(const std::string& path, const CsvDataset& d) {
  std::ofstream os(path);
  if (!os) throw IoError("save_csv: cannot open " + path);
  for (const std::string& name : d.feature_names) os << name << ',';
  os << d.label_name << '\n';
  os << std::setprecision(17);
  for (Eigen::Index i = 0; i < d.X.rows(); ++i) {
    for (Eigen::Index j = 0; j < d.X.cols(); ++j) os << d.X(i, j) << ',';
    os << d.class_names[static_cast<std::size_t>(d.y[static_cast<std::size_t>(i)])] << '\n';
  }
  if (!os) throw IoError("save_csv: write to " + path + " failed");
}

// Row subset in index order (split plans produce sorted unique indices).
inline CsvDataset take_rows(const CsvDataset& d, const std::vector<int>& idx) {
  CsvDataset out;
  out.feature_names = d.feature_names;
  out.label_name = d.label_name;
  out.class_names = d.class_names;
  out.X = MatD(static_cast<Eigen::Index>(idx.size()), d.X.cols());
  out.y.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= d.rows())
      throw ContractError("take_rows: index " + std::to_string(idx[i]) + " out of range");
    out.X.row(static_cast<Eigen::Index>(i)) = d.X.row(idx[i]);
    out.y.push_back(d.y[static_cast<std::size_t>(idx[i])]);
  }
  return out;
}

}  // namespace ticl
