#pragma once

// Long-format datasets: one row per observation, a numeric response and
// categorical factor / unit-id columns with explicit level vocabularies.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cremem/errors.hpp"

namespace cremem {

struct Categorical {
  std::vector<std::string> levels;
  std::vector<int> codes;  // index into levels, one per row

  int n_levels() const { return static_cast<int>(levels.size()); }
  friend bool operator==(const Categorical&, const Categorical&) = default;
};

class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(std::size_t n_obs) : n_obs_(n_obs) {}

  std::size_t n_obs() const noexcept { return n_obs_; }

  void add_numeric(const std::string& name, std::vector<double> values) {
    check_length(name, values.size());
    order_.push_back(name);
    numeric_[name] = std::move(values);
  }
  void add_categorical(const std::string& name, Categorical col) {
    check_length(name, col.codes.size());
    for (int c : col.codes)
      if (c < 0 || c >= col.n_levels()) throw DataError("level code out of range in column '" + name + "'");
    order_.push_back(name);
    categorical_[name] = std::move(col);
  }

  bool has(const std::string& name) const { return numeric_.count(name) || categorical_.count(name); }
  bool is_numeric(const std::string& name) const { return numeric_.count(name) > 0; }

  const std::vector<double>& numeric(const std::string& name) const {
    auto it = numeric_.find(name);
    if (it == numeric_.end()) throw MissingColumn(name);
    return it->second;
  }
  std::vector<double>& numeric_mut(const std::string& name) {
    auto it = numeric_.find(name);
    if (it == numeric_.end()) throw MissingColumn(name);
    return it->second;
  }
  const Categorical& categorical(const std::string& name) const {
    auto it = categorical_.find(name);
    if (it == categorical_.end()) throw MissingColumn(name);
    return it->second;
  }
  const std::vector<std::string>& column_order() const noexcept { return order_; }

  // Rows in the given order (used for permutation checks).
  Dataset permuted(const std::vector<std::size_t>& perm) const {
    if (perm.size() != n_obs_) throw DataError("permutation length mismatch");
    Dataset out(n_obs_);
    for (const auto& name : order_) {
      if (is_numeric(name)) {
        const auto& v = numeric_.at(name);
        std::vector<double> w(n_obs_);
        for (std::size_t i = 0; i < n_obs_; ++i) w[i] = v[perm[i]];
        out.add_numeric(name, std::move(w));
      } else {
        const auto& c = categorical_.at(name);
        Categorical d{c.levels, std::vector<int>(n_obs_)};
        for (std::size_t i = 0; i < n_obs_; ++i) d.codes[i] = c.codes[perm[i]];
        out.add_categorical(name, std::move(d));
      }
    }
    return out;
  }

  // Row order that depends only on row contents: lexicographic over columns
  // sorted by name, categorical cells compared by label. Fits run on this
  // order so a shuffled input cannot steer the optimizer elsewhere.
  std::vector<std::size_t> canonical_order() const {
    std::vector<std::size_t> idx(n_obs_);
    for (std::size_t i = 0; i < n_obs_; ++i) idx[i] = i;
    auto less = [](double a, double b) {
      if (std::isnan(a) || std::isnan(b)) return !std::isnan(a) && std::isnan(b);
      return a < b;
    };
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) {
      auto ni = numeric_.begin();
      auto ci = categorical_.begin();
      while (ni != numeric_.end() || ci != categorical_.end()) {
        if (ci == categorical_.end() || (ni != numeric_.end() && ni->first < ci->first)) {
          const double a = ni->second[i], b = ni->second[j];
          if (less(a, b)) return true;
          if (less(b, a)) return false;
          ++ni;
        } else {
          const auto& c = ci->second;
          const auto& a = c.levels[static_cast<std::size_t>(c.codes[i])];
          const auto& b = c.levels[static_cast<std::size_t>(c.codes[j])];
          if (a != b) return a < b;
          ++ci;
        }
      }
      return false;
    });
    return idx;
  }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.n_obs_ == b.n_obs_ && a.numeric_ == b.numeric_ && a.categorical_ == b.categorical_;
  }

 private:
  void check_length(const std::string& name, std::size_t n) {
    if (has(name)) throw DataError("duplicate column '" + name + "'");
    if (order_.empty() && n_obs_ == 0) n_obs_ = n;
    if (n != n_obs_) throw DataError("column '" + name + "' has " + std::to_string(n) + " rows, expected " +
                                     std::to_string(n_obs_));
  }

  std::size_t n_obs_ = 0;
  std::vector<std::string> order_;
  std::map<std::string, std::vector<double>> numeric_;
  std::map<std::string, Categorical> categorical_;
};

// What to expect in a CSV: which columns are numeric and, optionally, the
// level vocabulary of categorical columns. Unlisted columns are categorical
// with levels inferred in lexicographic order.
struct CsvSchema {
  std::set<std::string> numeric;
  std::map<std::string, std::vector<std::string>> levels;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// RFC 4180-ish record splitter: quoted fields, doubled quotes inside quotes.
inline std::vector<std::string> split_csv_record(const std::string& line, std::size_t row) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false, was_quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = was_quoted = true;
    } else if (c == ',') {
      out.push_back(was_quoted ? cur : trim(cur));
      cur.clear();
      was_quoted = false;
    } else {
      cur.push_back(c);
    }
  }
  if (quoted) throw ParseError("unterminated quote", row, "");
  out.push_back(was_quoted ? cur : trim(cur));
  return out;
}

inline bool is_missing(const std::string& s) { return s.empty() || s == "NA" || s == "NaN"; }

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos && trim(s) == s) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  return out + "\"";
}

}  // namespace detail

inline Dataset parse_csv(std::istream& in, const CsvSchema& schema) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty file, header row expected", 0, "");
  const auto header = detail::split_csv_record(line, 0);
  std::set<std::string> seen;
  for (const auto& h : header)
    if (!seen.insert(h).second) throw ParseError("duplicate column name", 0, h);
  for (const auto& n : schema.numeric)
    if (!seen.count(n)) throw MissingColumn(n);
  for (const auto& [n, _] : schema.levels)
    if (!seen.count(n)) throw MissingColumn(n);

  std::vector<std::vector<std::string>> cells(header.size());
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    auto rec = detail::split_csv_record(line, row);
    if (rec.size() != header.size())
      throw ParseError("expected " + std::to_string(header.size()) + " fields, found " + std::to_string(rec.size()),
                       row, "");
    for (std::size_t j = 0; j < rec.size(); ++j) {
      if (detail::is_missing(rec[j])) throw MissingValue(row, header[j]);
      cells[j].push_back(std::move(rec[j]));
    }
  }

  const std::size_t n = cells.empty() ? 0 : cells[0].size();
  Dataset ds(n);
  for (std::size_t j = 0; j < header.size(); ++j) {
    const auto& name = header[j];
    if (schema.numeric.count(name)) {
      std::vector<double> v(n);
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t used = 0;
        double x = 0.0;
        try {
          x = std::stod(cells[j][i], &used);
        } catch (const std::exception&) {
          used = 0;
        }
        if (used != cells[j][i].size() || !std::isfinite(x))
          throw ParseError("not a finite number: '" + cells[j][i] + "'", i + 1, name);
        v[i] = x;
      }
      ds.add_numeric(name, std::move(v));
      continue;
    }
    Categorical c;
    auto it = schema.levels.find(name);
    if (it != schema.levels.end()) {
      c.levels = it->second;
    } else {
      std::set<std::string> lv(cells[j].begin(), cells[j].end());
      c.levels.assign(lv.begin(), lv.end());
    }
    std::map<std::string, int> index;
    for (std::size_t k = 0; k < c.levels.size(); ++k) index[c.levels[k]] = static_cast<int>(k);
    c.codes.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      auto f = index.find(cells[j][i]);
      if (f == index.end()) throw UnknownLevel(cells[j][i], i + 1, name);
      c.codes[i] = f->second;
    }
    ds.add_categorical(name, std::move(c));
  }
  return ds;
}

inline Dataset ingest_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  return parse_csv(in, schema);
}

inline void write_csv(std::ostream& out, const Dataset& ds) {
  const auto& cols = ds.column_order();
  for (std::size_t j = 0; j < cols.size(); ++j) out << (j ? "," : "") << detail::csv_escape(cols[j]);
  out << '\n';
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t i = 0; i < ds.n_obs(); ++i) {
    for (std::size_t j = 0; j < cols.size(); ++j) {
      if (j) out << ',';
      if (ds.is_numeric(cols[j])) {
        out << ds.numeric(cols[j])[i];
      } else {
        const auto& c = ds.categorical(cols[j]);
        out << detail::csv_escape(c.levels[static_cast<std::size_t>(c.codes[i])]);
      }
    }
    out << '\n';
  }
}

inline void write_csv(const std::string& path, const Dataset& ds) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  write_csv(out, ds);
}

}  // namespace cremem
