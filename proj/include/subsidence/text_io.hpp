#pragma once

// Delimited-text plumbing shared by every file format in the pipeline.
// Files are comma-separated with a mandatory header row; fields never
// contain commas so no quoting is supported.

#include <charconv>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "subsidence/error.hpp"

namespace subsidence::text {

inline std::vector<std::string> split(std::string_view line, char delim = ',') {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(delim, start);
    out.emplace_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

/// In-memory delimited table with a named header.
class Table {
 public:
  Table() = default;
  Table(std::string source, std::vector<std::string> header) : source_(std::move(source)), header_(std::move(header)) {}

  static Table parse(std::istream& in, const std::string& source) {
    std::string line;
    Table table;
    table.source_ = source;
    bool have_header = false;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto trimmed = trim(line);
      if (trimmed.empty() || trimmed.front() == '#') continue;
      auto fields = split(trimmed);
      for (auto& f : fields) f = std::string(trim(f));
      if (!have_header) {
        table.header_ = std::move(fields);
        have_header = true;
        continue;
      }
      if (fields.size() != table.header_.size()) {
        fail(ErrorCode::SchemaError, source + ":" + std::to_string(line_no) + ": expected " +
                                         std::to_string(table.header_.size()) + " fields, got " +
                                         std::to_string(fields.size()));
      }
      table.rows_.push_back(std::move(fields));
      table.line_numbers_.push_back(line_no);
    }
    require(have_header, ErrorCode::SchemaError, source + ": missing header row");
    return table;
  }

  static Table read(const std::string& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorCode::IoError, "cannot open " + path);
    return parse(in, path);
  }

  const std::vector<std::string>& header() const noexcept { return header_; }
  std::size_t size() const noexcept { return rows_.size(); }
  const std::vector<std::string>& row(std::size_t i) const { return rows_.at(i); }
  const std::string& source() const noexcept { return source_; }

  bool has_column(std::string_view name) const {
    for (const auto& h : header_)
      if (h == name) return true;
    return false;
  }

  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header_.size(); ++i)
      if (header_[i] == name) return i;
    fail(ErrorCode::SchemaError, source_ + ": missing column '" + std::string(name) + "'");
  }

  std::string location(std::size_t row) const {
    return source_ + ":" + std::to_string(line_numbers_.at(row));
  }

  double number(std::size_t row, std::size_t col) const {
    const auto& s = rows_.at(row).at(col);
    // std::from_chars for double is available in libstdc++ 11
    double value = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec != std::errc{} || ptr != s.data() + s.size())
      fail(ErrorCode::SchemaError, location(row) + ": column '" + header_.at(col) + "' is not a number: '" + s + "'");
    return value;
  }

  std::int64_t integer(std::size_t row, std::size_t col) const {
    const auto& s = rows_.at(row).at(col);
    std::int64_t value = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec != std::errc{} || ptr != s.data() + s.size())
      fail(ErrorCode::SchemaError, location(row) + ": column '" + header_.at(col) + "' is not an integer: '" + s + "'");
    return value;
  }

  const std::string& field(std::size_t row, std::size_t col) const { return rows_.at(row).at(col); }

 private:
  std::string source_;
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
  std::vector<std::size_t> line_numbers_;
};

inline double parse_double(std::string_view s, const std::string& where) {
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc{} || ptr != s.data() + s.size())
    fail(ErrorCode::SchemaError, where + ": not a number: '" + std::string(s) + "'");
  return value;
}

inline std::int64_t parse_int(std::string_view s, const std::string& where) {
  std::int64_t value = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc{} || ptr != s.data() + s.size())
    fail(ErrorCode::SchemaError, where + ": not an integer: '" + std::string(s) + "'");
  return value;
}

/// Text outputs carry 9 significant digits.
inline std::string fmt(double x) {
  if (x == 0.0) return "0";
  if (std::isnan(x)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

/// Round-trip-exact representation used by model files.
inline std::string fmt_exact(double x) {
  if (std::isnan(x)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

/// Integer cents rendered as whole units with two decimals.
inline std::string fmt_cents(std::int64_t cents) {
  char buf[64];
  const bool negative = cents < 0;
  const std::uint64_t mag = negative ? static_cast<std::uint64_t>(-(cents + 1)) + 1 : static_cast<std::uint64_t>(cents);
  std::snprintf(buf, sizeof buf, "%s%" PRIu64 ".%02" PRIu64, negative ? "-" : "", mag / 100, mag % 100);
  return buf;
}

/// Parses a decimal currency amount into integer cents (round half away from zero).
inline std::int64_t parse_cents(const std::string& s, const std::string& where) {
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(value))
    fail(ErrorCode::SchemaError, where + ": not a currency amount: '" + s + "'");
  return static_cast<std::int64_t>(std::llround(value * 100.0));
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::IoError, "cannot write " + path);
  out << content;
  require(static_cast<bool>(out), ErrorCode::IoError, "write failed for " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::IoError, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// 64-bit FNV-1a, used for input fingerprints in run manifests.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace subsidence::text
