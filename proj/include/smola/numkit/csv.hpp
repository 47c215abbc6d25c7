/* Copyright 2026 The smola Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

#include "smola/numkit/matrix.hpp"

// Matrix text format:
//   rows,cols
//   v00,v01,...
//   ...
// Values use 17 significant digits so that parsing reproduces the exact double.

namespace smola {

inline std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

inline std::string to_csv(const Matrix& m) {
  std::string out = std::to_string(m.rows()) + "," + std::to_string(m.cols()) + "\n";
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) {
      if (j) out += ',';
      out += format_double(r[j]);
    }
    out += '\n';
  }
  return out;
}

namespace detail {

inline std::size_t parse_count(std::string_view s, const char* what) {
  std::size_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw FormatError(std::string("csv: bad ") + what + " '" + std::string(s) + "'");
  }
  return v;
}

inline std::string_view trim_cr(std::string_view s) {
  if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
  return s;
}

}  // namespace detail

inline Matrix from_csv(std::string_view text) {
  std::size_t pos = 0;
  auto next_line = [&](std::string_view& line) {
    if (pos > text.size()) return false;
    const std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) {
      line = text.substr(pos);
      pos = text.size() + 1;
      return !line.empty();
    }
    line = text.substr(pos, end - pos);
    pos = end + 1;
    return true;
  };

  std::string_view header;
  if (!next_line(header)) throw FormatError("csv: missing header");
  header = detail::trim_cr(header);
  const std::size_t comma = header.find(',');
  if (comma == std::string_view::npos) throw FormatError("csv: header must be 'rows,cols'");
  const std::size_t rows = detail::parse_count(header.substr(0, comma), "row count");
  const std::size_t cols = detail::parse_count(header.substr(comma + 1), "column count");

  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    std::string_view line;
    if (!next_line(line)) throw FormatError("csv: expected " + std::to_string(rows) + " rows");
    line = detail::trim_cr(line);
    std::size_t j = 0;
    std::size_t start = 0;
    while (cols > 0) {
      const std::size_t end = std::min(line.find(',', start), line.size());
      if (j >= cols) throw FormatError("csv: too many values in row " + std::to_string(i));
      double v = 0.0;
      auto field = line.substr(start, end - start);
      auto res = std::from_chars(field.data(), field.data() + field.size(), v);
      if (res.ec != std::errc() || res.ptr != field.data() + field.size()) {
        throw FormatError("csv: bad value '" + std::string(field) + "' in row " + std::to_string(i));
      }
      m(i, j++) = v;
      if (end == line.size()) break;
      start = end + 1;
    }
    if (j != cols) throw FormatError("csv: row " + std::to_string(i) + " has " + std::to_string(j) +
                                     " values, expected " + std::to_string(cols));
  }
  return m;
}

inline void write_csv(const std::filesystem::path& path, const Matrix& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << to_csv(m);
}

inline Matrix read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_csv(ss.str());
}

}  // namespace smola
