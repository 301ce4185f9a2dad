// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace ecgpt {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // Column index for a header name, or -1.
  int column(const std::string& name) const;
  // Same, but throws DataError naming the column and file context.
  int require_column(const std::string& name, const std::string& context) const;
};

// RFC 4180-style parser: quoted fields, doubled-quote escapes, CRLF or LF.
// First row is the header.
CsvTable parse_csv(const std::string& text);
CsvTable read_csv_file(const std::string& path);

std::string csv_escape(const std::string& field);
void write_csv_file(const std::string& path, const std::vector<std::string>& header,
                    const std::vector<std::vector<std::string>>& rows);

// Fixed-format float helpers so emitted artifacts are byte-reproducible.
std::string format_fixed(double v, int decimals);
std::string format_general(double v);

}  // namespace ecgpt
