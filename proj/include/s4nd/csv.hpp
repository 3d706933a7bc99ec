#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace s4nd {

/// Comma-separated fields of one line, each trimmed of surrounding blanks.
std::vector<std::string> split_csv_line(const std::string& line);

/// Reads a CSV file whose first line must equal `header` (ignoring blanks).
/// `row` receives the fields and the 1-based line number of each data row;
/// blank lines are skipped. ParseError on a header mismatch or a row with the
/// wrong number of fields.
void read_csv(const std::filesystem::path& path, const std::string& header,
              const std::function<void(const std::vector<std::string>&, std::size_t)>& row);

/// Field conversion that reports the file line and column on failure.
double csv_double(const std::string& field, std::size_t line, const std::string& column);
long long csv_integer(const std::string& field, std::size_t line, const std::string& column);

/// Writes `text` to `path` through a sibling `.partial` file and a rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace s4nd
