#include "s4nd/csv.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "s4nd/error.hpp"

namespace s4nd {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string where(std::size_t line, const std::string& column) {
  return "line " + std::to_string(line) + ", column " + column;
}

}  // namespace

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

void read_csv(const std::filesystem::path& path, const std::string& header,
              const std::function<void(const std::vector<std::string>&, std::size_t)>& row) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  const auto expected = split_csv_line(header);
  std::string line;
  std::size_t line_no = 0;
  bool seen_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split_csv_line(line);
    if (!seen_header) {
      if (fields != expected) {
        throw ParseError(path.string() + " line " + std::to_string(line_no) + ": expected header '" + header + "'");
      }
      seen_header = true;
      continue;
    }
    if (fields.size() != expected.size()) {
      throw ParseError(path.string() + " line " + std::to_string(line_no) + ": expected " +
                       std::to_string(expected.size()) + " fields, found " + std::to_string(fields.size()));
    }
    try {
      row(fields, line_no);
    } catch (const ParseError& e) {
      throw ParseError(path.string() + " " + e.what());
    }
  }
  if (!seen_header) throw ParseError(path.string() + ": missing header '" + header + "'");
}

double csv_double(const std::string& field, std::size_t line, const std::string& column) {
  double v = 0.0;
  const auto* end = field.data() + field.size();
  const auto r = std::from_chars(field.data(), end, v);
  if (field.empty() || r.ec != std::errc() || r.ptr != end || !std::isfinite(v)) {
    throw ParseError(where(line, column) + ": '" + field + "' is not a finite number");
  }
  return v;
}

long long csv_integer(const std::string& field, std::size_t line, const std::string& column) {
  long long v = 0;
  const auto* end = field.data() + field.size();
  const auto r = std::from_chars(field.data(), end, v);
  if (field.empty() || r.ec != std::errc() || r.ptr != end) {
    throw ParseError(where(line, column) + ": '" + field + "' is not an integer");
  }
  return v;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  auto partial = path;
  partial += ".partial";
  {
    std::ofstream out(partial, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + partial.string());
    out << text;
    if (!out.flush()) throw FormatError("write failed for " + partial.string());
  }
  std::filesystem::rename(partial, path);
}

}  // namespace s4nd
