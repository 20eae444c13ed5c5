#pragma once

#include <string>
#include <vector>

namespace airseg {

/// Shortest round-trippable decimal for a double ("%.17g" trimmed).
std::string format_real(double v);

/// Quotes a field when it contains a comma, quote or newline.
std::string csv_field(const std::string& s);

/// Splits one CSV line (no embedded newlines). Quoted fields are unquoted.
std::vector<std::string> split_csv_line(const std::string& line);

/// Parses CSV text into rows, checking the header line matches `expected_header`.
std::vector<std::vector<std::string>> parse_csv(const std::string& text, const std::string& expected_header);

}  // namespace airseg
