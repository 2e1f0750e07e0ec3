#pragma once

// Flat "key=value" text records shared by dataset headers, configs and reports.
// Lines starting with '#' and blank lines are skipped on parse. Backslashes
// and newlines inside values are written as \\ and \n.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace zeg {

using KeyValues = std::map<std::string, std::string>;

/// Shortest "%.17g" rendering; round-trips every double.
std::string format_double(double v);

std::string to_text(const KeyValues& kv);
KeyValues parse_text(const std::string& text, const std::string& source);

std::vector<std::string> split(const std::string& s, char sep);
std::string join(const std::vector<std::string>& parts, char sep);
std::string trim(const std::string& s);

double parse_double(const std::string& key, const std::string& value);
std::int64_t parse_int(const std::string& key, const std::string& value);
std::uint64_t parse_uint(const std::string& key, const std::string& value);
bool parse_bool(const std::string& key, const std::string& value);

/// Fetches a required key, throwing FormatError naming `source` when absent.
const std::string& require(const KeyValues& kv, const std::string& key, const std::string& source);

}  // namespace zeg
