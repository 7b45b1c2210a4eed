#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace quack::text {

// Shortest round-trip form, locale independent; "nan", "inf", "-inf" for
// non-finite values. parse_double(format_double(x)) == x bit for bit.
std::string format_double(double v);
double parse_double(std::string_view s);  // throws std::invalid_argument
long long parse_int(std::string_view s);
bool parse_bool(std::string_view s);

std::string_view trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);

}  // namespace quack::text
