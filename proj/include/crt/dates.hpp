#pragma once

#include <chrono>
#include <optional>
#include <string>
#include <string_view>

namespace crt {

using Date = std::chrono::sys_days;
using Days = std::chrono::days;

/// Parses a strict ISO-8601 calendar date (YYYY-MM-DD). Throws DataError.
Date parse_date(std::string_view text);

/// Empty text maps to nullopt; anything else must parse.
std::optional<Date> parse_optional_date(std::string_view text);

std::string format_date(Date d);

inline Date make_date(int y, unsigned m, unsigned d) {
  return Date{std::chrono::year{y} / std::chrono::month{m} / std::chrono::day{d}};
}

inline long days_between(Date from, Date to) { return (to - from).count(); }

} // namespace crt
