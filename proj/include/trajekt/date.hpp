#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "trajekt/common.hpp"

namespace trajekt {

// Calendar dates are days since 1970-01-01; datetimes keep hour resolution
// (minutes since epoch) for the 24h/48h visit windows.
using Date = int32_t;
using DateTime = int64_t;

constexpr int64_t kMinutesPerDay = 24 * 60;

namespace detail {

// Howard Hinnant's civil-from-days / days-from-civil algorithms.
inline int64_t days_from_civil(int y, unsigned m, unsigned d) {
  y -= m <= 2;
  const int era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097LL + static_cast<int>(doe) - 719468;
}

inline void civil_from_days(int64_t z, int& y, unsigned& m, unsigned& d) {
  z += 719468;
  const int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const int64_t yr = static_cast<int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  d = doy - (153 * mp + 2) / 5 + 1;
  m = mp + (mp < 10 ? 3 : -9);
  y = static_cast<int>(yr + (m <= 2));
}

inline bool valid_ymd(int y, unsigned m, unsigned d) {
  if (m < 1 || m > 12 || d < 1) return false;
  static const unsigned mdays[] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
  unsigned dim = mdays[m - 1];
  if (m == 2 && ((y % 4 == 0 && y % 100 != 0) || y % 400 == 0)) dim = 29;
  return d <= dim;
}

}  // namespace detail

// "YYYY-MM-DD"
inline std::optional<Date> parse_date(std::string_view s) {
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
  for (size_t i : {0u, 1u, 2u, 3u, 5u, 6u, 8u, 9u})
    if (s[i] < '0' || s[i] > '9') return std::nullopt;
  int y = (s[0] - '0') * 1000 + (s[1] - '0') * 100 + (s[2] - '0') * 10 + (s[3] - '0');
  unsigned m = (s[5] - '0') * 10u + (s[6] - '0');
  unsigned d = (s[8] - '0') * 10u + (s[9] - '0');
  if (!detail::valid_ymd(y, m, d)) return std::nullopt;
  return static_cast<Date>(detail::days_from_civil(y, m, d));
}

// "YYYY-MM-DD HH:MM" or "YYYY-MM-DDTHH:MM"; a bare date reads as 00:00.
inline std::optional<DateTime> parse_datetime(std::string_view s) {
  if (s.size() == 10) {
    auto d = parse_date(s);
    if (!d) return std::nullopt;
    return static_cast<DateTime>(*d) * kMinutesPerDay;
  }
  if (s.size() != 16 || (s[10] != ' ' && s[10] != 'T') || s[13] != ':') return std::nullopt;
  auto d = parse_date(s.substr(0, 10));
  if (!d) return std::nullopt;
  for (size_t i : {11u, 12u, 14u, 15u})
    if (s[i] < '0' || s[i] > '9') return std::nullopt;
  int hh = (s[11] - '0') * 10 + (s[12] - '0');
  int mm = (s[14] - '0') * 10 + (s[15] - '0');
  if (hh > 23 || mm > 59) return std::nullopt;
  return static_cast<DateTime>(*d) * kMinutesPerDay + hh * 60 + mm;
}

inline std::string format_date(Date d) {
  int y;
  unsigned m, dd;
  detail::civil_from_days(d, y, m, dd);
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", y, m, dd);
  return buf;
}

inline std::string format_datetime(DateTime t) {
  Date d = static_cast<Date>(t >= 0 ? t / kMinutesPerDay
                                    : (t - kMinutesPerDay + 1) / kMinutesPerDay);
  int64_t rem = t - static_cast<int64_t>(d) * kMinutesPerDay;
  char buf[24];
  std::snprintf(buf, sizeof buf, "%s %02d:%02d", format_date(d).c_str(),
                static_cast<int>(rem / 60), static_cast<int>(rem % 60));
  return buf;
}

inline Date date_of(DateTime t) {
  return static_cast<Date>(t >= 0 ? t / kMinutesPerDay
                                  : (t - kMinutesPerDay + 1) / kMinutesPerDay);
}

inline DateTime start_of_day(Date d) { return static_cast<DateTime>(d) * kMinutesPerDay; }

}  // namespace trajekt
