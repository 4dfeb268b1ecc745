#pragma once

#include <charconv>
#include <chrono>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>

#include "tsfops/error.hpp"

namespace tsfops {

/// Timezone-naive instant with minute precision.
using TimePoint = std::chrono::sys_time<std::chrono::minutes>;
using Days = std::chrono::sys_days;

namespace detail {

inline bool parse_uint(std::string_view s, int& out) {
    if (s.empty()) return false;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc{} && p == s.data() + s.size();
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline std::optional<Days> make_day(int y, int m, int d) {
    std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{static_cast<unsigned>(m)},
                                    std::chrono::day{static_cast<unsigned>(d)}};
    if (!ymd.ok()) return std::nullopt;
    return Days{ymd};
}

// "HH:MM[:SS]"; seconds must be zero since the grid is minute based.
inline std::optional<int> parse_clock(std::string_view s) {
    int h = 0, m = 0, sec = 0;
    if (s.size() != 5 && s.size() != 8) return std::nullopt;
    if (s[2] != ':') return std::nullopt;
    if (!parse_uint(s.substr(0, 2), h) || !parse_uint(s.substr(3, 2), m)) return std::nullopt;
    if (s.size() == 8) {
        if (s[5] != ':' || !parse_uint(s.substr(6, 2), sec)) return std::nullopt;
    }
    if (h > 24 || m > 59 || sec != 0) return std::nullopt;
    if (h == 24 && m != 0) return std::nullopt;
    return h * 60 + m;
}

}  // namespace detail

/// Parses a calendar date: `YYYY-MM-DD` always, plus `DD/MM/YYYY` when
/// day_first and `MM/DD/YYYY` otherwise.
inline std::optional<Days> parse_date(std::string_view s, bool day_first) {
    s = detail::trim(s);
    int a = 0, b = 0, c = 0;
    if (s.size() == 10 && s[4] == '-' && s[7] == '-') {
        if (!detail::parse_uint(s.substr(0, 4), a) || !detail::parse_uint(s.substr(5, 2), b) ||
            !detail::parse_uint(s.substr(8, 2), c))
            return std::nullopt;
        return detail::make_day(a, b, c);
    }
    if (s.size() == 10 && s[2] == '/' && s[5] == '/') {
        if (!detail::parse_uint(s.substr(0, 2), a) || !detail::parse_uint(s.substr(3, 2), b) ||
            !detail::parse_uint(s.substr(6, 4), c))
            return std::nullopt;
        return day_first ? detail::make_day(c, b, a) : detail::make_day(c, a, b);
    }
    return std::nullopt;
}

/// Parses `<date>[ HH:MM[:SS]]` (a `T` separator is accepted as well).
inline std::optional<TimePoint> parse_datetime(std::string_view s, bool day_first) {
    s = detail::trim(s);
    if (s.size() < 10) return std::nullopt;
    auto day = parse_date(s.substr(0, 10), day_first);
    if (!day) return std::nullopt;
    int minutes = 0;
    if (s.size() > 10) {
        if (s[10] != ' ' && s[10] != 'T') return std::nullopt;
        auto clock = detail::parse_clock(s.substr(11));
        if (!clock) return std::nullopt;
        minutes = *clock;
    }
    return std::chrono::time_point_cast<std::chrono::minutes>(*day) + std::chrono::minutes{minutes};
}

/// `YYYYMMDD` split dates; they denote 00:00 of that day.
inline TimePoint parse_compact_date(std::string_view s) {
    s = detail::trim(s);
    int y = 0, m = 0, d = 0;
    if (s.size() != 8 || !detail::parse_uint(s.substr(0, 4), y) || !detail::parse_uint(s.substr(4, 2), m) ||
        !detail::parse_uint(s.substr(6, 2), d))
        throw ConfigError("invalid date '" + std::string(s) + "', expected YYYYMMDD");
    auto day = detail::make_day(y, m, d);
    if (!day) throw ConfigError("invalid date '" + std::string(s) + "'");
    return std::chrono::time_point_cast<std::chrono::minutes>(*day);
}

inline Days day_of(TimePoint t) { return std::chrono::floor<std::chrono::days>(t); }

inline std::chrono::year_month_day ymd_of(TimePoint t) { return std::chrono::year_month_day{day_of(t)}; }

inline int minute_of_day(TimePoint t) { return static_cast<int>((t - day_of(t)).count()); }

/// Monday = 0 … Sunday = 6.
inline int weekday_of(TimePoint t) {
    return static_cast<int>(std::chrono::weekday{day_of(t)}.iso_encoding()) - 1;
}

inline int year_of(TimePoint t) { return static_cast<int>(ymd_of(t).year()); }

inline int month_of(TimePoint t) { return static_cast<int>(static_cast<unsigned>(ymd_of(t).month())); }

/// 0-based day of year.
inline int day_of_year(TimePoint t) {
    auto ymd = ymd_of(t);
    Days jan1{ymd.year() / std::chrono::January / 1};
    return static_cast<int>((day_of(t) - jan1).count());
}

inline TimePoint at_midnight(Days d) { return std::chrono::time_point_cast<std::chrono::minutes>(d); }

inline std::string format_date(TimePoint t) {
    auto ymd = ymd_of(t);
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
    return buf;
}

inline std::string format_clock(int minute_of_day) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%02d:%02d:00", minute_of_day / 60, minute_of_day % 60);
    return buf;
}

inline std::string format_datetime(TimePoint t) { return format_date(t) + " " + format_clock(minute_of_day(t)); }

/// Wall-clock timestamp for run bookkeeping, `YYYY-MM-DD HH:MM:SS.mmm`.
inline std::string now_string() {
    auto now = std::chrono::system_clock::now();
    auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    auto t = std::chrono::floor<std::chrono::seconds>(now);
    auto secs = static_cast<int>((t - std::chrono::floor<std::chrono::minutes>(t)).count());
    char buf[32];
    std::snprintf(buf, sizeof buf, ".%03d", static_cast<int>(ms));
    std::string clock = format_datetime(std::chrono::floor<std::chrono::minutes>(now));
    clock[clock.size() - 2] = static_cast<char>('0' + secs / 10);
    clock[clock.size() - 1] = static_cast<char>('0' + secs % 10);
    return clock + buf;
}

}  // namespace tsfops
