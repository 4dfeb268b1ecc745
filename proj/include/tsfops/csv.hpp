#pragma once

#include <cctype>
#include <charconv>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "tsfops/core.hpp"

namespace tsfops::csv {

/// Splits one CSV record. Double-quoted fields may contain commas and "" escapes.
inline std::vector<std::string> split_line(std::string_view line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char ch = line[i];
        if (quoted) {
            if (ch == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += ch;
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            fields.push_back(std::string(detail::trim(cur)));
            cur.clear();
        } else {
            cur += ch;
        }
    }
    fields.push_back(std::string(detail::trim(cur)));
    return fields;
}

/// Non-empty lines of a document, keeping their 1-based line numbers.
struct Line {
    std::size_t number;
    std::string_view text;
};

inline std::vector<Line> lines(std::string_view text) {
    std::vector<Line> out;
    std::size_t n = 0, pos = 0;
    if (text.size() >= 3 && text.substr(0, 3) == "\xEF\xBB\xBF") pos = 3;  // UTF-8 BOM
    while (pos <= text.size()) {
        auto end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        ++n;
        auto l = text.substr(pos, end - pos);
        if (!detail::trim(l).empty()) out.push_back({n, l});
        pos = end + 1;
    }
    return out;
}

inline bool is_missing_token(std::string_view s) {
    s = detail::trim(s);
    if (s.empty()) return true;
    auto lower = [](std::string_view a, const char* b) {
        std::size_t i = 0;
        for (; b[i]; ++i)
            if (i >= a.size() || std::tolower(static_cast<unsigned char>(a[i])) != b[i]) return false;
        return i == a.size();
    };
    return lower(s, "nan") || lower(s, "null");
}

/// Empty, NaN and null map to missing; anything else must be a finite number.
inline std::optional<Value> parse_value(std::string_view s) {
    s = detail::trim(s);
    if (is_missing_token(s)) return Value{};
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    double v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
    return Value{v};
}

/// Shortest representation that parses back to the same double.
inline std::string format_number(double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

inline std::string format_value(const Value& v) { return v ? format_number(*v) : std::string{}; }

}  // namespace tsfops::csv
