#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "tsfops/error.hpp"
#include "tsfops/time.hpp"

namespace tsfops {

/// Fixed spacing between observations. A day must split into whole slots.
class Resolution {
public:
    Resolution() = default;
    explicit Resolution(int minutes) : minutes_(minutes) {
        if (minutes < 1 || 1440 % minutes != 0)
            throw ConfigError("invalid resolution " + std::to_string(minutes) + ": must divide 1440 minutes");
    }

    int minutes() const noexcept { return minutes_; }
    std::chrono::minutes step() const noexcept { return std::chrono::minutes{minutes_}; }
    int slots_per_day() const noexcept { return 1440 / minutes_; }

    friend bool operator==(Resolution, Resolution) = default;

private:
    int minutes_ = 60;
};

using Value = std::optional<double>;  // nullopt marks a missing observation

struct SeriesComponent {
    std::string id;
    std::string timeseries_id;
    std::vector<TimePoint> timestamps;
    std::vector<Value> values;

    std::size_t size() const noexcept { return values.size(); }

    std::size_t missing_count() const noexcept {
        return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::nullopt));
    }

    friend bool operator==(const SeriesComponent&, const SeriesComponent&) = default;
};

enum class SeriesKind { target, past_covariates, future_covariates };

enum class Layout { single_long, multiple_wide };

struct TimeSeriesDataset {
    std::vector<SeriesComponent> components;
    Resolution resolution;
    bool multiple = false;
    SeriesKind kind = SeriesKind::target;
    /// Layout and header of the file the dataset was read from; unset for
    /// datasets built in memory. Used only by the column checks.
    std::optional<Layout> source_layout;
    std::vector<std::string> source_columns;

    /// Distinct timeseries ids, in order of first appearance.
    std::vector<std::string> series_ids() const {
        std::vector<std::string> ids;
        for (const auto& c : components)
            if (std::find(ids.begin(), ids.end(), c.timeseries_id) == ids.end()) ids.push_back(c.timeseries_id);
        return ids;
    }

    std::vector<const SeriesComponent*> components_of(const std::string& series_id) const {
        std::vector<const SeriesComponent*> out;
        for (const auto& c : components)
            if (c.timeseries_id == series_id) out.push_back(&c);
        return out;
    }

    const SeriesComponent* find(const std::string& component_id) const {
        for (const auto& c : components)
            if (c.id == component_id) return &c;
        return nullptr;
    }

    std::size_t total_points() const noexcept {
        std::size_t n = 0;
        for (const auto& c : components) n += c.size();
        return n;
    }

    bool same_data(const TimeSeriesDataset& o) const {
        return components == o.components && resolution == o.resolution && multiple == o.multiple && kind == o.kind;
    }
};

// ---------------------------------------------------------------------------
// Validation

enum class Check {
    empty,
    dates_not_sorted,
    datetime_index,
    value_column,
    covariate_column,
    required_columns,
    forbidden_columns,
    unequal_component_counts,
    time_grid,
    duplicate_ids,
    single_series,
    length_mismatch,
    duplicate_row,
};

inline const char* check_name(Check c) {
    switch (c) {
        case Check::empty: return "empty";
        case Check::dates_not_sorted: return "dates_not_sorted";
        case Check::datetime_index: return "datetime_index";
        case Check::value_column: return "value_column";
        case Check::covariate_column: return "covariate_column";
        case Check::required_columns: return "required_columns";
        case Check::forbidden_columns: return "forbidden_columns";
        case Check::unequal_component_counts: return "unequal_component_counts";
        case Check::time_grid: return "time_grid";
        case Check::duplicate_ids: return "duplicate_ids";
        case Check::single_series: return "single_series";
        case Check::length_mismatch: return "length_mismatch";
        case Check::duplicate_row: return "duplicate_row";
    }
    return "unknown";
}

struct Violation {
    Check check;
    std::string message;
};

struct ValidationReport {
    std::vector<Violation> violations;

    bool ok() const noexcept { return violations.empty(); }

    bool has(Check c) const noexcept {
        return std::any_of(violations.begin(), violations.end(), [c](const Violation& v) { return v.check == c; });
    }

    std::string summary() const {
        std::string s;
        for (const auto& v : violations) {
            if (!s.empty()) s += "; ";
            s += v.message;
        }
        return s;
    }
};

/// Raised by parsers and stages when a dataset breaks one or more checks.
class ValidationError : public Error {
public:
    explicit ValidationError(std::vector<Violation> v)
        : Error(ValidationReport{v}.summary()), violations_(std::move(v)) {}

    const std::vector<Violation>& violations() const noexcept { return violations_; }

private:
    std::vector<Violation> violations_;
};

/// True for names of the form HH:MM:SS.
inline bool is_time_column(const std::string& name) {
    return name.size() == 8 && detail::parse_clock(name).has_value();
}

namespace detail {

inline void check_columns(const TimeSeriesDataset& ds, std::vector<Violation>& out) {
    const auto& cols = ds.source_columns;
    if (!ds.source_layout || cols.empty()) return;

    if (*ds.source_layout == Layout::single_long) {
        if (cols.front() != "Datetime")
            out.push_back({Check::datetime_index, "schema error: column Datetime must be the index (first column)"});
        if (ds.kind == SeriesKind::target) {
            if (cols.size() != 2 || (cols[1] != "Value" && cols[1] != "Load"))
                out.push_back({Check::value_column, "schema error: expected Datetime,Value"});
        } else if (cols.size() != 2) {
            out.push_back({Check::covariate_column, "schema error: covariates file must have exactly one value column"});
        }
        return;
    }

    static const std::set<std::string> permitted{"Index", "Date", "ID", "Timeseries ID"};
    std::vector<std::string> unknown;
    bool has_time = false;
    for (const auto& c : cols) {
        if (is_time_column(c)) has_time = true;
        else if (!permitted.count(c)) unknown.push_back(c);
    }
    const bool has_date = std::find(cols.begin(), cols.end(), "Date") != cols.end();
    const bool has_id = std::find(cols.begin(), cols.end(), "ID") != cols.end();
    if (!has_date || !has_id || !has_time)
        out.push_back({Check::required_columns, "schema error: columns Date, ID and time columns are required"});
    for (const auto& u : unknown) out.push_back({Check::forbidden_columns, "schema error: column '" + u + "' not permitted"});
}

}  // namespace detail

/// Runs every dataset check and returns all violations found.
inline ValidationReport validate_dataset(const TimeSeriesDataset& ds) {
    ValidationReport report;
    auto& out = report.violations;

    detail::check_columns(ds, out);

    if (ds.total_points() == 0) {
        out.push_back({Check::empty, "empty"});
        return report;
    }

    std::set<std::string> seen;
    for (const auto& c : ds.components) {
        if (!seen.insert(c.id).second) out.push_back({Check::duplicate_ids, "duplicate component id '" + c.id + "'"});
        if (c.timestamps.size() != c.values.size()) {
            out.push_back({Check::length_mismatch, "component '" + c.id + "' has mismatched timestamps/values"});
            continue;
        }
        bool sorted = true, on_grid = true;
        for (std::size_t i = 1; i < c.timestamps.size(); ++i) {
            if (c.timestamps[i] <= c.timestamps[i - 1]) sorted = false;
            else if (c.timestamps[i] - c.timestamps[i - 1] != ds.resolution.step()) on_grid = false;
        }
        for (auto t : c.timestamps)
            if (minute_of_day(t) % ds.resolution.minutes() != 0) on_grid = false;
        if (!sorted) out.push_back({Check::dates_not_sorted, "dates not sorted"});
        else if (!on_grid)
            out.push_back({Check::time_grid, "time grid error: component '" + c.id + "' is off the " +
                                                 std::to_string(ds.resolution.minutes()) + "-minute grid"});
    }

    std::map<std::string, std::size_t> counts;
    for (const auto& c : ds.components) ++counts[c.timeseries_id];
    if (!ds.multiple && counts.size() > 1)
        out.push_back({Check::single_series, "non-multiple dataset holds " + std::to_string(counts.size()) + " series"});
    if (!counts.empty()) {
        auto [lo, hi] = std::minmax_element(counts.begin(), counts.end(),
                                            [](const auto& a, const auto& b) { return a.second < b.second; });
        if (lo->second != hi->second) out.push_back({Check::unequal_component_counts, "unequal component counts"});
    }
    return report;
}

/// Most frequent spacing between consecutive timestamps (ties go to the smaller spacing).
inline Resolution infer_resolution(const TimeSeriesDataset& ds) {
    std::map<long, std::size_t> diffs;
    for (const auto& c : ds.components)
        for (std::size_t i = 1; i < c.timestamps.size(); ++i) ++diffs[(c.timestamps[i] - c.timestamps[i - 1]).count()];
    if (diffs.empty()) throw Error("resolution undeterminable: fewer than 2 timestamps");
    auto best = std::max_element(diffs.begin(), diffs.end(),
                                 [](const auto& a, const auto& b) { return a.second < b.second; });
    return Resolution{static_cast<int>(best->first)};
}

/// Keeps exactly the points with start <= t <= end.
inline TimeSeriesDataset slice_by_dates(const TimeSeriesDataset& ds, TimePoint start, TimePoint end) {
    if (start > end) throw Error("invalid range: start after end");
    TimeSeriesDataset out = ds;
    for (auto& c : out.components) {
        auto lo = std::lower_bound(c.timestamps.begin(), c.timestamps.end(), start);
        auto hi = std::upper_bound(c.timestamps.begin(), c.timestamps.end(), end);
        auto a = lo - c.timestamps.begin(), b = hi - c.timestamps.begin();
        c.timestamps = std::vector<TimePoint>(lo, hi);
        c.values = std::vector<Value>(c.values.begin() + a, c.values.begin() + b);
    }
    return out;
}

/// Train/validation/test boundaries. A cut date belongs to the segment it starts.
struct SplitSpec {
    TimePoint cut_date_val;
    TimePoint cut_date_test;
    std::optional<TimePoint> test_end_date;  // nullopt = end of data

    SplitSpec(TimePoint val, TimePoint test, std::optional<TimePoint> end = std::nullopt)
        : cut_date_val(val), cut_date_test(test), test_end_date(end) {
        if (!(cut_date_val < cut_date_test)) throw ConfigError("cut_date_val must precede cut_date_test");
        if (test_end_date && *test_end_date < cut_date_test) throw ConfigError("test_end_date precedes cut_date_test");
    }

    /// Last instant covered by the test segment. A YYYYMMDD end date covers its whole day.
    TimePoint test_end_inclusive(TimePoint data_end) const {
        if (!test_end_date) return data_end;
        return std::min(data_end, *test_end_date + std::chrono::hours{24} - std::chrono::minutes{1});
    }
};

}  // namespace tsfops
