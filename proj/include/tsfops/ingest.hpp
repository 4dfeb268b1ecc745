#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "tsfops/core.hpp"
#include "tsfops/csv.hpp"
#include "tsfops/hash.hpp"
#include "tsfops/tracking.hpp"

namespace tsfops {

struct CsvFormat {
    Layout layout = Layout::single_long;
    bool day_first = true;
};

namespace detail {

inline void throw_if_invalid(const TimeSeriesDataset& ds) {
    auto report = validate_dataset(ds);
    if (!report.ok()) throw ValidationError(std::move(report.violations));
}

// Places sorted observations onto the resolution grid, inserting missing
// values where whole slots are absent.
inline void regularize(SeriesComponent& c, Resolution res) {
    if (c.timestamps.size() < 2) return;
    const auto step = res.step();
    std::vector<TimePoint> ts{c.timestamps.front()};
    std::vector<Value> vs{c.values.front()};
    for (std::size_t i = 1; i < c.timestamps.size(); ++i) {
        auto gap = c.timestamps[i] - c.timestamps[i - 1];
        if (gap <= std::chrono::minutes{0} || gap % step != std::chrono::minutes{0}) return;  // left for validation to report
    }
    for (std::size_t i = 1; i < c.timestamps.size(); ++i) {
        for (auto t = c.timestamps[i - 1] + step; t < c.timestamps[i]; t += step) {
            ts.push_back(t);
            vs.emplace_back();
        }
        ts.push_back(c.timestamps[i]);
        vs.push_back(c.values[i]);
    }
    c.timestamps = std::move(ts);
    c.values = std::move(vs);
}

}  // namespace detail

/// Reads the single-series long format (`Datetime,Value`). Covariate files may
/// name their single value column arbitrarily.
inline TimeSeriesDataset parse_single_csv(std::string_view text, bool day_first, Resolution resolution,
                                          SeriesKind kind = SeriesKind::target) {
    auto rows = csv::lines(text);
    TimeSeriesDataset ds;
    ds.resolution = resolution;
    ds.kind = kind;
    ds.multiple = false;
    ds.source_layout = Layout::single_long;
    if (rows.empty()) throw ValidationError({{Check::empty, "empty"}});
    ds.source_columns = csv::split_line(rows.front().text);

    // Column violations make the body meaningless; report them before reading rows.
    std::vector<Violation> header;
    detail::check_columns(ds, header);
    if (!header.empty()) throw ValidationError(std::move(header));

    SeriesComponent c;
    c.id = kind == SeriesKind::target ? "series" : ds.source_columns[1];
    c.timeseries_id = c.id;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        auto f = csv::split_line(rows[r].text);
        const auto line = std::to_string(rows[r].number);
        if (f.size() != 2) throw Error("row width error at line " + line);
        auto t = parse_datetime(f[0], day_first);
        if (!t) throw Error("date parse error at line " + line);
        auto v = csv::parse_value(f[1]);
        if (!v) throw Error("value parse error at line " + line);
        c.timestamps.push_back(*t);
        c.values.push_back(*v);
    }
    if (c.timestamps.empty()) throw ValidationError({{Check::empty, "empty"}});
    detail::regularize(c, resolution);
    ds.components.push_back(std::move(c));
    detail::throw_if_invalid(ds);
    return ds;
}

/// Reads the multiple/multivariate wide format: one row per (Date, ID) with
/// one column per intraday slot. Leading and trailing missing slots of each
/// component are trimmed.
inline TimeSeriesDataset parse_wide_csv(std::string_view text, bool day_first, Resolution resolution,
                                        SeriesKind kind = SeriesKind::target) {
    auto rows = csv::lines(text);
    TimeSeriesDataset ds;
    ds.resolution = resolution;
    ds.kind = kind;
    ds.source_layout = Layout::multiple_wide;
    if (rows.empty()) throw ValidationError({{Check::empty, "empty"}});
    ds.source_columns = csv::split_line(rows.front().text);
    const auto& cols = ds.source_columns;

    std::vector<Violation> header;
    detail::check_columns(ds, header);
    if (!header.empty()) throw ValidationError(std::move(header));

    int date_col = -1, id_col = -1, ts_col = -1;
    std::vector<int> time_cols;
    for (int i = 0; i < static_cast<int>(cols.size()); ++i) {
        if (cols[i] == "Date") date_col = i;
        else if (cols[i] == "ID") id_col = i;
        else if (cols[i] == "Timeseries ID") ts_col = i;
        else if (is_time_column(cols[i])) time_cols.push_back(i);
    }
    // Time columns: consecutive, from 00:00:00 to 24:00:00 - resolution.
    bool grid_ok = static_cast<int>(time_cols.size()) == resolution.slots_per_day();
    for (std::size_t k = 0; grid_ok && k < time_cols.size(); ++k) {
        if (cols[time_cols[k]] != format_clock(static_cast<int>(k) * resolution.minutes())) grid_ok = false;
        if (k > 0 && time_cols[k] != time_cols[k - 1] + 1) grid_ok = false;
    }
    if (!grid_ok)
        throw ValidationError({{Check::time_grid, "time grid error: expected " +
                                                      std::to_string(resolution.slots_per_day()) +
                                                      " consecutive time columns from 00:00:00 in steps of " +
                                                      std::to_string(resolution.minutes()) + " minutes"}});

    struct Row {
        Days date;
        std::vector<Value> slots;
    };
    std::vector<std::string> order;
    std::map<std::string, std::string> series_of;
    std::map<std::string, std::vector<Row>> by_id;
    bool unsorted = false;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        auto f = csv::split_line(rows[r].text);
        const auto line = std::to_string(rows[r].number);
        if (f.size() != cols.size()) throw Error("row width error at line " + line);
        auto when = parse_datetime(f[date_col], day_first);
        if (!when || minute_of_day(*when) != 0) throw Error("date parse error at line " + line);
        const auto& id = f[id_col];
        if (id.empty()) throw Error("empty ID at line " + line);
        auto sid = ts_col >= 0 && !f[ts_col].empty() ? f[ts_col] : id;
        if (!by_id.count(id)) {
            order.push_back(id);
            series_of[id] = sid;
        } else if (series_of[id] != sid) {
            throw Error("component '" + id + "' assigned to two series at line " + line);
        }
        Row row{day_of(*when), {}};
        for (int col : time_cols) {
            auto v = csv::parse_value(f[col]);
            if (!v) throw Error("value parse error at line " + line);
            row.slots.push_back(*v);
        }
        auto& list = by_id[id];
        if (!list.empty()) {
            if (std::any_of(list.begin(), list.end(), [&](const Row& x) { return x.date == row.date; }))
                throw ValidationError({{Check::duplicate_row, "duplicate row: " + format_date(*when) + ", " + id}});
            if (row.date < list.back().date) unsorted = true;
        }
        list.push_back(std::move(row));
    }
    if (order.empty()) throw ValidationError({{Check::empty, "empty"}});
    if (unsorted) throw ValidationError({{Check::dates_not_sorted, "dates not sorted"}});

    for (const auto& id : order) {
        SeriesComponent c;
        c.id = id;
        c.timeseries_id = series_of[id];
        const auto& list = by_id[id];
        for (auto day = list.front().date; day <= list.back().date; day += std::chrono::days{1}) {
            auto it = std::find_if(list.begin(), list.end(), [&](const Row& x) { return x.date == day; });
            for (int k = 0; k < resolution.slots_per_day(); ++k) {
                c.timestamps.push_back(at_midnight(day) + k * resolution.step());
                c.values.push_back(it == list.end() ? Value{} : it->slots[k]);
            }
        }
        std::size_t lo = 0, hi = c.values.size();
        while (lo < hi && !c.values[lo]) ++lo;
        while (hi > lo && !c.values[hi - 1]) --hi;
        c.timestamps = {c.timestamps.begin() + lo, c.timestamps.begin() + hi};
        c.values = {c.values.begin() + lo, c.values.begin() + hi};
        ds.components.push_back(std::move(c));
    }
    ds.multiple = ds.series_ids().size() > 1;
    detail::throw_if_invalid(ds);
    return ds;
}

/// Canonical wide serialization; `Index` is regenerated and missing values are empty cells.
inline std::string write_wide_csv(const TimeSeriesDataset& ds) {
    const auto res = ds.resolution;
    std::ostringstream out;
    out << "Index,Date,ID,Timeseries ID";
    for (int k = 0; k < res.slots_per_day(); ++k) out << ',' << format_clock(k * res.minutes());
    out << '\n';

    std::vector<Days> days;
    for (const auto& c : ds.components)
        for (auto t : c.timestamps)
            if (days.empty() || days.back() != day_of(t)) days.push_back(day_of(t));
    std::sort(days.begin(), days.end());
    days.erase(std::unique(days.begin(), days.end()), days.end());

    std::size_t index = 0;
    std::vector<std::size_t> cursor(ds.components.size(), 0);
    for (auto day : days) {
        for (std::size_t ci = 0; ci < ds.components.size(); ++ci) {
            const auto& c = ds.components[ci];
            auto& pos = cursor[ci];
            if (pos >= c.size() || day_of(c.timestamps[pos]) != day) continue;
            out << index++ << ',' << format_date(at_midnight(day)) << ',' << c.id << ',' << c.timeseries_id;
            for (int k = 0; k < res.slots_per_day(); ++k) {
                auto slot = at_midnight(day) + k * res.step();
                out << ',';
                if (pos < c.size() && c.timestamps[pos] == slot) out << csv::format_value(c.values[pos++]);
            }
            out << '\n';
        }
    }
    return out.str();
}

/// Picks the layout from the header row.
inline Layout detect_layout(std::string_view text) {
    auto rows = csv::lines(text);
    if (rows.empty()) return Layout::single_long;
    auto cols = csv::split_line(rows.front().text);
    return std::find(cols.begin(), cols.end(), "ID") != cols.end() ? Layout::multiple_wide : Layout::single_long;
}

inline TimeSeriesDataset parse_csv(std::string_view text, CsvFormat format, Resolution resolution,
                                   SeriesKind kind = SeriesKind::target) {
    return format.layout == Layout::single_long ? parse_single_csv(text, format.day_first, resolution, kind)
                                                : parse_wide_csv(text, format.day_first, resolution, kind);
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("io error: cannot read '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct LoadOptions {
    CsvFormat format;
    Resolution resolution;
    bool multiple = false;
    std::optional<std::string> covariates_text = std::nullopt;  // future covariates, same layout rules
    CsvFormat covariates_format = {};
};

/// Parses and validates the raw file, then stores its canonical wide form as
/// `series.csv` (and `future_covs.csv`) in `run`, logging shape params.
inline TimeSeriesDataset load_raw_data(TrackingStore& store, const RunRecord& run, std::string_view text,
                                       const LoadOptions& opt) {
    auto ds = parse_csv(text, opt.format, opt.resolution);
    ds.multiple = opt.multiple;
    detail::throw_if_invalid(ds);

    std::size_t series_len = 0;
    for (const auto& c : ds.components) series_len = std::max(series_len, c.size());
    store.log_params(run.run_id, {{"resolution", std::to_string(opt.resolution.minutes())},
                                  {"multiple", opt.multiple ? "true" : "false"},
                                  {"series_len", std::to_string(series_len)},
                                  {"n_rows", std::to_string(csv::lines(text).size() - 1)},
                                  {"n_components", std::to_string(ds.components.size())},
                                  {"n_series", std::to_string(ds.series_ids().size())},
                                  {"series_sha256", sha256_hex(text)}});
    store.log_artifact(run.run_id, "series.csv", write_wide_csv(ds));

    if (opt.covariates_text) {
        auto covs = parse_csv(*opt.covariates_text, opt.covariates_format, opt.resolution, SeriesKind::future_covariates);
        store.log_artifact(run.run_id, "future_covs.csv", write_wide_csv(covs));
    }
    return ds;
}

}  // namespace tsfops
