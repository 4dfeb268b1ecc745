#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "tsfops/core.hpp"
#include "tsfops/csv.hpp"
#include "tsfops/ingest.hpp"
#include "tsfops/tracking.hpp"

namespace tsfops {

struct EtlOptions {
    std::optional<std::pair<int, int>> year_range;
    double std_dev = 4.5;
    bool rmv_outliers = true;
    bool non_negative = false;
    bool l_interpolation = false;
    double a = 0.3;
    double wncutoff = 0.000694;
    double ycutoff = 3;
    double ydcutoff = 30;
    std::size_t max_gap = 24;  // min_non_nan_interval, in steps
    bool allow_long_gaps = false;
    std::string country = "PT";
    bool time_covs = false;

    void validate() const {
        if (!(std_dev > 0)) throw ConfigError("std_dev must be > 0");
        if (!(a > 0)) throw ConfigError("a must be > 0");
        if (wncutoff < 0 || ycutoff < 0 || ydcutoff < 0) throw ConfigError("cutoffs must be >= 0");
        if (max_gap < 1) throw ConfigError("min_non_nan_interval must be >= 1");
        if (year_range && year_range->first > year_range->second) throw ConfigError("invalid year_range");
    }
};

/// Holiday dates per country key.
class HolidayCalendar {
public:
    HolidayCalendar() = default;

    /// CSV `country,date` with ISO dates; a header row is optional.
    static HolidayCalendar parse(std::string_view text) {
        HolidayCalendar cal;
        for (const auto& line : csv::lines(text)) {
            auto f = csv::split_line(line.text);
            if (f.size() != 2) throw Error("holiday file: expected country,date at line " + std::to_string(line.number));
            if (line.number == 1 && f[0] == "country") continue;
            auto d = parse_date(f[1], false);
            if (!d) throw Error("holiday file: date parse error at line " + std::to_string(line.number));
            cal.days_[f[0]].insert(*d);
        }
        return cal;
    }

    void add(const std::string& country, Days day) { days_[country].insert(day); }

    /// Registers a country without holidays.
    void declare(const std::string& country) { days_[country]; }

    bool knows(const std::string& country) const { return days_.count(country) > 0; }

    /// Holidays of a country; empty when the country is unknown.
    const std::set<Days>& of(const std::string& country) const {
        static const std::set<Days> none;
        auto it = days_.find(country);
        return it == days_.end() ? none : it->second;
    }

private:
    std::map<std::string, std::set<Days>> days_;
};

// ---------------------------------------------------------------------------
// Outliers

struct OutlierResult {
    SeriesComponent component;
    std::size_t n_removed = 0;
    std::vector<std::string> warnings;
};

/// Per calendar (year, month): values further than std_dev sample standard
/// deviations from the month mean become missing; zeros too when non_negative.
inline OutlierResult remove_outliers(const SeriesComponent& in, double std_dev, bool non_negative) {
    OutlierResult r{in, 0, {}};
    auto& vals = r.component.values;
    std::map<std::pair<int, int>, std::vector<std::size_t>> months;
    for (std::size_t i = 0; i < in.size(); ++i)
        if (vals[i]) months[{year_of(in.timestamps[i]), month_of(in.timestamps[i])}].push_back(i);

    for (const auto& [key, idx] : months) {
        if (idx.size() < 2) {
            r.warnings.push_back("month " + std::to_string(key.first) + "-" + std::to_string(key.second) + " of '" +
                                 in.id + "' has fewer than 2 observations; skipped");
            continue;
        }
        double mean = 0;
        for (auto i : idx) mean += *vals[i];
        mean /= static_cast<double>(idx.size());
        double ss = 0;
        for (auto i : idx) ss += (*vals[i] - mean) * (*vals[i] - mean);
        const double sd = std::sqrt(ss / static_cast<double>(idx.size() - 1));
        if (sd == 0) continue;
        for (auto i : idx)
            if (std::abs(*vals[i] - mean) > std_dev * sd) {
                vals[i].reset();
                ++r.n_removed;
            }
    }
    if (non_negative)
        for (auto& v : vals)
            if (v && *v == 0.0) {
                v.reset();
                ++r.n_removed;
            }
    return r;
}

// ---------------------------------------------------------------------------
// Imputation

struct ImputeResult {
    SeriesComponent component;
    std::size_t n_imputed = 0;
    /// Missing runs longer than max_gap, as (first index, length); left missing.
    std::vector<std::pair<std::size_t, std::size_t>> long_gaps;
};

/// Mean of observed values sharing the time of day with index `i`, taken from
/// days whose weekday/time distance is within wncutoff days, whose year is
/// within ycutoff, whose circular day-of-year distance is within ydcutoff and
/// whose holiday status matches. nullopt when no such value exists.
///
/// wn(t) is read as day-of-week plus time-of-day fraction (in days), so the
/// default 0.000694 (one minute) means "same weekday and time".
inline std::optional<double> historical_average(const SeriesComponent& c, std::size_t i, const EtlOptions& opt,
                                                const std::set<Days>& holidays) {
    if (c.size() < 2) return std::nullopt;
    const auto step = c.timestamps[1] - c.timestamps[0];
    const long per_day = 1440 / step.count();
    const auto t = c.timestamps[i];
    const int year_t = year_of(t), doy_t = day_of_year(t);
    const bool hol_t = holidays.count(day_of(t)) > 0;
    const long max_days = static_cast<long>((opt.ycutoff + 1) * 366);

    double sum = 0;
    std::size_t n = 0;
    for (long d = -max_days; d <= max_days; ++d) {
        if (d == 0) continue;
        const long j = static_cast<long>(i) + d * per_day;
        if (j < 0) continue;
        if (j >= static_cast<long>(c.size())) break;
        const auto& v = c.values[static_cast<std::size_t>(j)];
        if (!v) continue;
        const long wd = ((d % 7) + 7) % 7;
        if (static_cast<double>(std::min(wd, 7 - wd)) > opt.wncutoff) continue;
        const auto s = c.timestamps[static_cast<std::size_t>(j)];
        if (std::abs(year_of(s) - year_t) > opt.ycutoff) continue;
        const int dy = std::abs(day_of_year(s) - doy_t);
        if (std::min(dy, 365 - dy) > opt.ydcutoff) continue;
        if ((holidays.count(day_of(s)) > 0) != hol_t) continue;
        sum += *v;
        ++n;
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
}

/// Fills missing runs of at most max_gap steps. With l_interpolation the
/// linear anchor interpolation is used alone; otherwise a missing point at
/// distance d from its nearest observed neighbour receives
/// w * linear + (1 - w) * historical, w = exp(-a * d). Only observed values
/// feed the historical average, so filled points never influence each other.
inline ImputeResult impute(const SeriesComponent& in, const EtlOptions& opt, const std::set<Days>& holidays = {}) {
    ImputeResult r{in, 0, {}};
    auto& out = r.component.values;
    const std::size_t n = in.size();

    std::size_t i = 0;
    while (i < n) {
        if (in.values[i]) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < n && !in.values[j]) ++j;
        const std::size_t len = j - i;
        if (len > opt.max_gap) {
            r.long_gaps.emplace_back(i, len);
            i = j;
            continue;
        }
        const bool has_left = i > 0, has_right = j < n;
        if (!has_left && !has_right) {  // nothing observed at all
            r.long_gaps.emplace_back(i, len);
            break;
        }
        for (std::size_t k = i; k < j; ++k) {
            std::optional<double> linear;
            std::size_t dist = 0;
            if (has_left && has_right) {
                const double lv = *in.values[i - 1], rv = *in.values[j];
                const double frac = static_cast<double>(k - (i - 1)) / static_cast<double>(j - (i - 1));
                linear = lv + (rv - lv) * frac;
                dist = std::min(k - (i - 1), j - k);
            } else {
                dist = has_left ? k - (i - 1) : j - k;
            }
            const double nearest = has_left && (!has_right || k - (i - 1) <= j - k) ? *in.values[i - 1] : *in.values[j];

            double value = 0;
            if (opt.l_interpolation) {
                value = linear.value_or(nearest);
            } else {
                auto hist = historical_average(in, k, opt, holidays);
                if (linear && hist) {
                    const double w = std::exp(-opt.a * static_cast<double>(dist));
                    value = w * *linear + (1.0 - w) * *hist;
                } else if (linear) {
                    value = *linear;
                } else {
                    value = hist.value_or(nearest);
                }
            }
            out[k] = value;
            ++r.n_imputed;
        }
        i = j;
    }
    return r;
}

/// Longest stretch of a component not interrupted by any of the given gaps.
inline SeriesComponent longest_valid_span(const SeriesComponent& c,
                                          const std::vector<std::pair<std::size_t, std::size_t>>& gaps) {
    std::size_t best_lo = 0, best_len = 0, lo = 0;
    auto consider = [&](std::size_t hi) {
        if (hi > lo && hi - lo > best_len) {
            best_lo = lo;
            best_len = hi - lo;
        }
    };
    for (const auto& [start, len] : gaps) {
        consider(start);
        lo = start + len;
    }
    consider(c.size());
    SeriesComponent out = c;
    out.timestamps = {c.timestamps.begin() + best_lo, c.timestamps.begin() + best_lo + best_len};
    out.values = {c.values.begin() + best_lo, c.values.begin() + best_lo + best_len};
    return out;
}

// ---------------------------------------------------------------------------
// Calendar covariates

/// Hour of day, day of week (Mon = 0), month, weekend flag and holiday flag,
/// aligned with the first component of every target series and extended
/// `extend_steps` slots past its end.
inline TimeSeriesDataset build_calendar_covariates(const TimeSeriesDataset& ds, const std::string& country,
                                                   const HolidayCalendar& holidays, std::size_t extend_steps = 0) {
    if (!holidays.knows(country)) throw Error("unknown holiday calendar '" + country + "'");
    const auto& hol = holidays.of(country);
    TimeSeriesDataset out;
    out.resolution = ds.resolution;
    out.multiple = ds.multiple;
    out.kind = SeriesKind::future_covariates;
    for (const auto& sid : ds.series_ids()) {
        const auto* base = ds.components_of(sid).front();
        const std::pair<const char*, double (*)(TimePoint, const std::set<Days>&)> features[] = {
            {"hour", [](TimePoint t, const std::set<Days>&) { return static_cast<double>(minute_of_day(t) / 60); }},
            {"dayofweek", [](TimePoint t, const std::set<Days>&) { return static_cast<double>(weekday_of(t)); }},
            {"month", [](TimePoint t, const std::set<Days>&) { return static_cast<double>(month_of(t)); }},
            {"weekend", [](TimePoint t, const std::set<Days>&) { return weekday_of(t) >= 5 ? 1.0 : 0.0; }},
            {"holiday", [](TimePoint t, const std::set<Days>& h) { return h.count(day_of(t)) ? 1.0 : 0.0; }},
        };
        for (const auto& [name, fn] : features) {
            SeriesComponent c;
            c.id = sid + "_" + name;
            c.timeseries_id = sid;
            c.timestamps = base->timestamps;
            for (std::size_t k = 1; k <= extend_steps && !base->timestamps.empty(); ++k)
                c.timestamps.push_back(base->timestamps.back() + static_cast<int>(k) * ds.resolution.step());
            c.values.reserve(c.timestamps.size());
            for (auto t : c.timestamps) c.values.emplace_back(fn(t, hol));
            out.components.push_back(std::move(c));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Stage

struct EtlReport {
    TimeSeriesDataset cleaned;
    std::optional<TimeSeriesDataset> covariates;
    TimeSeriesDataset original;  // after year-range selection, before cleaning
    std::size_t n_removed = 0;
    std::size_t n_imputed = 0;
    std::vector<std::string> warnings;
};

/// year_range selection, outlier removal, imputation and optional covariates.
inline EtlReport clean_dataset(const TimeSeriesDataset& ds, const EtlOptions& opt, const HolidayCalendar& holidays) {
    opt.validate();
    EtlReport rep;
    rep.original = ds;
    if (opt.year_range) {
        auto from = at_midnight(Days{std::chrono::year{opt.year_range->first} / 1 / 1});
        auto to = at_midnight(Days{std::chrono::year{opt.year_range->second} / 12 / 31}) + std::chrono::minutes{1439};
        rep.original = slice_by_dates(ds, from, to);
    }
    rep.cleaned = rep.original;
    const auto& hol = holidays.of(opt.country);
    for (auto& c : rep.cleaned.components) {
        if (opt.rmv_outliers) {
            auto o = remove_outliers(c, opt.std_dev, opt.non_negative);
            rep.n_removed += o.n_removed;
            rep.warnings.insert(rep.warnings.end(), o.warnings.begin(), o.warnings.end());
            c = std::move(o.component);
        }
        auto im = impute(c, opt, hol);
        rep.n_imputed += im.n_imputed;
        if (!im.long_gaps.empty()) {
            if (!opt.allow_long_gaps) {
                const auto& g = im.long_gaps.front();
                throw Error("series '" + c.id + "' has a gap of " + std::to_string(g.second) + " steps at " +
                            format_datetime(c.timestamps[g.first]) + " exceeding min_non_nan_interval=" +
                            std::to_string(opt.max_gap) + " (pass allow_long_gaps to trim instead)");
            }
            im.component = longest_valid_span(im.component, im.long_gaps);
            rep.warnings.push_back("series '" + c.id + "' trimmed to its longest span without long gaps");
        }
        c = std::move(im.component);
    }
    auto report = validate_dataset(rep.cleaned);
    if (!report.ok()) throw ValidationError(std::move(report.violations));
    if (opt.time_covs) rep.covariates = build_calendar_covariates(rep.cleaned, opt.country, holidays);
    return rep;
}

/// `timestamp,original,imputed` rows of one component.
inline std::string imputed_plot_csv(const SeriesComponent& original, const SeriesComponent& cleaned) {
    std::string out = "timestamp,original,imputed\n";
    std::size_t j = 0;
    for (std::size_t i = 0; i < cleaned.size(); ++i) {
        const auto t = cleaned.timestamps[i];
        while (j < original.size() && original.timestamps[j] < t) ++j;
        std::string orig;
        if (j < original.size() && original.timestamps[j] == t) orig = csv::format_value(original.values[j]);
        out += format_datetime(t) + "," + orig + "," + csv::format_value(cleaned.values[i]) + "\n";
    }
    return out;
}

/// Reads `series.csv` from the load run, cleans it and stores the results
/// (`series.csv`, optional `future_covs.csv`, `imputed_plot/<id>.csv`) in `run`.
inline EtlReport run_etl(TrackingStore& store, const RunRecord& run, const std::string& load_run_id,
                         const EtlOptions& opt, const HolidayCalendar& holidays) {
    auto upstream = store.get_run(load_run_id);
    if (upstream.status != RunStatus::FINISHED) throw Error("upstream run " + load_run_id + " is not FINISHED");
    const int minutes = std::stoi(upstream.param("resolution"));
    auto ds = parse_wide_csv(store.read_artifact(load_run_id, "series.csv"), false, Resolution{minutes});
    ds.multiple = upstream.params.count("multiple") && upstream.param("multiple") == "true";

    auto rep = clean_dataset(ds, opt, holidays);
    store.log_artifact(run.run_id, "series.csv", write_wide_csv(rep.cleaned));
    for (const auto& c : rep.cleaned.components) {
        const auto* orig = rep.original.find(c.id);
        store.log_artifact(run.run_id, "imputed_plot/" + c.id + ".csv", imputed_plot_csv(orig ? *orig : c, c));
    }
    std::optional<TimeSeriesDataset> covs = rep.covariates;
    if (store.has_artifact(load_run_id, "future_covs.csv")) {
        auto loaded = parse_wide_csv(store.read_artifact(load_run_id, "future_covs.csv"), false, Resolution{minutes},
                                     SeriesKind::future_covariates);
        if (covs) covs->components.insert(covs->components.end(), loaded.components.begin(), loaded.components.end());
        else covs = std::move(loaded);
    }
    if (covs) store.log_artifact(run.run_id, "future_covs.csv", write_wide_csv(*covs));
    store.log_metric(run.run_id, "n_removed", static_cast<double>(rep.n_removed));
    store.log_metric(run.run_id, "n_imputed", static_cast<double>(rep.n_imputed));
    if (!rep.warnings.empty()) {
        std::string w;
        for (const auto& s : rep.warnings) w += s + "\n";
        store.log_artifact(run.run_id, "warnings.txt", w);
    }
    return rep;
}

}  // namespace tsfops
