#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsfops/core.hpp"
#include "tsfops/csv.hpp"
#include "tsfops/models.hpp"
#include "tsfops/tracking.hpp"

namespace tsfops {

inline const std::vector<std::string>& metric_names() {
    static const std::vector<std::string> names{"mae", "rmse", "nrmse_minmax", "nrmse_mean", "mape", "smape", "mase"};
    return names;
}

/// Point-forecast accuracy. Undefined metrics (zero actuals for mape, flat
/// actuals for nrmse_minmax, zero naive error for mase, ...) are nullopt.
struct Metrics {
    std::map<std::string, std::optional<double>> values;

    std::optional<double> get(const std::string& name) const {
        auto it = values.find(name);
        return it == values.end() ? std::nullopt : it->second;
    }

    json to_json() const {
        json j = json::object();
        for (const auto& [k, v] : values) j[k] = v ? json(*v) : json(nullptr);
        return j;
    }
};

/// In-sample MAE of the m-step naive forecast over the observed pairs of `train`.
inline std::optional<double> naive_mae(std::span<const Value> train, int m) {
    if (m < 1) throw ConfigError("m_mase must be >= 1");
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t t = static_cast<std::size_t>(m); t < train.size(); ++t)
        if (train[t] && train[t - m]) {
            sum += std::abs(*train[t] - *train[t - m]);
            ++n;
        }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
}

inline Metrics compute_metrics(std::span<const double> actual, std::span<const double> forecast,
                               std::span<const Value> train, int m_mase) {
    if (actual.size() != forecast.size()) throw Error("actual and forecast lengths differ");
    if (actual.empty()) throw Error("cannot compute metrics on an empty series");
    const double n = static_cast<double>(actual.size());
    double abs_sum = 0, sq_sum = 0, ape_sum = 0, sape_sum = 0, act_sum = 0;
    double lo = actual[0], hi = actual[0];
    bool zero_actual = false;
    for (std::size_t i = 0; i < actual.size(); ++i) {
        const double e = forecast[i] - actual[i];
        abs_sum += std::abs(e);
        sq_sum += e * e;
        act_sum += actual[i];
        lo = std::min(lo, actual[i]);
        hi = std::max(hi, actual[i]);
        if (actual[i] == 0) zero_actual = true;
        else ape_sum += std::abs(e) / std::abs(actual[i]);
        const double denom = std::abs(actual[i]) + std::abs(forecast[i]);
        if (denom > 0) sape_sum += 2 * std::abs(e) / denom;
    }
    Metrics m;
    const double mae = abs_sum / n;
    const double rmse = std::sqrt(sq_sum / n);
    const double mean = act_sum / n;
    m.values["mae"] = mae;
    m.values["rmse"] = rmse;
    m.values["nrmse_minmax"] = hi > lo ? std::optional<double>(rmse / (hi - lo)) : std::nullopt;
    m.values["nrmse_mean"] = mean != 0 ? std::optional<double>(rmse / mean) : std::nullopt;
    m.values["mape"] = zero_actual ? std::nullopt : std::optional<double>(100.0 * ape_sum / n);
    m.values["smape"] = 100.0 * sape_sum / n;
    auto scale = naive_mae(train, m_mase);
    m.values["mase"] = scale && *scale > 0 ? std::optional<double>(mae / *scale) : std::nullopt;
    return m;
}

// ---------------------------------------------------------------------------
// Backtesting

struct BacktestOptions {
    int forecast_horizon = 24;
    int stride = 0;  // 0 = forecast_horizon
    bool retrain = false;
    int m_mase = 24;

    int effective_stride() const { return stride > 0 ? stride : forecast_horizon; }

    void validate() const {
        if (forecast_horizon < 1) throw ConfigError("forecast_horizon must be >= 1");
        if (stride < 0) throw ConfigError("stride must be >= 1");
        if (m_mase < 1) throw ConfigError("m_mase must be >= 1");
    }
};

struct BacktestResult {
    std::vector<TimePoint> timestamps;
    std::vector<double> forecast;
    std::vector<Value> actual;
    int n_blocks = 0;
};

/// Forecasts blocks of forecast_horizon steps starting at test_start, then
/// every stride steps, each from the actual history strictly before the
/// block start. Overlapping steps keep the later block's value and the last
/// block is cut at test_end. With retrain the model is refit on the history
/// before every block.
inline BacktestResult backtest(const TrainedModel& model, const SeriesComponent& series, Resolution resolution,
                               const TimeSeriesDataset* covariates, const std::vector<std::string>& target_series,
                               TimePoint test_start, TimePoint test_end, const BacktestOptions& opt) {
    opt.validate();
    if (test_start > test_end) throw Error("invalid range: test start after test end");
    const auto& ts = series.timestamps;
    const auto first = std::lower_bound(ts.begin(), ts.end(), test_start) - ts.begin();
    const auto last_excl = std::upper_bound(ts.begin(), ts.end(), test_end) - ts.begin();
    if (first >= last_excl) throw Error("empty test segment for component '" + series.id + "'");
    if (first < model.spec.lookback())
        throw Error("lookback underflow: " + std::to_string(first) + " points before the test start, model needs " +
                    std::to_string(model.spec.lookback()));

    const auto covs = covariates_for(covariates, series.timeseries_id, target_series);
    const std::span<const Value> values(series.values);

    BacktestResult out;
    const auto len = static_cast<std::size_t>(last_excl - first);
    out.timestamps.assign(ts.begin() + first, ts.begin() + last_excl);
    out.actual.assign(series.values.begin() + first, series.values.begin() + last_excl);
    out.forecast.assign(len, 0.0);

    for (auto b = first; b < last_excl; b += opt.effective_stride()) {
        const auto history = values.first(static_cast<std::size_t>(b));
        const TrainedModel* m = &model;
        TrainedModel refit;
        if (opt.retrain) {
            TimeSeriesDataset past;
            past.resolution = resolution;
            SeriesComponent h = series;
            h.timestamps.resize(static_cast<std::size_t>(b));
            h.values.resize(static_cast<std::size_t>(b));
            past.components.push_back(std::move(h));
            refit = fit(model.spec, past, covariates, {model.scale, model.scale_covs});
            m = &refit;
        }
        auto f = predict(*m, history, ts[static_cast<std::size_t>(b - 1)], resolution.step(), series.id, covs,
                         opt.forecast_horizon);
        for (std::size_t k = 0; k < f.values.size() && static_cast<std::ptrdiff_t>(b + k) < last_excl; ++k)
            out.forecast[static_cast<std::size_t>(b - first) + k] = f.values[k];
        ++out.n_blocks;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvaluationReport {
    std::vector<std::string> evaluated;             // component ids, in dataset order
    std::map<std::string, Metrics> per_series;       // by component id
    std::map<std::string, BacktestResult> backtests;  // by component id
    Metrics average;
    std::map<std::string, std::size_t> undefined_counts;

    json to_json() const {
        json per = json::object();
        for (const auto& [k, v] : per_series) per[k] = v.to_json();
        return {{"evaluated", evaluated}, {"per_series", per}, {"average", average.to_json()},
                {"undefined_counts", undefined_counts}};
    }
};

/// Metrics over the observed actuals of a backtest; MASE is scaled by the
/// naive error on every point before the test start.
inline Metrics backtest_metrics(const BacktestResult& bt, const SeriesComponent& series, int m_mase) {
    std::vector<double> a, f;
    for (std::size_t i = 0; i < bt.actual.size(); ++i)
        if (bt.actual[i]) {
            a.push_back(*bt.actual[i]);
            f.push_back(bt.forecast[i]);
        }
    const auto pre = std::lower_bound(series.timestamps.begin(), series.timestamps.end(), bt.timestamps.front()) -
                     series.timestamps.begin();
    return compute_metrics(a, f, std::span<const Value>(series.values).first(static_cast<std::size_t>(pre)), m_mase);
}

/// Arithmetic mean per metric over the series where it is defined.
inline Metrics average_metrics(const std::map<std::string, Metrics>& per_series,
                               std::map<std::string, std::size_t>* undefined_counts = nullptr) {
    Metrics avg;
    for (const auto& name : metric_names()) {
        double sum = 0;
        std::size_t n = 0, undefined = 0;
        for (const auto& [id, m] : per_series) {
            if (auto v = m.get(name)) {
                sum += *v;
                ++n;
            } else {
                ++undefined;
            }
        }
        avg.values[name] = n ? std::optional<double>(sum / static_cast<double>(n)) : std::nullopt;
        if (undefined_counts && undefined) (*undefined_counts)[name] = undefined;
    }
    return avg;
}

/// Backtests the requested components over [test_start, test_end]: all of them
/// with evaluate_all_ts, otherwise those of the series (or the component) named
/// eval_series, defaulting to the first series.
inline EvaluationReport evaluate(const TrainedModel& model, const TimeSeriesDataset& data,
                                 const TimeSeriesDataset* covariates, TimePoint test_start, TimePoint test_end,
                                 const BacktestOptions& opt, bool evaluate_all_ts = true,
                                 const std::string& eval_series = {}) {
    EvaluationReport rep;
    const auto series = data.series_ids();
    std::vector<const SeriesComponent*> chosen;
    if (evaluate_all_ts) {
        for (const auto& c : data.components) chosen.push_back(&c);
    } else {
        const std::string want = eval_series.empty() && !series.empty() ? series.front() : eval_series;
        chosen = data.components_of(want);
        if (chosen.empty())
            if (const auto* c = data.find(want)) chosen.push_back(c);
        if (chosen.empty()) throw NotFoundError("unknown series '" + want + "'");
    }
    for (const auto* c : chosen) {
        auto bt = backtest(model, *c, data.resolution, covariates, series, test_start, test_end, opt);
        rep.per_series[c->id] = backtest_metrics(bt, *c, opt.m_mase);
        rep.backtests[c->id] = std::move(bt);
        rep.evaluated.push_back(c->id);
    }
    rep.average = average_metrics(rep.per_series, &rep.undefined_counts);
    return rep;
}

/// `timestamp,actual,forecast` rows.
inline std::string plot_csv(const BacktestResult& bt) {
    std::string out = "timestamp,actual,forecast\n";
    for (std::size_t i = 0; i < bt.timestamps.size(); ++i)
        out += format_datetime(bt.timestamps[i]) + "," + csv::format_value(bt.actual[i]) + "," +
               csv::format_number(bt.forecast[i]) + "\n";
    return out;
}

/// Logs averaged metrics (plus per-series ones when several components were
/// evaluated) and stores the plot data and a JSON summary in `run`.
inline void log_evaluation(TrackingStore& store, const RunRecord& run, const EvaluationReport& rep,
                           TimePoint test_start, int forecast_horizon) {
    for (const auto& [name, v] : rep.average.values)
        if (v) store.log_metric(run.run_id, name, *v);
    if (rep.evaluated.size() > 1)
        for (const auto& [id, m] : rep.per_series)
            for (const auto& [name, v] : m.values)
                if (v && detail::safe_name(name + "_" + id)) store.log_metric(run.run_id, name + "_" + id, *v);

    const auto& first = rep.backtests.at(rep.evaluated.front());
    const auto plot = plot_csv(first);
    store.log_artifact(run.run_id, "forecast_plot.csv", plot);
    if (auto mape = rep.average.get("mape")) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.2f", *mape);
        store.log_artifact(run.run_id,
                           "test_start_date_" + format_date(test_start) + "_forecast_horizon_" +
                               std::to_string(forecast_horizon) + "_mape_" + buf + ".csv",
                           plot);
    }
    for (const auto& id : rep.evaluated)
        if (detail::safe_name(id)) store.log_artifact(run.run_id, "plots/" + id + ".csv", plot_csv(rep.backtests.at(id)));
    store.log_artifact(run.run_id, "evaluation.json", rep.to_json().dump(2));
}

}  // namespace tsfops
