#include <catch_amalgamated.hpp>

#include "support.hpp"
#include "tsfops/eval.hpp"

using namespace tsfops;
using testing::at;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

const std::vector<Value> no_train;

SeriesComponent periodic(std::size_t n, int period) {
    SeriesComponent c{"series", "series", {}, {}};
    for (std::size_t i = 0; i < n; ++i) {
        c.timestamps.push_back(at(2020, 1, 1) + std::chrono::hours{static_cast<long>(i)});
        c.values.emplace_back(100.0 + static_cast<double>((i * 7) % period));
    }
    return c;
}

}  // namespace

TEST_CASE("metrics match the hand-computed example", "[eval]") {
    std::vector<double> a{100, 200, 300, 400}, f{110, 190, 330, 360};
    auto m = compute_metrics(a, f, no_train, 1);
    // errors 10, -10, 30, -40: mean absolute error 90 / 4
    CHECK_THAT(*m.get("mae"), WithinAbs(22.5, 1e-9));
    CHECK_THAT(*m.get("rmse"), WithinAbs(std::sqrt(675.0), 1e-9));
    CHECK_THAT(*m.get("mape"), WithinAbs(100.0 * (0.1 + 0.05 + 0.1 + 0.1) / 4, 1e-9));
    CHECK_THAT(*m.get("mape"), WithinAbs(8.75, 1e-9));
    CHECK_THAT(*m.get("nrmse_mean"), WithinAbs(std::sqrt(675.0) / 250.0, 1e-12));
    CHECK_THAT(*m.get("nrmse_minmax"), WithinAbs(std::sqrt(675.0) / 300.0, 1e-12));
    const double smape = 100.0 / 4 * (20.0 / 210 + 20.0 / 390 + 60.0 / 630 + 80.0 / 760);
    CHECK_THAT(*m.get("smape"), WithinAbs(smape, 1e-9));
    CHECK_FALSE(m.get("mase"));
}

TEST_CASE("perfect forecast gives zero metrics", "[eval]") {
    std::vector<double> a{100, 200, 300, 400};
    std::vector<Value> train{1.0, 2.0, 4.0};
    auto m = compute_metrics(a, a, train, 1);
    for (const auto& name : metric_names()) CHECK(*m.get(name) == 0.0);
}

TEST_CASE("undefined metrics are flagged, not NaN", "[eval]") {
    std::vector<double> a{0, 5, 5}, f{1, 5, 5};
    auto m = compute_metrics(a, f, std::vector<Value>{3.0, 3.0, 3.0}, 1);
    CHECK_FALSE(m.get("mape"));
    CHECK_FALSE(m.get("mase"));
    CHECK(m.get("mae"));
    std::vector<double> flat{5, 5};
    CHECK_FALSE(compute_metrics(flat, flat, no_train, 1).get("nrmse_minmax"));
}

TEST_CASE("smape is symmetric and mae never exceeds rmse", "[eval]") {
    detail::Rng rng(1);
    for (int t = 0; t < 100; ++t) {
        std::vector<double> a(20), f(20);
        for (auto& x : a) x = rng.uniform(1, 100);
        for (auto& x : f) x = rng.uniform(1, 100);
        auto m1 = compute_metrics(a, f, no_train, 1), m2 = compute_metrics(f, a, no_train, 1);
        CHECK_THAT(*m1.get("smape"), WithinAbs(*m2.get("smape"), 1e-9));
        CHECK(*m1.get("mae") <= *m1.get("rmse"));
        for (const auto& [k, v] : m1.values)
            if (v) CHECK(*v >= 0);
    }
}

TEST_CASE("in-sample mase of the seasonal naive is exactly one", "[eval]") {
    auto c = testing::synthetic_hourly(at(2020, 1, 1), 24 * 30, 8);
    for (int m : {1, 24, 168}) {
        std::vector<double> actual, naive;
        for (std::size_t t = static_cast<std::size_t>(m); t < c.size(); ++t) {
            actual.push_back(*c.values[t]);
            naive.push_back(*c.values[t - m]);
        }
        CHECK(*compute_metrics(actual, naive, c.values, m).get("mase") == 1.0);
    }
}

TEST_CASE("backtest blocks and stitching", "[eval]") {
    auto c = testing::synthetic_hourly(at(2020, 1, 1), 24 * 10, 3);
    auto ds = testing::single(c);
    auto m = fit(ModelSpec(ModelKind::seasonal_naive, {{"m", 24}}), ds);
    const auto start = at(2020, 1, 8), end = at(2020, 1, 10, 23);
    BacktestOptions opt;
    auto bt = backtest(m, c, ds.resolution, nullptr, ds.series_ids(), start, end, opt);
    CHECK(bt.n_blocks == 3);
    REQUIRE(bt.forecast.size() == 72);
    CHECK(bt.timestamps.front() == start);
    CHECK(bt.timestamps.back() == end);
    for (std::size_t i = 1; i < bt.timestamps.size(); ++i) CHECK(bt.timestamps[i] - bt.timestamps[i - 1] == std::chrono::hours{1});

    // Last block truncated.
    auto part = backtest(m, c, ds.resolution, nullptr, ds.series_ids(), start, at(2020, 1, 9, 11), opt);
    CHECK(part.n_blocks == 2);
    CHECK(part.forecast.size() == 36);

    // Stride 12: the later block overwrites the overlap.
    opt.stride = 12;
    auto lin = fit(ModelSpec(ModelKind::linear_ar, {{"input_chunk_length", 48}, {"output_chunk_length", 24}}), ds);
    auto ov = backtest(lin, c, ds.resolution, nullptr, ds.series_ids(), start, end, opt);
    CHECK(ov.n_blocks == 6);
    const auto idx = static_cast<std::size_t>((start - c.timestamps.front()) / std::chrono::hours{1});
    std::vector<const SeriesComponent*> none;
    auto second = predict(lin, std::span<const Value>(c.values).first(idx + 12), c.timestamps[idx + 11],
                          std::chrono::hours{1}, c.id, none, 24);
    for (std::size_t k = 0; k < 12; ++k) CHECK(ov.forecast[12 + k] == second.values[k]);

    SeriesComponent shortc = c;
    CHECK_THROWS_WITH(backtest(m, c, ds.resolution, nullptr, ds.series_ids(), at(2020, 1, 1, 5), end, BacktestOptions{}),
                      ContainsSubstring("lookback underflow"));
}

TEST_CASE("seasonal naive on periodic data backtests with zero error", "[eval]") {
    auto c = periodic(24 * 8, 24);
    auto ds = testing::single(c);
    auto m = fit(ModelSpec(ModelKind::seasonal_naive, {{"m", 24}}), ds);
    auto rep = evaluate(m, ds, nullptr, at(2020, 1, 6), at(2020, 1, 8, 23), BacktestOptions{});
    CHECK(*rep.average.get("mae") == 0.0);
    CHECK(*rep.average.get("mape") == 0.0);
}

TEST_CASE("no leakage: future actuals do not change a block", "[eval]") {
    auto c = testing::synthetic_hourly(at(2020, 1, 1), 24 * 10, 3);
    auto ds = testing::single(c);
    auto m = fit(ModelSpec(ModelKind::linear_ar, {{"input_chunk_length", 48}}), ds);
    const auto start = at(2020, 1, 8), end = at(2020, 1, 10, 23);
    auto base = backtest(m, c, ds.resolution, nullptr, ds.series_ids(), start, end, BacktestOptions{});
    auto mutated = c;
    const std::size_t first = 24 * 7;
    for (std::size_t i = first + 30; i < c.size(); ++i) mutated.values[i] = *c.values[i] * 3 + 7;
    auto after = backtest(m, mutated, ds.resolution, nullptr, ds.series_ids(), start, end, BacktestOptions{});
    // Blocks 0 and 1 start before or at index 30 of the test; block 0 is untouched, block 1 starts at 24.
    for (std::size_t k = 0; k < 48; ++k) CHECK(after.forecast[k] == base.forecast[k]);
}

TEST_CASE("retrain refits on the history before each block", "[eval]") {
    auto c = testing::synthetic_hourly(at(2020, 1, 1), 24 * 10, 3);
    auto ds = testing::single(c);
    auto m = fit(ModelSpec(ModelKind::linear_ar, {{"input_chunk_length", 24}}), testing::single(c));
    BacktestOptions opt;
    opt.retrain = true;
    auto bt = backtest(m, c, ds.resolution, nullptr, ds.series_ids(), at(2020, 1, 9), at(2020, 1, 10, 23), opt);
    CHECK(bt.n_blocks == 2);
}

TEST_CASE("evaluate averages across series and honours eval_series", "[eval]") {
    TimeSeriesDataset ds;
    ds.resolution = Resolution{60};
    ds.multiple = true;
    for (auto id : {"A", "B", "C"}) ds.components.push_back(testing::synthetic_hourly(at(2020, 1, 1), 24 * 10, id[0], 20, id));
    auto m = fit(ModelSpec(ModelKind::seasonal_naive, {{"m", 24}}), ds);
    auto rep = evaluate(m, ds, nullptr, at(2020, 1, 8), at(2020, 1, 10, 23), BacktestOptions{});
    REQUIRE(rep.per_series.size() == 3);
    double sum = 0;
    for (const auto& [id, mm] : rep.per_series) sum += *mm.get("mape");
    CHECK_THAT(*rep.average.get("mape"), WithinAbs(sum / 3, 1e-12));

    auto one = evaluate(m, ds, nullptr, at(2020, 1, 8), at(2020, 1, 10, 23), BacktestOptions{}, false, "B");
    CHECK(one.evaluated == std::vector<std::string>{"B"});
    CHECK(*one.average.get("mape") == *one.per_series["B"].get("mape"));
    CHECK_THROWS_WITH(evaluate(m, ds, nullptr, at(2020, 1, 8), at(2020, 1, 10, 23), BacktestOptions{}, false, "Z"),
                      ContainsSubstring("unknown series"));
}

TEST_CASE("plot data has one row per test step", "[eval]") {
    auto c = testing::synthetic_hourly(at(2020, 1, 1), 24 * 10, 3);
    auto ds = testing::single(c);
    auto m = fit(ModelSpec(ModelKind::seasonal_naive, {{"m", 24}}), ds);
    auto rep = evaluate(m, ds, nullptr, at(2020, 1, 8), at(2020, 1, 10, 23), BacktestOptions{});
    auto text = plot_csv(rep.backtests.at("series"));
    CHECK(text.rfind("timestamp,actual,forecast\n", 0) == 0);
    CHECK(csv::lines(text).size() == 73);
}
