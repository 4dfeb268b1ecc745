#include <catch_amalgamated.hpp>

#include "support.hpp"
#include "tsfops/models.hpp"

using namespace tsfops;
using testing::at;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

const std::vector<const SeriesComponent*> no_covs;

SeriesComponent ar1(std::size_t n, double phi, double start) {
    SeriesComponent c{"series", "series", {}, {}};
    double y = start;
    for (std::size_t i = 0; i < n; ++i) {
        c.timestamps.push_back(at(2020, 1, 1) + std::chrono::hours{static_cast<long>(i)});
        c.values.emplace_back(y);
        y *= phi;
    }
    return c;
}

}  // namespace

TEST_CASE("model spec rejects undeclared hyperparameters", "[models]") {
    CHECK_THROWS_WITH(ModelSpec(ModelKind::linear_ar, {{"hidden_size", 4}}), ContainsSubstring("unknown hyperparameter"));
    CHECK_THROWS_AS(ModelSpec(ModelKind::mlp, {{"input_chunk_length", 0}}), ConfigError);
    CHECK_THROWS_AS(ModelSpec(ModelKind::mlp, {{"input_chunk_length", 2.5}}), ConfigError);
    ModelSpec s(ModelKind::seasonal_naive, {{"m", 168}});
    CHECK(s.lookback() == 168);
    CHECK(s.horizon() == 24);
    CHECK_THROWS_AS(model_kind_from_string("nbeats"), ConfigError);
}

TEST_CASE("min-max scaler", "[models]") {
    std::vector<Value> train{0.0, 50.0, 100.0};
    auto s = MinMaxScaler::fit(train);
    CHECK(s.transform(0) == 0.0);
    CHECK(s.transform(50) == 0.5);
    CHECK(s.transform(100) == 1.0);
    CHECK(s.transform(120) == 1.2);
    CHECK(s.inverse(s.transform(37.0)) == 37.0);
    auto flat = MinMaxScaler::fit(std::vector<Value>{5.0, 5.0});
    CHECK(flat.transform(5) == 0.0);
    CHECK(flat.transform(9) == 0.0);
    CHECK(flat.inverse(0.0) == 5.0);
}

TEST_CASE("split partitions the series at the cut dates", "[models]") {
    auto c = testing::synthetic_hourly(at(2019, 1, 1), 24 * (365 + 366 + 365), 1);
    auto ds = testing::single(c);
    auto parts = split(ds, SplitSpec(at(2020, 1, 1), at(2021, 1, 1), at(2021, 12, 31)));
    const auto& tr = parts.train.components[0];
    const auto& va = parts.validation.components[0];
    const auto& te = parts.test.components[0];
    CHECK(tr.timestamps.back() == at(2019, 12, 31, 23));
    CHECK(va.timestamps.front() == at(2020, 1, 1));
    CHECK(va.size() == 24 * 366);
    CHECK(te.timestamps.back() == at(2021, 12, 31, 23));
    CHECK(tr.size() + va.size() + te.size() == c.size());

    CHECK_THROWS_WITH(split(ds, SplitSpec(at(2019, 1, 1), at(2021, 1, 1))), ContainsSubstring("degenerate split"));
}

TEST_CASE("seasonal naive echoes the last season", "[models]") {
    auto c = testing::synthetic_hourly(at(2020, 1, 1), 24 * 5, 2);
    auto ds = testing::single(c);
    auto m = fit(ModelSpec(ModelKind::seasonal_naive, {{"m", 24}}), ds);
    auto f = predict(m, c, no_covs, 24);
    for (int k = 0; k < 24; ++k) CHECK(f.values[k] == Catch::Approx(*c.values[c.size() - 24 + k]).epsilon(1e-12));
    CHECK(f.timestamps.front() == c.timestamps.back() + std::chrono::hours{1});

    // Exactly equal with scaling switched off.
    auto raw = fit(ModelSpec(ModelKind::seasonal_naive, {{"m", 24}}), ds, nullptr, {.scale = false});
    auto g = predict(raw, c, no_covs, 72);
    for (int k = 0; k < 72; ++k) CHECK(g.values[k] == *c.values[c.size() - 24 + k % 24]);
}

TEST_CASE("rolls: horizon 72 with chunk 24 takes three rolls", "[models]") {
    auto c = testing::synthetic_hourly(at(2020, 1, 1), 24 * 5, 2);
    auto m = fit(ModelSpec(ModelKind::seasonal_naive, {{"m", 24}}), testing::single(c));
    CHECK(predict(m, c, no_covs, 72).n_rolls == 3);
    CHECK(predict(m, c, no_covs, 960, 96).n_rolls == 10);
    CHECK(predict(m, c, no_covs, 24).n_rolls == 1);
    CHECK_THROWS_WITH(predict(m, ar1(10, 1, 1), no_covs, 24), ContainsSubstring("lookback underflow"));
}

TEST_CASE("linear_ar recovers an AR(1) coefficient", "[models]") {
    auto c = ar1(200, 0.9, 1000.0);
    ModelSpec spec(ModelKind::linear_ar, {{"input_chunk_length", 1}, {"output_chunk_length", 1}, {"ridge", 0.0}});
    auto m = fit(spec, testing::single(c), nullptr, {.scale = false});
    CHECK_THAT(linear_ar_coefficient(m, 0, 1), WithinAbs(0.9, 1e-6));
    CHECK_THAT(m.params[0], WithinAbs(0.0, 1e-6));

    // Scaling only reparametrizes: forecasts still follow the process.
    auto scaled = fit(spec, testing::single(c));
    auto f = predict(scaled, c, no_covs, 3);
    CHECK_THAT(f.values[2], WithinAbs(*c.values.back() * 0.9 * 0.9 * 0.9, 1e-6));
}

TEST_CASE("linear_ar is too short without a full frame", "[models]") {
    ModelSpec spec(ModelKind::linear_ar, {{"input_chunk_length", 24}, {"output_chunk_length", 24}});
    CHECK_THROWS_WITH(fit(spec, testing::single(ar1(40, 0.5, 1))), ContainsSubstring("train too short"));
}

TEST_CASE("constant series gives a constant forecast", "[models]") {
    SeriesComponent c = ar1(100, 1.0, 42.0);
    for (auto kind : {ModelKind::seasonal_naive, ModelKind::linear_ar}) {
        auto m = fit(ModelSpec(kind, {}), testing::single(c));
        for (double v : predict(m, c, no_covs, 48).values) CHECK_THAT(v, WithinAbs(42.0, 1e-9));
    }
}

TEST_CASE("mlp gradient matches central differences", "[models]") {
    MlpShape s{5, 4, 3};
    auto p = mlp_init(s, 7);
    detail::Rng rng(3);
    Eigen::MatrixXd x(10, 5), y(10, 3);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1, 1);
    for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = rng.uniform(-1, 1);
    std::vector<double> grad;
    mlp_loss_and_gradient(s, p, x, y, &grad);
    const double h = 1e-6;
    for (std::size_t i = 0; i < p.size(); ++i) {
        auto plus = p, minus = p;
        plus[i] += h;
        minus[i] -= h;
        const double fd = (mlp_loss_and_gradient(s, plus, x, y, nullptr) - mlp_loss_and_gradient(s, minus, x, y, nullptr)) / (2 * h);
        const double denom = std::max({std::abs(fd), std::abs(grad[i]), 1e-8});
        CHECK(std::abs(fd - grad[i]) / denom < 1e-4);
    }
}

TEST_CASE("mlp training is deterministic and reduces loss", "[models]") {
    auto c = testing::synthetic_hourly(at(2020, 1, 1), 24 * 30, 5);
    auto ds = testing::single(c);
    json hp{{"input_chunk_length", 24}, {"output_chunk_length", 12}, {"hidden_size", 8}, {"n_epochs", 5}, {"random_state", 11}};
    auto a = fit(ModelSpec(ModelKind::mlp, hp), ds);
    auto b = fit(ModelSpec(ModelKind::mlp, hp), ds);
    CHECK(a.params == b.params);
    CHECK(model_files(a) == model_files(b));

    hp["n_epochs"] = 0;
    auto init = fit(ModelSpec(ModelKind::mlp, hp), ds);
    CHECK(init.params == mlp_init(mlp_shape(init), 11));
    CHECK(a.meta["final_train_loss"].get<double>() < init.meta["final_train_loss"].get<double>());

    hp["random_state"] = 12;
    hp["n_epochs"] = 5;
    CHECK(fit(ModelSpec(ModelKind::mlp, hp), ds).params != a.params);
}

TEST_CASE("model artifacts reload bit-identically", "[models]") {
    auto c = testing::synthetic_hourly(at(2020, 1, 1), 24 * 20, 6);
    auto ds = testing::single(c);
    for (auto kind : {ModelKind::seasonal_naive, ModelKind::linear_ar, ModelKind::mlp}) {
        auto m = fit(ModelSpec(kind, {{"output_chunk_length", 24}}), ds);
        auto files = model_files(m);
        auto back = load_model(files);
        CHECK(back == m);
        CHECK(predict(back, c, no_covs, 48).values == predict(m, c, no_covs, 48).values);
        CHECK(files.at("params.bin").size() == m.params.size() * 8);
    }
    CHECK(decode_params(encode_params({1.5, -2.0}))[1] == -2.0);
    CHECK(encode_params({1.0}) == std::string("\x00\x00\x00\x00\x00\x00\xf0\x3f", 8));
}

TEST_CASE("future covariates feed the model and must cover the horizon", "[models]") {
    auto c = testing::synthetic_hourly(at(2020, 1, 1), 24 * 20, 6, 0.0);
    auto ds = testing::single(c);
    TimeSeriesDataset covs;
    covs.resolution = Resolution{60};
    covs.kind = SeriesKind::future_covariates;
    SeriesComponent hour{"series_hour", "series", {}, {}};
    for (std::size_t i = 0; i < c.size() + 24; ++i) {
        hour.timestamps.push_back(c.timestamps.front() + std::chrono::hours{static_cast<long>(i)});
        hour.values.emplace_back(static_cast<double>(i % 24));
    }
    covs.components.push_back(hour);
    auto m = fit(ModelSpec(ModelKind::linear_ar, {{"input_chunk_length", 24}, {"output_chunk_length", 24}}), ds, &covs);
    CHECK(m.n_covariates == 1);
    auto cv = covariates_for(&covs, "series", ds.series_ids());
    CHECK(predict(m, c, cv, 24).values.size() == 24);
    CHECK_THROWS_WITH(predict(m, c, cv, 48), ContainsSubstring("covariate coverage error"));
    CHECK_THROWS_WITH(predict(m, c, no_covs, 24), ContainsSubstring("covariate coverage error"));
}
