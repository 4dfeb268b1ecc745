#include <catch_amalgamated.hpp>

#include <fstream>

#include "support.hpp"
#include "tsfops/pipeline.hpp"

using namespace tsfops;
using testing::at;
using Catch::Matchers::ContainsSubstring;

namespace {

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary);
    out << s;
}

/// 120 days of hourly data starting 2020-01-01.
std::string series_file(const testing::TempDir& dir, std::uint64_t seed = 7) {
    const auto path = dir.path() / "series.csv";
    write_text(path, testing::to_single_csv(testing::synthetic_hourly(at(2020, 1, 1), 120 * 24, seed)));
    return path.string();
}

std::map<std::string, std::string> base_config(const std::string& series, const std::string& exp = "unit") {
    return {{"experiment_name", exp},
            {"series_csv", series},
            {"resolution", "60"},
            {"day_first", "false"},
            {"cut_date_val", "20200321"},
            {"cut_date_test", "20200410"},
            {"forecast_horizon", "24"},
            {"m_mase", "24"},
            {"hyperparams_entrypoint", R"({"input_chunk_length": 48, "output_chunk_length": 24})"}};
}

std::size_t count_runs(const TrackingStore& store, Stage s) {
    RunFilter f;
    f.stage = s;
    return store.query_runs(f).size();
}

std::size_t count_stage_runs(const TrackingStore& store) {
    std::size_t n = 0;
    for (auto s : {Stage::load, Stage::etl, Stage::train, Stage::optuna_search, Stage::eval}) n += count_runs(store, s);
    return n;
}

}  // namespace

TEST_CASE("config fills defaults and rejects unknown keys", "[pipeline]") {
    PipelineConfig cfg;
    CHECK(cfg.str("resolution") == "15");
    CHECK(cfg.str("ignore_previous_runs") == "true");
    CHECK(cfg.str("cut_date_val") == "20180101");
    CHECK(cfg.str("forecast_horizon") == "96");
    CHECK(cfg.str("m_mase") == "1");
    CHECK(cfg.str("loss_function") == "mape");
    CHECK_FALSE(cfg.resume());
    CHECK_THROWS_WITH(PipelineConfig::from_map({{"darts_model", "NBEATS"}}), ContainsSubstring("unknown option 'darts_model'"));
    CHECK_THROWS_AS(PipelineConfig::from_map({{"cut_date_val", "2020-01-01"}}), ConfigError);
    CHECK_THROWS_AS(PipelineConfig::from_map({{"cut_date_val", "20200101"}, {"cut_date_test", "20190101"}}), ConfigError);
    CHECK_THROWS_AS(PipelineConfig::from_map({{"model", "NBEATS"}}), ConfigError);
    CHECK_THROWS_AS(PipelineConfig::from_map({{"loss_function", "r2"}}), ConfigError);
    CHECK_THROWS_AS(PipelineConfig::from_map({{"resolution", "7"}}), ConfigError);
    CHECK_THROWS_AS(PipelineConfig::from_map({{"from_mongo", "true"}}), ConfigError);
    CHECK_THROWS_AS(PipelineConfig::from_map({{"past_covs_csv", "x.csv"}}), ConfigError);
}

TEST_CASE("flag and JSON spellings canonicalize identically", "[pipeline]") {
    PipelineConfig flags({{"ignore_previous_runs", "t"}, {"scale", "F"}, {"std_dev", "4.50"}, {"n_trials", "20"},
                          {"test_end_date", "20211231"}, {"stride", "None"}});
    auto j = json::parse(R"({"ignore_previous_runs": true, "scale": false, "std_dev": 4.5, "n_trials": 20,
                             "test_end_date": "20211231", "stride": null})");
    auto body = PipelineConfig::from_json(j);
    CHECK(flags.values() == body.values());
    CHECK(flags.str("scale") == "false");
    CHECK(flags.str("std_dev") == "4.5");
}

TEST_CASE("grids resolve from built-ins, files and inline JSON", "[pipeline]") {
    auto g = resolve_grid(PipelineConfig::from_map({{"model", "linear_ar"}}));
    CHECK(g.name == "linear_ar_default");
    CHECK(fixed_spec(ModelKind::linear_ar, g).lookback() == 168);

    auto s = resolve_grid(PipelineConfig::from_map({{"model", "linear_ar"}, {"opt_test", "true"}}));
    CHECK(s.name == "linear_ar_search");
    CHECK(expand_grid(s).size() == 35);
    CHECK_THROWS_WITH(fixed_spec(ModelKind::linear_ar, s), ContainsSubstring("opt_test=true"));

    auto o = resolve_grid(PipelineConfig::from_map({{"model", "linear_ar"}, {"input_chunk_length", "72"}}));
    CHECK(fixed_spec(ModelKind::linear_ar, o).lookback() == 72);
    CHECK_THROWS_AS(resolve_grid(PipelineConfig::from_map({{"model", "seasonal_naive"}, {"input_chunk_length", "72"}})),
                    ConfigError);

    testing::TempDir dir;
    write_text(dir.path() / "grid.yml", "ar_small:\n  input_chunk_length: [\"list\", 24, 48]\n  ridge: 0.5\n");
    auto f = resolve_grid(PipelineConfig::from_map({{"config_opt", (dir.path() / "grid.yml").string()},
                                          {"hyperparams_entrypoint", "ar_small"}}));
    CHECK(expand_grid(f).size() == 2);
    CHECK_THROWS_WITH(resolve_grid(PipelineConfig::from_map({{"hyperparams_entrypoint", R"({"hidden_size": 3})"}})),
                      ContainsSubstring("unknown hyperparameter 'hidden_size'"));
}

TEST_CASE("pipeline runs four child stages under a parent", "[pipeline]") {
    testing::TempDir dir;
    TrackingStore store(dir.path() / "store");
    auto res = run_pipeline(store, PipelineConfig(base_config(series_file(dir))));

    CHECK(res.parent.status == RunStatus::FINISHED);
    REQUIRE(res.stages.size() == 4);
    CHECK(res.stages[2].first == Stage::train);
    for (const auto& [stage, o] : res.stages) {
        CHECK(o.run.status == RunStatus::FINISHED);
        CHECK(o.run.parent_run_id == res.parent.run_id);
        CHECK_FALSE(o.reused);
    }
    RunFilter children;
    children.parent_run_id = res.parent.run_id;
    CHECK(store.query_runs(children).size() == 4);

    // each stage consumes its predecessor by run reference
    const auto& etl = res.stages[1].second.run;
    const auto& train = res.stages[2].second.run;
    const auto& ev = res.stages[3].second.run;
    CHECK(etl.param("load_run_id") == res.stages[0].second.run.run_id);
    CHECK(train.param("etl_run_id") == etl.run_id);
    CHECK(ev.param("model_run_id") == train.run_id);
    CHECK(store.has_artifact(train.run_id, "model/params.bin"));
    CHECK(res.parent.metric("mape"));
    CHECK(res.parent.metric("mase"));
    CHECK(*res.parent.metric("mape") == *ev.metric("mape"));
    CHECK(res.parent.param("model") == "linear_ar");
}

TEST_CASE("resume reuses finished stages and recomputes only changed ones", "[pipeline]") {
    testing::TempDir dir;
    TrackingStore store(dir.path() / "store");
    auto cfg = base_config(series_file(dir));
    auto first = run_pipeline(store, PipelineConfig(cfg));
    const auto stage_runs = count_stage_runs(store);
    CHECK(stage_runs == 4);

    cfg["ignore_previous_runs"] = "f";
    auto again = run_pipeline(store, PipelineConfig(cfg));
    CHECK(again.executed() == 0);
    CHECK(count_stage_runs(store) == stage_runs);
    CHECK(again.parent.status == RunStatus::FINISHED);
    CHECK(*again.parent.metric("mape") == *first.parent.metric("mape"));

    cfg["forecast_horizon"] = "48";
    auto eval_only = run_pipeline(store, PipelineConfig(cfg));
    CHECK(eval_only.executed() == 1);
    CHECK_FALSE(eval_only.stages[3].second.reused);
    CHECK(eval_only.stages[3].first == Stage::eval);

    // without resume every stage runs again
    cfg["ignore_previous_runs"] = "true";
    auto fresh = run_pipeline(store, PipelineConfig(cfg));
    CHECK(fresh.executed() == 4);
}

TEST_CASE("an interrupted pipeline resumes to the same outputs", "[pipeline]") {
    testing::TempDir dir;
    const auto series = series_file(dir);
    auto cfg = base_config(series);
    cfg["ignore_previous_runs"] = "false";
    PipelineConfig config(cfg);

    TrackingStore whole(dir.path() / "whole");
    auto reference = run_pipeline(whole, config);

    // killed after etl: a parent left RUNNING with two finished stages
    TrackingStore broken(dir.path() / "broken");
    const auto in = prepare_inputs(broken, config, Stage::pipeline);
    auto dead = start_pipeline_run(broken, config);
    StageContext ctx{&broken, "unit", dead.run_id, true};
    auto load = stage_load(ctx, in);
    stage_etl(ctx, in, load.run.run_id);

    auto resumed = run_pipeline(broken, config);
    CHECK(resumed.executed() == 2);
    CHECK(resumed.stages[0].second.reused);
    CHECK(resumed.stages[1].second.reused);
    CHECK(broken.read_artifact(resumed.parent.run_id, "evaluation.json") ==
          whole.read_artifact(reference.parent.run_id, "evaluation.json"));
    CHECK(broken.read_artifact(resumed.stages[2].second.run.run_id, "model/params.bin") ==
          whole.read_artifact(reference.stages[2].second.run.run_id, "model/params.bin"));
}

TEST_CASE("opt_test runs a search stage and refits the best config", "[pipeline]") {
    testing::TempDir dir;
    TrackingStore store(dir.path() / "store");
    auto cfg = base_config(series_file(dir));
    cfg["opt_test"] = "true";
    cfg["n_trials"] = "4";
    cfg["hyperparams_entrypoint"] =
        R"({"input_chunk_length": ["list", 24, 48], "ridge": ["list", 0, 1], "output_chunk_length": 24})";
    auto res = run_pipeline(store, PipelineConfig(cfg));
    REQUIRE(res.stages.size() == 4);
    CHECK(res.stages[2].first == Stage::optuna_search);
    const auto& search = res.stages[2].second.run;
    CHECK(count_runs(store, Stage::train) == 0);

    const auto trials = store.read_artifact(search.run_id, "trials.csv");
    CHECK_THAT(trials, ContainsSubstring("number,value,datetime_start,datetime_complete,input_chunk_length"));
    CHECK(csv::lines(trials).size() == 5);
    CHECK(store.has_artifact(search.run_id, "inline.csv"));
    // four trials are too few for the importance surrogate
    CHECK_FALSE(store.has_artifact(search.run_id, "param_importance.csv"));
    CHECK_THAT(store.read_artifact(search.run_id, "warnings.txt"), ContainsSubstring("importance skipped"));
    auto best = json::parse(search.param("best_config"));
    auto model = read_model(store, search.run_id);
    CHECK(model.spec.hyperparams()["input_chunk_length"] == best["input_chunk_length"]);
    CHECK(search.metric("best_value"));
}

TEST_CASE("a failing stage fails the parent and stops the pipeline", "[pipeline]") {
    testing::TempDir dir;
    auto c = testing::synthetic_hourly(at(2020, 1, 1), 120 * 24, 3);
    for (std::size_t i = 1000; i < 1048; ++i) c.values[i] = std::nullopt;
    write_text(dir.path() / "gappy.csv", testing::to_single_csv(c));
    TrackingStore store(dir.path() / "store");
    auto cfg = base_config((dir.path() / "gappy.csv").string());

    try {
        run_pipeline(store, PipelineConfig(cfg));
        FAIL("expected a stage failure");
    } catch (const StageError& e) {
        CHECK(e.stage() == Stage::etl);
        auto failed = store.get_run(e.run_id());
        CHECK(failed.status == RunStatus::FAILED);
        CHECK_THAT(failed.error, ContainsSubstring("min_non_nan_interval"));
        auto parent = store.get_run(*failed.parent_run_id);
        CHECK(parent.status == RunStatus::FAILED);
    }
    CHECK(count_runs(store, Stage::train) == 0);
    CHECK(count_runs(store, Stage::eval) == 0);

    cfg["allow_long_gaps"] = "true";
    CHECK(run_pipeline(store, PipelineConfig(cfg)).parent.status == RunStatus::FINISHED);
}

TEST_CASE("config errors are raised before any run starts", "[pipeline]") {
    testing::TempDir dir;
    TrackingStore store(dir.path() / "store");
    auto cfg = base_config((dir.path() / "missing.csv").string());
    CHECK_THROWS_AS(run_pipeline(store, PipelineConfig(cfg)), Error);
    cfg = base_config(series_file(dir));
    cfg["hyperparams_entrypoint"] = R"({"input_chunk_length": ["list", 24, 48]})";
    CHECK_THROWS_WITH(run_pipeline(store, PipelineConfig(cfg)), ContainsSubstring("opt_test=true"));
    cfg["hyperparams_entrypoint"] = "no_such_entry";
    CHECK_THROWS_WITH(run_pipeline(store, PipelineConfig(cfg)), ContainsSubstring("entrypoint not found"));
    CHECK(store.query_runs().empty());
}

TEST_CASE("validation failures are stored with the failed load run", "[pipeline]") {
    testing::TempDir dir;
    write_text(dir.path() / "bad.csv", "Datetime,Value\n2020-01-01 01:00,1\n2020-01-01 00:00,2\n");
    TrackingStore store(dir.path() / "store");
    CHECK_THROWS_AS(run_pipeline(store, PipelineConfig(base_config((dir.path() / "bad.csv").string()))), StageError);
    RunFilter f;
    f.stage = Stage::load;
    auto runs = store.query_runs(f);
    REQUIRE(runs.size() == 1);
    CHECK(runs[0].status == RunStatus::FAILED);
    CHECK_THAT(store.read_artifact(runs[0].run_id, "violations.json"), ContainsSubstring("dates_not_sorted"));
}

TEST_CASE("uploaded datasets feed the pipeline by id", "[pipeline]") {
    testing::TempDir dir;
    TrackingStore store(dir.path() / "store");
    const auto text = read_file(series_file(dir));
    auto a = save_dataset(store, "synthetic", text, false, Resolution{60}, false);
    auto b = save_dataset(store, "synthetic", text, false, Resolution{60}, false);
    CHECK(a.id != b.id);
    CHECK(list_datasets(store).size() == 2);
    CHECK_THROWS_AS(save_dataset(store, "empty", "", false, Resolution{60}, false), ValidationError);
    CHECK_THROWS_AS(read_dataset(store, "nope"), NotFoundError);

    auto cfg = base_config("None");
    cfg["dataset_id"] = a.id;
    auto res = run_pipeline(store, PipelineConfig(cfg));
    CHECK(res.parent.status == RunStatus::FINISHED);
    CHECK(res.stages[0].second.run.param("series_source") == "dataset:" + a.id);
    cfg["dataset_id"] = "ffff";
    CHECK_THROWS_AS(run_pipeline(store, PipelineConfig(cfg)), NotFoundError);
}

TEST_CASE("calendar covariates flow through training and inference", "[pipeline]") {
    testing::TempDir dir;
    write_text(dir.path() / "holidays.csv", "country,date\nPT,2020-04-10\nPT,2020-04-25\nPT,2020-05-01\n");
    TrackingStore store(dir.path() / "store");
    auto cfg = base_config(series_file(dir));
    cfg["time_covs"] = "true";
    cfg["holidays_file"] = (dir.path() / "holidays.csv").string();
    auto res = run_pipeline(store, PipelineConfig(cfg));
    CHECK(res.parent.status == RunStatus::FINISHED);
    auto model = read_model(store, res.stages[2].second.run.run_id);
    CHECK(model.n_covariates == 5);
    CHECK(model.meta["calendar"]["holidays"].size() == 3);

    auto history = testing::single(testing::synthetic_hourly(at(2020, 1, 1), 30 * 24, 9));
    auto out = forecast_csv(model, history, nullptr, {48, 24});
    CHECK(csv::lines(out).size() == 49);

    cfg["country"] = "XX";
    CHECK_THROWS_WITH(run_pipeline(store, PipelineConfig(cfg)), ContainsSubstring("unknown holiday calendar"));
}

TEST_CASE("inference rolls the model forward deterministically", "[pipeline]") {
    testing::TempDir dir;
    TrackingStore store(dir.path() / "store");
    auto history = testing::single(testing::synthetic_hourly(at(2020, 1, 1), 60 * 24, 4));
    auto m = fit(ModelSpec(ModelKind::linear_ar, {{"input_chunk_length", 48}, {"output_chunk_length", 24}}), history);
    store.create_experiment("inference");

    auto run = run_inference(store, "inference", m, "memory", history, nullptr, {960, 96});
    CHECK(run.status == RunStatus::FINISHED);
    CHECK(*run.metric("n_rolls") == 10);
    const auto out = store.read_artifact(run.run_id, "forecast.csv");
    auto lines = csv::lines(out);
    REQUIRE(lines.size() == 961);
    CHECK(lines[0].text == "timestamp,id,forecast");
    CHECK_THAT(std::string(lines[1].text), ContainsSubstring("2020-03-01 00:00:00,series,"));

    auto again = run_inference(store, "inference", m, "memory", history, nullptr, {960, 96});
    CHECK(store.read_artifact(again.run_id, "forecast.csv") == out);

    int rolls = 0;
    forecast_csv(m, history, nullptr, {24, 24}, &rolls);
    CHECK(rolls == 1);

    auto shorty = testing::single(testing::synthetic_hourly(at(2020, 1, 1), 10, 4));
    CHECK_THROWS_WITH(run_inference(store, "inference", m, "memory", shorty, nullptr, {24, 24}),
                      ContainsSubstring("lookback underflow"));
}
