#include <catch_amalgamated.hpp>

#include <thread>

#include "support.hpp"
#include "tsfops/hash.hpp"
#include "tsfops/tracking.hpp"

using namespace tsfops;
using Catch::Matchers::ContainsSubstring;

TEST_CASE("experiments are created idempotently", "[tracking]") {
    testing::TempDir dir;
    TrackingStore store(dir.path());
    auto a = store.create_experiment("example");
    CHECK(store.create_experiment("example") == a);
    CHECK(fs::is_directory(dir.path() / "example"));
    auto b = store.create_experiment("other");
    CHECK(a != b);
    CHECK_THROWS(store.create_experiment(""));
    CHECK(store.experiments() == std::vector<std::string>{"example", "other"});
}

TEST_CASE("runs carry params, metrics and artifacts", "[tracking]") {
    testing::TempDir dir;
    TrackingStore store(dir.path());
    store.create_experiment("example");
    auto parent = store.start_run("example", Stage::pipeline);
    auto run = store.start_run("example", Stage::eval, parent.run_id);
    CHECK(run.run_id.size() == 32);

    store.log_param(run.run_id, "forecast_horizon", "24");
    store.log_metric(run.run_id, "mape", 3.05);
    store.log_metric(run.run_id, "mae", 1.0);
    store.log_metric(run.run_id, "mae", 2.0);
    std::string blob("\0\x01binary\xff", 9);
    store.log_artifact(run.run_id, "nested/blob.bin", blob);
    store.end_run(run.run_id, RunStatus::FINISHED);

    auto back = store.get_run(run.run_id);
    CHECK(back.status == RunStatus::FINISHED);
    CHECK(back.parent_run_id == parent.run_id);
    CHECK(back.param("forecast_horizon") == "24");
    CHECK(back.metric("mape") == 3.05);
    CHECK(back.metrics["mae"].size() == 2);
    CHECK(sha256_hex(store.read_artifact(run.run_id, "nested/blob.bin")) == sha256_hex(blob));
    CHECK_THROWS_WITH(store.read_artifact(run.run_id, "missing.csv"), ContainsSubstring("upstream artifact not found"));

    CHECK_THROWS_WITH(store.log_metric(run.run_id, "mape", 1.0), ContainsSubstring("run sealed"));
    CHECK_THROWS_WITH(store.log_param(run.run_id, "x", "1"), ContainsSubstring("run sealed"));
    CHECK_THROWS_WITH(store.log_artifact(run.run_id, "x.txt", "1"), ContainsSubstring("run sealed"));
}

TEST_CASE("start_run needs an existing experiment and yields unique ids", "[tracking]") {
    testing::TempDir dir;
    TrackingStore store(dir.path());
    CHECK_THROWS_AS(store.start_run("nope", Stage::load), NotFoundError);
    store.create_experiment("example");
    std::vector<std::string> ids(8);
    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < ids.size(); ++i)
        threads.emplace_back([&, i] { ids[i] = store.start_run("example", Stage::load).run_id; });
    for (auto& t : threads) t.join();
    std::sort(ids.begin(), ids.end());
    CHECK(std::unique(ids.begin(), ids.end()) == ids.end());
    CHECK(store.query_runs({.experiment = "example"}).size() == 8);
}

TEST_CASE("find_matching_run matches finished runs on stage params", "[tracking]") {
    testing::TempDir dir;
    TrackingStore store(dir.path());
    store.create_experiment("example");
    ParamMap params{{"a", "1"}, {"b", "x"}};

    auto failed = store.start_run("example", Stage::etl);
    store.log_params(failed.run_id, params);
    store.end_run(failed.run_id, RunStatus::FAILED, "boom");
    CHECK_FALSE(store.find_matching_run("example", Stage::etl, params));

    auto ok = store.start_run("example", Stage::etl);
    store.log_params(ok.run_id, params);
    store.log_param(ok.run_id, "start_time", "whenever");
    store.end_run(ok.run_id, RunStatus::FINISHED);

    auto found = store.find_matching_run("example", Stage::etl, {{"a", "1"}, {"b", "x"}, {"start_time", "other"}});
    REQUIRE(found);
    CHECK(found->run_id == ok.run_id);
    CHECK_FALSE(store.find_matching_run("example", Stage::etl, {{"a", "2"}, {"b", "x"}}));
    CHECK_FALSE(store.find_matching_run("example", Stage::train, params));
}

TEST_CASE("query_runs filters by experiment and run id", "[tracking]") {
    testing::TempDir dir;
    TrackingStore store(dir.path());
    CHECK(store.query_runs().empty());
    store.create_experiment("a");
    store.create_experiment("b");
    auto r1 = store.start_run("a", Stage::load);
    store.start_run("b", Stage::load);
    CHECK(store.query_runs({.experiment = "a"}).size() == 1);
    CHECK(store.query_runs({.run_id = r1.run_id}).front().experiment == "a");
    CHECK(store.query_runs({.run_id = "0123"}).empty());
    CHECK(store.query_runs().size() == 2);
}

TEST_CASE("a stray temp file does not corrupt a run", "[tracking]") {
    testing::TempDir dir;
    TrackingStore store(dir.path());
    store.create_experiment("example");
    auto run = store.start_run("example", Stage::load);
    // Simulates a writer killed between write and rename.
    std::ofstream(run.dir / "meta.json.tmp.deadbeef") << "{ half";
    CHECK(store.get_run(run.run_id).status == RunStatus::RUNNING);
}
