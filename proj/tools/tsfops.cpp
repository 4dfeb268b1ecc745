// tsfops command line: one subcommand per pipeline entry point, plus the
// HTTP service and user management.

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include "tsfops/pipeline.hpp"
#include "tsfops/service.hpp"

#include <CLI11.hpp>

using namespace tsfops;

namespace {

constexpr int exit_failure = 1;
constexpr int exit_usage = 2;

/// Config options registered on one subcommand, read back after parsing.
struct ConfigFlags {
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;

    void add(CLI::App* app, const std::vector<std::string>& keys) {
        std::vector<std::string> all{"experiment_name", "ignore_previous_runs"};
        all.insert(all.end(), keys.begin(), keys.end());
        for (const auto& key : all) {
            if (options.count(key)) continue;
            const auto* spec = find_option(key);
            auto kebab = key;
            std::replace(kebab.begin(), kebab.end(), '_', '-');
            std::string names = "--" + kebab;
            if (kebab != key) names += ",--" + key;
            std::string help = spec->help;
            help += " [default: " + std::string(spec->fallback) + "]";
            options[key] = app->add_option(names, values[key], help);
        }
    }

    PipelineConfig config() const {
        std::map<std::string, std::string> given;
        for (const auto& [k, opt] : options)
            if (opt->count() > 0) given[k] = values.at(k);
        return PipelineConfig::from_map(given);
    }
};

TrackingStore open_store(const std::string& root) {
    return root.empty() ? TrackingStore::from_env() : TrackingStore(root);
}

std::string latest_run(const TrackingStore& store, const std::string& exp, std::initializer_list<Stage> stages,
                       const char* what) {
    auto r = store.latest_finished(exp, stages);
    if (!r) throw ConfigError(std::string("no finished ") + what + " run in experiment '" + exp + "'; pass its run id");
    return r->run_id;
}

void print_metrics(const RunRecord& run) {
    for (const auto& [name, points] : run.metrics)
        if (!points.empty()) std::cout << name << ": " << csv::format_number(points.back().value) << "\n";
}

void print_stage(const char* label, const StageOutcome& o) {
    std::cout << label << " run " << o.run.run_id << (o.reused ? " (reused)" : "") << "\n";
}

StageContext context(TrackingStore& store, const PipelineConfig& cfg) {
    return {&store, cfg.str("experiment_name"), std::nullopt, cfg.resume()};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Time-series forecasting pipeline: ingest, clean, train, search, evaluate and serve."};
    app.require_subcommand(1);
    app.fallthrough();
    std::string store_root;
    app.add_option("--store", store_root, "tracking store directory [default: $TSFOPS_STORE or ./tsfops_store]");

    auto* load = app.add_subcommand("load-raw-data", "validate a raw CSV and store it as a load run");
    ConfigFlags load_flags;
    load_flags.add(load, stage_options(Stage::load));

    auto* etl = app.add_subcommand("etl", "clean the series of a load run");
    ConfigFlags etl_flags;
    etl_flags.add(etl, stage_options(Stage::etl));
    std::string load_run_id;
    etl->add_option("--load-run-id", load_run_id, "load run to clean [default: latest]");

    auto* train = app.add_subcommand("train", "fit a model on the train split of an etl run");
    ConfigFlags train_flags;
    train_flags.add(train, stage_options(Stage::train));
    std::string train_etl_id;
    train->add_option("--etl-run-id", train_etl_id, "etl run to train on [default: latest]");

    auto* search = app.add_subcommand("optuna-search", "search hyperparameters on the validation split");
    ConfigFlags search_flags;
    search_flags.add(search, stage_options(Stage::optuna_search));
    std::string search_etl_id;
    search->add_option("--etl-run-id", search_etl_id, "etl run to search on [default: latest]");

    auto* eval = app.add_subcommand("eval", "backtest a trained model on the test split");
    ConfigFlags eval_flags;
    eval_flags.add(eval, stage_options(Stage::eval));
    std::string eval_model_id, eval_etl_id;
    eval->add_option("--model-run-id", eval_model_id, "train or optuna-search run [default: latest]");
    eval->add_option("--etl-run-id", eval_etl_id, "etl run with the data [default: the model run's]");

    auto* pipe = app.add_subcommand("exp-pipeline", "run load, etl, train or search, and eval");
    ConfigFlags pipe_flags;
    pipe_flags.add(pipe, stage_options(Stage::pipeline));

    auto* infer = app.add_subcommand("inference", "forecast past the end of a series with a stored model");
    ConfigFlags infer_flags;
    infer_flags.add(infer, {"series_csv", "future_covs_csv", "day_first"});
    std::string model_folder, infer_model_id, infer_resolution, output_path;
    int horizon = 960, roll_size = 96;
    infer->add_option("--pyfunc-model-folder,--pyfunc_model_folder", model_folder,
                      "directory holding spec.json, params.bin and scaler.json");
    infer->add_option("--model-run-id", infer_model_id, "run whose model/ artifacts to use");
    infer->add_option("--resolution", infer_resolution, "minutes between observations [default: inferred]");
    infer->add_option("--forecast-horizon,--forecast_horizon", horizon, "steps to forecast")->capture_default_str();
    infer->add_option("--roll-size,--roll_size", roll_size, "steps per autoregressive roll")->capture_default_str();
    infer->add_option("--output", output_path, "also write the forecast CSV here");

    auto* serve = app.add_subcommand("serve", "run the HTTP service");
    std::string users_file, host = "0.0.0.0";
    int port = 0;
    std::size_t capacity = 2;
    serve->add_option("--users-file", users_file, "users file [default: $TSFOPS_USERS_FILE or ./users.txt]");
    serve->add_option("--host", host, "listen address")->capture_default_str();
    serve->add_option("--port", port, "listen port [default: $TSFOPS_PORT or 8080]");
    serve->add_option("--job-capacity", capacity, "concurrent pipelines")->capture_default_str();

    auto* user_add = app.add_subcommand("user-add", "add or replace a user in the users file");
    std::string username, role, password;
    user_add->add_option("--users-file", users_file, "users file [default: $TSFOPS_USERS_FILE or ./users.txt]");
    user_add->add_option("--username", username, "login name")->required();
    user_add->add_option("--role", role, "admin, data_scientist or domain_expert")->required();
    user_add->add_option("--password", password, "password [default: $TSFOPS_PASSWORD]");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return exit_usage;
    }

    try {
        if (load->parsed()) {
            const auto cfg = load_flags.config();
            auto store = open_store(store_root);
            const auto in = prepare_inputs(store, cfg, Stage::load);
            print_stage("load", stage_load(context(store, cfg), in));
        } else if (etl->parsed()) {
            const auto cfg = etl_flags.config();
            auto store = open_store(store_root);
            const auto in = prepare_inputs(store, cfg, Stage::etl);
            if (load_run_id.empty()) load_run_id = latest_run(store, cfg.str("experiment_name"), {Stage::load}, "load");
            print_stage("etl", stage_etl(context(store, cfg), in, load_run_id));
        } else if (train->parsed()) {
            const auto cfg = train_flags.config();
            auto store = open_store(store_root);
            const auto in = prepare_inputs(store, cfg, Stage::train);
            if (train_etl_id.empty()) train_etl_id = latest_run(store, cfg.str("experiment_name"), {Stage::etl}, "etl");
            print_stage("train", stage_train(context(store, cfg), in, train_etl_id));
        } else if (search->parsed()) {
            const auto cfg = search_flags.config();
            auto store = open_store(store_root);
            const auto in = prepare_inputs(store, cfg, Stage::optuna_search);
            if (search_etl_id.empty()) search_etl_id = latest_run(store, cfg.str("experiment_name"), {Stage::etl}, "etl");
            auto o = stage_optuna_search(context(store, cfg), in, search_etl_id);
            print_stage("optuna_search", o);
            std::cout << "best_config: " << o.run.param("best_config") << "\n";
            print_metrics(o.run);
        } else if (eval->parsed()) {
            const auto cfg = eval_flags.config();
            auto store = open_store(store_root);
            const auto in = prepare_inputs(store, cfg, Stage::eval);
            if (eval_model_id.empty())
                eval_model_id = latest_run(store, cfg.str("experiment_name"), {Stage::train, Stage::optuna_search},
                                           "train or optuna_search");
            if (eval_etl_id.empty()) eval_etl_id = store.get_run(eval_model_id).param("etl_run_id");
            auto o = stage_eval(context(store, cfg), in, eval_model_id, eval_etl_id);
            print_stage("eval", o);
            print_metrics(o.run);
        } else if (pipe->parsed()) {
            const auto cfg = pipe_flags.config();
            auto store = open_store(store_root);
            const auto in = prepare_inputs(store, cfg, Stage::pipeline);
            const auto parent = start_pipeline_run(store, cfg);
            std::cout << "pipeline run " << parent.run_id << "\n";
            auto res = execute_pipeline(store, in, parent.run_id);
            for (const auto& [stage, o] : res.stages) print_stage(to_string(stage), o);
            print_metrics(res.parent);
        } else if (infer->parsed()) {
            const auto cfg = infer_flags.config();
            auto store = open_store(store_root);
            TrainedModel model;
            std::string source;
            if (!model_folder.empty() == !infer_model_id.empty())
                throw ConfigError("pass exactly one of --pyfunc-model-folder and --model-run-id");
            if (!model_folder.empty()) {
                model = read_model_dir(model_folder);
                source = fs::absolute(model_folder).string();
            } else {
                model = read_model(store, infer_model_id);
                source = "run:" + infer_model_id;
            }
            const auto path = cfg.opt("series_csv");
            if (!path) throw ConfigError("--series-csv is required");
            const auto text = read_file(*path);
            const CsvFormat format{detect_layout(text), cfg.flag("day_first")};
            const auto res = infer_resolution.empty()
                                 ? infer_text_resolution(text, format)
                                 : Resolution{std::stoi(detail::canonical_value(*find_option("resolution"), infer_resolution))};
            auto series = parse_csv(text, format, res);
            detail::throw_if_invalid(series);
            std::optional<TimeSeriesDataset> covs;
            if (auto cp = cfg.opt("future_covs_csv")) {
                const auto ct = read_file(*cp);
                covs = parse_csv(ct, {detect_layout(ct), cfg.flag("day_first")}, res, SeriesKind::future_covariates);
            }
            const auto& exp = cfg.str("experiment_name");
            store.create_experiment(exp);
            auto run = run_inference(store, exp, model, source, series, covs ? &*covs : nullptr, {horizon, roll_size});
            std::cout << "inference run " << run.run_id << "\n";
            std::cout << "forecast: " << (run.artifact_dir() / "forecast.csv").string() << "\n";
            print_metrics(run);
            if (!output_path.empty()) detail::atomic_write(output_path, store.read_artifact(run.run_id, "forecast.csv"));
        } else if (serve->parsed()) {
            auto opt = ServiceOptions::from_env();
            if (!store_root.empty()) opt.store_root = store_root;
            if (!users_file.empty()) opt.users_file = users_file;
            opt.job_capacity = capacity;
            if (port == 0) {
                const char* env = std::getenv("TSFOPS_PORT");
                port = env ? std::stoi(env) : 8080;
            }
            if (!fs::exists(opt.users_file))
                std::cerr << "warning: users file " << opt.users_file << " does not exist; nobody can log in\n";
            Service service(opt);
            httplib::Server server;
            service.mount(server);
            std::cout << "listening on " << host << ":" << port << " (store " << opt.store_root.string() << ")\n"
                      << std::flush;
            if (!server.listen(host, port)) throw Error("cannot listen on " + host + ":" + std::to_string(port));
        } else if (user_add->parsed()) {
            if (users_file.empty()) users_file = ServiceOptions::from_env().users_file.string();
            if (password.empty())
                if (const char* env = std::getenv("TSFOPS_PASSWORD")) password = env;
            upsert_user(users_file, make_user(username, role_from_string(role), password));
            std::cout << "user " << username << " (" << role << ") written to " << users_file << "\n";
        }
    } catch (const StageError& e) {
        std::cerr << "error: " << e.what() << "\nrun id: " << e.run_id() << "\n";
        return exit_failure;
    } catch (const ConfigError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return exit_usage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_failure;
    }
    return 0;
}
