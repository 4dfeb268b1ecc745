#pragma once

#include <algorithm>
#include <charconv>
#include <climits>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tsfops/core.hpp"
#include "tsfops/csv.hpp"
#include "tsfops/etl.hpp"
#include "tsfops/eval.hpp"
#include "tsfops/hash.hpp"
#include "tsfops/hpo.hpp"
#include "tsfops/ingest.hpp"
#include "tsfops/models.hpp"
#include "tsfops/tracking.hpp"

namespace tsfops {

// ---------------------------------------------------------------------------
// Configuration

enum class OptionType { text, boolean, integer, real, date };

struct OptionSpec {
    const char* name;
    const char* fallback;  // "None" marks an unset optional value
    OptionType type;
    const char* help;
};

inline const std::vector<OptionSpec>& option_specs() {
    using T = OptionType;
    static const std::vector<OptionSpec> specs{
        {"experiment_name", "Default", T::text, "tracking experiment"},
        {"series_csv", "None", T::text, "target series CSV file"},
        {"dataset_id", "None", T::text, "uploaded dataset used instead of series_csv"},
        {"future_covs_csv", "None", T::text, "future covariates CSV file"},
        {"past_covs_csv", "None", T::text, "past covariates CSV file (not supported by the available models)"},
        {"holidays_file", "None", T::text, "country,date holiday CSV"},
        {"config_opt", "None", T::text, "hyperparameter grid YAML file"},
        {"resolution", "15", T::integer, "minutes between observations"},
        {"day_first", "true", T::boolean, "DD/MM/YYYY dates in the input"},
        {"multiple", "false", T::boolean, "file holds several series"},
        {"year_range", "None", T::text, "YYYY-YYYY years to keep"},
        {"time_covs", "false", T::boolean, "add calendar covariates"},
        {"country", "PT", T::text, "holiday calendar key"},
        {"std_dev", "4.5", T::real, "outlier threshold in monthly standard deviations"},
        {"max_thr", "-1", T::integer, "unsupported; must stay -1"},
        {"a", "0.3", T::real, "imputation weight decay"},
        {"wncutoff", "0.000694", T::real, "weekday distance cutoff"},
        {"ycutoff", "3", T::real, "year distance cutoff"},
        {"ydcutoff", "30", T::real, "day-of-year distance cutoff"},
        {"min_non_nan_interval", "24", T::integer, "longest gap (steps) that is imputed"},
        {"l_interpolation", "false", T::boolean, "impute by linear interpolation only"},
        {"rmv_outliers", "true", T::boolean, "remove outliers"},
        {"allow_long_gaps", "false", T::boolean, "trim series with long gaps instead of failing"},
        {"non_negative", "false", T::boolean, "treat negative values as outliers"},
        {"model", "linear_ar", T::text, "seasonal_naive, linear_ar or mlp"},
        {"hyperparams_entrypoint", "None", T::text, "grid entrypoint name or inline JSON object"},
        {"input_chunk_length", "None", T::integer, "lookback override"},
        {"cut_date_val", "20180101", T::date, "validation start YYYYMMDD"},
        {"cut_date_test", "20190101", T::date, "test start YYYYMMDD"},
        {"test_end_date", "None", T::date, "last test day YYYYMMDD"},
        {"scale", "true", T::boolean, "min-max scale targets"},
        {"scale_covs", "true", T::boolean, "min-max scale covariates"},
        {"forecast_horizon", "96", T::integer, "steps per backtest block"},
        {"stride", "None", T::integer, "steps between blocks (default forecast_horizon)"},
        {"retrain", "false", T::boolean, "refit before every backtest block"},
        {"m_mase", "1", T::integer, "MASE seasonality"},
        {"evaluate_all_ts", "false", T::boolean, "evaluate every component"},
        {"eval_series", "None", T::text, "series to evaluate (default first)"},
        {"loss_function", "mape", T::text, "validation metric minimised by the search"},
        {"opt_test", "false", T::boolean, "run hyperparameter search instead of plain training"},
        {"grid_search", "false", T::boolean, "exhaustive search instead of TPE"},
        {"n_trials", "100", T::integer, "search trials"},
        {"seed", "0", T::integer, "search seed"},
        {"refit_on_val", "false", T::boolean, "refit the best config on train+validation"},
        {"ignore_previous_runs", "true", T::boolean, "false reuses finished stages with identical params"},
        {"from_mongo", "false", T::boolean, "unsupported; must be false"},
        {"convert_to_local_tz", "false", T::boolean, "unsupported; must be false"},
        {"analyze_with_shap", "false", T::boolean, "unsupported; must be false"},
        {"device", "cpu", T::text, "accepted for compatibility; always cpu"},
    };
    return specs;
}

inline const OptionSpec* find_option(std::string_view name) {
    for (const auto& o : option_specs())
        if (name == o.name) return &o;
    return nullptr;
}

namespace detail {

inline std::optional<bool> parse_bool(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    if (s == "true" || s == "t" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "f" || s == "0" || s == "no") return false;
    return std::nullopt;
}

inline bool is_none(std::string_view s) { return s == "None" || s == "none" || s == "null" || s.empty(); }

inline std::string canonical_value(const OptionSpec& o, const std::string& raw) {
    const auto bad = [&](const char* what) {
        return ConfigError(std::string("invalid value '") + raw + "' for " + o.name + ": expected " + what);
    };
    if (is_none(raw)) {
        if (std::string_view(o.fallback) != "None") throw bad("a value");
        return "None";
    }
    switch (o.type) {
        case OptionType::boolean: {
            auto b = parse_bool(raw);
            if (!b) throw bad("true/false");
            return *b ? "true" : "false";
        }
        case OptionType::integer: {
            long long v = 0;
            auto [p, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), v);
            if (ec != std::errc{} || p != raw.data() + raw.size()) throw bad("an integer");
            return std::to_string(v);
        }
        case OptionType::real: {
            auto v = csv::parse_value(raw);
            if (!v || !*v) throw bad("a number");
            return csv::format_number(**v);
        }
        case OptionType::date:
            parse_compact_date(raw);
            return std::string(detail::trim(raw));
        case OptionType::text: return raw;
    }
    return raw;
}

}  // namespace detail

/// Validated option map with every key present. The CLI and the service both
/// build pipelines from this form, so identical inputs run identical stages.
class PipelineConfig {
public:
    PipelineConfig() : PipelineConfig(std::map<std::string, std::string>{}) {}

    /// Unknown keys are rejected; missing keys take their defaults.
    explicit PipelineConfig(const std::map<std::string, std::string>& given) {
        for (const auto& [k, v] : given)
            if (!find_option(k)) throw ConfigError("unknown option '" + k + "'");
        for (const auto& o : option_specs()) {
            auto it = given.find(o.name);
            values_[o.name] = detail::canonical_value(o, it == given.end() ? std::string(o.fallback) : it->second);
        }
        check();
    }

    static PipelineConfig from_map(const std::map<std::string, std::string>& given) { return PipelineConfig(given); }

    /// JSON object whose values are strings, numbers, booleans or null.
    static PipelineConfig from_json(const json& j) {
        if (!j.is_object()) throw ConfigError("config must be a JSON object");
        std::map<std::string, std::string> m;
        for (const auto& [k, v] : j.items()) {
            if (v.is_string()) m[k] = v.get<std::string>();
            else if (v.is_boolean()) m[k] = v.get<bool>() ? "true" : "false";
            else if (v.is_number_integer()) m[k] = std::to_string(v.get<std::int64_t>());
            else if (v.is_number()) m[k] = csv::format_number(v.get<double>());
            else if (v.is_null()) m[k] = "None";
            else if (v.is_object() && k == "hyperparams_entrypoint") m[k] = v.dump();
            else throw ConfigError("option '" + k + "' must be a scalar");
        }
        return PipelineConfig(m);
    }

    const std::map<std::string, std::string>& values() const noexcept { return values_; }

    const std::string& str(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown option '" + key + "'");
        return it->second;
    }
    std::optional<std::string> opt(const std::string& key) const {
        const auto& v = str(key);
        return v == "None" ? std::nullopt : std::optional<std::string>(v);
    }
    bool flag(const std::string& key) const { return str(key) == "true"; }
    long integer(const std::string& key) const { return std::stol(str(key)); }
    std::optional<long> opt_integer(const std::string& key) const {
        auto v = opt(key);
        return v ? std::optional<long>(std::stol(*v)) : std::nullopt;
    }
    double real(const std::string& key) const { return std::stod(str(key)); }

    Resolution resolution() const { return Resolution{static_cast<int>(integer("resolution"))}; }
    ModelKind model() const { return model_kind_from_string(str("model")); }
    bool resume() const { return !flag("ignore_previous_runs"); }

    TimePoint cut_date_val() const { return parse_compact_date(str("cut_date_val")); }
    TimePoint cut_date_test() const { return parse_compact_date(str("cut_date_test")); }
    std::optional<TimePoint> test_end_date() const {
        auto v = opt("test_end_date");
        return v ? std::optional<TimePoint>(parse_compact_date(*v)) : std::nullopt;
    }
    SplitSpec split_spec() const { return SplitSpec(cut_date_val(), cut_date_test(), test_end_date()); }

    EtlOptions etl_options() const {
        EtlOptions e;
        if (auto yr = opt("year_range")) {
            auto dash = yr->find('-');
            int lo = 0, hi = 0;
            if (dash == std::string::npos || !detail::parse_uint(yr->substr(0, dash), lo) ||
                !detail::parse_uint(yr->substr(dash + 1), hi))
                throw ConfigError("invalid year_range '" + *yr + "', expected YYYY-YYYY");
            e.year_range = std::make_pair(lo, hi);
        }
        e.std_dev = real("std_dev");
        e.rmv_outliers = flag("rmv_outliers");
        e.non_negative = flag("non_negative");
        e.l_interpolation = flag("l_interpolation");
        e.a = real("a");
        e.wncutoff = real("wncutoff");
        e.ycutoff = real("ycutoff");
        e.ydcutoff = real("ydcutoff");
        const long gap = integer("min_non_nan_interval");
        if (gap < 1) throw ConfigError("min_non_nan_interval must be >= 1");
        e.max_gap = static_cast<std::size_t>(gap);
        e.allow_long_gaps = flag("allow_long_gaps");
        e.country = str("country");
        e.time_covs = flag("time_covs");
        return e;
    }

    BacktestOptions backtest_options() const {
        BacktestOptions b;
        b.forecast_horizon = static_cast<int>(integer("forecast_horizon"));
        b.stride = static_cast<int>(opt_integer("stride").value_or(0));
        if (opt("stride") && b.stride < 1) throw ConfigError("stride must be >= 1");
        b.retrain = flag("retrain");
        b.m_mase = static_cast<int>(integer("m_mase"));
        b.validate();
        return b;
    }

    std::string eval_series() const { return opt("eval_series").value_or(""); }

    json to_json() const { return json(values_); }

private:
    void check() const {
        resolution();
        model();
        etl_options().validate();
        backtest_options();
        split_spec();
        const auto& names = metric_names();
        if (std::find(names.begin(), names.end(), str("loss_function")) == names.end())
            throw ConfigError("unknown loss_function '" + str("loss_function") + "'");
        if (integer("n_trials") < 1) throw ConfigError("n_trials must be >= 1");
        if (integer("seed") < 0) throw ConfigError("seed must be >= 0");
        if (auto icl = opt_integer("input_chunk_length"); icl && *icl < 1)
            throw ConfigError("input_chunk_length must be >= 1");
        if (opt("past_covs_csv")) throw ConfigError("past covariates are not supported by the available models");
        if (integer("max_thr") != -1) throw ConfigError("max_thr is not supported; leave it at -1");
        for (const char* k : {"from_mongo", "convert_to_local_tz", "analyze_with_shap"})
            if (flag(k)) throw ConfigError(std::string(k) + "=true is not supported");
        if (!detail::safe_name(str("experiment_name"))) throw ConfigError("invalid experiment_name");
    }

    std::map<std::string, std::string> values_;
};

/// Options read by each stage, in addition to experiment_name and
/// ignore_previous_runs. The pipeline reads all of them.
inline std::vector<std::string> stage_options(Stage s) {
    static const std::vector<std::string> load{"series_csv", "dataset_id", "future_covs_csv", "past_covs_csv",
                                               "resolution", "day_first", "multiple"};
    static const std::vector<std::string> etl{"year_range", "time_covs", "holidays_file", "country", "std_dev",
                                              "max_thr", "a", "wncutoff", "ycutoff", "ydcutoff",
                                              "min_non_nan_interval", "l_interpolation", "rmv_outliers",
                                              "allow_long_gaps", "non_negative"};
    static const std::vector<std::string> train{"model", "hyperparams_entrypoint", "config_opt", "input_chunk_length",
                                                "cut_date_val", "cut_date_test", "test_end_date", "scale",
                                                "scale_covs"};
    static const std::vector<std::string> eval{"cut_date_test", "test_end_date", "forecast_horizon", "stride",
                                               "retrain", "m_mase", "evaluate_all_ts", "eval_series"};
    auto join = [](std::initializer_list<const std::vector<std::string>*> parts) {
        std::vector<std::string> out;
        for (const auto* p : parts)
            for (const auto& k : *p)
                if (std::find(out.begin(), out.end(), k) == out.end()) out.push_back(k);
        return out;
    };
    switch (s) {
        case Stage::load: return load;
        case Stage::etl: return etl;
        case Stage::train: return train;
        case Stage::eval: return eval;
        case Stage::optuna_search: {
            static const std::vector<std::string> search{"n_trials", "grid_search", "loss_function", "seed",
                                                         "refit_on_val"};
            return join({&train, &eval, &search});
        }
        case Stage::pipeline: {
            std::vector<std::string> all;
            for (const auto& o : option_specs()) all.push_back(o.name);
            return all;
        }
        case Stage::inference: return {"resolution", "day_first", "series_csv", "future_covs_csv"};
    }
    return {};
}

// ---------------------------------------------------------------------------
// Hyperparameter grids

/// Grids used when no config_opt file is given: `<model>_default` holds fixed
/// values for plain training and `<model>_search` a grid for opt_test.
inline const std::string& builtin_grids() {
    static const std::string doc = R"(
seasonal_naive_default:
  m: 24
  output_chunk_length: 24
seasonal_naive_search:
  m: ["list", 24, 48, 168]
  output_chunk_length: 24
linear_ar_default:
  input_chunk_length: 168
  output_chunk_length: 24
  ridge: 0.0
linear_ar_search:
  input_chunk_length: ["range", 24, 168, 24]
  output_chunk_length: 24
  ridge: ["list", 0.0, 0.01, 0.1, 1.0, 10.0]
mlp_default:
  input_chunk_length: 168
  output_chunk_length: 24
  hidden_size: 32
  n_epochs: 20
  learning_rate: 0.01
  batch_size: 64
  random_state: 0
mlp_search:
  input_chunk_length: ["list", 48, 96, 168]
  output_chunk_length: 24
  hidden_size: ["list", 16, 32, 64]
  n_epochs: 20
  learning_rate: ["list", 0.003, 0.01, 0.03]
  batch_size: 64
  random_state: 0
)";
    return doc;
}

/// Resolves the grid named by hyperparams_entrypoint (from config_opt, the
/// built-in grids or an inline JSON object), applies input_chunk_length and
/// checks every name against the model's hyperparameters.
inline HyperparameterGrid resolve_grid(const PipelineConfig& cfg) {
    const auto kind = cfg.model();
    const auto entry = cfg.opt("hyperparams_entrypoint");
    HyperparameterGrid g;
    if (entry && !entry->empty() && entry->front() == '{') {
        g = parse_grid_config("inline: " + *entry, "inline");
    } else if (auto file = cfg.opt("config_opt")) {
        if (!entry) throw ConfigError("config_opt needs hyperparams_entrypoint");
        g = parse_grid_config(read_file(*file), *entry);
    } else {
        const auto name = entry.value_or(std::string(to_string(kind)) + (cfg.flag("opt_test") ? "_search" : "_default"));
        g = parse_grid_config(builtin_grids(), name);
    }
    if (auto icl = cfg.opt_integer("input_chunk_length")) {
        if (kind == ModelKind::seasonal_naive) throw ConfigError("input_chunk_length does not apply to seasonal_naive");
        auto it = std::find_if(g.entries.begin(), g.entries.end(),
                               [](const GridEntry& e) { return e.name == "input_chunk_length"; });
        GridEntry e{"input_chunk_length", {json(*icl)}, true};
        if (it != g.entries.end()) *it = e;
        else {
            g.entries.push_back(e);
            std::sort(g.entries.begin(), g.entries.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
        }
    }
    const auto& declared = declared_hyperparams(kind);
    for (const auto& e : g.entries) {
        if (!declared.contains(e.name))
            throw ConfigError("unknown hyperparameter '" + e.name + "' for model " + to_string(kind));
        for (const auto& v : e.values)
            if (!v.is_number()) throw ConfigError("hyperparameter '" + e.name + "' must be numeric");
    }
    return g;
}

/// The single config of a grid without searched entries.
inline ModelSpec fixed_spec(ModelKind kind, const HyperparameterGrid& g) {
    if (!g.searched().empty())
        throw ConfigError("entrypoint '" + g.name + "' lists several values; set opt_test=true to search them");
    return ModelSpec(kind, expand_grid(g).front());
}

inline std::string grid_json(const HyperparameterGrid& g) {
    json j = json::object();
    for (const auto& e : g.entries) j[e.name] = e.fixed ? e.values.front() : json(e.values);
    return j.dump();
}

// ---------------------------------------------------------------------------
// Uploaded datasets: <store>/.datasets/<id>/{series.csv, meta.json}

struct DatasetInfo {
    std::string id;
    std::string name;
    int resolution = 60;
    bool multiple = false;
    std::size_t n_components = 0;
    std::size_t n_series = 0;
    std::string sha256;
    std::string uploaded_at;

    json to_json() const {
        return {{"id", id},           {"name", name},       {"resolution", resolution},
                {"multiple", multiple}, {"n_components", n_components}, {"n_series", n_series},
                {"sha256", sha256},   {"uploaded_at", uploaded_at}};
    }
    static DatasetInfo from_json(const json& j) {
        return {j.at("id"),           j.at("name"),     j.at("resolution"), j.at("multiple"),
                j.at("n_components"), j.at("n_series"), j.at("sha256"),     j.at("uploaded_at")};
    }
};

inline fs::path datasets_root(const TrackingStore& store) { return store.root() / ".datasets"; }

/// Validates the upload and stores its canonical wide form under a new id.
inline DatasetInfo save_dataset(const TrackingStore& store, const std::string& name, std::string_view text,
                                bool day_first, Resolution resolution, bool multiple) {
    auto ds = parse_csv(text, {detect_layout(text), day_first}, resolution);
    ds.multiple = multiple;
    detail::throw_if_invalid(ds);
    const auto canonical = write_wide_csv(ds);
    DatasetInfo info;
    info.name = name;
    info.resolution = resolution.minutes();
    info.multiple = multiple;
    info.n_components = ds.components.size();
    info.n_series = ds.series_ids().size();
    info.sha256 = sha256_hex(canonical);
    info.uploaded_at = now_string();
    fs::create_directories(datasets_root(store));
    fs::path dir;
    do {
        info.id = detail::random_hex(16);
        dir = datasets_root(store) / info.id;
    } while (!fs::create_directory(dir));
    detail::atomic_write(dir / "series.csv", canonical);
    detail::atomic_write(dir / "meta.json", info.to_json().dump(2));
    return info;
}

inline std::vector<DatasetInfo> list_datasets(const TrackingStore& store) {
    std::vector<DatasetInfo> out;
    std::error_code ec;
    for (const auto& e : fs::directory_iterator(datasets_root(store), ec))
        if (fs::exists(e.path() / "meta.json")) out.push_back(DatasetInfo::from_json(json::parse(detail::slurp(e.path() / "meta.json"))));
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.uploaded_at < b.uploaded_at; });
    return out;
}

inline std::pair<DatasetInfo, std::string> read_dataset(const TrackingStore& store, const std::string& id) {
    const auto dir = datasets_root(store) / id;
    if (!detail::safe_name(id) || !fs::exists(dir / "meta.json")) throw NotFoundError("unknown dataset '" + id + "'");
    return {DatasetInfo::from_json(json::parse(detail::slurp(dir / "meta.json"))), detail::slurp(dir / "series.csv")};
}

// ---------------------------------------------------------------------------
// Stage execution

/// A stage run that failed; `run_id` names the failed run.
class StageError : public Error {
public:
    StageError(std::string run_id, Stage stage, const std::string& message)
        : Error(std::string(to_string(stage)) + " stage failed (run " + run_id + "): " + message),
          run_id_(std::move(run_id)), stage_(stage), cause_(message) {}

    const std::string& run_id() const noexcept { return run_id_; }
    Stage stage() const noexcept { return stage_; }
    const std::string& cause() const noexcept { return cause_; }

private:
    std::string run_id_;
    Stage stage_;
    std::string cause_;
};

struct StageContext {
    TrackingStore* store = nullptr;
    std::string experiment;
    std::optional<std::string> parent_run_id = std::nullopt;
    bool resume = false;
};

struct StageOutcome {
    RunRecord run;
    bool reused = false;
};

/// Reuses a FINISHED run with identical params when resuming; otherwise runs
/// `body` under a new run that ends FINISHED, or FAILED with the error.
template <class Body>
StageOutcome execute_stage(const StageContext& ctx, Stage stage, const ParamMap& params, Body&& body) {
    auto& store = *ctx.store;
    store.create_experiment(ctx.experiment);
    if (ctx.resume)
        if (auto hit = store.find_matching_run(ctx.experiment, stage, params)) return {*hit, true};
    auto run = store.start_run(ctx.experiment, stage, ctx.parent_run_id);
    try {
        store.log_params(run.run_id, params);
        body(run);
        store.end_run(run.run_id, RunStatus::FINISHED);
    } catch (const std::exception& e) {
        if (const auto* v = dynamic_cast<const ValidationError*>(&e)) {
            json list = json::array();
            for (const auto& x : v->violations()) list.push_back({{"check", check_name(x.check)}, {"message", x.message}});
            try {
                store.log_artifact(run.run_id, "violations.json", list.dump(2));
            } catch (const std::exception&) {
            }
        }
        store.end_run(run.run_id, RunStatus::FAILED, e.what());
        throw StageError(run.run_id, stage, e.what());
    }
    return {store.get_run(run.run_id), false};
}

/// Files and settings a pipeline reads before any run starts.
struct PipelineInputs {
    PipelineConfig config;
    std::optional<std::string> series_text;
    std::string series_source;
    CsvFormat series_format;
    std::optional<std::string> covs_text;
    CsvFormat covs_format;
    HolidayCalendar holidays;
    std::string holidays_sha256 = "None";
    std::optional<HyperparameterGrid> grid;
};

/// Reads the inputs the given stage needs and fails with ConfigError or
/// NotFoundError before anything is tracked.
inline PipelineInputs prepare_inputs(const TrackingStore& store, const PipelineConfig& cfg, Stage stage) {
    PipelineInputs in;
    in.config = cfg;
    const bool all = stage == Stage::pipeline;
    if (all || stage == Stage::load) {
        if (auto id = cfg.opt("dataset_id")) {
            auto [info, text] = read_dataset(store, *id);
            if (info.resolution != cfg.resolution().minutes())
                throw ConfigError("dataset '" + *id + "' has resolution " + std::to_string(info.resolution) +
                                  ", config says " + cfg.str("resolution"));
            in.series_text = std::move(text);
            in.series_source = "dataset:" + *id;
            in.series_format = {Layout::multiple_wide, false};
        } else if (auto path = cfg.opt("series_csv")) {
            in.series_text = read_file(*path);
            in.series_source = *path;
            in.series_format = {detect_layout(*in.series_text), cfg.flag("day_first")};
        } else {
            throw ConfigError("series_csv or dataset_id is required");
        }
        if (auto path = cfg.opt("future_covs_csv")) {
            in.covs_text = read_file(*path);
            in.covs_format = {detect_layout(*in.covs_text), cfg.flag("day_first")};
        }
    }
    if (all || stage == Stage::etl) {
        const auto country = cfg.str("country");
        if (auto path = cfg.opt("holidays_file")) {
            const auto text = read_file(*path);
            in.holidays = HolidayCalendar::parse(text);
            in.holidays_sha256 = sha256_hex(text);
            if (cfg.flag("time_covs") && !in.holidays.knows(country))
                throw ConfigError("unknown holiday calendar '" + country + "' in " + *path);
        }
        in.holidays.declare(country);
    }
    if (all || stage == Stage::train || stage == Stage::optuna_search) {
        in.grid = resolve_grid(cfg);
        const bool search = stage == Stage::optuna_search || (all && cfg.flag("opt_test"));
        if (!search) fixed_spec(cfg.model(), *in.grid);
    }
    return in;
}

inline std::string opt_sha(const std::optional<std::string>& text) { return text ? sha256_hex(*text) : "None"; }

inline ParamMap stage_params(const PipelineConfig& cfg, Stage stage, const ParamMap& upstream) {
    ParamMap p = upstream;
    for (const auto& k : stage_options(stage))
        if (k != "series_csv" && k != "future_covs_csv" && k != "holidays_file" && k != "config_opt" &&
            k != "dataset_id")
            p[k] = cfg.str(k);
    return p;
}

inline StageOutcome stage_load(const StageContext& ctx, const PipelineInputs& in) {
    if (!in.series_text) throw ConfigError("series_csv or dataset_id is required");
    auto params = stage_params(in.config, Stage::load, {});
    params["series_source"] = in.series_source;
    params["series_sha256"] = sha256_hex(*in.series_text);
    params["future_covs_sha256"] = opt_sha(in.covs_text);
    return execute_stage(ctx, Stage::load, params, [&](const RunRecord& run) {
        LoadOptions opt{in.series_format, in.config.resolution(), in.config.flag("multiple"), in.covs_text,
                        in.covs_format};
        load_raw_data(*ctx.store, run, *in.series_text, opt);
    });
}

inline StageOutcome stage_etl(const StageContext& ctx, const PipelineInputs& in, const std::string& load_run_id) {
    auto params = stage_params(in.config, Stage::etl, {{"load_run_id", load_run_id}});
    params["holidays_sha256"] = in.holidays_sha256;
    return execute_stage(ctx, Stage::etl, params, [&](const RunRecord& run) {
        const auto upstream = ctx.store->get_run(load_run_id);
        ctx.store->log_params(run.run_id,
                              {{"resolution", upstream.param("resolution")}, {"multiple", upstream.param("multiple")}});
        const auto opt = in.config.etl_options();
        run_etl(*ctx.store, run, load_run_id, opt, in.holidays);
        if (opt.time_covs) {
            json days = json::array();
            for (auto d : in.holidays.of(opt.country)) days.push_back(format_date(at_midnight(d)));
            ctx.store->log_artifact(run.run_id, "calendar.json",
                                    json{{"country", opt.country}, {"holidays", days}}.dump(2));
        }
    });
}

/// Cleaned series and covariates of a finished etl run.
struct EtlOutputs {
    TimeSeriesDataset series;
    std::optional<TimeSeriesDataset> covariates;
    json calendar;  // null without calendar covariates

    const TimeSeriesDataset* covs() const { return covariates ? &*covariates : nullptr; }
};

inline EtlOutputs read_etl_outputs(const TrackingStore& store, const std::string& etl_run_id) {
    const auto run = store.get_run(etl_run_id);
    if (run.stage != Stage::etl) throw ConfigError("run " + etl_run_id + " is not an etl run");
    if (run.status != RunStatus::FINISHED) throw Error("upstream run " + etl_run_id + " is not FINISHED");
    const Resolution res{std::stoi(run.param("resolution"))};
    EtlOutputs out;
    out.series = parse_wide_csv(store.read_artifact(etl_run_id, "series.csv"), false, res);
    out.series.multiple = run.param("multiple") == "true";
    if (store.has_artifact(etl_run_id, "future_covs.csv"))
        out.covariates = parse_wide_csv(store.read_artifact(etl_run_id, "future_covs.csv"), false, res,
                                        SeriesKind::future_covariates);
    if (store.has_artifact(etl_run_id, "calendar.json"))
        out.calendar = json::parse(store.read_artifact(etl_run_id, "calendar.json"));
    return out;
}

inline void log_model(TrackingStore& store, const RunRecord& run, const TrainedModel& m) {
    for (const auto& [name, bytes] : model_files(m)) store.log_artifact(run.run_id, "model/" + name, bytes);
    store.log_param(run.run_id, "n_params", std::to_string(m.params.size()));
    if (m.meta.contains("final_train_loss") && m.meta["final_train_loss"].is_number())
        store.log_metric(run.run_id, "train_loss", m.meta["final_train_loss"].get<double>());
}

inline TrainedModel read_model(const TrackingStore& store, const std::string& run_id) {
    std::map<std::string, std::string> files;
    for (const char* f : {"spec.json", "params.bin", "scaler.json"})
        files[f] = store.read_artifact(run_id, std::string("model/") + f);
    return load_model(files);
}

inline TrainedModel read_model_dir(const fs::path& dir) {
    std::map<std::string, std::string> files;
    for (const char* f : {"spec.json", "params.bin", "scaler.json"}) {
        if (!fs::exists(dir / f)) throw NotFoundError("model folder " + dir.string() + " has no " + f);
        files[f] = detail::slurp(dir / f);
    }
    return load_model(files);
}

inline TrainedModel fit_on(const ModelSpec& spec, const PipelineConfig& cfg, const EtlOutputs& data,
                           const TimeSeriesDataset& segment) {
    auto m = fit(spec, segment, data.covs(), {cfg.flag("scale"), cfg.flag("scale_covs")});
    if (!data.calendar.is_null()) m.meta["calendar"] = data.calendar;
    return m;
}

inline StageOutcome stage_train(const StageContext& ctx, const PipelineInputs& in, const std::string& etl_run_id) {
    const auto spec = fixed_spec(in.config.model(), *in.grid);
    auto params = stage_params(in.config, Stage::train, {{"etl_run_id", etl_run_id}});
    params.erase("hyperparams_entrypoint");
    params.erase("input_chunk_length");
    params["hyperparams"] = spec.hyperparams().dump();
    return execute_stage(ctx, Stage::train, params, [&](const RunRecord& run) {
        const auto data = read_etl_outputs(*ctx.store, etl_run_id);
        const auto parts = split(data.series, in.config.split_spec());
        const auto m = fit_on(spec, in.config, data, parts.train);
        log_model(*ctx.store, run, m);
    });
}

/// Backtests `m` over the validation segment [cut_date_val, cut_date_test).
inline EvaluationReport validate_model(const TrainedModel& m, const PipelineConfig& cfg, const EtlOutputs& data) {
    return evaluate(m, data.series, data.covs(), cfg.cut_date_val(), cfg.cut_date_test() - std::chrono::minutes{1},
                    cfg.backtest_options(), cfg.flag("evaluate_all_ts"), cfg.eval_series());
}

inline StageOutcome stage_optuna_search(const StageContext& ctx, const PipelineInputs& in,
                                        const std::string& etl_run_id) {
    const auto kind = in.config.model();
    const auto& grid = *in.grid;
    auto params = stage_params(in.config, Stage::optuna_search, {{"etl_run_id", etl_run_id}});
    params.erase("hyperparams_entrypoint");
    params.erase("input_chunk_length");
    params["grid"] = grid_json(grid);
    return execute_stage(ctx, Stage::optuna_search, params, [&](const RunRecord& run) {
        auto& store = *ctx.store;
        const auto& cfg = in.config;
        const auto data = read_etl_outputs(store, etl_run_id);
        const auto parts = split(data.series, cfg.split_spec());
        const auto loss_name = cfg.str("loss_function");

        Objective objective = [&](const json& config) {
            const auto m = fit_on(ModelSpec(kind, config), cfg, data, parts.train);
            const auto rep = validate_model(m, cfg, data);
            auto loss = rep.average.get(loss_name);
            if (!loss) throw Error(loss_name + " is undefined on the validation segment");
            ObjectiveResult r{*loss, {}};
            for (const auto& [k, v] : rep.average.values)
                if (v) r.metrics[k] = *v;
            return r;
        };
        SearchOptions so;
        so.mode = cfg.flag("grid_search") ? SearchMode::grid : SearchMode::tpe;
        so.n_trials = static_cast<int>(cfg.integer("n_trials"));
        so.seed = static_cast<std::uint64_t>(cfg.integer("seed"));
        so.on_trial = [&](const Trial& t) {
            if (t.loss) store.log_metric(run.run_id, "trial_value", *t.loss, t.number);
        };
        const auto study = run_search(grid, objective, so);
        const auto table = trials_csv(study);
        store.log_artifact(run.run_id, "trials.csv", table);
        if (detail::safe_name(grid.name) && grid.name != "trials") store.log_artifact(run.run_id, grid.name + ".csv", table);
        if (grid.searched().size() > 0 && study.completed() >= 2) {
            try {
                store.log_artifact(run.run_id, "param_importance.csv", importance_csv(compute_param_importance(study)));
            } catch (const Error& e) {
                store.log_artifact(run.run_id, "warnings.txt", std::string("importance skipped: ") + e.what() + "\n");
            }
        }
        const auto& best = study.best();
        store.log_params(run.run_id, {{"best_config", best.config.dump()},
                                      {"best_trial", std::to_string(best.number)},
                                      {"n_completed", std::to_string(study.completed())}});
        store.log_metric(run.run_id, "best_value", *best.loss);

        const auto& segment = cfg.flag("refit_on_val")
                                  ? slice_by_dates(data.series, TimePoint::min(), cfg.cut_date_test() - std::chrono::minutes{1})
                                  : parts.train;
        log_model(store, run, fit_on(ModelSpec(kind, best.config), cfg, data, segment));
    });
}

inline StageOutcome stage_eval(const StageContext& ctx, const PipelineInputs& in, const std::string& model_run_id,
                               const std::string& etl_run_id) {
    auto params = stage_params(in.config, Stage::eval, {{"model_run_id", model_run_id}, {"etl_run_id", etl_run_id}});
    return execute_stage(ctx, Stage::eval, params, [&](const RunRecord& run) {
        const auto& cfg = in.config;
        const auto m = read_model(*ctx.store, model_run_id);
        const auto data = read_etl_outputs(*ctx.store, etl_run_id);
        TimePoint data_end = TimePoint::min();
        for (const auto& c : data.series.components)
            if (!c.timestamps.empty()) data_end = std::max(data_end, c.timestamps.back());
        const auto test_start = cfg.cut_date_test();
        SplitSpec s(test_start - std::chrono::minutes{1}, test_start, cfg.test_end_date());
        const auto rep = evaluate(m, data.series, data.covs(), test_start, s.test_end_inclusive(data_end),
                                  cfg.backtest_options(), cfg.flag("evaluate_all_ts"), cfg.eval_series());
        log_evaluation(*ctx.store, run, rep, test_start, static_cast<int>(cfg.integer("forecast_horizon")));
    });
}

// ---------------------------------------------------------------------------
// Pipeline

struct PipelineResult {
    RunRecord parent;
    std::vector<std::pair<Stage, StageOutcome>> stages;

    std::size_t executed() const {
        return static_cast<std::size_t>(
            std::count_if(stages.begin(), stages.end(), [](const auto& s) { return !s.second.reused; }));
    }
};

/// Creates the parent pipeline run and logs the full canonical config.
inline RunRecord start_pipeline_run(TrackingStore& store, const PipelineConfig& cfg) {
    const auto& exp = cfg.str("experiment_name");
    store.create_experiment(exp);
    auto parent = store.start_run(exp, Stage::pipeline);
    store.log_params(parent.run_id, cfg.values());
    return parent;
}

/// Runs load -> etl -> (optuna_search | train) -> eval under `parent_run_id`.
/// A failing stage fails the parent and stops the pipeline.
inline PipelineResult execute_pipeline(TrackingStore& store, const PipelineInputs& in,
                                       const std::string& parent_run_id) {
    const auto& cfg = in.config;
    StageContext ctx{&store, cfg.str("experiment_name"), parent_run_id, cfg.resume()};
    PipelineResult res;
    auto record = [&](Stage s, StageOutcome o) {
        store.log_param(parent_run_id, std::string(to_string(s)) + "_run_id", o.run.run_id);
        res.stages.emplace_back(s, o);
        return o.run.run_id;
    };
    try {
        const auto load_id = record(Stage::load, stage_load(ctx, in));
        const auto etl_id = record(Stage::etl, stage_etl(ctx, in, load_id));
        const auto model_stage = cfg.flag("opt_test") ? Stage::optuna_search : Stage::train;
        const auto model_id = record(model_stage, model_stage == Stage::train ? stage_train(ctx, in, etl_id)
                                                                               : stage_optuna_search(ctx, in, etl_id));
        record(Stage::eval, stage_eval(ctx, in, model_id, etl_id));
    } catch (const std::exception& e) {
        store.end_run(parent_run_id, RunStatus::FAILED, e.what());
        throw;
    }
    json stages = json::array();
    for (const auto& [s, o] : res.stages)
        stages.push_back({{"stage", to_string(s)}, {"run_id", o.run.run_id}, {"reused", o.reused}});
    store.log_artifact(parent_run_id, "stages.json", stages.dump(2));
    const auto& eval_run = res.stages.back().second.run;
    for (const auto& [name, points] : eval_run.metrics)
        if (!points.empty()) store.log_metric(parent_run_id, name, points.back().value);
    for (const auto& a : eval_run.artifacts)
        if (a == "forecast_plot.csv" || a == "evaluation.json")
            store.log_artifact(parent_run_id, a, store.read_artifact(eval_run.run_id, a));
    store.end_run(parent_run_id, RunStatus::FINISHED);
    res.parent = store.get_run(parent_run_id);
    return res;
}

inline PipelineResult run_pipeline(TrackingStore& store, const PipelineConfig& cfg) {
    const auto in = prepare_inputs(store, cfg, Stage::pipeline);
    const auto parent = start_pipeline_run(store, cfg);
    return execute_pipeline(store, in, parent.run_id);
}

// ---------------------------------------------------------------------------
// Inference

/// Resolution of a raw file: the time columns of a wide file, otherwise the
/// smallest spacing among the first rows.
inline Resolution infer_text_resolution(std::string_view text, CsvFormat format) {
    const auto rows = csv::lines(text);
    if (rows.empty()) throw Error("resolution undeterminable: empty file");
    if (format.layout == Layout::multiple_wide) {
        int n = 0;
        for (const auto& c : csv::split_line(rows.front().text))
            if (is_time_column(c)) ++n;
        if (n == 0) throw Error("resolution undeterminable: no time columns");
        return Resolution{1440 / n};
    }
    std::optional<TimePoint> prev;
    std::optional<long> best;
    for (std::size_t r = 1; r < rows.size() && r < 500; ++r) {
        const auto f = csv::split_line(rows[r].text);
        if (f.empty()) continue;
        const auto t = parse_datetime(f[0], format.day_first);
        if (!t) continue;
        if (prev && *t > *prev) best = std::min(best.value_or(LONG_MAX), static_cast<long>((*t - *prev).count()));
        prev = t;
    }
    if (!best) throw Error("resolution undeterminable: fewer than 2 timestamps");
    return Resolution{static_cast<int>(*best)};
}

struct InferenceOptions {
    int forecast_horizon = 960;
    int roll_size = 96;
};

/// Calendar covariates recorded with the model, rebuilt over the history and
/// `extend` steps past it.
inline std::optional<TimeSeriesDataset> model_calendar(const TrainedModel& m, const TimeSeriesDataset& series,
                                                       std::size_t extend) {
    if (!m.meta.contains("calendar")) return std::nullopt;
    const auto& cal = m.meta["calendar"];
    HolidayCalendar h;
    const std::string country = cal.at("country");
    h.declare(country);
    for (const auto& d : cal.at("holidays")) h.add(country, *parse_date(d.get<std::string>(), false));
    return build_calendar_covariates(series, country, h, extend);
}

/// `timestamp,id,forecast` rows for every component of `series`.
inline std::string forecast_csv(const TrainedModel& m, const TimeSeriesDataset& series,
                                const TimeSeriesDataset* future_covs, const InferenceOptions& opt, int* n_rolls = nullptr) {
    if (opt.forecast_horizon < 1) throw ConfigError("forecast_horizon must be >= 1");
    if (opt.roll_size < 1) throw ConfigError("roll_size must be >= 1");
    auto covs = model_calendar(m, series, static_cast<std::size_t>(opt.forecast_horizon + m.spec.horizon()));
    if (future_covs) {
        if (covs) covs->components.insert(covs->components.end(), future_covs->components.begin(),
                                          future_covs->components.end());
        else covs = *future_covs;
    }
    const auto ids = series.series_ids();
    std::string out = "timestamp,id,forecast\n";
    for (const auto& c : series.components) {
        const auto cv = covariates_for(covs ? &*covs : nullptr, c.timeseries_id, ids);
        const auto f = predict(m, c, cv, opt.forecast_horizon, opt.roll_size);
        if (n_rolls) *n_rolls = f.n_rolls;
        for (std::size_t i = 0; i < f.values.size(); ++i)
            out += format_datetime(f.timestamps[i]) + "," + c.id + "," + csv::format_number(f.values[i]) + "\n";
    }
    return out;
}

/// Tracked inference: stores `forecast.csv` in a new inference run.
inline RunRecord run_inference(TrackingStore& store, const std::string& experiment, const TrainedModel& m,
                               const std::string& model_source, const TimeSeriesDataset& series,
                               const TimeSeriesDataset* future_covs, const InferenceOptions& opt) {
    StageContext ctx{&store, experiment, std::nullopt, false};
    ParamMap params{{"model_source", model_source},
                    {"forecast_horizon", std::to_string(opt.forecast_horizon)},
                    {"roll_size", std::to_string(opt.roll_size)},
                    {"series_sha256", sha256_hex(write_wide_csv(series))}};
    return execute_stage(ctx, Stage::inference, params, [&](const RunRecord& run) {
                int rolls = 0;
                store.log_artifact(run.run_id, "forecast.csv", forecast_csv(m, series, future_covs, opt, &rolls));
                store.log_metric(run.run_id, "n_rolls", rolls);
            })
        .run;
}

}  // namespace tsfops
