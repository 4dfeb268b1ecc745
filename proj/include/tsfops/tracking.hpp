#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <json.hpp>

#include "tsfops/csv.hpp"
#include "tsfops/error.hpp"
#include "tsfops/time.hpp"

namespace tsfops {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum class Stage { load, etl, train, optuna_search, eval, pipeline, inference };
enum class RunStatus { RUNNING, FINISHED, FAILED };

inline const char* to_string(Stage s) {
    switch (s) {
        case Stage::load: return "load";
        case Stage::etl: return "etl";
        case Stage::train: return "train";
        case Stage::optuna_search: return "optuna_search";
        case Stage::eval: return "eval";
        case Stage::pipeline: return "pipeline";
        case Stage::inference: return "inference";
    }
    return "?";
}

inline Stage stage_from_string(std::string_view s) {
    for (auto st : {Stage::load, Stage::etl, Stage::train, Stage::optuna_search, Stage::eval, Stage::pipeline,
                    Stage::inference})
        if (s == to_string(st)) return st;
    throw Error("unknown stage '" + std::string(s) + "'");
}

inline const char* to_string(RunStatus s) {
    switch (s) {
        case RunStatus::RUNNING: return "RUNNING";
        case RunStatus::FINISHED: return "FINISHED";
        case RunStatus::FAILED: return "FAILED";
    }
    return "?";
}

inline RunStatus status_from_string(std::string_view s) {
    if (s == "RUNNING") return RunStatus::RUNNING;
    if (s == "FINISHED") return RunStatus::FINISHED;
    if (s == "FAILED") return RunStatus::FAILED;
    throw Error("unknown run status '" + std::string(s) + "'");
}

struct MetricPoint {
    std::int64_t step;
    double value;
};

using ParamMap = std::map<std::string, std::string>;

struct RunRecord {
    std::string run_id;
    std::string experiment;
    std::optional<std::string> parent_run_id;
    Stage stage = Stage::pipeline;
    ParamMap params;
    std::map<std::string, std::vector<MetricPoint>> metrics;
    std::vector<std::string> artifacts;
    RunStatus status = RunStatus::RUNNING;
    std::string start_time;
    std::string end_time;
    std::int64_t start_ns = 0;
    std::string error;
    fs::path dir;

    std::optional<double> metric(const std::string& name) const {
        auto it = metrics.find(name);
        if (it == metrics.end() || it->second.empty()) return std::nullopt;
        return it->second.back().value;
    }

    const std::string& param(const std::string& key) const {
        auto it = params.find(key);
        if (it == params.end()) throw NotFoundError("run " + run_id + " has no param '" + key + "'");
        return it->second;
    }

    fs::path artifact_dir() const { return dir / "artifacts"; }
};

/// Keys ignored when comparing stage parameters for resume.
inline const std::set<std::string>& bookkeeping_keys() {
    static const std::set<std::string> keys{"run_id", "parent_run_id", "start_time", "end_time", "timestamp"};
    return keys;
}

struct RunFilter {
    std::optional<std::string> experiment = std::nullopt;
    std::optional<std::string> run_id = std::nullopt;
    std::optional<Stage> stage = std::nullopt;
    std::optional<std::string> parent_run_id = std::nullopt;
    std::optional<RunStatus> status = std::nullopt;
};

namespace detail {

inline std::mt19937_64& id_rng() {
    thread_local std::mt19937_64 rng = [] {
        std::random_device rd;
        std::seed_seq seq{rd(), rd(), rd(), rd(),
                          static_cast<unsigned>(std::chrono::steady_clock::now().time_since_epoch().count()),
                          static_cast<unsigned>(std::hash<std::thread::id>{}(std::this_thread::get_id()))};
        return std::mt19937_64(seq);
    }();
    return rng;
}

inline std::string random_hex(std::size_t n_chars) {
    static const char* digits = "0123456789abcdef";
    std::string s;
    auto& rng = id_rng();
    while (s.size() < n_chars) {
        auto x = rng();
        for (int i = 0; i < 16 && s.size() < n_chars; ++i, x >>= 4) s += digits[x & 0xF];
    }
    return s;
}

/// Write-temp-then-rename so readers never observe a partial file.
inline void atomic_write(const fs::path& path, std::string_view bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp." + random_hex(12);
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("io error: cannot write '" + tmp.string() + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw Error("io error: short write to '" + tmp.string() + "'");
    }
    fs::rename(tmp, path);
}

inline std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("io error: cannot read '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline bool safe_name(std::string_view name) {
    if (name.empty() || name.front() == '.') return false;
    return std::all_of(name.begin(), name.end(), [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
    });
}

inline bool safe_relative(std::string_view rel) {
    fs::path p(rel);
    if (rel.empty() || p.is_absolute()) return false;
    for (const auto& part : p)
        if (part == ".." || part == ".") return false;
    return true;
}

inline std::int64_t now_ns() {
    return std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::system_clock::now().time_since_epoch())
        .count();
}

}  // namespace detail

/// Experiments, runs, params, metrics and artifacts kept as plain files:
///
///     <root>/<experiment>/experiment.json
///     <root>/<experiment>/<run_id>/meta.json
///     <root>/<experiment>/<run_id>/params.json
///     <root>/<experiment>/<run_id>/metrics/<name>.csv   (step,value)
///     <root>/<experiment>/<run_id>/artifacts/...
///
/// Every file is replaced atomically; a run directory has a single writer.
class TrackingStore {
public:
    explicit TrackingStore(fs::path root) : root_(std::move(root)) { fs::create_directories(root_); }

    /// Root from TSFOPS_STORE, defaulting to ./tsfops_store.
    static TrackingStore from_env() {
        const char* env = std::getenv("TSFOPS_STORE");
        return TrackingStore(env && *env ? fs::path(env) : fs::path("tsfops_store"));
    }

    const fs::path& root() const noexcept { return root_; }

    /// Returns the experiment id, creating the experiment on first use.
    std::string create_experiment(const std::string& name) {
        if (name.empty()) throw Error("experiment name must not be empty");
        if (!detail::safe_name(name)) throw Error("invalid experiment name '" + name + "'");
        const auto dir = root_ / name;
        const auto meta = dir / "experiment.json";
        if (fs::create_directory(dir)) {
            json j{{"id", detail::random_hex(16)}, {"name", name}, {"created", now_string()}};
            detail::atomic_write(meta, j.dump(2));
            return j["id"];
        }
        // Another writer may still be publishing experiment.json.
        for (int attempt = 0; attempt < 200 && !fs::exists(meta); ++attempt)
            std::this_thread::sleep_for(std::chrono::milliseconds(5));
        return json::parse(detail::slurp(meta)).at("id").get<std::string>();
    }

    std::optional<std::string> experiment_id(const std::string& name) const {
        if (!detail::safe_name(name)) return std::nullopt;
        auto meta = root_ / name / "experiment.json";
        if (!fs::exists(meta)) return std::nullopt;
        return json::parse(detail::slurp(meta)).at("id").get<std::string>();
    }

    std::vector<std::string> experiments() const {
        std::vector<std::string> out;
        for (const auto& e : fs::directory_iterator(root_))
            if (e.is_directory() && fs::exists(e.path() / "experiment.json")) out.push_back(e.path().filename());
        std::sort(out.begin(), out.end());
        return out;
    }

    RunRecord start_run(const std::string& experiment, Stage stage,
                        const std::optional<std::string>& parent = std::nullopt) {
        if (!experiment_id(experiment)) throw NotFoundError("unknown experiment '" + experiment + "'");
        RunRecord r;
        r.experiment = experiment;
        r.stage = stage;
        r.parent_run_id = parent;
        r.start_time = now_string();
        r.start_ns = detail::now_ns();
        do {
            r.run_id = detail::random_hex(32);
            r.dir = root_ / experiment / r.run_id;
        } while (!fs::create_directory(r.dir));
        fs::create_directories(r.dir / "metrics");
        fs::create_directories(r.dir / "artifacts");
        detail::atomic_write(r.dir / "params.json", "{}");
        write_meta(r);
        return r;
    }

    void log_param(const std::string& run_id, const std::string& key, const std::string& value) {
        log_params(run_id, {{key, value}});
    }

    void log_params(const std::string& run_id, const ParamMap& params) {
        auto r = running(run_id);
        for (const auto& [k, v] : params) {
            auto it = r.params.find(k);
            if (it != r.params.end() && it->second != v)
                throw Error("param '" + k + "' already logged with a different value");
            r.params[k] = v;
        }
        detail::atomic_write(r.dir / "params.json", json(r.params).dump(2));
    }

    /// Appends one point to the metric history; step defaults to the history length.
    void log_metric(const std::string& run_id, const std::string& name, double value,
                    std::optional<std::int64_t> step = std::nullopt) {
        if (!detail::safe_name(name)) throw Error("invalid metric name '" + name + "'");
        if (!std::isfinite(value)) throw Error("metric '" + name + "' is not finite");
        auto r = running(run_id);
        auto& history = r.metrics[name];
        history.push_back({step.value_or(static_cast<std::int64_t>(history.size())), value});
        std::string body = "step,value\n";
        for (const auto& p : history) body += std::to_string(p.step) + "," + csv::format_number(p.value) + "\n";
        detail::atomic_write(r.dir / "metrics" / (name + ".csv"), body);
    }

    void log_artifact(const std::string& run_id, const std::string& rel_path, std::string_view bytes) {
        if (!detail::safe_relative(rel_path)) throw Error("invalid artifact path '" + rel_path + "'");
        auto r = running(run_id);
        detail::atomic_write(r.dir / "artifacts" / rel_path, bytes);
        if (std::find(r.artifacts.begin(), r.artifacts.end(), rel_path) == r.artifacts.end()) {
            r.artifacts.push_back(rel_path);
            write_meta(r);
        }
    }

    std::string read_artifact(const std::string& run_id, const std::string& rel_path) const {
        auto r = get_run(run_id);
        if (std::find(r.artifacts.begin(), r.artifacts.end(), rel_path) == r.artifacts.end())
            throw NotFoundError("upstream artifact not found: " + rel_path + " in run " + run_id);
        return detail::slurp(r.dir / "artifacts" / rel_path);
    }

    bool has_artifact(const std::string& run_id, const std::string& rel_path) const {
        auto r = get_run(run_id);
        return std::find(r.artifacts.begin(), r.artifacts.end(), rel_path) != r.artifacts.end();
    }

    /// Seals the run; later writes fail with "run sealed".
    void end_run(const std::string& run_id, RunStatus status, const std::string& error = {}) {
        if (status == RunStatus::RUNNING) throw Error("end_run requires a terminal status");
        auto r = running(run_id);
        r.status = status;
        r.end_time = now_string();
        r.error = error;
        write_meta(r);
    }

    RunRecord get_run(const std::string& run_id) const {
        if (!detail::safe_name(run_id)) throw NotFoundError("unknown run '" + run_id + "'");
        for (const auto& exp : experiments()) {
            auto dir = root_ / exp / run_id;
            if (fs::exists(dir / "meta.json")) return load(dir);
        }
        throw NotFoundError("unknown run '" + run_id + "'");
    }

    /// Runs matching every set field of the filter, oldest first.
    std::vector<RunRecord> query_runs(const RunFilter& f = {}) const {
        std::vector<RunRecord> out;
        if (f.run_id) {
            try {
                auto r = get_run(*f.run_id);
                if (matches(r, f)) out.push_back(std::move(r));
            } catch (const NotFoundError&) {
            }
            return out;
        }
        std::vector<std::string> exps;
        if (f.experiment) {
            if (experiment_id(*f.experiment)) exps.push_back(*f.experiment);
        } else {
            exps = experiments();
        }
        for (const auto& exp : exps)
            for (const auto& e : fs::directory_iterator(root_ / exp))
                if (e.is_directory() && fs::exists(e.path() / "meta.json")) {
                    auto r = load(e.path());
                    if (matches(r, f)) out.push_back(std::move(r));
                }
        std::sort(out.begin(), out.end(), [](const RunRecord& a, const RunRecord& b) {
            return std::tie(a.start_ns, a.run_id) < std::tie(b.start_ns, b.run_id);
        });
        return out;
    }

    /// Most recent FINISHED run of the stage whose params contain every given
    /// (non-bookkeeping) key with an identical value.
    std::optional<RunRecord> find_matching_run(const std::string& experiment, Stage stage,
                                               const ParamMap& params) const {
        RunFilter f;
        f.experiment = experiment;
        f.stage = stage;
        f.status = RunStatus::FINISHED;
        auto runs = query_runs(f);
        for (auto it = runs.rbegin(); it != runs.rend(); ++it) {
            bool ok = true;
            for (const auto& [k, v] : params) {
                if (bookkeeping_keys().count(k)) continue;
                auto p = it->params.find(k);
                if (p == it->params.end() || p->second != v) {
                    ok = false;
                    break;
                }
            }
            if (ok) return *it;
        }
        return std::nullopt;
    }

    std::optional<RunRecord> latest_finished(const std::string& experiment, std::initializer_list<Stage> stages) const {
        std::optional<RunRecord> best;
        for (auto st : stages) {
            RunFilter f;
            f.experiment = experiment;
            f.stage = st;
            f.status = RunStatus::FINISHED;
            auto runs = query_runs(f);
            if (!runs.empty() && (!best || runs.back().start_ns > best->start_ns)) best = runs.back();
        }
        return best;
    }

private:
    static bool matches(const RunRecord& r, const RunFilter& f) {
        if (f.experiment && r.experiment != *f.experiment) return false;
        if (f.stage && r.stage != *f.stage) return false;
        if (f.status && r.status != *f.status) return false;
        if (f.parent_run_id && r.parent_run_id != f.parent_run_id) return false;
        return true;
    }

    RunRecord running(const std::string& run_id) const {
        auto r = get_run(run_id);
        if (r.status != RunStatus::RUNNING) throw Error("run sealed: " + run_id + " is " + to_string(r.status));
        return r;
    }

    static void write_meta(const RunRecord& r) {
        json j{{"run_id", r.run_id},
               {"experiment", r.experiment},
               {"parent_run_id", r.parent_run_id ? json(*r.parent_run_id) : json(nullptr)},
               {"stage", to_string(r.stage)},
               {"status", to_string(r.status)},
               {"start_time", r.start_time},
               {"end_time", r.end_time.empty() ? json(nullptr) : json(r.end_time)},
               {"start_ns", r.start_ns},
               {"artifacts", r.artifacts},
               {"error", r.error.empty() ? json(nullptr) : json(r.error)}};
        detail::atomic_write(r.dir / "meta.json", j.dump(2));
    }

    static RunRecord load(const fs::path& dir) {
        auto j = json::parse(detail::slurp(dir / "meta.json"));
        RunRecord r;
        r.dir = dir;
        r.run_id = j.at("run_id");
        r.experiment = j.at("experiment");
        if (!j.at("parent_run_id").is_null()) r.parent_run_id = j["parent_run_id"].get<std::string>();
        r.stage = stage_from_string(j.at("stage").get<std::string>());
        r.status = status_from_string(j.at("status").get<std::string>());
        r.start_time = j.at("start_time");
        if (!j.at("end_time").is_null()) r.end_time = j["end_time"];
        r.start_ns = j.value("start_ns", std::int64_t{0});
        r.artifacts = j.at("artifacts").get<std::vector<std::string>>();
        if (j.contains("error") && !j["error"].is_null()) r.error = j["error"];
        if (fs::exists(dir / "params.json")) r.params = json::parse(detail::slurp(dir / "params.json")).get<ParamMap>();
        if (fs::exists(dir / "metrics"))
            for (const auto& e : fs::directory_iterator(dir / "metrics")) {
                if (e.path().extension() != ".csv") continue;
                auto& hist = r.metrics[e.path().stem()];
                auto body = detail::slurp(e.path());
                auto rows = csv::lines(body);
                for (std::size_t i = 1; i < rows.size(); ++i) {
                    auto f = csv::split_line(rows[i].text);
                    if (f.size() != 2) continue;
                    auto v = csv::parse_value(f[1]);
                    hist.push_back({std::stoll(f[0]), v && *v ? **v : 0.0});
                }
            }
        return r;
    }

    fs::path root_;
};

}  // namespace tsfops
