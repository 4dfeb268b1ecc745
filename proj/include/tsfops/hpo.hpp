#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>
#include <yaml-cpp/yaml.h>

#include "tsfops/csv.hpp"
#include "tsfops/error.hpp"
#include "tsfops/models.hpp"
#include "tsfops/time.hpp"

namespace tsfops {

// ---------------------------------------------------------------------------
// Grids

struct GridEntry {
    std::string name;
    std::vector<json> values;  // a single value for fixed entries
    bool fixed = false;

    bool numeric() const {
        return std::all_of(values.begin(), values.end(), [](const json& v) { return v.is_number(); });
    }
};

/// Entries are kept sorted by parameter name.
struct HyperparameterGrid {
    std::string name;
    std::vector<GridEntry> entries;

    std::vector<const GridEntry*> searched() const {
        std::vector<const GridEntry*> out;
        for (const auto& e : entries)
            if (!e.fixed) out.push_back(&e);
        return out;
    }

    /// Number of configs in the full product; saturates at `cap + 1`.
    std::size_t size(std::size_t cap = std::numeric_limits<std::size_t>::max() - 1) const {
        std::size_t n = 1;
        for (const auto& e : entries) {
            if (n > (cap + 1) / e.values.size()) return cap + 1;
            n *= e.values.size();
        }
        return n;
    }
};

namespace detail {

inline json yaml_scalar(const YAML::Node& n) {
    const auto& s = n.Scalar();
    if (n.Tag() == "!") return s;  // quoted
    std::int64_t i = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), i);
    if (ec == std::errc{} && p == s.data() + s.size() && !s.empty()) return i;
    if (auto v = csv::parse_value(s); v && *v && !csv::is_missing_token(s)) return **v;
    if (s == "true" || s == "True") return true;
    if (s == "false" || s == "False") return false;
    return s;
}

inline GridEntry parse_grid_entry(const std::string& name, const YAML::Node& node) {
    auto bad = [&](const std::string& why) { return ConfigError("grid syntax error in '" + name + "': " + why); };
    GridEntry e{name, {}, false};
    if (node.IsScalar()) {
        e.values.push_back(yaml_scalar(node));
        e.fixed = true;
        return e;
    }
    if (!node.IsSequence() || node.size() == 0 || !node[0].IsScalar()) throw bad("expected a scalar, [\"range\", ...] or [\"list\", ...]");
    const auto kind = node[0].Scalar();
    if (kind == "range") {
        if (node.size() != 4) throw bad("range needs start, end and step");
        std::vector<json> abc;
        for (std::size_t i = 1; i < 4; ++i) {
            if (!node[i].IsScalar()) throw bad("range bounds must be numbers");
            auto v = yaml_scalar(node[i]);
            if (!v.is_number()) throw bad("range bounds must be numbers");
            abc.push_back(v);
        }
        const bool ints = std::all_of(abc.begin(), abc.end(), [](const json& v) { return v.is_number_integer(); });
        const double a = abc[0].get<double>(), b = abc[1].get<double>(), s = abc[2].get<double>();
        if (!(s > 0)) throw bad("range step must be > 0");
        if (a > b) throw bad("range start must not exceed end");
        const double tol = std::abs(s) * 1e-9;
        for (std::int64_t k = 0;; ++k) {
            const double v = a + static_cast<double>(k) * s;
            if (v > b + tol) break;
            if (ints) e.values.push_back(abc[0].get<std::int64_t>() + k * abc[2].get<std::int64_t>());
            else e.values.push_back(v);
            if (e.values.size() > 1'000'000) throw bad("range has too many values");
        }
        return e;
    }
    if (kind == "list") {
        if (node.size() < 2) throw bad("list must not be empty");
        for (std::size_t i = 1; i < node.size(); ++i) {
            if (!node[i].IsScalar()) throw bad("list items must be scalars");
            e.values.push_back(yaml_scalar(node[i]));
        }
        return e;
    }
    throw bad("unknown grid form '" + kind + "'");
}

}  // namespace detail

/// Reads one entrypoint of a grid document:
///
///     NBEATS_example:
///       input_chunk_length: ["range", 48, 240, 24]
///       batch_size: ["list", 256, 512]
///       output_chunk_length: 24
inline HyperparameterGrid parse_grid_config(const std::string& document, const std::string& entrypoint) {
    YAML::Node root;
    try {
        root = YAML::Load(document);
    } catch (const YAML::Exception& e) {
        throw ConfigError(std::string("grid syntax error: ") + e.what());
    }
    if (!root.IsMap() || !root[entrypoint]) throw ConfigError("entrypoint not found: '" + entrypoint + "'");
    const auto node = root[entrypoint];
    if (!node.IsMap()) throw ConfigError("grid syntax error: entrypoint '" + entrypoint + "' must be a mapping");
    HyperparameterGrid g{entrypoint, {}};
    for (const auto& kv : node) g.entries.push_back(detail::parse_grid_entry(kv.first.as<std::string>(), kv.second));
    std::sort(g.entries.begin(), g.entries.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    return g;
}

/// Cartesian product in lexicographic order of parameter name (the first name
/// varies slowest).
inline std::vector<json> expand_grid(const HyperparameterGrid& g, std::size_t cap = 1'000'000) {
    if (g.entries.empty()) throw ConfigError("empty grid");
    if (g.size(cap) > cap) throw ConfigError("grid too large: more than " + std::to_string(cap) + " configs");
    std::vector<json> out;
    std::vector<std::size_t> idx(g.entries.size(), 0);
    while (true) {
        json c = json::object();
        for (std::size_t i = 0; i < idx.size(); ++i) c[g.entries[i].name] = g.entries[i].values[idx[i]];
        out.push_back(std::move(c));
        std::size_t k = idx.size();
        while (k > 0) {
            --k;
            if (++idx[k] < g.entries[k].values.size()) break;
            idx[k] = 0;
            if (k == 0) return out;
        }
        if (idx.empty()) return out;
    }
}

// ---------------------------------------------------------------------------
// Studies

enum class TrialState { complete, failed, pruned };

inline const char* to_string(TrialState s) {
    switch (s) {
        case TrialState::complete: return "COMPLETE";
        case TrialState::failed: return "FAIL";
        case TrialState::pruned: return "PRUNED";
    }
    return "?";
}

struct Trial {
    int number = 0;
    json config = json::object();
    std::optional<double> loss;
    std::map<std::string, double> metrics;
    std::string datetime_start;
    std::string datetime_complete;
    TrialState state = TrialState::complete;
    std::string error;
};

struct ObjectiveResult {
    double loss = 0;
    std::map<std::string, double> metrics;
};

using Objective = std::function<ObjectiveResult(const json& config)>;

enum class SearchMode { grid, tpe };

/// TPE policy: good/bad split quantile, random start-up trials and candidates
/// drawn from the good density per suggestion.
struct TpeSettings {
    double gamma = 0.25;
    int n_startup = 10;
    int n_candidates = 24;
};

struct SearchOptions {
    SearchMode mode = SearchMode::tpe;
    int n_trials = 100;
    std::uint64_t seed = 0;
    TpeSettings tpe = {};
    std::function<void(const Trial&)> on_trial = nullptr;
};

struct StudyResult {
    std::vector<Trial> trials;
    std::vector<std::string> param_names;   // searched and fixed, sorted
    std::vector<std::string> metric_names;  // union over trials, sorted

    const Trial& best() const {
        const Trial* b = nullptr;
        for (const auto& t : trials)
            if (t.state == TrialState::complete && (!b || *t.loss < *b->loss)) b = &t;
        if (!b) throw Error("no successful trials");
        return *b;
    }

    std::size_t completed() const {
        return static_cast<std::size_t>(std::count_if(
            trials.begin(), trials.end(), [](const Trial& t) { return t.state == TrialState::complete; }));
    }
};

namespace detail {

using Point = std::vector<std::size_t>;  // candidate index per searched entry

/// Probability of every candidate of one entry under a Parzen estimator
/// built from `obs` (candidate indices). Numeric entries use Gaussian kernels
/// with Scott's bandwidth on the [0,1]-normalized values plus a flat prior
/// component; categorical ones use add-one smoothed frequencies.
inline std::vector<double> parzen(const GridEntry& e, const std::vector<std::size_t>& obs) {
    const std::size_t k = e.values.size();
    std::vector<double> p(k, 0.0);
    if (!e.numeric() || k < 2) {
        for (auto o : obs) p[o] += 1.0;
        for (auto& x : p) x = (x + 1.0) / (static_cast<double>(obs.size()) + static_cast<double>(k));
        return p;
    }
    double lo = e.values.front().get<double>(), hi = lo;
    for (const auto& v : e.values) lo = std::min(lo, v.get<double>()), hi = std::max(hi, v.get<double>());
    auto norm = [&](std::size_t i) { return hi > lo ? (e.values[i].get<double>() - lo) / (hi - lo) : 0.0; };

    const double n = static_cast<double>(obs.size());
    double bw = 1.0;
    if (obs.size() > 1) {
        double mean = 0, ss = 0;
        for (auto o : obs) mean += norm(o);
        mean /= n;
        for (auto o : obs) ss += (norm(o) - mean) * (norm(o) - mean);
        bw = 1.06 * std::sqrt(ss / (n - 1)) * std::pow(n, -0.2);
    }
    bw = std::clamp(bw, 1.0 / static_cast<double>(k), 1.0);

    const double prior_w = 1.0 / (n + 1.0);
    const double kern_w = obs.empty() ? 0.0 : (1.0 - prior_w) / n;
    double total = 0;
    for (std::size_t j = 0; j < k; ++j) {
        double d = prior_w / static_cast<double>(k);
        for (auto o : obs) {
            const double z = (norm(j) - norm(o)) / bw;
            d += kern_w * std::exp(-0.5 * z * z);
        }
        p[j] = d;
        total += d;
    }
    for (auto& x : p) x /= total;
    return p;
}

inline std::size_t draw(const std::vector<double>& p, Rng& rng) {
    double u = rng.uniform() * std::accumulate(p.begin(), p.end(), 0.0);
    for (std::size_t j = 0; j < p.size(); ++j) {
        if (u < p[j]) return j;
        u -= p[j];
    }
    return p.size() - 1;
}

inline Point random_point(const std::vector<const GridEntry*>& space, Rng& rng) {
    Point x(space.size());
    for (std::size_t d = 0; d < space.size(); ++d) x[d] = rng.below(space[d]->values.size());
    return x;
}

}  // namespace detail

/// Evaluates configs sequentially. Grid mode visits the first
/// min(n_trials, |grid|) configs of expand_grid; TPE mode samples the grid
/// (random for the first n_startup trials, density-ratio afterwards) and never
/// repeats a config, stopping early once every config has been tried.
inline StudyResult run_search(const HyperparameterGrid& grid, const Objective& objective, const SearchOptions& opt) {
    if (opt.n_trials < 1) throw ConfigError("n_trials must be >= 1");
    StudyResult study;
    for (const auto& e : grid.entries) study.param_names.push_back(e.name);
    const auto space = grid.searched();

    auto config_of = [&](const detail::Point& x) {
        json c = json::object();
        std::size_t d = 0;
        for (const auto& e : grid.entries) c[e.name] = e.fixed ? e.values.front() : e.values[x[d++]];
        return c;
    };

    std::set<std::string> metric_names;
    auto evaluate = [&](const json& config) {
        Trial t;
        t.number = static_cast<int>(study.trials.size());
        t.config = config;
        t.datetime_start = now_string();
        try {
            auto r = objective(config);
            if (!std::isfinite(r.loss)) throw Error("objective returned a non-finite loss");
            t.loss = r.loss;
            t.metrics = std::move(r.metrics);
            for (const auto& [k, v] : t.metrics) metric_names.insert(k);
        } catch (const std::exception& ex) {
            t.state = TrialState::failed;
            t.error = ex.what();
        }
        t.datetime_complete = now_string();
        if (opt.on_trial) opt.on_trial(t);
        study.trials.push_back(std::move(t));
    };

    if (opt.mode == SearchMode::grid) {
        const auto configs = expand_grid(grid);
        const auto n = std::min<std::size_t>(configs.size(), static_cast<std::size_t>(opt.n_trials));
        for (std::size_t i = 0; i < n; ++i) evaluate(configs[i]);
    } else {
        const std::size_t total = grid.size();
        detail::Rng rng(opt.seed);
        std::set<detail::Point> seen;
        std::vector<detail::Point> points;  // aligned with study.trials
        for (int trial = 0; trial < opt.n_trials && seen.size() < total; ++trial) {
            std::optional<detail::Point> next;
            std::vector<std::size_t> done;
            for (std::size_t i = 0; i < study.trials.size(); ++i)
                if (study.trials[i].state == TrialState::complete) done.push_back(i);

            if (trial >= opt.tpe.n_startup && done.size() >= 2 && !space.empty()) {
                std::stable_sort(done.begin(), done.end(), [&](std::size_t a, std::size_t b) {
                    return *study.trials[a].loss < *study.trials[b].loss;
                });
                const auto n_good = std::max<std::size_t>(
                    1, static_cast<std::size_t>(std::ceil(opt.tpe.gamma * static_cast<double>(done.size()))));
                std::vector<std::vector<double>> good(space.size()), bad(space.size());
                for (std::size_t d = 0; d < space.size(); ++d) {
                    std::vector<std::size_t> g, b;
                    for (std::size_t r = 0; r < done.size(); ++r)
                        (r < n_good ? g : b).push_back(points[done[r]][d]);
                    good[d] = detail::parzen(*space[d], g);
                    bad[d] = detail::parzen(*space[d], b);
                }
                double best_score = -std::numeric_limits<double>::infinity();
                for (int c = 0; c < opt.tpe.n_candidates; ++c) {
                    detail::Point x(space.size());
                    double score = 0;
                    for (std::size_t d = 0; d < space.size(); ++d) {
                        x[d] = detail::draw(good[d], rng);
                        score += std::log(good[d][x[d]]) - std::log(bad[d][x[d]]);
                    }
                    if (!seen.count(x) && score > best_score) {
                        best_score = score;
                        next = x;
                    }
                }
            }
            for (int attempt = 0; !next && attempt < 10'000; ++attempt) {
                auto x = detail::random_point(space, rng);
                if (!seen.count(x)) next = x;
            }
            if (!next) {  // sparse leftovers: take the first untried config in grid order
                detail::Point x(space.size(), 0);
                while (seen.count(x)) {
                    std::size_t d = x.size();
                    while (d > 0 && ++x[d - 1] == space[d - 1]->values.size()) x[--d] = 0;
                }
                next = x;
            }
            seen.insert(*next);
            points.push_back(*next);
            evaluate(config_of(*next));
        }
    }
    study.metric_names.assign(metric_names.begin(), metric_names.end());
    return study;
}

/// Trials table: number,value,datetime_start,datetime_complete,<params>,<metrics>,state.
inline std::string trials_csv(const StudyResult& s) {
    auto cell = [](const json& v) {
        if (v.is_string()) return v.get<std::string>();
        if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
        if (v.is_number()) return csv::format_number(v.get<double>());
        return v.dump();
    };
    std::string out = "number,value,datetime_start,datetime_complete";
    for (const auto& p : s.param_names) out += "," + p;
    for (const auto& m : s.metric_names) out += "," + m;
    out += ",state\n";
    for (const auto& t : s.trials) {
        out += std::to_string(t.number) + "," + (t.loss ? csv::format_number(*t.loss) : "") + "," + t.datetime_start +
               "," + t.datetime_complete;
        for (const auto& p : s.param_names) out += "," + (t.config.contains(p) ? cell(t.config[p]) : "");
        for (const auto& m : s.metric_names) {
            auto it = t.metrics.find(m);
            out += "," + (it == t.metrics.end() ? std::string{} : csv::format_number(it->second));
        }
        out += std::string(",") + to_string(t.state) + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Importance

struct ForestSettings {
    int n_trees = 64;
    int max_depth = 8;
    std::uint64_t seed = 0;
};

namespace detail {

struct ForestData {
    std::vector<std::vector<double>> x;  // samples x features
    std::vector<double> y;
};

/// Grows one regression tree on `rows`, adding each split's reduction of the
/// squared error to `gain[feature]`.
inline void grow_tree(const ForestData& data, std::vector<std::size_t> rows, int depth, int max_depth,
                      std::vector<double>& gain) {
    if (depth >= max_depth || rows.size() < 2) return;
    const std::size_t nf = gain.size();
    auto sse = [&](const std::vector<std::size_t>& r) {
        double m = 0, s = 0;
        for (auto i : r) m += data.y[i];
        m /= static_cast<double>(r.size());
        for (auto i : r) s += (data.y[i] - m) * (data.y[i] - m);
        return s;
    };
    const double parent = sse(rows);
    if (parent <= 0) return;

    double best_gain = 0, best_thr = 0;
    std::size_t best_f = nf;
    for (std::size_t f = 0; f < nf; ++f) {
        auto sorted = rows;
        std::sort(sorted.begin(), sorted.end(), [&](auto a, auto b) { return data.x[a][f] < data.x[b][f]; });
        // Prefix sums give the squared error of both sides for every split point.
        double ls = 0, lss = 0, ts = 0, tss = 0;
        for (auto i : sorted) ts += data.y[i], tss += data.y[i] * data.y[i];
        for (std::size_t k = 0; k + 1 < sorted.size(); ++k) {
            const double y = data.y[sorted[k]];
            ls += y;
            lss += y * y;
            const double a = data.x[sorted[k]][f], b = data.x[sorted[k + 1]][f];
            if (a == b) continue;
            const double nl = static_cast<double>(k + 1), nr = static_cast<double>(sorted.size() - k - 1);
            const double left = lss - ls * ls / nl;
            const double right = (tss - lss) - (ts - ls) * (ts - ls) / nr;
            const double g = parent - left - right;
            if (g > best_gain) {
                best_gain = g;
                best_f = f;
                best_thr = 0.5 * (a + b);
            }
        }
    }
    if (best_f == nf) return;
    gain[best_f] += best_gain;
    std::vector<std::size_t> l, r;
    for (auto i : rows) (data.x[i][best_f] <= best_thr ? l : r).push_back(i);
    grow_tree(data, std::move(l), depth + 1, max_depth, gain);
    grow_tree(data, std::move(r), depth + 1, max_depth, gain);
}

}  // namespace detail

/// Random-forest surrogate importance: each parameter's share of the total
/// squared-error reduction achieved by splits on it, over bootstrapped trees.
/// This approximates fANOVA's variance attribution rather than computing it.
inline std::map<std::string, double> compute_param_importance(const StudyResult& study, ForestSettings fs = {}) {
    std::vector<const Trial*> done;
    for (const auto& t : study.trials)
        if (t.state == TrialState::complete) done.push_back(&t);
    if (done.size() < 10) throw Error("not enough data for importance: need at least 10 complete trials");

    std::vector<std::string> scored;
    for (const auto& p : study.param_names) {
        std::set<std::string> distinct;
        for (const auto* t : done)
            if (t->config.contains(p)) distinct.insert(t->config[p].dump());
        if (distinct.size() >= 2) scored.push_back(p);
    }
    if (scored.empty()) throw Error("not enough data for importance: no parameter takes two distinct values");

    detail::ForestData data;
    for (const auto* t : done) {
        std::vector<double> row;
        for (const auto& p : scored) {
            const auto& v = t->config[p];
            if (v.is_number()) {
                row.push_back(v.get<double>());
            } else {
                // Categorical values: rank among the distinct values seen.
                std::set<std::string> values;
                for (const auto* u : done) values.insert(u->config[p].dump());
                row.push_back(static_cast<double>(std::distance(values.begin(), values.find(v.dump()))));
            }
        }
        data.x.push_back(std::move(row));
        data.y.push_back(*t->loss);
    }

    std::vector<double> gain(scored.size(), 0.0);
    detail::Rng rng(fs.seed);
    for (int tree = 0; tree < fs.n_trees; ++tree) {
        std::vector<std::size_t> rows(data.y.size());
        for (auto& r : rows) r = rng.below(data.y.size());
        detail::grow_tree(data, std::move(rows), 0, fs.max_depth, gain);
    }
    const double total = std::accumulate(gain.begin(), gain.end(), 0.0);
    std::map<std::string, double> out;
    for (std::size_t i = 0; i < scored.size(); ++i)
        out[scored[i]] = total > 0 ? gain[i] / total : 1.0 / static_cast<double>(scored.size());
    return out;
}

/// `param,importance` rows, most important first.
inline std::string importance_csv(const std::map<std::string, double>& imp) {
    std::vector<std::pair<std::string, double>> rows(imp.begin(), imp.end());
    std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::string out = "param,importance\n";
    for (const auto& [p, v] : rows) out += p + "," + csv::format_number(v) + "\n";
    return out;
}

}  // namespace tsfops
