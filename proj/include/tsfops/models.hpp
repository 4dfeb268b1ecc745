#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tsfops/core.hpp"
#include "tsfops/error.hpp"

namespace tsfops {

using json = nlohmann::json;

enum class ModelKind { seasonal_naive, linear_ar, mlp };

inline const char* to_string(ModelKind k) {
    switch (k) {
        case ModelKind::seasonal_naive: return "seasonal_naive";
        case ModelKind::linear_ar: return "linear_ar";
        case ModelKind::mlp: return "mlp";
    }
    return "?";
}

inline ModelKind model_kind_from_string(const std::string& s) {
    if (s == "seasonal_naive") return ModelKind::seasonal_naive;
    if (s == "linear_ar") return ModelKind::linear_ar;
    if (s == "mlp") return ModelKind::mlp;
    throw ConfigError("unknown model '" + s + "' (expected seasonal_naive, linear_ar or mlp)");
}

/// Declared hyperparameters of each model kind with their defaults.
inline const json& declared_hyperparams(ModelKind k) {
    static const json naive = {{"m", 24}, {"output_chunk_length", 24}};
    static const json linear = {{"input_chunk_length", 24}, {"output_chunk_length", 24}, {"ridge", 0.0}};
    static const json mlp = {{"input_chunk_length", 24}, {"output_chunk_length", 24}, {"hidden_size", 32},
                             {"n_epochs", 20},          {"learning_rate", 0.01},     {"batch_size", 64},
                             {"random_state", 0}};
    switch (k) {
        case ModelKind::seasonal_naive: return naive;
        case ModelKind::linear_ar: return linear;
        case ModelKind::mlp: return mlp;
    }
    return naive;
}

/// Model kind plus its fully resolved hyperparameters.
class ModelSpec {
public:
    ModelSpec() = default;

    /// Rejects hyperparameters the kind does not declare and fills defaults.
    ModelSpec(ModelKind kind, const json& given) : kind_(kind), hp_(declared_hyperparams(kind)) {
        if (!given.is_null() && !given.is_object()) throw ConfigError("hyperparameters must be an object");
        if (given.is_object())
            for (const auto& [k, v] : given.items()) {
                if (!hp_.contains(k))
                    throw ConfigError("unknown hyperparameter '" + k + "' for model " + to_string(kind));
                if (!v.is_number() && !v.is_boolean())
                    throw ConfigError("hyperparameter '" + k + "' must be numeric");
                if (hp_[k].is_number_integer()) {
                    double d = v.get<double>();
                    if (d != std::floor(d)) throw ConfigError("hyperparameter '" + k + "' must be an integer");
                    hp_[k] = static_cast<std::int64_t>(d);
                } else {
                    hp_[k] = v.get<double>();
                }
            }
        if (lookback() < 1) throw ConfigError("input_chunk_length must be >= 1");
        if (horizon() < 1) throw ConfigError("output_chunk_length must be >= 1");
        if (kind_ == ModelKind::linear_ar && real("ridge") < 0) throw ConfigError("ridge must be >= 0");
        if (kind_ == ModelKind::mlp) {
            if (integer("hidden_size") < 1 || integer("batch_size") < 1 || integer("n_epochs") < 0)
                throw ConfigError("mlp needs hidden_size >= 1, batch_size >= 1, n_epochs >= 0");
            if (!(real("learning_rate") > 0)) throw ConfigError("learning_rate must be > 0");
        }
    }

    ModelKind kind() const noexcept { return kind_; }
    const json& hyperparams() const noexcept { return hp_; }

    int lookback() const {
        return static_cast<int>(kind_ == ModelKind::seasonal_naive ? integer("m") : integer("input_chunk_length"));
    }
    int horizon() const { return static_cast<int>(integer("output_chunk_length")); }

    std::int64_t integer(const char* key) const { return hp_.at(key).get<std::int64_t>(); }
    double real(const char* key) const { return hp_.at(key).get<double>(); }

    friend bool operator==(const ModelSpec& a, const ModelSpec& b) { return a.kind_ == b.kind_ && a.hp_ == b.hp_; }

private:
    ModelKind kind_ = ModelKind::seasonal_naive;
    json hp_ = declared_hyperparams(ModelKind::seasonal_naive);
};

/// Min-max scaling learned on the training split. A constant training
/// series maps everything to 0 and inverts to the constant.
struct MinMaxScaler {
    double min = 0.0;
    double max = 1.0;

    static MinMaxScaler fit(std::span<const Value> values) {
        MinMaxScaler s{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
        for (const auto& v : values)
            if (v) {
                s.min = std::min(s.min, *v);
                s.max = std::max(s.max, *v);
            }
        if (s.min > s.max) throw Error("cannot fit scaler: training data has no observations");
        return s;
    }

    double transform(double x) const { return max > min ? (x - min) / (max - min) : 0.0; }
    double inverse(double y) const { return max > min ? y * (max - min) + min : min; }

    friend bool operator==(const MinMaxScaler&, const MinMaxScaler&) = default;
};

// ---------------------------------------------------------------------------
// Splitting

struct SplitResult {
    TimeSeriesDataset train, validation, test;
};

/// train = [start, cut_date_val), validation = [cut_date_val, cut_date_test),
/// test = [cut_date_test, test end]; every component gets all three pieces.
inline SplitResult split(const TimeSeriesDataset& ds, const SplitSpec& s) {
    SplitResult r{ds, ds, ds};
    for (std::size_t i = 0; i < ds.components.size(); ++i) {
        const auto& c = ds.components[i];
        if (c.size() == 0) throw Error("degenerate split: component '" + c.id + "' is empty");
        const auto data_end = c.timestamps.back();
        const auto end = s.test_end_inclusive(data_end);
        const auto one = std::chrono::minutes{1};
        auto cut = [&](TimeSeriesDataset& part, TimePoint from, TimePoint to) {
            TimeSeriesDataset single;
            single.components = {c};
            single.resolution = ds.resolution;
            auto sliced = from <= to ? slice_by_dates(single, from, to).components.front() : SeriesComponent{c.id, c.timeseries_id, {}, {}};
            if (sliced.size() == 0) throw Error("degenerate split: empty segment for component '" + c.id + "'");
            part.components[i] = std::move(sliced);
        };
        cut(r.train, c.timestamps.front(), s.cut_date_val - one);
        cut(r.validation, s.cut_date_val, s.cut_date_test - one);
        cut(r.test, s.cut_date_test, end);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Trained model

struct TrainedModel {
    ModelSpec spec;
    std::vector<double> params;
    bool scale = true;
    bool scale_covs = true;
    std::map<std::string, MinMaxScaler> scalers;      // per target component
    std::map<std::string, MinMaxScaler> cov_scalers;  // per covariate component
    int n_covariates = 0;
    json meta = json::object();

    int input_size() const { return spec.lookback() + n_covariates * spec.horizon(); }

    const MinMaxScaler& scaler_for(const std::string& id) const {
        static const MinMaxScaler identity{0.0, 1.0};
        if (!scale) return identity;
        auto it = scalers.find(id);
        if (it != scalers.end()) return it->second;
        if (scalers.size() == 1) return scalers.begin()->second;
        throw Error("no scaler for component '" + id + "'");
    }

    const MinMaxScaler& cov_scaler_for(const std::string& id) const {
        static const MinMaxScaler identity{0.0, 1.0};
        if (!scale_covs) return identity;
        auto it = cov_scalers.find(id);
        if (it == cov_scalers.end()) throw Error("no scaler for covariate '" + id + "'");
        return it->second;
    }

    friend bool operator==(const TrainedModel& a, const TrainedModel& b) {
        return a.spec == b.spec && a.params == b.params && a.scale == b.scale && a.scale_covs == b.scale_covs &&
               a.scalers == b.scalers && a.cov_scalers == b.cov_scalers && a.n_covariates == b.n_covariates;
    }
};

/// Covariate components that apply to a target series: those tagged with its
/// series id followed by those not tied to any target series.
inline std::vector<const SeriesComponent*> covariates_for(const TimeSeriesDataset* covs, const std::string& series_id,
                                                          const std::vector<std::string>& target_series) {
    std::vector<const SeriesComponent*> own, global;
    if (!covs) return own;
    for (const auto& c : covs->components) {
        if (c.timeseries_id == series_id) own.push_back(&c);
        else if (std::find(target_series.begin(), target_series.end(), c.timeseries_id) == target_series.end())
            global.push_back(&c);
    }
    own.insert(own.end(), global.begin(), global.end());
    return own;
}

namespace detail {

/// Seeded generator with platform-independent uniform draws.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n; }
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
    }

private:
    std::mt19937_64 eng_;
};

inline std::optional<std::size_t> index_at(const SeriesComponent& c, TimePoint t) {
    if (c.size() == 0 || t < c.timestamps.front() || t > c.timestamps.back()) return std::nullopt;
    if (c.size() == 1) return std::size_t{0};
    const auto step = c.timestamps[1] - c.timestamps[0];
    const auto off = t - c.timestamps.front();
    if (off % step != std::chrono::minutes{0}) return std::nullopt;
    return static_cast<std::size_t>(off / step);
}

/// Scaled covariate features at the `horizon` steps starting at `first`;
/// layout is step-major (step 0: every covariate, step 1: ...).
inline bool covariate_features(const TrainedModel& m, std::span<const SeriesComponent* const> covs, TimePoint first,
                               std::chrono::minutes step, int horizon, double* out) {
    for (int h = 0; h < horizon; ++h) {
        const auto t = first + h * step;
        for (std::size_t c = 0; c < covs.size(); ++c) {
            auto idx = index_at(*covs[c], t);
            if (!idx || !covs[c]->values[*idx]) return false;
            out[h * covs.size() + c] = m.cov_scaler_for(covs[c]->id).transform(*covs[c]->values[*idx]);
        }
    }
    return true;
}

struct Frames {
    Eigen::MatrixXd x;  // rows = samples, cols = lags (oldest first) then covariates
    Eigen::MatrixXd y;  // rows = samples, cols = horizon
};

inline Frames build_frames(const TrainedModel& m, const TimeSeriesDataset& train, const TimeSeriesDataset* covs) {
    const int L = m.spec.lookback(), H = m.spec.horizon(), D = m.input_size();
    const auto series = train.series_ids();
    std::vector<double> xs, ys;
    std::vector<double> row(static_cast<std::size_t>(D));
    std::size_t rows = 0;
    for (const auto& c : train.components) {
        const auto& sc = m.scaler_for(c.id);
        auto cv = covariates_for(covs, c.timeseries_id, series);
        if (static_cast<int>(cv.size()) != m.n_covariates)
            throw Error("covariate coverage error: series '" + c.timeseries_id + "' has " + std::to_string(cv.size()) +
                        " covariates, expected " + std::to_string(m.n_covariates));
        const auto n = static_cast<long>(c.size());
        for (long i = L; i + H <= n; ++i) {
            bool ok = true;
            for (long k = i - L; k < i + H && ok; ++k) ok = c.values[k].has_value();
            if (!ok) continue;
            for (int k = 0; k < L; ++k) row[k] = sc.transform(*c.values[i - L + k]);
            if (m.n_covariates > 0 &&
                !covariate_features(m, cv, c.timestamps[i], train.resolution.step(), H, row.data() + L))
                continue;
            xs.insert(xs.end(), row.begin(), row.end());
            for (int h = 0; h < H; ++h) ys.push_back(sc.transform(*c.values[i + h]));
            ++rows;
        }
    }
    Frames f;
    f.x = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        xs.data(), static_cast<Eigen::Index>(rows), D);
    f.y = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        ys.data(), static_cast<Eigen::Index>(rows), H);
    return f;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// MLP: one tanh hidden layer, linear outputs, mean squared error.
//
// Parameter layout: W1 (hidden x input, row-major), b1 (hidden),
// W2 (horizon x hidden, row-major), b2 (horizon).

struct MlpShape {
    int input, hidden, output;
    std::size_t size() const {
        return static_cast<std::size_t>(hidden) * input + hidden + static_cast<std::size_t>(output) * hidden + output;
    }
};

inline std::vector<double> mlp_init(const MlpShape& s, std::uint64_t seed) {
    detail::Rng rng(seed);
    std::vector<double> p;
    p.reserve(s.size());
    const double b1 = 1.0 / std::sqrt(static_cast<double>(s.input));
    const double b2 = 1.0 / std::sqrt(static_cast<double>(s.hidden));
    for (std::size_t i = 0; i < static_cast<std::size_t>(s.hidden) * s.input + s.hidden; ++i)
        p.push_back(rng.uniform(-b1, b1));
    for (std::size_t i = 0; i < static_cast<std::size_t>(s.output) * s.hidden + s.output; ++i)
        p.push_back(rng.uniform(-b2, b2));
    return p;
}

namespace detail {

struct MlpView {
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> w1;
    Eigen::Map<const Eigen::VectorXd> b1;
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> w2;
    Eigen::Map<const Eigen::VectorXd> b2;

    MlpView(const MlpShape& s, const double* p)
        : w1(p, s.hidden, s.input),
          b1(p + s.hidden * s.input, s.hidden),
          w2(p + s.hidden * s.input + s.hidden, s.output, s.hidden),
          b2(p + s.hidden * s.input + s.hidden + s.output * s.hidden, s.output) {}
};

}  // namespace detail

/// Forward pass for a batch (rows = samples).
inline Eigen::MatrixXd mlp_forward(const MlpShape& s, std::span<const double> params, const Eigen::MatrixXd& x) {
    detail::MlpView v(s, params.data());
    Eigen::MatrixXd h = ((x * v.w1.transpose()).rowwise() + v.b1.transpose()).array().tanh();
    return (h * v.w2.transpose()).rowwise() + v.b2.transpose();
}

/// Mean squared error over all batch entries and its gradient w.r.t. params.
inline double mlp_loss_and_gradient(const MlpShape& s, std::span<const double> params, const Eigen::MatrixXd& x,
                                    const Eigen::MatrixXd& y, std::vector<double>* grad) {
    detail::MlpView v(s, params.data());
    const Eigen::MatrixXd h = ((x * v.w1.transpose()).rowwise() + v.b1.transpose()).array().tanh();
    const Eigen::MatrixXd out = (h * v.w2.transpose()).rowwise() + v.b2.transpose();
    const Eigen::MatrixXd diff = out - y;
    const double count = static_cast<double>(diff.size());
    const double loss = diff.squaredNorm() / count;
    if (!grad) return loss;

    grad->assign(s.size(), 0.0);
    const Eigen::MatrixXd d_out = diff * (2.0 / count);                                  // B x O
    const Eigen::MatrixXd d_h = (d_out * v.w2).array() * (1.0 - h.array().square());   // B x Hd
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> gw1(grad->data(), s.hidden, s.input);
    Eigen::Map<Eigen::VectorXd> gb1(grad->data() + s.hidden * s.input, s.hidden);
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> gw2(
        grad->data() + s.hidden * s.input + s.hidden, s.output, s.hidden);
    Eigen::Map<Eigen::VectorXd> gb2(grad->data() + s.hidden * s.input + s.hidden + s.output * s.hidden, s.output);
    gw1 = d_h.transpose() * x;
    gb1 = d_h.colwise().sum().transpose();
    gw2 = d_out.transpose() * h;
    gb2 = d_out.colwise().sum().transpose();
    return loss;
}

inline MlpShape mlp_shape(const TrainedModel& m) {
    return {m.input_size(), static_cast<int>(m.spec.integer("hidden_size")), m.spec.horizon()};
}

// ---------------------------------------------------------------------------
// Fitting

struct FitOptions {
    bool scale = true;
    bool scale_covs = true;
};

/// Fits one global model on pooled frames of every training component.
inline TrainedModel fit(const ModelSpec& spec, const TimeSeriesDataset& train, const TimeSeriesDataset* covs = nullptr,
                        FitOptions opt = {}) {
    TrainedModel m;
    m.spec = spec;
    m.scale = opt.scale;
    m.scale_covs = opt.scale_covs;
    const int L = spec.lookback(), H = spec.horizon();

    for (const auto& c : train.components) {
        if (static_cast<int>(c.size()) < L + H)
            throw Error("train too short for lookback+horizon: component '" + c.id + "' has " +
                        std::to_string(c.size()) + " points, needs " + std::to_string(L + H));
        if (opt.scale) m.scalers[c.id] = MinMaxScaler::fit(c.values);
    }
    if (!train.components.empty()) {
        m.meta["train_start"] = format_datetime(train.components.front().timestamps.front());
        m.meta["train_end"] = format_datetime(train.components.front().timestamps.back());
    }

    if (spec.kind() == ModelKind::seasonal_naive) return m;

    if (covs && !train.components.empty()) {
        const auto series = train.series_ids();
        auto cv = covariates_for(covs, train.components.front().timeseries_id, series);
        m.n_covariates = static_cast<int>(cv.size());
        if (opt.scale_covs)
            for (const auto& c : covs->components) {
                // Covariate scalers see only the training period.
                const auto end = train.components.front().timestamps.back();
                std::vector<Value> seen;
                for (std::size_t i = 0; i < c.size() && c.timestamps[i] <= end; ++i) seen.push_back(c.values[i]);
                m.cov_scalers[c.id] = seen.empty() ? MinMaxScaler{} : MinMaxScaler::fit(seen);
            }
    }

    auto frames = detail::build_frames(m, train, covs);
    if (frames.x.rows() == 0) throw Error("train too short for lookback+horizon: no complete training frames");
    const auto D = frames.x.cols();

    if (spec.kind() == ModelKind::linear_ar) {
        // Ridge least squares with an unpenalized intercept; one output column per horizon step.
        Eigen::MatrixXd xa(frames.x.rows(), D + 1);
        xa.col(0).setOnes();
        xa.rightCols(D) = frames.x;
        Eigen::MatrixXd gram = xa.transpose() * xa;
        const double lambda = spec.real("ridge");
        for (Eigen::Index i = 1; i <= D; ++i) gram(i, i) += lambda;
        const Eigen::MatrixXd rhs = xa.transpose() * frames.y;
        const Eigen::MatrixXd beta = gram.completeOrthogonalDecomposition().solve(rhs);  // (D+1) x H
        m.params.reserve(static_cast<std::size_t>(H * (D + 1)));
        for (int h = 0; h < H; ++h)
            for (Eigen::Index i = 0; i <= D; ++i) m.params.push_back(beta(i, h));
        return m;
    }

    // mlp: seeded init and shuffled mini-batch gradient descent.
    const auto shape = mlp_shape(m);
    const auto seed = static_cast<std::uint64_t>(spec.integer("random_state"));
    m.params = mlp_init(shape, seed);
    const auto epochs = spec.integer("n_epochs");
    const auto batch = static_cast<Eigen::Index>(spec.integer("batch_size"));
    const double lr = spec.real("learning_rate");
    detail::Rng rng(seed ^ 0x9E3779B97F4A7C15ULL);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(frames.x.rows()));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Eigen::Index>(i);
    std::vector<double> grad;
    Eigen::MatrixXd bx, by;
    for (std::int64_t e = 0; e < epochs; ++e) {
        rng.shuffle(order);
        for (Eigen::Index start = 0; start < frames.x.rows(); start += batch) {
            const auto n = std::min(batch, frames.x.rows() - start);
            bx.resize(n, D);
            by.resize(n, H);
            for (Eigen::Index r = 0; r < n; ++r) {
                bx.row(r) = frames.x.row(order[static_cast<std::size_t>(start + r)]);
                by.row(r) = frames.y.row(order[static_cast<std::size_t>(start + r)]);
            }
            mlp_loss_and_gradient(shape, m.params, bx, by, &grad);
            for (std::size_t i = 0; i < m.params.size(); ++i) m.params[i] -= lr * grad[i];
        }
    }
    m.meta["final_train_loss"] = mlp_loss_and_gradient(shape, m.params, frames.x, frames.y, nullptr);
    return m;
}

/// Coefficient of lag k (1 = most recent) for horizon step h of a linear_ar model.
inline double linear_ar_coefficient(const TrainedModel& m, int h, int lag) {
    const int D = m.input_size();
    const int L = m.spec.lookback();
    return m.params.at(static_cast<std::size_t>(h * (D + 1) + 1 + (L - lag)));
}

// ---------------------------------------------------------------------------
// Prediction

struct Forecast {
    std::vector<TimePoint> timestamps;
    std::vector<double> values;
    int n_rolls = 0;
};

namespace detail {

/// One model call: `H` scaled values following the scaled `window` (length L).
inline std::vector<double> predict_chunk(const TrainedModel& m, std::span<const double> window, const double* cov) {
    const int L = m.spec.lookback(), H = m.spec.horizon();
    std::vector<double> out(static_cast<std::size_t>(H));
    switch (m.spec.kind()) {
        case ModelKind::seasonal_naive:
            for (int h = 0; h < H; ++h) out[h] = window[static_cast<std::size_t>(h % L)];
            break;
        case ModelKind::linear_ar: {
            const int D = m.input_size();
            for (int h = 0; h < H; ++h) {
                const double* b = m.params.data() + static_cast<std::size_t>(h) * (D + 1);
                double acc = b[0];
                for (int k = 0; k < L; ++k) acc += b[1 + k] * window[k];
                for (int k = L; k < D; ++k) acc += b[1 + k] * cov[k - L];
                out[h] = acc;
            }
            break;
        }
        case ModelKind::mlp: {
            const auto shape = mlp_shape(m);
            Eigen::MatrixXd x(1, shape.input);
            for (int k = 0; k < L; ++k) x(0, k) = window[k];
            for (int k = L; k < shape.input; ++k) x(0, k) = cov[k - L];
            auto y = mlp_forward(shape, m.params, x);
            for (int h = 0; h < H; ++h) out[h] = y(0, h);
            break;
        }
    }
    return out;
}

}  // namespace detail

/// Forecasts `horizon_total` steps after `history` (whose last value sits at
/// `last_time`). Rolls of `roll_size` steps are produced by chained model
/// calls of output_chunk_length steps, each fed with the previous outputs.
inline Forecast predict(const TrainedModel& m, std::span<const Value> history, TimePoint last_time,
                        std::chrono::minutes step, const std::string& component_id,
                        std::span<const SeriesComponent* const> covs, int horizon_total, int roll_size = 0) {
    const int L = m.spec.lookback(), H = m.spec.horizon();
    if (horizon_total < 1) throw Error("forecast horizon must be >= 1");
    if (roll_size <= 0) roll_size = H;
    if (static_cast<int>(history.size()) < L)
        throw Error("lookback underflow: history has " + std::to_string(history.size()) + " points, model needs " +
                    std::to_string(L));
    if (static_cast<int>(covs.size()) != m.n_covariates)
        throw Error("covariate coverage error: model expects " + std::to_string(m.n_covariates) + " covariates, got " +
                    std::to_string(covs.size()));

    const auto& sc = m.scaler_for(component_id);
    std::vector<double> buf;
    buf.reserve(static_cast<std::size_t>(L + horizon_total + H));
    for (std::size_t i = history.size() - L; i < history.size(); ++i) {
        if (!history[i]) throw Error("history has a missing value inside the lookback window");
        buf.push_back(sc.transform(*history[i]));
    }

    Forecast f;
    std::vector<double> cov(static_cast<std::size_t>(m.n_covariates * H));
    int produced = 0;
    while (produced < horizon_total) {
        const int roll = std::min(roll_size, horizon_total - produced);
        int in_roll = 0;
        while (in_roll < roll) {
            const auto first = last_time + (produced + in_roll + 1) * step;
            if (m.n_covariates > 0 && !detail::covariate_features(m, covs, first, step, H, cov.data()))
                throw Error("covariate coverage error: future covariates missing at " + format_datetime(first));
            auto chunk = detail::predict_chunk(m, std::span<const double>(buf).last(static_cast<std::size_t>(L)),
                                               cov.data());
            const int take = std::min(H, roll - in_roll);
            buf.insert(buf.end(), chunk.begin(), chunk.begin() + take);
            in_roll += take;
        }
        produced += roll;
        ++f.n_rolls;
    }
    for (int k = 0; k < horizon_total; ++k) {
        f.timestamps.push_back(last_time + (k + 1) * step);
        f.values.push_back(sc.inverse(buf[static_cast<std::size_t>(L + k)]));
    }
    return f;
}

inline Forecast predict(const TrainedModel& m, const SeriesComponent& history,
                        std::span<const SeriesComponent* const> covs, int horizon_total, int roll_size = 0) {
    if (history.size() == 0) throw Error("lookback underflow: empty history");
    const auto step = history.size() > 1 ? history.timestamps[1] - history.timestamps[0] : std::chrono::minutes{60};
    return predict(m, history.values, history.timestamps.back(), step, history.id, covs, horizon_total, roll_size);
}

// ---------------------------------------------------------------------------
// Artifact: spec.json, params.bin (little-endian float64), scaler.json

inline std::string encode_params(const std::vector<double>& p) {
    std::string out(p.size() * 8, '\0');
    for (std::size_t i = 0; i < p.size(); ++i) {
        auto bits = std::bit_cast<std::uint64_t>(p[i]);
        for (int b = 0; b < 8; ++b) out[i * 8 + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
    }
    return out;
}

inline std::vector<double> decode_params(std::string_view bytes) {
    if (bytes.size() % 8 != 0) throw Error("params.bin size is not a multiple of 8");
    std::vector<double> p(bytes.size() / 8);
    for (std::size_t i = 0; i < p.size(); ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i * 8 + b])) << (8 * b);
        p[i] = std::bit_cast<double>(bits);
    }
    return p;
}

/// File name -> contents of the model directory.
inline std::map<std::string, std::string> model_files(const TrainedModel& m) {
    json spec{{"kind", to_string(m.spec.kind())},
              {"hyperparams", m.spec.hyperparams()},
              {"n_covariates", m.n_covariates},
              {"n_params", m.params.size()},
              {"meta", m.meta}};
    auto scalers = [](const std::map<std::string, MinMaxScaler>& s) {
        json j = json::object();
        for (const auto& [k, v] : s) j[k] = {{"min", v.min}, {"max", v.max}};
        return j;
    };
    json scaler{{"scale", m.scale}, {"scale_covs", m.scale_covs}, {"target", scalers(m.scalers)},
                {"covariates", scalers(m.cov_scalers)}};
    return {{"spec.json", spec.dump(2)}, {"params.bin", encode_params(m.params)}, {"scaler.json", scaler.dump(2)}};
}

inline TrainedModel load_model(const std::map<std::string, std::string>& files) {
    auto get = [&](const char* name) -> const std::string& {
        auto it = files.find(name);
        if (it == files.end()) throw Error(std::string("model artifact is missing ") + name);
        return it->second;
    };
    auto spec = json::parse(get("spec.json"));
    auto sc = json::parse(get("scaler.json"));
    TrainedModel m;
    m.spec = ModelSpec(model_kind_from_string(spec.at("kind")), spec.at("hyperparams"));
    m.n_covariates = spec.at("n_covariates");
    m.meta = spec.value("meta", json::object());
    m.params = decode_params(get("params.bin"));
    if (m.params.size() != spec.at("n_params").get<std::size_t>()) throw Error("params.bin does not match spec.json");
    m.scale = sc.at("scale");
    m.scale_covs = sc.at("scale_covs");
    for (const auto& [k, v] : sc.at("target").items()) m.scalers[k] = {v.at("min"), v.at("max")};
    for (const auto& [k, v] : sc.at("covariates").items()) m.cov_scalers[k] = {v.at("min"), v.at("max")};
    return m;
}

}  // namespace tsfops
