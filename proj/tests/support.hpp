#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include "tsfops/core.hpp"
#include "tsfops/csv.hpp"

namespace testing {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir() {
        std::random_device rd;
        path_ = fs::temp_directory_path() / ("tsfops_test_" + std::to_string(rd()) + std::to_string(rd()));
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    std::string str() const { return path_.string(); }

private:
    fs::path path_;
};

inline tsfops::TimePoint at(int y, int m, int d, int hour = 0, int minute = 0) {
    using namespace std::chrono;
    return time_point_cast<minutes>(sys_days{year{y} / m / d}) + hours{hour} + minutes{minute};
}

/// Hourly component with a daily and weekly cycle plus seeded Gaussian noise.
inline tsfops::SeriesComponent synthetic_hourly(tsfops::TimePoint start, std::size_t n, std::uint64_t seed,
                                                double noise_sd = 20.0, const std::string& id = "series") {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, noise_sd);
    tsfops::SeriesComponent c{id, id, {}, {}};
    const double pi = std::acos(-1.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i);
        c.timestamps.push_back(start + std::chrono::hours{static_cast<long>(i)});
        c.values.emplace_back(1000.0 + 200.0 * std::sin(2 * pi * t / 24.0) + 100.0 * std::sin(2 * pi * t / 168.0) +
                              noise(rng));
    }
    return c;
}

inline tsfops::TimeSeriesDataset single(tsfops::SeriesComponent c, int minutes = 60) {
    tsfops::TimeSeriesDataset ds;
    ds.components.push_back(std::move(c));
    ds.resolution = tsfops::Resolution{minutes};
    return ds;
}

/// `Datetime,Value` text of a component.
inline std::string to_single_csv(const tsfops::SeriesComponent& c) {
    std::string s = "Datetime,Value\n";
    for (std::size_t i = 0; i < c.size(); ++i)
        s += tsfops::format_datetime(c.timestamps[i]) + "," + tsfops::csv::format_value(c.values[i]) + "\n";
    return s;
}

}  // namespace testing
