#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

// Eigen must precede httplib: the resolver header it pulls in defines `_res`.
#include "tsfops/error.hpp"
#include "tsfops/hash.hpp"
#include "tsfops/pipeline.hpp"
#include "tsfops/tracking.hpp"

#include <openssl/crypto.h>
#include <openssl/evp.h>
#include <openssl/rand.h>

#include <httplib.h>
#include <nlohmann/json.hpp>

namespace tsfops {

// ---------------------------------------------------------------------------
// Users and tokens

enum class Role { domain_expert, data_scientist, admin };

inline const char* to_string(Role r) {
    switch (r) {
        case Role::domain_expert: return "domain_expert";
        case Role::data_scientist: return "data_scientist";
        case Role::admin: return "admin";
    }
    return "unknown";
}

inline Role role_from_string(std::string_view s) {
    if (s == "domain_expert") return Role::domain_expert;
    if (s == "data_scientist") return Role::data_scientist;
    if (s == "admin") return Role::admin;
    throw ConfigError("unknown role '" + std::string(s) + "': expected admin, data_scientist or domain_expert");
}

struct User {
    std::string username;
    Role role = Role::domain_expert;
    std::string salt_hex;
    std::string hash_hex;
};

namespace detail {

inline constexpr int pbkdf2_iterations = 100'000;

inline std::string random_bytes_hex(std::size_t n) {
    std::vector<unsigned char> buf(n);
    if (RAND_bytes(buf.data(), static_cast<int>(n)) != 1) throw Error("random source unavailable");
    return to_hex(buf.data(), n);
}

inline std::string from_hex(std::string_view hex) {
    if (hex.size() % 2) throw ConfigError("odd-length hex string");
    std::string out(hex.size() / 2, '\0');
    for (std::size_t i = 0; i < out.size(); ++i) {
        unsigned v = 0;
        auto [p, ec] = std::from_chars(hex.data() + 2 * i, hex.data() + 2 * i + 2, v, 16);
        if (ec != std::errc{} || p != hex.data() + 2 * i + 2) throw ConfigError("invalid hex string");
        out[i] = static_cast<char>(v);
    }
    return out;
}

}  // namespace detail

/// PBKDF2-HMAC-SHA256 of the password, hex encoded.
inline std::string hash_password(std::string_view password, std::string_view salt_hex) {
    const auto salt = detail::from_hex(salt_hex);
    unsigned char out[32];
    if (PKCS5_PBKDF2_HMAC(password.data(), static_cast<int>(password.size()),
                          reinterpret_cast<const unsigned char*>(salt.data()), static_cast<int>(salt.size()),
                          detail::pbkdf2_iterations, EVP_sha256(), sizeof out, out) != 1)
        throw Error("password hashing failed");
    return to_hex(out, sizeof out);
}

inline User make_user(const std::string& username, Role role, std::string_view password) {
    if (username.empty() || username.find(':') != std::string::npos || username.find('\n') != std::string::npos)
        throw ConfigError("invalid username '" + username + "'");
    if (password.empty()) throw ConfigError("password must not be empty");
    User u{username, role, detail::random_bytes_hex(16), {}};
    u.hash_hex = hash_password(password, u.salt_hex);
    return u;
}

/// Users file: one `username:role:salt_hex:hash_hex` line per user; blank
/// lines and `#` comments are skipped.
inline std::vector<User> parse_users(std::string_view text) {
    std::vector<User> users;
    std::size_t line_no = 0;
    for (const auto& line : csv::lines(text)) {
        line_no = line.number;
        const auto t = detail::trim(line.text);
        if (t.empty() || t.front() == '#') continue;
        std::vector<std::string> f;
        std::size_t start = 0;
        for (std::size_t i = 0; i <= t.size(); ++i)
            if (i == t.size() || t[i] == ':') {
                f.emplace_back(t.substr(start, i - start));
                start = i + 1;
            }
        if (f.size() != 4 || f[0].empty())
            throw ConfigError("users file line " + std::to_string(line_no) + ": expected username:role:salt:hash");
        users.push_back({f[0], role_from_string(f[1]), f[2], f[3]});
    }
    return users;
}

inline std::string format_user(const User& u) {
    return u.username + ":" + to_string(u.role) + ":" + u.salt_hex + ":" + u.hash_hex + "\n";
}

/// Adds or replaces a user in the file.
inline void upsert_user(const fs::path& file, const User& u) {
    std::vector<User> users;
    if (fs::exists(file)) users = parse_users(detail::slurp(file));
    std::erase_if(users, [&](const User& x) { return x.username == u.username; });
    users.push_back(u);
    std::string text;
    for (const auto& x : users) text += format_user(x);
    detail::atomic_write(file, text);
}

inline std::optional<User> verify_password(const std::vector<User>& users, const std::string& username,
                                           std::string_view password) {
    for (const auto& u : users) {
        if (u.username != username) continue;
        const auto h = hash_password(password, u.salt_hex);
        if (h.size() == u.hash_hex.size() && CRYPTO_memcmp(h.data(), u.hash_hex.data(), h.size()) == 0) return u;
        return std::nullopt;
    }
    return std::nullopt;
}

using Clock = std::function<std::chrono::system_clock::time_point()>;

struct Principal {
    std::string subject;
    Role role = Role::domain_expert;
    std::chrono::system_clock::time_point expiry;
};

/// Maps a bearer token to its principal; an OIDC provider can stand in here.
class TokenIntrospector {
public:
    virtual ~TokenIntrospector() = default;
    virtual std::optional<Principal> introspect(const std::string& token) const = 0;
};

/// Opaque random tokens held in memory.
class TokenIssuer : public TokenIntrospector {
public:
    explicit TokenIssuer(Clock clock = [] { return std::chrono::system_clock::now(); },
                         std::chrono::seconds lifetime = std::chrono::hours{8})
        : clock_(std::move(clock)), lifetime_(lifetime) {}

    std::pair<std::string, Principal> issue(const User& u) {
        Principal p{u.username, u.role, clock_() + lifetime_};
        auto token = detail::random_bytes_hex(32);
        std::lock_guard lock(mu_);
        tokens_[token] = p;
        return {token, p};
    }

    std::optional<Principal> introspect(const std::string& token) const override {
        std::lock_guard lock(mu_);
        auto it = tokens_.find(token);
        if (it == tokens_.end() || clock_() >= it->second.expiry) return std::nullopt;
        return it->second;
    }

private:
    Clock clock_;
    std::chrono::seconds lifetime_;
    mutable std::mutex mu_;
    std::map<std::string, Principal> tokens_;
};

// ---------------------------------------------------------------------------
// Access control

/// Who may call an endpoint: nobody needs a token for login; every other
/// endpoint needs one and the named role or a higher one.
enum class Access { public_, any_role, data_scientist, admin };

struct Endpoint {
    std::string method;
    std::string pattern;  // httplib route pattern
    std::string example;  // concrete path used by tests and docs
    Access access;
};

inline const std::vector<Endpoint>& endpoints() {
    static const std::vector<Endpoint> list{
        {"POST", "/auth/login", "/auth/login", Access::public_},
        {"GET", "/datasets", "/datasets", Access::data_scientist},
        {"POST", "/datasets", "/datasets", Access::data_scientist},
        {"POST", "/experiments/execute", "/experiments/execute", Access::data_scientist},
        {"GET", "/experiments", "/experiments", Access::any_role},
        {"GET", R"(/runs/([^/]+))", "/runs/{id}", Access::any_role},
        {"GET", R"(/runs/([^/]+)/metrics)", "/runs/{id}/metrics", Access::any_role},
        {"GET", R"(/runs/([^/]+)/plot)", "/runs/{id}/plot", Access::any_role},
        {"GET", "/monitor", "/monitor", Access::any_role},
        {"GET", "/admin/users", "/admin/users", Access::admin},
    };
    return list;
}

/// HTTP status of the access decision: 200 allow, 401 no valid token, 403 role denied.
inline int authorize(const std::optional<Principal>& who, Access need) {
    if (need == Access::public_) return 200;
    if (!who) return 401;
    switch (need) {
        case Access::public_:
        case Access::any_role: return 200;
        case Access::data_scientist: return who->role == Role::domain_expert ? 403 : 200;
        case Access::admin: return who->role == Role::admin ? 200 : 403;
    }
    return 403;
}

// ---------------------------------------------------------------------------
// Background jobs

enum class JobState { queued, running, finished, failed, cancelled };

inline const char* to_string(JobState s) {
    switch (s) {
        case JobState::queued: return "queued";
        case JobState::running: return "running";
        case JobState::finished: return "finished";
        case JobState::failed: return "failed";
        case JobState::cancelled: return "cancelled";
    }
    return "unknown";
}

/// Fixed pool of workers taking jobs in submission order.
class JobRegistry {
public:
    explicit JobRegistry(std::size_t capacity = 2) {
        if (capacity < 1) throw ConfigError("job capacity must be >= 1");
        for (std::size_t i = 0; i < capacity; ++i) workers_.emplace_back([this] { work(); });
    }

    /// Queued jobs are cancelled; running ones are waited for.
    ~JobRegistry() {
        std::deque<Job> dropped;
        {
            std::lock_guard lock(mu_);
            stopping_ = true;
            dropped.swap(queue_);
            for (const auto& j : dropped) states_[j.id] = JobState::cancelled;
        }
        cv_.notify_all();
        for (auto& j : dropped)
            if (j.on_cancel) j.on_cancel();
        for (auto& t : workers_) t.join();
    }

    JobRegistry(const JobRegistry&) = delete;
    JobRegistry& operator=(const JobRegistry&) = delete;

    void submit(const std::string& id, std::function<void()> run, std::function<void()> on_cancel = nullptr) {
        {
            std::lock_guard lock(mu_);
            if (stopping_) throw Error("job registry is shutting down");
            states_[id] = JobState::queued;
            queue_.push_back({id, std::move(run), std::move(on_cancel)});
        }
        cv_.notify_one();
    }

    std::optional<JobState> state(const std::string& id) const {
        std::lock_guard lock(mu_);
        auto it = states_.find(id);
        return it == states_.end() ? std::nullopt : std::optional<JobState>(it->second);
    }

    std::size_t count(JobState s) const {
        std::lock_guard lock(mu_);
        return static_cast<std::size_t>(
            std::count_if(states_.begin(), states_.end(), [s](const auto& kv) { return kv.second == s; }));
    }

    /// Blocks until no job is queued or running.
    void wait_idle() const {
        std::unique_lock lock(mu_);
        idle_.wait(lock, [this] { return queue_.empty() && active_ == 0; });
    }

private:
    struct Job {
        std::string id;
        std::function<void()> run;
        std::function<void()> on_cancel;
    };

    void work() {
        for (;;) {
            Job job;
            {
                std::unique_lock lock(mu_);
                cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
                if (queue_.empty()) return;
                job = std::move(queue_.front());
                queue_.pop_front();
                states_[job.id] = JobState::running;
                ++active_;
            }
            JobState end = JobState::finished;
            try {
                job.run();
            } catch (...) {
                end = JobState::failed;
            }
            {
                std::lock_guard lock(mu_);
                states_[job.id] = end;
                --active_;
            }
            idle_.notify_all();
        }
    }

    mutable std::mutex mu_;
    std::condition_variable cv_;
    mutable std::condition_variable idle_;
    std::deque<Job> queue_;
    std::map<std::string, JobState> states_;
    std::size_t active_ = 0;
    bool stopping_ = false;
    std::vector<std::thread> workers_;
};

// ---------------------------------------------------------------------------
// System metrics

struct CpuSample {
    unsigned long long busy = 0, total = 0;
};

inline std::optional<CpuSample> read_cpu_sample() {
    std::ifstream in("/proc/stat");
    std::string label;
    if (!(in >> label) || label != "cpu") return std::nullopt;
    CpuSample s;
    unsigned long long v = 0;
    for (int i = 0; i < 10 && in >> v; ++i) {
        s.total += v;
        if (i != 3 && i != 4) s.busy += v;  // idle and iowait
    }
    return s;
}

/// Memory totals in bytes from /proc/meminfo.
inline std::optional<std::pair<double, double>> read_memory() {
    std::ifstream in("/proc/meminfo");
    std::string key, unit;
    double value = 0, total = -1, available = -1;
    while (in >> key >> value >> unit) {
        if (key == "MemTotal:") total = value * 1024;
        else if (key == "MemAvailable:") available = value * 1024;
    }
    if (total < 0 || available < 0) return std::nullopt;
    return std::make_pair(total - available, total);
}

/// CPU utilisation between consecutive calls (the first call samples 100 ms).
class SystemMonitor {
public:
    json snapshot() {
        auto now = read_cpu_sample();
        double cpu = 0;
        {
            std::lock_guard lock(mu_);
            if (now && !last_) {
                last_ = now;
                std::this_thread::sleep_for(std::chrono::milliseconds{100});
                now = read_cpu_sample();
            }
            if (now && last_ && now->total > last_->total)
                cpu = 100.0 * static_cast<double>(now->busy - last_->busy) / static_cast<double>(now->total - last_->total);
            if (now) last_ = now;
        }
        cpu = std::clamp(cpu, 0.0, 100.0);
        const auto mem = read_memory();
        const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                            std::chrono::system_clock::now().time_since_epoch())
                            .count();
        return {{"timestamp", now_string()},
                {"timestamp_ms", ms},
                {"cpu_percent", cpu},
                {"memory_used", mem ? json(mem->first) : json(nullptr)},
                {"memory_total", mem ? json(mem->second) : json(nullptr)},
                {"gpu", nullptr}};
    }

private:
    std::mutex mu_;
    std::optional<CpuSample> last_;
};

// ---------------------------------------------------------------------------
// HTTP service

inline json run_summary(const RunRecord& r) {
    json metrics = json::object();
    for (const auto& [k, pts] : r.metrics)
        if (!pts.empty()) metrics[k] = pts.back().value;
    return {{"run_id", r.run_id},
            {"experiment", r.experiment},
            {"parent_run_id", r.parent_run_id ? json(*r.parent_run_id) : json(nullptr)},
            {"stage", to_string(r.stage)},
            {"status", to_string(r.status)},
            {"start_time", r.start_time},
            {"end_time", r.end_time},
            {"error", r.error},
            {"params", r.params},
            {"metrics", metrics},
            {"artifacts", r.artifacts}};
}

struct ServiceOptions {
    fs::path store_root = "tsfops_store";
    fs::path users_file = "users.txt";
    std::size_t job_capacity = 2;
    Clock clock = [] { return std::chrono::system_clock::now(); };

    /// TSFOPS_STORE and TSFOPS_USERS_FILE, when set.
    static ServiceOptions from_env() {
        ServiceOptions o;
        if (const char* s = std::getenv("TSFOPS_STORE")) o.store_root = s;
        if (const char* u = std::getenv("TSFOPS_USERS_FILE")) o.users_file = u;
        return o;
    }
};

class Service {
public:
    explicit Service(ServiceOptions opt)
        : opt_(std::move(opt)), store_(opt_.store_root), tokens_(opt_.clock), jobs_(opt_.job_capacity) {}

    TrackingStore& store() { return store_; }
    TokenIssuer& tokens() { return tokens_; }
    JobRegistry& jobs() { return jobs_; }

    /// Registers every endpoint on `server`.
    void mount(httplib::Server& server) {
        for (const auto& e : endpoints()) {
            auto handler = [this, e](const httplib::Request& req, httplib::Response& res) { dispatch(e, req, res); };
            if (e.method == "GET") server.Get(e.pattern, handler);
            else server.Post(e.pattern, handler);
        }
        server.set_payload_max_length(256u << 20);
    }

private:
    static void reply(httplib::Response& res, int status, const json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }

    static void fail(httplib::Response& res, int status, const std::string& message) {
        reply(res, status, {{"error", message}});
    }

    std::optional<Principal> principal(const httplib::Request& req) const {
        const auto h = req.get_header_value("Authorization");
        const std::string prefix = "Bearer ";
        if (h.size() <= prefix.size() || h.compare(0, prefix.size(), prefix) != 0) return std::nullopt;
        return tokens_.introspect(h.substr(prefix.size()));
    }

    void dispatch(const Endpoint& e, const httplib::Request& req, httplib::Response& res) {
        const auto who = principal(req);
        const int decision = authorize(who, e.access);
        if (decision == 401) return fail(res, 401, "missing, invalid or expired token");
        if (decision == 403) return fail(res, 403, "role " + std::string(to_string(who->role)) + " may not call " +
                                                       e.method + " " + e.example);
        try {
            route(e, req, res, who);
        } catch (const json::exception& ex) {
            fail(res, 400, std::string("bad request: ") + ex.what());
        } catch (const ValidationError& ex) {
            json v = json::array();
            for (const auto& x : ex.violations()) v.push_back({{"check", check_name(x.check)}, {"message", x.message}});
            reply(res, 422, {{"error", "validation failed"}, {"violations", v}});
        } catch (const NotFoundError& ex) {
            fail(res, e.pattern == "/experiments/execute" ? 400 : 404, ex.what());
        } catch (const ConfigError& ex) {
            fail(res, 400, ex.what());
        } catch (const std::exception& ex) {
            fail(res, 500, ex.what());
        }
    }

    void route(const Endpoint& e, const httplib::Request& req, httplib::Response& res,
               const std::optional<Principal>& who) {
        const auto& p = e.pattern;
        if (p == "/auth/login") return login(req, res);
        if (p == "/datasets" && e.method == "GET") {
            json list = json::array();
            for (const auto& d : list_datasets(store_)) list.push_back(d.to_json());
            return reply(res, 200, {{"datasets", list}});
        }
        if (p == "/datasets") return upload(req, res);
        if (p == "/experiments/execute") return execute(req, res, *who);
        if (p == "/experiments") return experiments(req, res);
        if (p == "/monitor") return reply(res, 200, monitor_.snapshot());
        if (p == "/admin/users") {
            json list = json::array();
            if (fs::exists(opt_.users_file))
                for (const auto& u : parse_users(detail::slurp(opt_.users_file)))
                    list.push_back({{"username", u.username}, {"role", to_string(u.role)}});
            return reply(res, 200, {{"users", list}});
        }
        const auto run = store_.get_run(req.matches[1].str());
        if (p == R"(/runs/([^/]+))") {
            json body = run_summary(run);
            json children = json::array();
            RunFilter f;
            f.experiment = run.experiment;
            f.parent_run_id = run.run_id;
            for (const auto& c : store_.query_runs(f)) children.push_back(run_summary(c));
            body["children"] = children;
            if (auto js = jobs_.state(run.run_id)) body["job"] = to_string(*js);
            return reply(res, 200, body);
        }
        if (p == R"(/runs/([^/]+)/metrics)") {
            json latest = json::object(), history = json::object();
            for (const auto& [k, pts] : run.metrics) {
                if (pts.empty()) continue;
                latest[k] = pts.back().value;
                json h = json::array();
                for (const auto& pt : pts) h.push_back({pt.step, pt.value});
                history[k] = h;
            }
            return reply(res, 200, {{"run_id", run.run_id}, {"metrics", latest}, {"history", history}});
        }
        return plot(run, req, res);
    }

    void login(const httplib::Request& req, httplib::Response& res) {
        const auto body = json::parse(req.body);
        const std::string user = body.at("username"), password = body.at("password");
        std::vector<User> users;
        if (fs::exists(opt_.users_file)) users = parse_users(detail::slurp(opt_.users_file));
        const auto u = verify_password(users, user, password);
        if (!u) return fail(res, 401, "invalid credentials");
        const auto [token, p] = tokens_.issue(*u);
        const auto expires = std::chrono::duration_cast<std::chrono::seconds>(p.expiry.time_since_epoch()).count();
        reply(res, 200, {{"access_token", token}, {"token_type", "bearer"}, {"role", to_string(p.role)},
                         {"username", p.subject}, {"expires_at", expires}});
    }

    void upload(const httplib::Request& req, httplib::Response& res) {
        const auto param = [&](const char* k, const char* fallback) {
            return req.has_param(k) ? req.get_param_value(k) : std::string(fallback);
        };
        const auto day_first = detail::parse_bool(param("day_first", "true"));
        const auto multiple = detail::parse_bool(param("multiple", "false"));
        if (!day_first || !multiple) throw ConfigError("day_first and multiple must be true or false");
        const auto resolution = detail::canonical_value(*find_option("resolution"), param("resolution", "60"));
        const auto info = save_dataset(store_, param("name", "dataset"), req.body, *day_first,
                                       Resolution{std::stoi(resolution)}, *multiple);
        reply(res, 201, info.to_json());
    }

    void execute(const httplib::Request& req, httplib::Response& res, const Principal& who) {
        const auto cfg = PipelineConfig::from_json(json::parse(req.body));
        auto inputs = std::make_shared<PipelineInputs>(prepare_inputs(store_, cfg, Stage::pipeline));
        const auto parent = start_pipeline_run(store_, cfg);
        store_.log_param(parent.run_id, "submitted_by", who.subject);
        const auto id = parent.run_id;
        jobs_.submit(
            id,
            [this, inputs, id] {
                try {
                    execute_pipeline(store_, *inputs, id);
                } catch (const StageError&) {
                    throw;  // parent already marked FAILED
                } catch (const std::exception& e) {
                    if (store_.get_run(id).status == RunStatus::RUNNING) store_.end_run(id, RunStatus::FAILED, e.what());
                    throw;
                }
            },
            [this, id] { store_.end_run(id, RunStatus::FAILED, "cancelled: service shut down before the job started"); });
        reply(res, 202, {{"run_id", id}, {"experiment", cfg.str("experiment_name")}, {"status", "RUNNING"}});
    }

    void experiments(const httplib::Request& req, httplib::Response& res) {
        if (req.has_param("run_id")) return reply(res, 200, run_summary(store_.get_run(req.get_param_value("run_id"))));
        if (req.has_param("name")) {
            const auto name = req.get_param_value("name");
            if (!store_.experiment_id(name)) throw NotFoundError("unknown experiment '" + name + "'");
            RunFilter f;
            f.experiment = name;
            json runs = json::array();
            for (const auto& r : store_.query_runs(f)) runs.push_back(run_summary(r));
            return reply(res, 200, {{"experiment", name}, {"runs", runs}});
        }
        reply(res, 200, {{"experiments", store_.experiments()}});
    }

    void plot(const RunRecord& run, const httplib::Request& req, httplib::Response& res) {
        std::optional<std::size_t> limit;
        if (req.has_param("n_samples")) {
            const auto raw = req.get_param_value("n_samples");
            long n = 0;
            auto [ptr, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), n);
            if (ec != std::errc{} || ptr != raw.data() + raw.size() || n < 1)
                throw ConfigError("n_samples must be a positive integer");
            limit = static_cast<std::size_t>(n);
        }
        if (!store_.has_artifact(run.run_id, "forecast_plot.csv")) throw NotFoundError("run has no forecast plot");
        json ts = json::array(), actual = json::array(), forecast = json::array();
        const auto text = store_.read_artifact(run.run_id, "forecast_plot.csv");
        for (const auto& line : csv::lines(text)) {
            if (line.number == 1) continue;
            if (limit && ts.size() >= *limit) break;
            const auto f = csv::split_line(line.text);
            if (f.size() != 3) continue;
            ts.push_back(f[0]);
            const auto a = csv::parse_value(f[1]);
            actual.push_back(a && *a ? json(**a) : json(nullptr));
            const auto v = csv::parse_value(f[2]);
            forecast.push_back(v && *v ? json(**v) : json(nullptr));
        }
        reply(res, 200, {{"run_id", run.run_id}, {"timestamps", ts}, {"actual", actual}, {"forecast", forecast}});
    }

    ServiceOptions opt_;
    TrackingStore store_;
    TokenIssuer tokens_;
    SystemMonitor monitor_;
    JobRegistry jobs_;  // last: its destructor waits for jobs that use the members above
};

}  // namespace tsfops
