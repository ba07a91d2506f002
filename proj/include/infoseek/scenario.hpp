#pragma once

#include "infoseek/control.hpp"
#include "infoseek/core.hpp"
#include "infoseek/estimation.hpp"
#include "infoseek/models.hpp"
#include "infoseek/netsim.hpp"
#include "infoseek/particles.hpp"
#include "infoseek/rng.hpp"

#include <json.hpp>

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

namespace infoseek {

enum class Mode { CC, NC, CN };

inline const char* mode_name(Mode m) {
    switch (m) {
        case Mode::CC: return "CC";
        case Mode::NC: return "NC";
        case Mode::CN: return "CN";
    }
    return "?";
}

inline Mode parse_mode(const std::string& s) {
    if (s == "CC") return Mode::CC;
    if (s == "NC") return Mode::NC;
    if (s == "CN") return Mode::CN;
    throw ConfigError("unknown mode '" + s + "'; expected one of {CC,NC,CN}");
}

inline Scheme parse_scheme(const std::string& s) {
    if (s == "flooding") return Scheme::Flooding;
    if (s == "consensus") return Scheme::Consensus;
    throw ConfigError("unknown scheme '" + s + "'; expected one of {flooding,consensus}");
}

inline const char* scheme_name(Scheme s) { return s == Scheme::Flooding ? "flooding" : "consensus"; }

struct AgentSpec {
    AgentId id;
    AgentKind kind = AgentKind::MobileCA;
    StateVec start;
    double u_max = 1.0;
    double d0 = 50.0;
    bool controlled = true;
};

struct ScenarioConfig {
    std::string scenario = "noncoop";
    std::vector<AgentSpec> agents;
    Mode mode = Mode::CC;
    Scheme scheme = Scheme::Flooding;

    std::size_t J = 1200;
    std::size_t J_target = 0;  // 0: same as J
    std::size_t J_control = 400;
    std::size_t J_prime = 5;
    std::size_t P = 2;
    std::size_t R = 1;
    std::size_t message_samples = 200;
    std::size_t steps = 300;
    std::size_t runs = 20;
    std::uint64_t seed = 1;
    std::size_t threads = 1;

    double sigma0_2 = 50.0;
    double kappa = 2.0;
    double sigma_q2 = 1e-3;
    double target_sigma_q2 = 1e-5;
    double censor_threshold = 10.0;
    bool kernel_resampling = true;
    double kernel_exponent = -1.0 / 3.0;

    Box prior_box;
    Eigen::Vector2d target_velocity_mean = Eigen::Vector2d::Zero();
    Eigen::Matrix2d target_velocity_cov = Eigen::Vector2d(0.1, 0.1).asDiagonal();

    std::size_t target_samples() const { return J_target == 0 ? J : J_target; }

    const AgentSpec& agent(AgentId id) const {
        for (const auto& a : agents)
            if (a.id == id) return a;
        throw Error("unknown agent " + to_string(id));
    }

    void validate() const {
        auto positive = [](std::size_t v, const char* name) {
            if (v == 0) throw ConfigError(std::string("field '") + name + "' must be positive");
        };
        positive(J, "J");
        positive(J_control, "J_control");
        positive(J_prime, "J_prime");
        positive(P, "P");
        positive(steps, "steps");
        positive(runs, "runs");
        positive(threads, "threads");
        if (!(sigma0_2 > 0.0)) throw ConfigError("field 'sigma0_2' must be positive");
        if (!(kappa >= 0.0)) throw ConfigError("field 'kappa' must be nonnegative");
        if (!(sigma_q2 >= 0.0)) throw ConfigError("field 'sigma_q2' must be nonnegative");
        if (!(target_sigma_q2 >= 0.0)) throw ConfigError("field 'target_sigma_q2' must be nonnegative");
        if (!(prior_box.x_max > prior_box.x_min) || !(prior_box.y_max > prior_box.y_min))
            throw ConfigError("field 'prior_box' must have positive area");
        if (agents.empty()) throw ConfigError("field 'agents' must not be empty");
        std::set<AgentId> seen;
        bool anchor = false, mobile = false;
        for (const auto& a : agents) {
            if (!seen.insert(a.id).second) throw ConfigError("field 'agents': duplicate id " + to_string(a.id));
            const Eigen::Index want = a.kind == AgentKind::Target ? 4 : 2;
            if (a.start.size() != want)
                throw ConfigError("field 'agents': agent " + to_string(a.id) + " needs a start of length " +
                                  std::to_string(want));
            if (a.kind == AgentKind::MobileCA) {
                mobile = true;
                if (!(a.u_max > 0.0)) throw ConfigError("field 'agents': u_max of agent " + to_string(a.id) + " must be positive");
                if (!(a.d0 > 0.0)) throw ConfigError("field 'agents': d0 of agent " + to_string(a.id) + " must be positive");
            }
            if (a.kind == AgentKind::AnchorCA) anchor = true;
        }
        if (!anchor) throw ConfigError("field 'agents': at least one anchor is required");
        if (!mobile) throw ConfigError("field 'agents': at least one mobile CA is required");
    }
};

inline AgentSpec anchor_at(std::size_t id, double x, double y) {
    AgentSpec a;
    a.id = AgentId{id};
    a.kind = AgentKind::AnchorCA;
    a.start = Eigen::Vector2d(x, y);
    return a;
}

inline AgentSpec mobile_at(std::size_t id, double x, double y, double u_max, double d0, bool controlled = true) {
    AgentSpec a;
    a.id = AgentId{id};
    a.kind = AgentKind::MobileCA;
    a.start = Eigen::Vector2d(x, y);
    a.u_max = u_max;
    a.d0 = d0;
    a.controlled = controlled;
    return a;
}

inline ScenarioConfig preset(const std::string& name) {
    ScenarioConfig c;
    c.scenario = name;
    if (name == "noncoop") {
        c.mode = Mode::NC;
        c.agents = {anchor_at(1, 0, 0), mobile_at(2, 100, 0, 1.0, 20), mobile_at(3, 100, 0, 1.0, 50),
                    mobile_at(4, 100, 0, 1.0, 100), mobile_at(5, 100, 0, 1.0, 100, false)};
        c.steps = 300;
        c.runs = 20;
    } else if (name == "coop") {
        c.mode = Mode::CC;
        c.agents = {anchor_at(1, -60, 0), mobile_at(2, -50, 0, 1.0, 50), mobile_at(3, 0, -50, 0.3, 50),
                    mobile_at(4, 0, 70, 0.1, 50)};
        c.steps = 300;
        c.runs = 20;
    } else if (name == "coslat") {
        c.mode = Mode::CC;
        AgentSpec t;
        t.id = AgentId{4};
        t.kind = AgentKind::Target;
        t.start = Eigen::Vector4d(50, 0, 0.05, 0.05);
        c.agents = {anchor_at(1, -50, 0), mobile_at(2, 20, 20, 1.0, 50), mobile_at(3, -10, -10, 1.0, 50), t};
        c.J_target = 4000;
        c.steps = 400;
        c.runs = 10;
    } else {
        throw ConfigError("unknown scenario '" + name + "'; expected one of {noncoop,coop,coslat}");
    }
    return c;
}

inline void apply_paper_scale(ScenarioConfig& c) {
    if (c.scenario == "coslat") {
        c.J = 1200;
        c.J_target = 120000;
        c.J_control = 1200;
        c.J_prime = 5;
        c.runs = 100;
    } else {
        c.J = 3600;
        c.J_target = 0;
        c.J_control = 1200;
        c.J_prime = 50;
        c.runs = 300;
    }
}

namespace detail {

inline std::size_t line_of_offset(const std::string& text, std::size_t offset) {
    offset = std::min(offset, text.size());
    return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
}

template <class T>
T get_field(const nlohmann::json& j, const char* key) {
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("field '") + key + "': " + e.what());
    }
}

inline std::size_t get_count(const nlohmann::json& j, const char* key) {
    const auto& v = j.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0)
        throw ConfigError(std::string("field '") + key + "' must be a nonnegative integer");
    return v.get<std::size_t>();
}

inline std::vector<double> get_numbers(const nlohmann::json& j, const char* key, std::size_t n) {
    auto v = get_field<std::vector<double>>(j, key);
    if (v.size() != n) throw ConfigError(std::string("field '") + key + "' must have " + std::to_string(n) + " numbers");
    return v;
}

inline AgentKind parse_kind(const std::string& s) {
    if (s == "anchor") return AgentKind::AnchorCA;
    if (s == "mobile") return AgentKind::MobileCA;
    if (s == "target") return AgentKind::Target;
    throw ConfigError("unknown agent kind '" + s + "'; expected one of {anchor,mobile,target}");
}

}  // namespace detail

inline ScenarioConfig config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    if (!j.contains("scenario")) throw ConfigError("field 'scenario' is required");
    ScenarioConfig c = preset(detail::get_field<std::string>(j, "scenario"));
    if (j.value("paper_scale", false)) apply_paper_scale(c);

    static const std::set<std::string> known = {
        "scenario", "paper_scale", "mode", "scheme", "J", "J_target", "J_control", "J_prime", "P", "R",
        "message_samples", "steps", "runs", "seed", "threads", "sigma0_2", "kappa", "sigma_q2", "target_sigma_q2",
        "censor_threshold", "kernel_resampling", "kernel_exponent", "prior_box", "target_velocity_mean",
        "target_velocity_cov", "agents"};
    for (const auto& [k, _] : j.items())
        if (!known.count(k)) throw ConfigError("unknown field '" + k + "'");

    if (j.contains("mode")) c.mode = parse_mode(detail::get_field<std::string>(j, "mode"));
    if (j.contains("scheme")) c.scheme = parse_scheme(detail::get_field<std::string>(j, "scheme"));
    for (auto [key, dst] : std::initializer_list<std::pair<const char*, std::size_t*>>{
             {"J", &c.J}, {"J_target", &c.J_target}, {"J_control", &c.J_control}, {"J_prime", &c.J_prime},
             {"P", &c.P}, {"R", &c.R}, {"message_samples", &c.message_samples}, {"steps", &c.steps},
             {"runs", &c.runs}, {"threads", &c.threads}})
        if (j.contains(key)) *dst = detail::get_count(j, key);
    if (j.contains("seed")) c.seed = detail::get_field<std::uint64_t>(j, "seed");
    for (auto [key, dst] : std::initializer_list<std::pair<const char*, double*>>{
             {"sigma0_2", &c.sigma0_2}, {"kappa", &c.kappa}, {"sigma_q2", &c.sigma_q2},
             {"target_sigma_q2", &c.target_sigma_q2}, {"censor_threshold", &c.censor_threshold},
             {"kernel_exponent", &c.kernel_exponent}})
        if (j.contains(key)) *dst = detail::get_field<double>(j, key);
    if (j.contains("kernel_resampling")) c.kernel_resampling = detail::get_field<bool>(j, "kernel_resampling");
    if (j.contains("prior_box")) {
        auto b = detail::get_numbers(j, "prior_box", 4);
        c.prior_box = Box{b[0], b[1], b[2], b[3]};
    }
    if (j.contains("target_velocity_mean")) {
        auto v = detail::get_numbers(j, "target_velocity_mean", 2);
        c.target_velocity_mean = Eigen::Vector2d(v[0], v[1]);
    }
    if (j.contains("target_velocity_cov")) {
        auto v = detail::get_numbers(j, "target_velocity_cov", 2);
        c.target_velocity_cov = Eigen::Vector2d(v[0], v[1]).asDiagonal();
    }
    if (j.contains("agents")) {
        c.agents.clear();
        for (const auto& a : j.at("agents")) {
            AgentSpec s;
            s.id = AgentId{detail::get_count(a, "id")};
            s.kind = detail::parse_kind(detail::get_field<std::string>(a, "kind"));
            auto st = detail::get_field<std::vector<double>>(a, "start");
            s.start = Eigen::Map<Eigen::VectorXd>(st.data(), static_cast<Eigen::Index>(st.size()));
            s.u_max = a.value("u_max", 1.0);
            s.d0 = a.value("d0", 50.0);
            s.controlled = a.value("controlled", true);
            c.agents.push_back(std::move(s));
        }
    }
    c.validate();
    return c;
}

inline ScenarioConfig load_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path.string());
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ":" + std::to_string(detail::line_of_offset(text, e.byte)) + ": " + e.what());
    }
    return config_from_json(j);
}

inline nlohmann::json config_to_json(const ScenarioConfig& c) {
    nlohmann::json j;
    j["scenario"] = c.scenario;
    j["mode"] = mode_name(c.mode);
    j["scheme"] = scheme_name(c.scheme);
    j["J"] = c.J;
    j["J_target"] = c.J_target;
    j["J_control"] = c.J_control;
    j["J_prime"] = c.J_prime;
    j["P"] = c.P;
    j["R"] = c.R;
    j["message_samples"] = c.message_samples;
    j["steps"] = c.steps;
    j["runs"] = c.runs;
    j["seed"] = c.seed;
    j["threads"] = c.threads;
    j["sigma0_2"] = c.sigma0_2;
    j["kappa"] = c.kappa;
    j["sigma_q2"] = c.sigma_q2;
    j["target_sigma_q2"] = c.target_sigma_q2;
    j["censor_threshold"] = c.censor_threshold;
    j["kernel_resampling"] = c.kernel_resampling;
    j["kernel_exponent"] = c.kernel_exponent;
    j["prior_box"] = {c.prior_box.x_min, c.prior_box.x_max, c.prior_box.y_min, c.prior_box.y_max};
    j["target_velocity_mean"] = {c.target_velocity_mean(0), c.target_velocity_mean(1)};
    j["target_velocity_cov"] = {c.target_velocity_cov(0, 0), c.target_velocity_cov(1, 1)};
    j["agents"] = nlohmann::json::array();
    for (const auto& a : c.agents) {
        nlohmann::json e;
        e["id"] = a.id.index;
        e["kind"] = a.kind == AgentKind::AnchorCA ? "anchor" : a.kind == AgentKind::MobileCA ? "mobile" : "target";
        e["start"] = std::vector<double>(a.start.data(), a.start.data() + a.start.size());
        if (a.kind == AgentKind::MobileCA) {
            e["u_max"] = a.u_max;
            e["d0"] = a.d0;
            e["controlled"] = a.controlled;
        }
        j["agents"].push_back(e);
    }
    return j;
}

struct TrajectoryRow {
    std::size_t n;
    AgentId agent;
    std::optional<AgentId> est_by;
    StateVec truth;
    Eigen::Vector2d estimate;
};

struct CostRow {
    std::size_t n;
    AgentId ca;
    Layer layer;
    Primitive primitive;
    std::uint64_t reals;
};

struct RunMetrics {
    std::size_t run = 0;
    std::vector<std::map<AgentId, double>> self_sq;   // per step: mobile CA -> squared position error
    std::vector<std::map<std::pair<AgentId, AgentId>, double>> target_sq;  // (holder, target) -> squared error
    std::vector<TrajectoryRow> trajectories;
    std::vector<CostRow> costs;
    std::vector<std::map<AgentId, ControlVec>> controls;  // control applied at each step
    std::size_t gradient_calls = 0;
    std::size_t divergences = 0;
    std::size_t clamped = 0;
};

// One simulated run: true states, beliefs, controls and counters.
class NetRun {
public:
    NetRun(const ScenarioConfig& cfg, std::size_t run) : cfg_(cfg), run_(run) {
        cfg_.validate();
        metrics_.run = run;
        std::map<AgentId, AgentKind> kinds;
        for (const auto& a : cfg_.agents) kinds[a.id] = a.kind;
        if (cfg_.mode == Mode::NC) {
            for (const auto& [id, k] : kinds) topo_.add_agent(id, k);
            for (auto l : topo_.mobile_cas()) {
                for (auto a : topo_.anchors()) topo_.link(l, a);
                for (auto m : topo_.targets()) topo_.observe(l, m);
            }
        } else {
            topo_ = Topology::fully_connected(kinds);
        }
        graph_ = CommGraph::from_topology(topo_);
        ca_motion_ = random_walk_model(cfg_.sigma_q2);
        target_motion_ = constant_velocity_model(cfg_.target_sigma_q2);
        init();
    }

    const Topology& topology() const { return topo_; }
    const RunMetrics& metrics() const { return metrics_; }
    RunMetrics take_metrics() { return std::move(metrics_); }
    std::size_t time() const { return n_; }
    const std::map<AgentId, StateVec>& truth() const { return truth_; }
    const std::map<AgentId, ParticleSet>& beliefs() const { return own_; }
    const std::map<AgentId, ControlVec>& controls() const { return u_; }
    const CostLedger& ledger() const { return ledger_; }

    void step() {
        ++n_;
        metrics_.controls.push_back(u_);

        // Actuate: true states move with the current controls.
        for (const auto& a : cfg_.agents) {
            if (a.kind == AgentKind::AnchorCA) continue;
            auto rng = stream(a.id, Purpose::TruthProcess, n_);
            if (a.kind == AgentKind::MobileCA)
                truth_[a.id] = evolve(ca_motion_, truth_[a.id], u_.at(a.id), draw_process_noise(ca_motion_, rng));
            else
                truth_[a.id] = evolve(target_motion_, truth_[a.id], ControlVec::Zero(), draw_process_noise(target_motion_, rng));
        }

        // Sense.
        MeasurementBundle y;
        for (const auto& [l, k] : topo_.measurement_pairs()) {
            auto rng = stream(l, Purpose::TruthMeasurement, n_, k.index);
            y.entries[{l, k}] = meas_of(l).measure(truth_.at(l), truth_.at(k), rng);
        }

        // Estimate.
        SpawnInput in;
        in.topology = &topo_;
        in.graph = &graph_;
        for (auto l : topo_.cas()) {
            SpawnCa ca;
            ca.meas = meas_of(l);
            ca.motion = ca_motion_;
            ca.previous = own_.at(l);
            ca.control = u_.count(l) ? u_.at(l) : ControlVec::Zero();
            in.cas.emplace(l, std::move(ca));
        }
        for (auto m : topo_.targets()) in.target_models.emplace(m, target_motion_);
        in.previous_targets = targets_;
        in.measurements = y;
        in.params.iterations = cfg_.P;
        in.params.consensus_iterations = cfg_.R;
        in.params.message_samples = cfg_.message_samples;
        in.params.censor_threshold = cfg_.censor_threshold;
        in.params.cooperative_targets = cfg_.mode != Mode::NC;
        in.seed = cfg_.seed;
        in.run = run_;
        in.time = n_;
        in.ledger = &ledger_;
        auto out = run_spawn(in);
        metrics_.divergences += out.divergences;
        censored_ = out.censored;

        // Record errors from the final (weighted) beliefs.
        std::map<AgentId, double> sq;
        std::map<std::pair<AgentId, AgentId>, double> tsq;
        for (auto l : topo_.mobile_cas()) {
            const Eigen::Vector2d est = mmse_estimate(out.tables.at(l).own).head<2>();
            sq[l] = (est - truth_.at(l).head<2>()).squaredNorm();
            metrics_.trajectories.push_back({n_, l, l, truth_.at(l), est});
            for (const auto& [m, p] : out.tables.at(l).targets) {
                const Eigen::Vector2d te = mmse_estimate(p).head<2>();
                tsq[{l, m}] = (te - truth_.at(m).head<2>()).squaredNorm();
                metrics_.trajectories.push_back({n_, m, l, truth_.at(m), te});
            }
        }
        metrics_.self_sq.push_back(std::move(sq));
        metrics_.target_sq.push_back(std::move(tsq));

        // Resample.
        for (auto l : topo_.mobile_cas()) {
            bool informative = false;
            for (auto k : topo_.ca_neighbors(l))
                if (topo_.kind(k) == AgentKind::AnchorCA || !censored_.count(k)) informative = true;
            own_[l] = resample(out.tables.at(l).own, {l, 0}, l, informative);
        }
        for (auto& [h, sets] : targets_)
            for (auto& [m, p] : sets) {
                bool informative = false;
                for (auto l : topo_.target_observers(m))
                    if (!censored_.count(l) && (cfg_.mode != Mode::NC || l == h)) informative = true;
                const std::uint64_t who = cfg_.mode != Mode::NC ? kShared : h.index;
                p = resample(out.tables.at(h).targets.at(m), {h, m.index + 1}, AgentId{who}, informative);
            }

        // Control for the next step.
        compute_controls();
        snapshot_costs();
    }

    void run_all() {
        while (n_ < cfg_.steps) step();
    }

private:
    RngStream stream(AgentId who, Purpose p, std::uint64_t time, std::uint64_t extra = 0) const {
        return RngStream::make(cfg_.seed, run_, who.index, p, time, extra);
    }

    MeasModel meas_of(AgentId l) const {
        MeasModel m;
        m.sigma0_2 = cfg_.sigma0_2;
        m.kappa = cfg_.kappa;
        m.d0 = cfg_.agent(l).d0;
        return m;
    }

    void init() {
        for (const auto& a : cfg_.agents) truth_[a.id] = a.start;
        for (auto l : topo_.cas()) {
            if (topo_.kind(l) == AgentKind::AnchorCA) {
                own_.emplace(l, ParticleSet::point_mass(truth_.at(l)));
            } else {
                auto rng = stream(l, Purpose::Prior, 0);
                own_.emplace(l, draw_uniform_prior(cfg_.J, cfg_.prior_box, rng));
            }
        }
        const std::size_t Jt = cfg_.target_samples();
        for (auto m : topo_.targets()) {
            auto rng = RngStream::make(cfg_.seed, run_, kShared, Purpose::Prior, 0, m.index);
            ParticleSet pos = draw_uniform_prior(Jt, cfg_.prior_box, rng);
            Eigen::LLT<Eigen::Matrix2d> llt(cfg_.target_velocity_cov);
            const Eigen::Matrix2d L = llt.matrixL();
            Eigen::MatrixXd s(4, static_cast<Eigen::Index>(Jt));
            s.topRows(2) = pos.samples();
            for (Eigen::Index j = 0; j < s.cols(); ++j) {
                Eigen::Vector2d z(rng.normal(), rng.normal());
                s.block<2, 1>(2, j) = cfg_.target_velocity_mean + L * z;
            }
            ParticleSet prior = ParticleSet::uniform(std::move(s));
            for (auto l : topo_.mobile_cas()) targets_[l].emplace(m, prior);
        }
        for (auto l : topo_.mobile_cas()) {
            const auto& a = cfg_.agent(l);
            if (cfg_.mode == Mode::CN || !a.controlled) {
                auto rng = RngStream::make(cfg_.seed, run_, kShared, Purpose::Heading, 0, l.index);
                heading_[l] = rng.uniform(0.0, 2.0 * std::numbers::pi);
            }
        }
        for (auto l : topo_.mobile_cas()) censored_.insert(l);
        for (auto l : topo_.mobile_cas())
            if (!censored(own_.at(l), cfg_.censor_threshold)) censored_.erase(l);
        compute_controls();
        snapshot_costs();
    }

    // `key` identifies the belief for the kernel phase counter; `who` keys the
    // random streams (shared for common target sets).
    ParticleSet resample(const ParticleSet& p, std::pair<AgentId, std::uint64_t> key, AgentId who, bool informative) {
        const std::uint64_t extra = key.second;
        if (informative || phase_.count(key)) ++phase_[key];
        const std::size_t phase = phase_.count(key) ? phase_.at(key) : 0;
        const bool is_target = p.dim() == 4;
        const double T = cov_trace(p, 2);
        auto rng = stream(who, Purpose::Resample, n_, extra);
        if (cfg_.kernel_resampling && resample_schedule(T, phase) == ResampleKind::Kernel) {
            KernelOptions opt;
            opt.jitter_dims = is_target ? 2 : 0;
            opt.bandwidth_exponent = cfg_.kernel_exponent;
            auto krng = stream(who, Purpose::Kernel, n_, extra);
            return kernel_resample(p, cfg_.sigma0_2, krng, opt);
        }
        return systematic_resample(p, rng);
    }

    Eigen::MatrixXd control_samples(AgentId l) const {
        if (topo_.kind(l) == AgentKind::AnchorCA) return truth_.at(l);
        auto rng = stream(l, Purpose::ControlSubset, n_);
        return systematic_resample(own_.at(l), rng, cfg_.J_control).samples();
    }

    Eigen::MatrixXd control_target_samples(AgentId holder, AgentId m) const {
        const bool shared = cfg_.mode != Mode::NC;
        const std::uint64_t who = shared ? kShared : holder.index;
        auto sub = RngStream::make(cfg_.seed, run_, who, Purpose::ControlSubset, n_, m.index);
        ParticleSet p = systematic_resample(targets_.at(holder).at(m), sub, cfg_.J_control);
        auto pr = RngStream::make(cfg_.seed, run_, who, Purpose::ControlTargetPredict, n_, m.index);
        return predict_target(target_motion_, p, pr).samples();
    }

    BankInput bank_input(const Topology& t) const {
        BankInput in;
        in.topology = &t;
        in.J = cfg_.J_control;
        in.Jp = cfg_.J_prime;
        in.seed = cfg_.seed;
        in.run = run_;
        in.time = n_;
        for (auto l : t.cas()) {
            ControlAgent a;
            a.motion = ca_motion_;
            a.meas = meas_of(l);
            a.samples = control_samples(l);
            in.cas.emplace(l, std::move(a));
        }
        return in;
    }

    // Objective with only CA l and its anchors (no communication needed).
    Eigen::Vector2d own_state_gradient(AgentId l) {
        std::set<AgentId> keep{l};
        for (auto k : topo_.ca_neighbors(l))
            if (topo_.kind(k) == AgentKind::AnchorCA) keep.insert(k);
        Topology t = topo_.restricted_to(keep);
        BankInput in = bank_input(t);
        auto bank = sample_future_global(in);
        std::size_t c = 0;
        auto g = grad_DI_flooding(bank, l, &c);
        metrics_.clamped += c;
        ++metrics_.gradient_calls;
        return g;
    }

    void compute_controls() {
        std::set<AgentId> full;  // CAs using the cooperative objective
        std::map<AgentId, ControlVec> next;
        for (auto l : topo_.mobile_cas()) {
            const auto& a = cfg_.agent(l);
            if (heading_.count(l)) {
                next[l] = heading_control(heading_.at(l), a.u_max);
            } else if (censored_.count(l)) {
                next[l] = control_update(own_state_gradient(l), Eigen::Vector2d::Zero(), ControlVec::Zero(), a.u_max);
            } else if (cfg_.mode == Mode::NC) {
                std::set<AgentId> keep{l};
                for (auto k : topo_.ca_neighbors(l)) keep.insert(k);
                for (auto m : topo_.ca_targets(l)) keep.insert(m);
                Topology t = topo_.restricted_to(keep);
                BankInput in = bank_input(t);
                for (auto m : t.targets()) in.targets.emplace(m, control_target_samples(l, m));
                auto bank = sample_future_global(in);
                std::size_t c = 0;
                auto g = grad_DI_flooding(bank, l, &c);
                metrics_.clamped += c;
                ++metrics_.gradient_calls;
                next[l] = control_update(g, grad_G(ca_motion_, in.cas.at(l).samples, ControlVec::Zero()),
                                         ControlVec::Zero(), a.u_max);
            } else {
                full.insert(l);
            }
        }
        if (!full.empty()) {
            BankInput in = bank_input(topo_);
            const AgentId holder = topo_.mobile_cas().front();
            for (auto m : topo_.targets()) in.targets.emplace(m, control_target_samples(holder, m));
            auto res = grad_DI_network(in, graph_, cfg_.scheme, cfg_.R, &ledger_, full);
            metrics_.clamped += res.clamped;
            metrics_.gradient_calls += full.size();
            for (auto l : full)
                next[l] = control_update(res.grad.at(l), grad_G(ca_motion_, in.cas.at(l).samples, ControlVec::Zero()),
                                         ControlVec::Zero(), cfg_.agent(l).u_max);
        }
        u_ = std::move(next);
    }

    void snapshot_costs() {
        for (const auto& [key, v] : ledger_.entries()) {
            const auto prev = last_costs_.count(key) ? last_costs_.at(key) : 0;
            if (v != prev) metrics_.costs.push_back({n_, std::get<0>(key), std::get<1>(key), std::get<2>(key), v - prev});
        }
        last_costs_ = ledger_.entries();
    }

    ScenarioConfig cfg_;
    std::size_t run_;
    std::size_t n_ = 0;
    Topology topo_;
    CommGraph graph_;
    MotionModel ca_motion_ = random_walk_model(0.0);
    MotionModel target_motion_ = constant_velocity_model(0.0);
    std::map<AgentId, StateVec> truth_;
    std::map<AgentId, ParticleSet> own_;
    std::map<AgentId, std::map<AgentId, ParticleSet>> targets_;
    std::map<AgentId, ControlVec> u_;
    std::map<AgentId, double> heading_;
    std::set<AgentId> censored_;
    std::map<std::pair<AgentId, std::uint64_t>, std::size_t> phase_;  // informative updates so far
    CostLedger ledger_;
    std::map<CostLedger::Key, std::uint64_t> last_costs_;
    RunMetrics metrics_;
};

inline RunMetrics simulate_run(const ScenarioConfig& cfg, std::size_t run) {
    NetRun r(cfg, run);
    r.run_all();
    return r.take_metrics();
}

struct ScenarioResult {
    ScenarioConfig config;
    std::vector<RunMetrics> runs;
    std::vector<double> self_rmse;    // per step
    std::vector<double> target_rmse;  // per step; NaN without targets
    std::vector<std::map<AgentId, double>> agent_rmse;
};

inline void aggregate(ScenarioResult& res) {
    const std::size_t steps = res.config.steps;
    res.self_rmse.assign(steps, 0.0);
    res.target_rmse.assign(steps, std::numeric_limits<double>::quiet_NaN());
    res.agent_rmse.assign(steps, {});
    for (std::size_t n = 0; n < steps; ++n) {
        double s = 0.0, t = 0.0;
        std::size_t ns = 0, nt = 0;
        std::map<AgentId, std::pair<double, std::size_t>> per;
        for (const auto& r : res.runs) {
            for (const auto& [l, e] : r.self_sq.at(n)) {
                s += e;
                ++ns;
                per[l].first += e;
                ++per[l].second;
            }
            for (const auto& [k, e] : r.target_sq.at(n)) {
                t += e;
                ++nt;
            }
        }
        res.self_rmse[n] = ns ? std::sqrt(s / static_cast<double>(ns)) : 0.0;
        if (nt) res.target_rmse[n] = std::sqrt(t / static_cast<double>(nt));
        for (const auto& [l, acc] : per) res.agent_rmse[n][l] = std::sqrt(acc.first / static_cast<double>(acc.second));
    }
}

inline ScenarioResult run_scenario(const ScenarioConfig& cfg) {
    cfg.validate();
    ScenarioResult res;
    res.config = cfg;
    res.runs.resize(cfg.runs);
    const std::size_t workers = std::min(cfg.threads, cfg.runs);
    if (workers <= 1) {
        for (std::size_t r = 0; r < cfg.runs; ++r) res.runs[r] = simulate_run(cfg, r);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::exception_ptr> errors(workers);
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t r = next++; r < cfg.runs; r = next++) res.runs[r] = simulate_run(cfg, r);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        for (auto& t : pool) t.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    aggregate(res);
    return res;
}

namespace detail {

inline std::string num(double v) {
    if (std::isnan(v)) return "";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + p.string());
    f << text;
    if (!f) throw Error("write failed for " + p.string());
}

}  // namespace detail

inline void emit_csv(const ScenarioResult& res, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error("cannot create output directory " + dir.string() + ": " + ec.message());

    std::string rm = "n,self_rmse,target_rmse\n";
    for (std::size_t n = 0; n < res.self_rmse.size(); ++n)
        rm += std::to_string(n + 1) + "," + detail::num(res.self_rmse[n]) + "," + detail::num(res.target_rmse[n]) + "\n";
    detail::write_file(dir / "rmse.csv", rm);

    std::string ag = "n,agent,rmse\n";
    for (std::size_t n = 0; n < res.agent_rmse.size(); ++n)
        for (const auto& [l, v] : res.agent_rmse[n])
            ag += std::to_string(n + 1) + "," + to_string(l) + "," + detail::num(v) + "\n";
    detail::write_file(dir / "agent_rmse.csv", ag);

    std::string tr = "run,n,agent,est_by,x1,x2,vel1,vel2,est1,est2\n";
    for (const auto& r : res.runs)
        for (const auto& row : r.trajectories) {
            tr += std::to_string(r.run) + "," + std::to_string(row.n) + "," + to_string(row.agent) + "," +
                  (row.est_by ? to_string(*row.est_by) : "") + "," + detail::num(row.truth(0)) + "," +
                  detail::num(row.truth(1)) + ",";
            if (row.truth.size() >= 4) tr += detail::num(row.truth(2)) + "," + detail::num(row.truth(3));
            else tr += ",";
            tr += "," + detail::num(row.estimate(0)) + "," + detail::num(row.estimate(1)) + "\n";
        }
    detail::write_file(dir / "trajectories.csv", tr);

    std::string co = "run,n,ca,primitive,reals\n";
    for (const auto& r : res.runs)
        for (const auto& c : r.costs)
            co += std::to_string(r.run) + "," + std::to_string(c.n) + "," + to_string(c.ca) + "," +
                  layer_name(c.layer) + "/" + primitive_name(c.primitive) + "," + std::to_string(c.reals) + "\n";
    detail::write_file(dir / "cost.csv", co);
}

}  // namespace infoseek
