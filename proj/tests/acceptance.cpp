// Acceptance gates. Each criterion prints one PASS/FAIL line; the exit code
// is nonzero if any selected criterion fails. Pass criterion numbers as
// arguments to run a subset, and --cli <path> to check the CLI binary for
// byte-identical output across invocations.
#include "infoseek/infoseek.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

using namespace infoseek;

namespace {

// Tolerances and sizes, pinned.
constexpr double kGradCosine = 0.95;
constexpr double kGradRelErr = 0.10;
constexpr std::size_t kGradSeeds = 20;
constexpr std::size_t kGradJ = 200, kGradJp = 20;
constexpr double kSchemeRel = 1e-9;
constexpr std::size_t kSchemeSeeds = 10;
constexpr double kJacobianTol = 1e-9;
constexpr double kEntropyRel = 0.05;
constexpr std::size_t kEntropySamples = 100000;
constexpr double kSumTol = 1e-9;
constexpr double kLineTol = 1e-6;
constexpr std::size_t kLineRounds = 50;
constexpr double kSpawnTol = 1e-12;
constexpr double kFusionTol = 1e-6;
constexpr double kNoncoopFinal = 15.0;
constexpr double kNoncoopRatio = 0.25;
constexpr double kNoncoopUncontrolled = 40.0;
constexpr std::size_t kCoopCheckStep = 250;
constexpr std::size_t kCoslatEarly = 40;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

// Gaussian range log-density written out independently of MeasModel.
double range_var(double d, double s0, double d0) {
    if (d <= d0) return s0;
    const double t = d / d0 - 1.0;
    return s0 * (t * t + 1.0);
}

double log_normal(double y, double mean, double var) {
    return -0.5 * std::log(2.0 * std::numbers::pi * var) - 0.5 * (y - mean) * (y - mean) / var;
}

// Plug-in mutual information between the CA's next position and its range
// to the anchor, with measurement noise reparameterized by fixed normals.
double mi_direct(const Eigen::MatrixXd& x, const Eigen::Vector2d& u, const Eigen::MatrixXd& eps) {
    const Eigen::Index J = x.cols(), Jp = eps.cols();
    Eigen::VectorXd d(J), v(J);
    for (Eigen::Index j = 0; j < J; ++j) {
        d(j) = (x.col(j) + u).norm();
        v(j) = range_var(d(j), 50.0, 50.0);
    }
    double acc = 0.0;
    Eigen::VectorXd terms(J);
    for (Eigen::Index j = 0; j < J; ++j)
        for (Eigen::Index jp = 0; jp < Jp; ++jp) {
            const double y = d(j) + std::sqrt(v(j)) * eps(j, jp);
            for (Eigen::Index k = 0; k < J; ++k) terms(k) = log_normal(y, d(k), v(k));
            const double mx = terms.maxCoeff();
            const double lm = mx + std::log((terms.array() - mx).exp().sum() / static_cast<double>(J));
            acc += log_normal(y, d(j), v(j)) - lm;
        }
    return acc / static_cast<double>(J * Jp);
}

Eigen::MatrixXd ca_cloud(std::size_t J, std::uint64_t seed) {
    RngStream g(seed, {11});
    Eigen::MatrixXd s(2, static_cast<Eigen::Index>(J));
    for (Eigen::Index j = 0; j < s.cols(); ++j) s.col(j) = Eigen::Vector2d(70, 30) + 25.0 * Eigen::Vector2d(g.normal(), g.normal());
    return s;
}

Outcome gradient_correctness() {
    Topology t = Topology::fully_connected({{AgentId{1}, AgentKind::AnchorCA}, {AgentId{2}, AgentKind::MobileCA}});
    double min_cos = 1.0, mean_cos = 0.0;
    Eigen::Vector2d sum_lib = Eigen::Vector2d::Zero(), sum_fd = Eigen::Vector2d::Zero();
    for (std::size_t s = 0; s < kGradSeeds; ++s) {
        const Eigen::MatrixXd x = ca_cloud(kGradJ, 1000 + s);
        BankInput in;
        in.topology = &t;
        in.J = kGradJ;
        in.Jp = kGradJp;
        in.seed = 500 + s;
        ControlAgent anchor;
        anchor.samples = Eigen::Vector2d::Zero();
        ControlAgent ca;
        ca.motion = random_walk_model(1e-3);
        ca.samples = x;
        in.cas[AgentId{1}] = anchor;
        in.cas[AgentId{2}] = ca;
        const Eigen::Vector2d g_lib = grad_DI_flooding(sample_future_global(in), AgentId{2});

        RngStream er(900 + s, {5});
        Eigen::MatrixXd eps(kGradJ, kGradJp);
        for (Eigen::Index i = 0; i < eps.size(); ++i) eps(i) = er.normal();
        const double h = 1e-4;
        Eigen::Vector2d g_fd;
        for (int i = 0; i < 2; ++i) {
            Eigen::Vector2d e = Eigen::Vector2d::Zero();
            e(i) = h;
            g_fd(i) = (mi_direct(x, e, eps) - mi_direct(x, -e, eps)) / (2 * h);
        }
        const double cos = g_lib.dot(g_fd) / (g_lib.norm() * g_fd.norm());
        min_cos = std::min(min_cos, cos);
        mean_cos += cos / static_cast<double>(kGradSeeds);
        sum_lib += g_lib;
        sum_fd += g_fd;
    }
    // the gate is on direction, aggregated over the seed suite
    const double cos = sum_lib.dot(sum_fd) / (sum_lib.norm() * sum_fd.norm());
    const double dir_err = (sum_lib.normalized() - sum_fd.normalized()).norm();
    const double mag = (sum_lib - sum_fd).norm() / sum_fd.norm();
    return {cos > kGradCosine && dir_err < kGradRelErr,
            fmt("%zu-seed direction cosine %.4f (gate %.2f), direction error %.4f (gate %.2f); per seed: mean cosine "
                "%.3f, min %.3f; magnitude relative error %.3f",
                kGradSeeds, cos, kGradCosine, dir_err, kGradRelErr, mean_cos, min_cos, mag)};
}

Outcome scheme_equivalence() {
    double worst = 0.0;
    for (std::size_t s = 0; s < kSchemeSeeds; ++s) {
        Topology t = Topology::fully_connected(
            {{AgentId{1}, AgentKind::AnchorCA}, {AgentId{2}, AgentKind::MobileCA}, {AgentId{3}, AgentKind::MobileCA}});
        auto g = CommGraph::from_topology(t);
        BankInput in;
        in.topology = &t;
        in.J = 60;
        in.Jp = 5;
        in.seed = 70 + s;
        ControlAgent anchor;
        anchor.samples = Eigen::Vector2d::Zero();
        in.cas[AgentId{1}] = anchor;
        for (std::size_t l = 2; l <= 3; ++l) {
            ControlAgent a;
            a.samples = ca_cloud(60, 10 * s + l);
            a.samples.row(1) *= l == 2 ? 1.0 : -1.0;
            in.cas[AgentId{l}] = a;
        }
        std::set<AgentId> all{AgentId{1}, AgentId{2}, AgentId{3}};
        auto fl = grad_DI_network(in, g, Scheme::Flooding, 0, nullptr, all);
        auto co = grad_DI_network(in, g, Scheme::Consensus, 1, nullptr, all);
        for (auto l : all) {
            const double n = fl.grad.at(l).norm();
            const double diff = (fl.grad.at(l) - co.grad.at(l)).norm();
            worst = std::max(worst, n > 0 ? diff / n : diff);
        }
    }
    return {worst <= kSchemeRel, fmt("worst relative difference %.3g over %zu seeds (gate %.0e)", worst, kSchemeSeeds, kSchemeRel)};
}

Outcome jacobian_term() {
    RngStream g(3, {1});
    Eigen::MatrixXd s2 = Eigen::MatrixXd::Random(2, 50), s3 = Eigen::MatrixXd::Random(3, 50);
    bool zero = true;
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
        const ControlVec u(g.uniform(-0.9, 2.0), g.uniform(-2, 2));
        zero = zero && grad_G(random_walk_model(1e-3), s2, u) == Eigen::Vector2d::Zero() &&
               grad_G(Odometry{1e-3}, s3, u) == Eigen::Vector2d::Zero();
        const Eigen::Vector2d want(1.0 / (1.0 + u(0)), 0.0);
        worst = std::max(worst, (grad_G(ScaledAxis{0.0}, s2, u) - want).norm());
    }
    return {zero && worst <= kJacobianTol,
            fmt("linear and odometry terms exactly zero: %s; synthetic model max error %.3g (gate %.0e)", zero ? "yes" : "no",
                worst, kJacobianTol)};
}

// Histogram plug-in entropy with a fixed bin width.
double histogram_entropy(const std::vector<double>& v, double width) {
    std::map<long long, std::size_t> bins;
    for (double x : v) ++bins[static_cast<long long>(std::floor(x / width))];
    double h = 0.0;
    const double n = static_cast<double>(v.size());
    for (const auto& [b, c] : bins) {
        const double p = static_cast<double>(c) / n;
        h -= p * std::log(p / width);
    }
    return h;
}

Outcome entropy_identity() {
    RngStream g(4, {1});
    const MotionModel doubling = ScaledAxis{0.0};
    const ControlVec u(1.0, 0.0);
    std::vector<double> a, b;
    double log_det = 0.0;
    for (std::size_t i = 0; i < kEntropySamples; ++i) {
        const StateVec x = Eigen::Vector2d(g.normal(), g.normal());
        const StateVec y = mean_evolve(doubling, x, u);
        a.push_back(x(0));
        b.push_back(y(0));
        log_det += std::log(std::abs(jacobian_det(doubling, x, u)));
    }
    log_det /= static_cast<double>(kEntropySamples);
    const double diff = histogram_entropy(b, 0.05) - histogram_entropy(a, 0.05);
    const double rel = std::abs(diff - std::log(2.0)) / std::log(2.0);
    return {rel < kEntropyRel && std::abs(log_det - std::log(2.0)) < 1e-9,
            fmt("h(2a) - h(a) = %.4f vs log 2 = %.4f, relative error %.4f (gate %.2f); mean log|det| %.6f", diff,
                std::log(2.0), rel, kEntropyRel, log_det)};
}

Outcome consensus_primitives() {
    // three CAs, the network size of the scenarios
    std::vector<AgentId> ids{AgentId{1}, AgentId{2}, AgentId{3}};
    auto line = CommGraph::line(ids);
    std::map<AgentId, Eigen::VectorXd> x;
    RngStream g(5, {1});
    double mean = 0.0;
    for (auto a : ids) {
        x[a] = Eigen::VectorXd::Constant(1, g.uniform(-10, 10));
        mean += x[a](0);
    }
    const double total = mean;
    mean /= static_cast<double>(ids.size());
    double sum_err = 0.0;
    auto cur = x;
    for (std::size_t r = 0; r < kLineRounds; ++r) {
        cur = average_consensus(line, cur, 1, nullptr, Layer::Estimation, ConsensusWeights::Metropolis);
        double s = 0.0;
        for (auto a : ids) s += cur.at(a)(0);
        sum_err = std::max(sum_err, std::abs(s - total));
    }
    double mean_err = 0.0;
    for (auto a : ids) mean_err = std::max(mean_err, std::abs(cur.at(a)(0) - mean));

    double mx = -1e300;
    for (auto a : ids) mx = std::max(mx, x.at(a)(0));
    auto m = max_consensus(line, x, line.diameter(), nullptr, Layer::Estimation);
    bool max_ok = true;
    for (auto a : ids) max_ok = max_ok && m.at(a)(0) == mx;
    return {sum_err <= kSumTol && mean_err <= kLineTol && max_ok,
            fmt("sum drift %.3g (gate %.0e); line-graph error after %zu rounds %.3g (gate %.0e); max exact after "
                "diameter rounds: %s",
                sum_err, kSumTol, kLineRounds, mean_err, kLineTol, max_ok ? "yes" : "no")};
}

Outcome estimation_oracle() {
    Topology t = Topology::fully_connected({{AgentId{1}, AgentKind::AnchorCA}, {AgentId{2}, AgentKind::MobileCA}});
    SpawnInput in;
    in.topology = &t;
    SpawnCa anchor;
    anchor.previous = ParticleSet::point_mass(Eigen::Vector2d(0, 0));
    SpawnCa ca;
    ca.motion = random_walk_model(1e-3);
    RngStream pr(6, {1});
    ca.previous = draw_uniform_prior(1200, Box{}, pr);
    ca.control = ControlVec(0.2, 0.7);
    in.cas.emplace(AgentId{1}, anchor);
    in.cas.emplace(AgentId{2}, ca);
    in.measurements.entries[{AgentId{2}, AgentId{1}}] = 88.0;
    in.params.iterations = 1;
    in.seed = 6;
    in.time = 1;
    auto out = run_spawn(in);
    auto rng = RngStream::make(6, 0, 2, Purpose::Predict, 1);
    auto pred = predict_ca(ca.motion, ca.previous, ca.control, rng);
    Eigen::VectorXd w(pred.size());
    for (std::size_t j = 0; j < pred.size(); ++j) {
        const double d = pred.sample(j).norm();
        w(static_cast<Eigen::Index>(j)) = std::exp(log_normal(88.0, d, range_var(d, 50, 50)));
    }
    w /= w.sum();
    const auto& got = out.tables.at(AgentId{2}).own;
    const double spawn_err = got.samples() == pred.samples() ? (got.weights() - w).cwiseAbs().maxCoeff() : INFINITY;

    // distributed target update with exact averaging vs the central product
    RngStream g(6, {2});
    auto prior = draw_uniform_prior(500, Box{}, g);
    std::map<AgentId, Eigen::VectorXd> logs;
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(500);
    for (std::size_t l = 1; l <= 3; ++l) {
        Eigen::VectorXd v(500);
        for (Eigen::Index j = 0; j < 500; ++j) v(j) = -g.uniform(0, 30);
        if (l > 1) {
            logs[AgentId{l}] = v;
            sum += v;
        }
    }
    Eigen::VectorXd central = (sum.array() - sum.maxCoeff()).exp() * prior.weights().array();
    central /= central.sum();
    auto graph = CommGraph::complete({AgentId{1}, AgentId{2}, AgentId{3}});
    auto fused = bp_update_target(prior, logs, TargetFusion{&graph, 1, nullptr});
    double fusion_err = 0.0;
    for (const auto& [l, p] : fused) fusion_err = std::max(fusion_err, (p.weights() - central).cwiseAbs().maxCoeff());
    return {spawn_err <= kSpawnTol && fusion_err <= kFusionTol,
            fmt("single-step weight error %.3g (gate %.0e); fused target weight error %.3g (gate %.0e)", spawn_err,
                kSpawnTol, fusion_err, kFusionTol)};
}

ScenarioResult run_preset(const std::string& name, std::optional<Mode> mode = std::nullopt) {
    auto c = preset(name);
    if (mode) c.mode = *mode;
    const auto t0 = std::chrono::steady_clock::now();
    auto res = run_scenario(c);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "  ran " << name << " " << mode_name(c.mode) << " (" << c.runs << " runs, " << c.steps << " steps) in "
              << fmt("%.1f", secs) << " s\n";
    return res;
}

Outcome noncoop_trend() {
    auto res = run_preset("noncoop");
    bool ok = true;
    std::string d;
    for (const auto& a : res.config.agents) {
        if (a.kind != AgentKind::MobileCA) continue;
        const double early = res.agent_rmse.at(9).at(a.id), late = res.agent_rmse.at(299).at(a.id);
        if (a.controlled) {
            ok = ok && late < kNoncoopFinal && late < kNoncoopRatio * early;
            d += fmt("CA %zu: %.2f -> %.2f; ", a.id.index, early, late);
        } else {
            ok = ok && late > kNoncoopUncontrolled;
            d += fmt("uncontrolled CA %zu: %.2f -> %.2f; ", a.id.index, early, late);
        }
    }
    return {ok, d + fmt("gates: controlled < %.0f and < %.0f%% of n=10, uncontrolled > %.0f", kNoncoopFinal,
                        100 * kNoncoopRatio, kNoncoopUncontrolled)};
}

Outcome coop_ordering() {
    const auto k = kCoopCheckStep - 1;
    const double cc = run_preset("coop", Mode::CC).self_rmse.at(k);
    const double nc = run_preset("coop", Mode::NC).self_rmse.at(k);
    const double cn = run_preset("coop", Mode::CN).self_rmse.at(k);
    return {cc < nc && cc < cn, fmt("self RMSE at n=%zu: CC %.2f, NC %.2f, CN %.2f", kCoopCheckStep, cc, nc, cn)};
}

Outcome coslat_trend() {
    auto cc = run_preset("coslat", Mode::CC);
    auto cn = run_preset("coslat", Mode::CN);
    const std::size_t last = cc.config.steps - 1;
    const double early = cc.target_rmse.at(kCoslatEarly - 1), late = cc.target_rmse.at(last), ref = cn.target_rmse.at(last);
    return {late < early && late < ref,
            fmt("target RMSE CC: n=%zu %.2f, n=%zu %.2f; CN n=%zu %.2f", kCoslatEarly, early, last + 1, late, last + 1, ref)};
}

Outcome communication_accounting() {
    struct Setting {
        std::size_t J, Jp, R;
    };
    bool ok = true;
    std::string d;
    for (auto s : {Setting{10, 2, 1}, Setting{25, 5, 3}, Setting{40, 1, 7}}) {
        std::map<AgentId, AgentKind> kinds{{AgentId{1}, AgentKind::AnchorCA}};
        for (std::size_t l = 2; l <= 4; ++l) kinds[AgentId{l}] = AgentKind::MobileCA;
        kinds[AgentId{9}] = AgentKind::Target;
        Topology t = Topology::fully_connected(kinds);
        // drop one CA link so flooding needs more than one round
        Topology sparse;
        for (const auto& [id, k] : kinds) sparse.add_agent(id, k);
        sparse.link(AgentId{1}, AgentId{2});
        sparse.link(AgentId{2}, AgentId{3});
        sparse.link(AgentId{3}, AgentId{4});
        for (std::size_t l = 2; l <= 4; ++l) sparse.observe(AgentId{l}, AgentId{9});
        for (const Topology* topo : {&t, &sparse}) {
            auto g = CommGraph::from_topology(*topo);
            BankInput in;
            in.topology = topo;
            in.J = s.J;
            in.Jp = s.Jp;
            for (const auto& [id, k] : kinds) {
                if (k == AgentKind::Target) continue;
                ControlAgent a;
                a.samples = k == AgentKind::AnchorCA ? Eigen::MatrixXd(Eigen::Vector2d::Zero()) : ca_cloud(s.J, id.index);
                in.cas[id] = a;
            }
            in.targets[AgentId{9}] = Eigen::MatrixXd::Zero(4, static_cast<Eigen::Index>(s.J));
            in.targets[AgentId{9}].topRows(2) = ca_cloud(s.J, 99);
            CostLedger fl, co;
            grad_DI_network(in, g, Scheme::Flooding, 0, &fl, {AgentId{2}});
            grad_DI_network(in, g, Scheme::Consensus, s.R, &co, {AgentId{2}});
            const std::size_t W = g.diameter(), M = 2, Mu = 2, My = 1;
            for (auto l : g.nodes()) {
                const std::size_t C = g.degree(l);
                ok = ok && fl.total(l, Layer::Control) == (s.J * M + Mu) * W;
                // anchors take no measurements, so they unicast nothing
                const std::size_t unicast = topo->kind(l) == AgentKind::MobileCA ? s.J * s.Jp * C * My : 0;
                ok = ok && co.total(l, Layer::Control) == s.J * s.J * s.Jp * C * s.R + unicast + s.J * M + Mu;
            }
        }
        d += fmt("(J=%zu, J'=%zu, R=%zu) ", s.J, s.Jp, s.R);
    }
    return {ok, d + (ok ? "match on complete and line graphs" : "mismatch")};
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

bool same_outputs(const std::filesystem::path& a, const std::filesystem::path& b) {
    for (const char* f : {"rmse.csv", "agent_rmse.csv", "trajectories.csv", "cost.csv"}) {
        const auto x = slurp(a / f);
        if (x.empty() || x != slurp(b / f)) return false;
    }
    return true;
}

Outcome determinism(const std::string& cli) {
    const auto root = std::filesystem::temp_directory_path() / "infoseek_acceptance_det";
    std::filesystem::remove_all(root);
    auto c = preset("coslat");
    c.J = 300;
    c.J_target = 300;
    c.J_control = 60;
    c.J_prime = 3;
    c.steps = 15;
    c.runs = 4;
    c.scheme = Scheme::Consensus;
    emit_csv(run_scenario(c), root / "serial_a");
    emit_csv(run_scenario(c), root / "serial_b");
    c.threads = 3;
    emit_csv(run_scenario(c), root / "parallel");
    bool ok = same_outputs(root / "serial_a", root / "serial_b") && same_outputs(root / "serial_a", root / "parallel");
    std::string d = fmt("in-process serial/serial/parallel identical: %s", ok ? "yes" : "no");
    if (!cli.empty()) {
        auto cmd = [&](const char* out, int threads) {
            return cli + " coop --runs 3 --steps 12 --j 300 --jc 60 --jprime 3 --threads " + std::to_string(threads) +
                   " --out " + (root / out).string() + " > /dev/null";
        };
        const bool ran = std::system(cmd("cli_a", 1).c_str()) == 0 && std::system(cmd("cli_b", 1).c_str()) == 0 &&
                         std::system(cmd("cli_p", 2).c_str()) == 0;
        const bool cli_ok = ran && same_outputs(root / "cli_a", root / "cli_b") && same_outputs(root / "cli_a", root / "cli_p");
        ok = ok && cli_ok;
        d += fmt("; CLI invocations identical: %s", cli_ok ? "yes" : "no");
    }
    return {ok, d};
}

}  // namespace

int main(int argc, char** argv) {
    std::string cli;
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) {
        std::string a = argv[i];
        if (a == "--cli" && i + 1 < argc) cli = argv[++i];
        else selected.insert(std::stoi(a));
    }
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"gradient correctness", gradient_correctness},
        {"scheme equivalence", scheme_equivalence},
        {"jacobian term", jacobian_term},
        {"entropy transformation identity", entropy_identity},
        {"consensus primitives", consensus_primitives},
        {"estimation oracle equivalence", estimation_oracle},
        {"noncooperative scenario trend", noncoop_trend},
        {"cooperative scenario ordering", coop_ordering},
        {"coslat trend", coslat_trend},
        {"communication accounting", communication_accounting},
        {"determinism", [&] { return determinism(cli); }},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!selected.empty() && !selected.count(id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cout << (o.pass ? "PASS" : "FAIL") << " " << id << " " << criteria[i].first << ": " << o.detail
                  << fmt(" [%.1f s]", secs) << std::endl;
        if (!o.pass) ++failed;
    }
    return failed == 0 ? 0 : 1;
}
