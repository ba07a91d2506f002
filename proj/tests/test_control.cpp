#include "infoseek/control.hpp"

#include <gtest/gtest.h>

using namespace infoseek;

namespace {

Eigen::MatrixXd cloud(std::size_t J, Eigen::Vector2d c, double sd, std::uint64_t seed) {
    RngStream g(seed, {3});
    Eigen::MatrixXd s(2, static_cast<Eigen::Index>(J));
    for (Eigen::Index j = 0; j < s.cols(); ++j) s.col(j) = c + sd * Eigen::Vector2d(g.normal(), g.normal());
    return s;
}

// Anchor 1, mobile CAs 2..(1+n_mobile), fully connected, one target 10 if requested.
struct Net {
    Topology topo;
    BankInput in;
};

Net make_net(std::size_t n_mobile, bool with_target, std::size_t J, std::size_t Jp) {
    Net n;
    std::map<AgentId, AgentKind> kinds{{AgentId{1}, AgentKind::AnchorCA}};
    for (std::size_t i = 0; i < n_mobile; ++i) kinds[AgentId{2 + i}] = AgentKind::MobileCA;
    if (with_target) kinds[AgentId{10}] = AgentKind::Target;
    n.topo = Topology::fully_connected(kinds);
    n.in.topology = &n.topo;
    n.in.J = J;
    n.in.Jp = Jp;
    n.in.seed = 4;
    n.in.time = 7;
    ControlAgent anchor;
    anchor.samples = Eigen::Vector2d(0, 0);
    n.in.cas[AgentId{1}] = anchor;
    for (std::size_t i = 0; i < n_mobile; ++i) {
        ControlAgent a;
        a.motion = random_walk_model(1e-3);
        a.samples = cloud(J, Eigen::Vector2d(60.0 + 30.0 * i, 40.0 - 50.0 * i), 15.0, 100 + i);
        a.u_ref = ControlVec(0.3, 0.1 * i);
        n.in.cas[AgentId{2 + i}] = a;
    }
    if (with_target) {
        Eigen::MatrixXd t = Eigen::MatrixXd::Zero(4, static_cast<Eigen::Index>(J));
        t.topRows(2) = cloud(J, Eigen::Vector2d(-40, 70), 10.0, 200);
        n.in.targets[AgentId{10}] = t;
    }
    return n;
}

}  // namespace

TEST(Bank, Shapes) {
    auto n = make_net(2, true, 30, 4);
    auto bank = sample_future_global(n.in);
    // each mobile CA measures 2 CAs and the target
    EXPECT_EQ(bank.pairs.size(), 6u);
    EXPECT_EQ(bank.y.rows(), 6);
    EXPECT_EQ(bank.y.cols(), 120);
    EXPECT_EQ(bank.propagated.at(AgentId{1}).cols(), 30);
    EXPECT_TRUE(bank.propagated.at(AgentId{2}).isApprox(n.in.cas[AgentId{2}].samples.colwise() + ControlVec(0.3, 0.0)));
}

TEST(Bank, NoiseLawMatchesModel) {
    auto n = make_net(1, false, 1, 40000);
    n.in.cas[AgentId{2}].samples = Eigen::Vector2d(120, 0);
    n.in.cas[AgentId{2}].u_ref = ControlVec::Zero();
    auto bank = sample_future_global(n.in);
    const Eigen::RowVectorXd y = bank.y.row(static_cast<Eigen::Index>(bank.row_of({AgentId{2}, AgentId{1}})));
    const double mean = y.mean();
    const double var = (y.array() - mean).square().sum() / (y.size() - 1);
    const double want_var = 50.0 * (std::pow(120.0 / 50.0 - 1.0, 2) + 1.0);
    EXPECT_NEAR(mean, 120.0, 4 * std::sqrt(want_var / y.size()));
    EXPECT_NEAR(var, want_var, 4 * want_var * std::sqrt(2.0 / y.size()));
}

TEST(Bank, BadSizes) {
    auto n = make_net(1, false, 5, 2);
    n.in.cas[AgentId{2}].samples = Eigen::MatrixXd::Zero(2, 4);
    EXPECT_THROW(sample_future_global(n.in), Error);
    n = make_net(1, false, 5, 2);
    n.in.Jp = 0;
    EXPECT_THROW(sample_future_global(n.in), Error);
}

TEST(LocalSlices, BitExactAgainstGlobalBank) {
    auto n = make_net(3, true, 20, 3);
    auto g = CommGraph::from_topology(n.topo);
    auto global = sample_future_global(n.in);
    auto slices = sample_future_local(n.in, g, nullptr);
    std::map<PairKey, int> seen;
    for (const auto& [l, s] : slices)
        for (std::size_t r = 0; r < s.bank.pairs.size(); ++r) {
            const auto& k = s.bank.pairs[r];
            ++seen[k];
            EXPECT_EQ(s.bank.y.row(static_cast<Eigen::Index>(r)), global.y.row(static_cast<Eigen::Index>(global.row_of(k))));
        }
    for (const auto& k : global.pairs) {
        const bool both_cas = n.topo.kind(k.second) != AgentKind::Target;
        EXPECT_EQ(seen[k], both_cas ? 2 : 1);
    }
    EXPECT_EQ(seen.size(), global.pairs.size());
}

TEST(LocalSlices, OwnRowsAreOwnMeasurements) {
    auto n = make_net(2, true, 10, 2);
    auto g = CommGraph::from_topology(n.topo);
    auto slices = sample_future_local(n.in, g, nullptr);
    for (const auto& [l, s] : slices) {
        for (auto r : s.own_rows) EXPECT_EQ(s.bank.pairs[r].first, l);
        std::size_t expect = n.topo.kind(l) == AgentKind::MobileCA ? n.topo.ca_neighbors(l).size() + n.topo.ca_targets(l).size() : 0;
        EXPECT_EQ(s.own_rows.size(), expect);
    }
}

TEST(Tilde, LikelihoodGradientMatchesFiniteDifference) {
    TildeContext ctx;
    ctx.states[AgentId{2}] = Eigen::Vector2d(30, 40);
    ctx.states[AgentId{1}] = Eigen::Vector2d(0, 0);
    ctx.states[AgentId{3}] = Eigen::Vector2d(90, -10);
    ctx.controls[AgentId{2}] = ControlVec(0.4, -0.3);
    ctx.controls[AgentId{1}] = ControlVec::Zero();
    ctx.controls[AgentId{3}] = ControlVec(1, 0);
    for (auto a : {AgentId{1}, AgentId{2}, AgentId{3}}) ctx.motion[a] = random_walk_model(0.0);
    ctx.meas[AgentId{2}] = MeasModel{};
    ctx.meas[AgentId{3}] = MeasModel{};
    Eigen::VectorXd tgt = Eigen::Vector4d(-20, 80, 1, 1);
    ctx.targets_next[AgentId{10}] = tgt;
    std::vector<TildeFactor> f{{AgentId{2}, AgentId{1}, 52}, {AgentId{2}, AgentId{3}, 74}, {AgentId{3}, AgentId{2}, 70},
                               {AgentId{2}, AgentId{10}, 66}};
    const auto g = tilde_likelihood_grad_u(AgentId{2}, f, ctx);
    const double h = 1e-5;
    for (int i = 0; i < 2; ++i) {
        auto up = ctx, dn = ctx;
        up.controls[AgentId{2}](i) += h;
        dn.controls[AgentId{2}](i) -= h;
        const double fd = (tilde_likelihood(f, up) - tilde_likelihood(f, dn)) / (2 * h);
        EXPECT_NEAR(g(i), fd, 1e-6 * std::abs(fd) + 1e-300);
    }
}

TEST(Tilde, ScoreUnaffectedByUnrelatedFactors) {
    TildeContext ctx;
    ctx.states[AgentId{1}] = Eigen::Vector2d(0, 0);
    ctx.states[AgentId{2}] = Eigen::Vector2d(10, 0);
    ctx.states[AgentId{3}] = Eigen::Vector2d(0, 10);
    for (auto a : {AgentId{1}, AgentId{2}, AgentId{3}}) {
        ctx.controls[a] = ControlVec::Zero();
        ctx.motion[a] = random_walk_model(0.0);
    }
    ctx.meas[AgentId{3}] = MeasModel{};
    std::vector<TildeFactor> f{{AgentId{3}, AgentId{1}, 12}};
    EXPECT_EQ(tilde_score_u(AgentId{2}, f, ctx), Eigen::Vector2d::Zero());
}

TEST(Marginal, SingleSampleEqualsConditional) {
    auto n = make_net(2, false, 1, 7);
    auto bank = sample_future_global(n.in);
    auto r = f_y_marginal(bank);
    EXPECT_LT((r.log_conditional - r.log_marginal).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Marginal, MatchesDirectDoubleSum) {
    auto n = make_net(1, false, 6, 3);
    auto bank = sample_future_global(n.in);
    auto r = f_y_marginal(bank);
    const MeasModel m;
    const auto& x = bank.propagated.at(AgentId{2});
    for (Eigen::Index c = 0; c < 18; ++c) {
        const double y = bank.y(0, c);
        double acc = 0;
        for (Eigen::Index j = 0; j < 6; ++j) acc += m.likelihood(y, x.col(j), Eigen::Vector2d(0, 0));
        EXPECT_NEAR(std::exp(r.log_marginal(c)) / (acc / 6.0), 1.0, 1e-12);
    }
}

TEST(Gradient, ZeroWithOneSample) {
    auto n = make_net(2, true, 1, 1);
    auto bank = sample_future_global(n.in);
    EXPECT_EQ(grad_DI_flooding(bank, AgentId{2}), Eigen::Vector2d::Zero());
}

TEST(Gradient, AnchorHasNoFactorsInNoMeasurementCase) {
    auto n = make_net(0, false, 5, 2);
    auto bank = sample_future_global(n.in);
    EXPECT_EQ(grad_DI_flooding(bank, AgentId{1}), Eigen::Vector2d::Zero());
}

TEST(Gradient, MirrorAntisymmetry) {
    auto a = make_net(1, false, 40, 5);
    a.in.cas[AgentId{2}].samples = cloud(40, Eigen::Vector2d(80, 0), 20.0, 9);
    a.in.cas[AgentId{2}].u_ref = ControlVec(0.5, 0.2);
    auto b = a;
    b.in.topology = &b.topo;
    b.in.cas[AgentId{2}].samples.row(1) *= -1.0;
    b.in.cas[AgentId{2}].u_ref(1) *= -1.0;
    auto ga = grad_DI_flooding(sample_future_global(a.in), AgentId{2});
    auto gb = grad_DI_flooding(sample_future_global(b.in), AgentId{2});
    EXPECT_NEAR(ga(0), gb(0), 1e-12 * ga.norm());
    EXPECT_NEAR(ga(1), -gb(1), 1e-12 * ga.norm());
    EXPECT_GT(ga.norm(), 0.0);
}

TEST(Gradient, EntropyIdentityWithConstantVariance) {
    // With a distance-independent variance the conditional entropy of one
    // range sample is 0.5 log(2 pi e s0); the bank's average -log f(y|x)
    // must estimate it.
    auto n = make_net(1, false, 200, 50);
    for (auto& [l, a] : n.in.cas) a.meas.d0 = 1e6;
    auto bank = sample_future_global(n.in);
    auto r = f_y_marginal(bank);
    const double h = -r.log_conditional.mean();
    const double want = 0.5 * std::log(2 * std::numbers::pi * std::numbers::e * 50.0);
    EXPECT_NEAR(h, want, 0.03);
    // the plug-in mutual information is positive
    EXPECT_GT((r.log_conditional - r.log_marginal).mean(), 0.0);
}

TEST(Gradient, ConsensusWithExactAveragingMatchesFlooding) {
    auto n = make_net(3, true, 25, 4);
    auto g = CommGraph::from_topology(n.topo);
    std::set<AgentId> want{AgentId{2}, AgentId{3}, AgentId{4}};
    auto fl = grad_DI_network(n.in, g, Scheme::Flooding, 0, nullptr, want);
    auto co = grad_DI_network(n.in, g, Scheme::Consensus, 1, nullptr, want);
    for (auto l : want) EXPECT_LT((fl.grad.at(l) - co.grad.at(l)).norm(), 1e-9 * fl.grad.at(l).norm() + 1e-15);
}

TEST(Gradient, ConsensusOnSliceHelperMatchesNetwork) {
    auto n = make_net(2, false, 10, 3);
    auto g = CommGraph::from_topology(n.topo);
    auto slices = sample_future_local(n.in, g, nullptr);
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(10, 30);
    for (auto& [l, s] : slices) sum += log_conditional_table(s.bank, s.own_rows);
    auto net = grad_DI_network(n.in, g, Scheme::Consensus, 1, nullptr, {AgentId{2}});
    auto direct = grad_DI_consensus(slices.at(AgentId{2}), sum / 3.0, 3);
    EXPECT_LT((net.grad.at(AgentId{2}) - direct).norm(), 1e-12 * direct.norm());
}

TEST(Cost, FloodingFormula) {
    const std::size_t J = 12, Jp = 3;
    auto n = make_net(3, false, J, Jp);
    auto g = CommGraph::from_topology(n.topo);
    CostLedger led;
    grad_DI_network(n.in, g, Scheme::Flooding, 0, &led, {AgentId{2}});
    const std::size_t W = g.diameter();
    for (auto l : g.nodes()) EXPECT_EQ(led.total(l, Layer::Control), (J * 2 + 2) * W);
}

TEST(Cost, ConsensusFormula) {
    const std::size_t J = 12, Jp = 3, R = 2;
    auto n = make_net(3, false, J, Jp);
    auto g = CommGraph::from_topology(n.topo);
    CostLedger led;
    grad_DI_network(n.in, g, Scheme::Consensus, R, &led, {AgentId{2}});
    for (auto l : n.topo.mobile_cas()) {
        const std::size_t C = g.degree(l);
        EXPECT_EQ(led.total(l, Layer::Control), J * J * Jp * C * R + J * Jp * C * 1 + J * 2 + 2);
    }
}

TEST(Jacobian, LinearModelsHaveNoTerm) {
    EXPECT_EQ(grad_G(random_walk_model(1e-3), Eigen::MatrixXd::Random(2, 5), ControlVec(1, 1)), Eigen::Vector2d::Zero());
    EXPECT_EQ(grad_G(Odometry{0.1}, Eigen::MatrixXd::Random(3, 5), ControlVec(1, 1)), Eigen::Vector2d::Zero());
}

TEST(Jacobian, ScaledAxisTerm) {
    const auto g = grad_G(ScaledAxis{0.0}, Eigen::MatrixXd::Random(2, 8), ControlVec(0.25, 3));
    EXPECT_NEAR(g(0), 1.0 / 1.25, 1e-15);
    EXPECT_EQ(g(1), 0.0);
    EXPECT_NEAR(grad_G(ScaledAxis{0.0}, Eigen::MatrixXd::Random(2, 3), ControlVec(-3, 0))(0), -0.5, 1e-15);
    EXPECT_THROW(grad_G(ScaledAxis{0.0}, Eigen::MatrixXd::Random(2, 3), ControlVec(-1, 0)), Error);
}

TEST(Update, HitsSpeedLimitAlongGradient) {
    const ControlVec ur(0.3, -0.2);
    const Eigen::Vector2d d(2.0, 5.0);
    auto u = control_update(d, Eigen::Vector2d::Zero(), ur, 1.0);
    EXPECT_NEAR(u.norm(), 1.0, 1e-12);
    const Eigen::Vector2d step = u - ur;
    EXPECT_NEAR(step.x() * d.y() - step.y() * d.x(), 0.0, 1e-12);
    EXPECT_GT(step.dot(d), 0.0);
}

TEST(Update, ZeroDirectionKeepsReference) {
    EXPECT_EQ(control_update(Eigen::Vector2d(1, 1), Eigen::Vector2d(1, 1), ControlVec(0.2, 0.1), 1.0), ControlVec(0.2, 0.1));
    EXPECT_THROW(control_update(Eigen::Vector2d(1, 1), Eigen::Vector2d::Zero(), ControlVec::Zero(), 0.0), Error);
}

TEST(Update, JacobianTermShiftsDirection) {
    auto u = control_update(Eigen::Vector2d(1, 0), Eigen::Vector2d(1, -1), ControlVec::Zero(), 2.0);
    EXPECT_NEAR(u(0), 0.0, 1e-15);
    EXPECT_NEAR(u(1), 2.0, 1e-15);
}

TEST(Heading, FullSpeed) {
    auto u = heading_control(std::numbers::pi / 2, 1.0);
    EXPECT_NEAR(u(0), 0.0, 1e-15);
    EXPECT_NEAR(u(1), 1.0, 1e-15);
}
