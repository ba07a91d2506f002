#pragma once

#include "infoseek/core.hpp"
#include "infoseek/models.hpp"
#include "infoseek/netsim.hpp"
#include "infoseek/rng.hpp"

#include <cmath>
#include <limits>

namespace infoseek {

enum class Scheme { Flooding, Consensus };

// Per-CA input to the controller: J samples of the current state (anchors
// may pass a single column, which is tiled), models and reference control.
struct ControlAgent {
    MotionModel motion = random_walk_model(0.0);
    MeasModel meas;
    Eigen::MatrixXd samples;
    ControlVec u_ref = ControlVec::Zero();
};

struct BankInput {
    const Topology* topology = nullptr;  // the objective's agents and measurement pairs
    std::map<AgentId, ControlAgent> cas;
    std::map<AgentId, Eigen::MatrixXd> targets;  // next-state samples, J columns each
    std::size_t J = 1, Jp = 1;
    std::uint64_t seed = 0, run = 0, time = 0;
};

using PairKey = std::pair<AgentId, AgentId>;

struct FutureSampleBank {
    std::size_t J = 0, Jp = 0;
    std::map<AgentId, Eigen::MatrixXd> current;     // CA samples x^(j)
    std::map<AgentId, Eigen::MatrixXd> propagated;  // x+^(j): CAs through the mean model, targets as given
    std::map<AgentId, ControlVec> u_ref;
    std::map<AgentId, MotionModel> motion;
    std::map<AgentId, MeasModel> meas;  // by measuring CA
    std::vector<PairKey> pairs;
    Eigen::MatrixXd y;  // pairs x (J * Jp); column j * Jp + j'

    std::size_t row_of(const PairKey& k) const {
        for (std::size_t i = 0; i < pairs.size(); ++i)
            if (pairs[i] == k) return i;
        throw Error("pair (" + to_string(k.first) + "," + to_string(k.second) + ") is not in the bank");
    }
};

namespace detail {

inline Eigen::MatrixXd tile_samples(const Eigen::MatrixXd& s, std::size_t J, AgentId who) {
    if (static_cast<std::size_t>(s.cols()) == J) return s;
    if (s.cols() == 1) return s.replicate(1, static_cast<Eigen::Index>(J));
    throw Error("agent " + to_string(who) + " supplied " + std::to_string(s.cols()) + " samples, expected " +
                std::to_string(J));
}

inline void fill_states(const BankInput& in, FutureSampleBank& bank) {
    bank.J = in.J;
    bank.Jp = in.Jp;
    for (const auto& [l, a] : in.cas) {
        if (!in.topology->contains(l)) continue;
        Eigen::MatrixXd cur = tile_samples(a.samples, in.J, l);
        Eigen::MatrixXd prop(cur.rows(), cur.cols());
        for (Eigen::Index j = 0; j < cur.cols(); ++j) prop.col(j) = mean_evolve(a.motion, cur.col(j), a.u_ref);
        bank.current[l] = std::move(cur);
        bank.propagated[l] = std::move(prop);
        bank.u_ref[l] = a.u_ref;
        bank.motion[l] = a.motion;
        bank.meas[l] = a.meas;
    }
    for (const auto& [m, s] : in.targets)
        if (in.topology->contains(m)) bank.propagated[m] = tile_samples(s, in.J, m);
}

// Measurement samples of one pair; the noise stream is keyed by the pair so
// every CA that draws this pair obtains the same values.
inline Eigen::RowVectorXd draw_pair(const BankInput& in, const FutureSampleBank& bank, const PairKey& k) {
    const auto& a = bank.propagated.at(k.first);
    const auto& b = bank.propagated.at(k.second);
    const MeasModel& meas = bank.meas.at(k.first);
    auto rng = RngStream::make(in.seed, in.run, k.first.index, Purpose::ControlNoise, in.time, k.second.index);
    Eigen::RowVectorXd row(static_cast<Eigen::Index>(in.J * in.Jp));
    for (std::size_t j = 0; j < in.J; ++j) {
        const auto jj = static_cast<Eigen::Index>(j);
        const double d = (a.col(jj).head<2>() - b.col(jj).head<2>()).norm();
        const double sd = meas.noise_stddev(d);
        for (std::size_t jp = 0; jp < in.Jp; ++jp) row(static_cast<Eigen::Index>(j * in.Jp + jp)) = d + sd * rng.normal();
    }
    return row;
}

}  // namespace detail

inline FutureSampleBank sample_future_global(const BankInput& in) {
    if (in.topology == nullptr) throw Error("bank needs a topology");
    if (in.J < 1 || in.Jp < 1) throw Error("bank needs J >= 1 and J' >= 1");
    FutureSampleBank bank;
    detail::fill_states(in, bank);
    for (const auto& k : in.topology->measurement_pairs()) {
        if (!bank.propagated.count(k.first) || !bank.propagated.count(k.second))
            throw Error("missing samples for pair (" + to_string(k.first) + "," + to_string(k.second) + ")");
        bank.pairs.push_back(k);
    }
    bank.y.resize(static_cast<Eigen::Index>(bank.pairs.size()), static_cast<Eigen::Index>(in.J * in.Jp));
    for (std::size_t p = 0; p < bank.pairs.size(); ++p)
        bank.y.row(static_cast<Eigen::Index>(p)) = detail::draw_pair(in, bank, bank.pairs[p]);
    return bank;
}

// What CA l holds after the local exchange: its neighbors' samples and
// reference controls, its own measurement samples and the reverse samples
// y_{l',l} received from neighbors.
struct LocalSlice {
    AgentId owner;
    FutureSampleBank bank;                // states of l, C_l, T_l; pairs of l's own measurements and reverse ones
    std::vector<std::size_t> own_rows;    // rows whose measurer is l
};

inline std::map<AgentId, LocalSlice> sample_future_local(const BankInput& in, const CommGraph& g, CostLedger* ledger) {
    if (in.topology == nullptr) throw Error("bank needs a topology");
    const Topology& topo = *in.topology;
    FutureSampleBank all;
    detail::fill_states(in, all);

    // Broadcast of own samples and reference control: J M + M_u reals.
    std::map<AgentId, Payload> states;
    for (auto l : g.nodes()) {
        if (!all.current.count(l)) throw Error("missing samples for CA " + to_string(l));
        const auto& s = all.current.at(l);
        Payload pl(s.data(), s.data() + s.size());
        pl.push_back(all.u_ref.at(l)(0));
        pl.push_back(all.u_ref.at(l)(1));
        states[l] = std::move(pl);
    }
    auto delivered = neighbor_exchange(g, states, ledger, Layer::Control);

    // Each CA draws its own measurement rows.
    std::map<PairKey, Eigen::RowVectorXd> drawn;
    for (auto l : g.nodes())
        if (topo.contains(l) && topo.kind(l) == AgentKind::MobileCA) {
            for (auto k : topo.ca_neighbors(l)) drawn[{l, k}] = detail::draw_pair(in, all, {l, k});
            for (auto m : topo.ca_targets(l)) drawn[{l, m}] = detail::draw_pair(in, all, {l, m});
        }
    // Unicast of y_{l,l'} to each neighbor l'.
    for (auto l : g.nodes())
        for (auto k : g.neighbors(l))
            if (drawn.count({l, k}) && ledger)
                ledger->add(l, Layer::Control, Primitive::Neighbor, static_cast<std::uint64_t>(in.J * in.Jp));

    std::map<AgentId, LocalSlice> out;
    for (auto l : g.nodes()) {
        LocalSlice s;
        s.owner = l;
        auto& b = s.bank;
        b.J = in.J;
        b.Jp = in.Jp;
        auto take = [&](AgentId a) {
            if (all.current.count(a)) b.current[a] = all.current.at(a);
            b.propagated[a] = all.propagated.at(a);
            if (all.u_ref.count(a)) b.u_ref[a] = all.u_ref.at(a);
            if (all.motion.count(a)) b.motion[a] = all.motion.at(a);
            if (all.meas.count(a)) b.meas[a] = all.meas.at(a);
        };
        take(l);
        for (const auto& [from, _] : delivered.at(l)) take(from);
        for (auto m : topo.ca_targets(l))
            if (all.propagated.count(m)) take(m);
        std::vector<Eigen::RowVectorXd> rows;
        for (const auto& [k, row] : drawn) {
            if (k.first == l) {
                s.own_rows.push_back(b.pairs.size());
                b.pairs.push_back(k);
                rows.push_back(row);
            } else if (k.second == l && g.neighbors(l).count(k.first)) {
                b.pairs.push_back(k);
                rows.push_back(row);
            }
        }
        b.y.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(in.J * in.Jp));
        for (std::size_t r = 0; r < rows.size(); ++r) b.y.row(static_cast<Eigen::Index>(r)) = rows[r];
        out.emplace(l, std::move(s));
    }
    return out;
}

// One factor of the tilde likelihood: y measured by `measurer` of `measured`.
struct TildeFactor {
    AgentId measurer, measured;
    double y = 0.0;
};

struct TildeContext {
    std::map<AgentId, StateVec> states;  // current CA states
    std::map<AgentId, ControlVec> controls;
    std::map<AgentId, MotionModel> motion;
    std::map<AgentId, MeasModel> meas;  // by measurer
    std::map<AgentId, StateVec> targets_next;

    StateVec next_state(AgentId a) const {
        if (auto it = targets_next.find(a); it != targets_next.end()) return it->second;
        return mean_evolve(motion.at(a), states.at(a), controls.at(a));
    }
};

inline double tilde_log_likelihood(std::span<const TildeFactor> factors, const TildeContext& ctx) {
    double acc = 0.0;
    for (const auto& f : factors)
        acc += ctx.meas.at(f.measurer).log_likelihood(f.y, ctx.next_state(f.measurer), ctx.next_state(f.measured));
    return acc;
}

inline double tilde_likelihood(std::span<const TildeFactor> factors, const TildeContext& ctx) {
    return std::exp(tilde_log_likelihood(factors, ctx));
}

// Gradient of log tilde_likelihood with respect to the control of CA l.
inline Eigen::Vector2d tilde_score_u(AgentId l, std::span<const TildeFactor> factors, const TildeContext& ctx) {
    const StateVec xl = ctx.next_state(l);
    Eigen::VectorXd gx = Eigen::VectorXd::Zero(xl.size());
    for (const auto& f : factors) {
        if (f.measurer == l) gx += ctx.meas.at(f.measurer).log_likelihood_grad_xl(f.y, xl, ctx.next_state(f.measured));
        else if (f.measured == l) gx += ctx.meas.at(f.measurer).log_likelihood_grad_xl(f.y, xl, ctx.next_state(f.measurer));
    }
    if (gx.isZero(0.0)) return Eigen::Vector2d::Zero();
    return mean_evolve_grad_u(ctx.motion.at(l), ctx.states.at(l), ctx.controls.at(l)).transpose() * gx;
}

inline Eigen::Vector2d tilde_likelihood_grad_u(AgentId l, std::span<const TildeFactor> factors, const TildeContext& ctx) {
    return tilde_likelihood(factors, ctx) * tilde_score_u(l, factors, ctx);
}

// Matrix of log f(y^(j,j') | x^(j'')) with one column per (j, j') and one
// row per j'', summed over the selected bank rows.
inline Eigen::MatrixXd log_conditional_table(const FutureSampleBank& bank, const std::vector<std::size_t>& rows) {
    const auto J = static_cast<Eigen::Index>(bank.J);
    const auto cols = static_cast<Eigen::Index>(bank.J * bank.Jp);
    Eigen::MatrixXd table = Eigen::MatrixXd::Zero(J, cols);
    Eigen::ArrayXd dist(J), logc(J), inv2v(J);
    for (auto r : rows) {
        const auto& k = bank.pairs.at(r);
        const auto& a = bank.propagated.at(k.first);
        const auto& b = bank.propagated.at(k.second);
        const MeasModel& meas = bank.meas.at(k.first);
        for (Eigen::Index j = 0; j < J; ++j) {
            const double d = (a.col(j).head<2>() - b.col(j).head<2>()).norm();
            const double v = meas.variance(d);
            dist(j) = d;
            logc(j) = -0.5 * std::log(2.0 * std::numbers::pi * v);
            inv2v(j) = 0.5 / v;
        }
        const auto yrow = bank.y.row(static_cast<Eigen::Index>(r));
        for (Eigen::Index c = 0; c < cols; ++c) {
            const double y = yrow(c);
            table.col(c).array() += logc - inv2v * (y - dist).square();
        }
    }
    return table;
}

inline std::vector<std::size_t> all_rows(const FutureSampleBank& bank) {
    std::vector<std::size_t> r(bank.pairs.size());
    std::iota(r.begin(), r.end(), 0);
    return r;
}

struct LogRatio {
    Eigen::VectorXd log_conditional;  // log f(y^(j,j') | x^(j))
    Eigen::VectorXd log_marginal;     // log (1/J) sum_j'' f(y^(j,j') | x^(j''))
    std::size_t clamped = 0;
};

inline LogRatio log_ratio_from_table(const Eigen::MatrixXd& table, std::size_t Jp) {
    LogRatio r;
    const Eigen::Index cols = table.cols();
    const double logJ = std::log(static_cast<double>(table.rows()));
    r.log_conditional.resize(cols);
    r.log_marginal.resize(cols);
    for (Eigen::Index c = 0; c < cols; ++c) {
        const auto j = static_cast<Eigen::Index>(static_cast<std::size_t>(c) / Jp);
        r.log_conditional(c) = table(j, c);
        r.log_marginal(c) = log_sum_exp(table.col(c)) - logJ;
    }
    return r;
}

// The J * J' marginal estimates f(y^(j,j'); u_r), as logs.
inline LogRatio f_y_marginal(const FutureSampleBank& bank) {
    return log_ratio_from_table(log_conditional_table(bank, all_rows(bank)), bank.Jp);
}

// (1/JJ') sum score_l(j,j') * log ratio(j,j'), with score_l the gradient of
// log tilde likelihood of CA l.
inline Eigen::Vector2d mi_gradient(const FutureSampleBank& bank, const LogRatio& ratio, AgentId l,
                                   std::size_t* clamped = nullptr) {
    if (!bank.current.count(l)) throw Error("CA " + to_string(l) + " is not part of the bank");
    std::vector<std::pair<std::size_t, AgentId>> factors;  // bank row, other agent
    for (std::size_t r = 0; r < bank.pairs.size(); ++r) {
        const auto& k = bank.pairs[r];
        if (k.first == l) factors.emplace_back(r, k.second);
        else if (k.second == l) factors.emplace_back(r, k.first);
    }
    Eigen::Vector2d grad = Eigen::Vector2d::Zero();
    if (factors.empty()) return grad;
    const auto& xl = bank.propagated.at(l);
    const auto& cur = bank.current.at(l);
    const MotionModel& motion = bank.motion.at(l);
    const bool constant_gu = std::holds_alternative<LinearAdditive>(motion);
    Eigen::MatrixXd gu = constant_gu ? mean_evolve_grad_u(motion, cur.col(0), bank.u_ref.at(l)) : Eigen::MatrixXd();
    std::size_t bad = ratio.clamped;
    const auto Jp = static_cast<Eigen::Index>(bank.Jp);
    for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(bank.J); ++j) {
        if (!constant_gu) gu = mean_evolve_grad_u(motion, cur.col(j), bank.u_ref.at(l));
        const Eigen::Vector2d pl = xl.col(j).head<2>();
        for (Eigen::Index jp = 0; jp < Jp; ++jp) {
            const Eigen::Index c = j * Jp + jp;
            const double lr = ratio.log_conditional(c) - ratio.log_marginal(c);
            if (!std::isfinite(lr)) {
                ++bad;
                continue;
            }
            Eigen::Vector2d gpos = Eigen::Vector2d::Zero();
            for (const auto& [r, other] : factors) {
                const Eigen::Vector2d diff = pl - bank.propagated.at(other).col(j).head<2>();
                const double d = diff.norm();
                if (d == 0.0) {
                    ++bad;
                    continue;
                }
                const MeasModel& meas = bank.meas.at(bank.pairs[r].first);
                gpos += meas.dlog_likelihood_ddist(bank.y(static_cast<Eigen::Index>(r), c), d) * diff / d;
            }
            Eigen::VectorXd gx = Eigen::VectorXd::Zero(xl.rows());
            gx.head<2>() = gpos;
            grad += lr * (gu.transpose() * gx);
        }
    }
    if (clamped) *clamped = bad;
    return grad / static_cast<double>(bank.J * bank.Jp);
}

inline Eigen::Vector2d grad_DI_flooding(const FutureSampleBank& bank, AgentId l, std::size_t* clamped = nullptr) {
    return mi_gradient(bank, f_y_marginal(bank), l, clamped);
}

// Gradient of every requested CA under one scheme. Flooding builds the full
// bank once (every CA would build the same bank from the flooded payloads);
// consensus runs the local exchange and R rounds of average consensus on the
// per-CA log-likelihood tables.
struct NetworkGradients {
    std::map<AgentId, Eigen::Vector2d> grad;
    std::size_t clamped = 0;
};

inline NetworkGradients grad_DI_network(const BankInput& in, const CommGraph& g, Scheme scheme, std::size_t R,
                                        CostLedger* ledger, const std::set<AgentId>& wanted) {
    NetworkGradients out;
    if (scheme == Scheme::Flooding) {
        std::map<AgentId, Payload> payloads;
        for (auto l : g.nodes()) {
            const auto& a = in.cas.at(l);
            Eigen::MatrixXd s = detail::tile_samples(a.samples, in.J, l);
            Payload pl(s.data(), s.data() + s.size());
            pl.push_back(a.u_ref(0));
            pl.push_back(a.u_ref(1));
            payloads[l] = std::move(pl);
        }
        flood(g, payloads, ledger, Layer::Control);
        auto bank = sample_future_global(in);
        auto ratio = f_y_marginal(bank);
        for (auto l : wanted) {
            std::size_t c = 0;
            out.grad[l] = mi_gradient(bank, ratio, l, &c);
            out.clamped += c;
        }
        return out;
    }

    auto slices = sample_future_local(in, g, ledger);
    std::map<AgentId, Eigen::VectorXd> F;
    const auto J = static_cast<Eigen::Index>(in.J);
    const auto cols = static_cast<Eigen::Index>(in.J * in.Jp);
    for (auto& [l, s] : slices) {
        Eigen::MatrixXd t = log_conditional_table(s.bank, s.own_rows);
        F[l] = Eigen::Map<Eigen::VectorXd>(t.data(), t.size());
    }
    const double scale = static_cast<double>(g.size());
    auto avg = average_consensus(g, std::move(F), R, ledger, Layer::Control);
    for (auto l : wanted) {
        Eigen::MatrixXd joint = scale * Eigen::Map<const Eigen::MatrixXd>(avg.at(l).data(), J, cols);
        auto ratio = log_ratio_from_table(joint, in.Jp);
        std::size_t c = 0;
        out.grad[l] = mi_gradient(slices.at(l).bank, ratio, l, &c);
        out.clamped += c;
    }
    return out;
}

// Consensus-scheme gradient for one CA given its slice and the consensus
// result F (J x J*J' table of averaged log-likelihoods).
inline Eigen::Vector2d grad_DI_consensus(const LocalSlice& slice, const Eigen::MatrixXd& F, std::size_t group_size,
                                         std::size_t* clamped = nullptr) {
    Eigen::MatrixXd joint = static_cast<double>(group_size) * F;
    return mi_gradient(slice.bank, log_ratio_from_table(joint, slice.bank.Jp), slice.owner, clamped);
}

// Jacobian-determinant term; zero for models whose determinant does not
// depend on the control.
inline Eigen::Vector2d grad_G(const MotionModel& model, const Eigen::MatrixXd& samples, const ControlVec& u_r) {
    if (std::holds_alternative<LinearAdditive>(model) || std::holds_alternative<Odometry>(model))
        return Eigen::Vector2d::Zero();
    if (samples.cols() == 0) throw Error("Jacobian term needs samples");
    Eigen::Vector2d acc = Eigen::Vector2d::Zero();
    for (Eigen::Index j = 0; j < samples.cols(); ++j) {
        const StateVec x = samples.col(j);
        const double det = jacobian_det(model, x, u_r);
        if (det == 0.0) throw Error("Jacobian determinant vanishes at the reference control");
        acc += (det > 0 ? 1.0 : -1.0) * jacobian_det_grad_u(model, x, u_r) / std::abs(det);
    }
    return acc / static_cast<double>(samples.cols());
}

// u = u_r + c d with c > 0 chosen so that |u| = u_max; d = 0 keeps u_r.
inline ControlVec control_update(const Eigen::Vector2d& grad_DI, const Eigen::Vector2d& grad_G_term,
                                 const ControlVec& u_r, double u_max) {
    if (!(u_max > 0.0)) throw Error("u_max must be positive");
    const Eigen::Vector2d d = grad_DI - grad_G_term;
    const double dd = d.squaredNorm();
    if (dd == 0.0 || !std::isfinite(dd)) {
        if (u_r.norm() > u_max) return u_r * (u_max / u_r.norm());
        return u_r;
    }
    const double b = u_r.dot(d);
    const double c0 = u_r.squaredNorm() - u_max * u_max;
    const double disc = b * b - dd * c0;
    if (c0 > 0.0 || disc < 0.0) return u_max * d / std::sqrt(dd);
    const double c = (-b + std::sqrt(disc)) / dd;
    ControlVec u = u_r + c * d;
    const double n = u.norm();
    if (n > u_max) u *= u_max / n;
    return u;
}

inline ControlVec heading_control(double heading, double u_max) {
    return ControlVec(u_max * std::cos(heading), u_max * std::sin(heading));
}

}  // namespace infoseek
