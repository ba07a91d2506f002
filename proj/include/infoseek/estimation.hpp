#pragma once

#include "infoseek/core.hpp"
#include "infoseek/models.hpp"
#include "infoseek/netsim.hpp"
#include "infoseek/particles.hpp"
#include "infoseek/rng.hpp"

#include <limits>
#include <optional>

namespace infoseek {

inline ParticleSet predict_ca(const MotionModel& model, const ParticleSet& p, const ControlVec& u, RngStream& rng) {
    Eigen::MatrixXd s(p.samples().rows(), p.samples().cols());
    for (Eigen::Index j = 0; j < s.cols(); ++j)
        s.col(j) = evolve(model, p.samples().col(j), u, draw_process_noise(model, rng));
    return p.with_samples(std::move(s));
}

inline ParticleSet predict_target(const MotionModel& model, const ParticleSet& p, RngStream& rng) {
    return predict_ca(model, p, ControlVec::Zero(), rng);
}

inline double bp_message_from_belief(const MeasModel& meas, double y, const ParticleSet& sender, const StateVec& x_l) {
    double acc = 0.0;
    for (std::size_t j = 0; j < sender.size(); ++j) acc += sender.weight(j) * meas.likelihood(y, x_l, sender.sample(j));
    return acc;
}

// log of bp_message_from_belief evaluated at every receiver sample.
inline Eigen::VectorXd log_messages(const MeasModel& meas, double y, const Eigen::MatrixXd& receiver,
                                    const ParticleSet& sender) {
    const Eigen::Index n = receiver.cols();
    const Eigen::Index k = static_cast<Eigen::Index>(sender.size());
    Eigen::VectorXd out(n);
    Eigen::VectorXd logw = sender.weights().array().log();
    Eigen::VectorXd buf(k);
    const auto& s = sender.samples();
    for (Eigen::Index i = 0; i < n; ++i) {
        const double rx = receiver(0, i), ry = receiver(1, i);
        for (Eigen::Index j = 0; j < k; ++j) {
            const double dx = rx - s(0, j), dy = ry - s(1, j);
            buf(j) = logw(j) + meas.log_likelihood_at(y, std::sqrt(dx * dx + dy * dy));
        }
        out(i) = log_sum_exp(buf);
    }
    return out;
}

// Reweight the predicted belief by a product of messages given as
// per-sample logs. On total underflow the predicted belief is returned and
// *diverged is set.
inline ParticleSet bp_update_ca(const ParticleSet& predicted, std::span<const Eigen::VectorXd> log_msgs,
                                bool* diverged = nullptr) {
    if (diverged) *diverged = false;
    if (log_msgs.empty()) return predicted;
    Eigen::VectorXd logw = predicted.weights().array().log();
    for (const auto& m : log_msgs) {
        if (m.size() != logw.size()) throw Error("message length does not match the particle set");
        logw += m;
    }
    Eigen::VectorXd w;
    if (!normalize_log_weights(logw, w)) {
        if (diverged) *diverged = true;
        return predicted;
    }
    return predicted.with_weights(std::move(w));
}

struct TargetFusion {
    const CommGraph* graph = nullptr;  // nullptr: centralized sum
    std::size_t iterations = 1;
    CostLedger* ledger = nullptr;
};

// Per-sample log-weights summed across observers. With a graph, the sum is
// obtained as |C| times an average consensus over all graph nodes (nodes that
// are not observers contribute zero) and every node receives its own result.
inline std::map<AgentId, ParticleSet> bp_update_target(const ParticleSet& predicted,
                                                       const std::map<AgentId, Eigen::VectorXd>& observer_logs,
                                                       const TargetFusion& fusion, bool* diverged = nullptr) {
    if (diverged) *diverged = false;
    const auto J = static_cast<Eigen::Index>(predicted.size());
    for (const auto& [l, v] : observer_logs)
        if (v.size() != J)
            throw Error("observer " + to_string(l) + " supplied " + std::to_string(v.size()) +
                        " message values for a target set of " + std::to_string(J) + " samples");

    std::map<AgentId, Eigen::VectorXd> sums;
    if (fusion.graph == nullptr) {
        Eigen::VectorXd total = Eigen::VectorXd::Zero(J);
        for (const auto& [l, v] : observer_logs) total += v;
        for (const auto& [l, v] : observer_logs) sums[l] = total;
        if (observer_logs.empty()) sums[AgentId{}] = total;
    } else {
        std::map<AgentId, Eigen::VectorXd> x0;
        for (auto a : fusion.graph->nodes()) {
            auto it = observer_logs.find(a);
            x0[a] = it == observer_logs.end() ? Eigen::VectorXd::Zero(J) : it->second;
        }
        for (const auto& [l, v] : observer_logs)
            if (!x0.count(l)) throw Error("observer " + to_string(l) + " is not in the communication graph");
        if (observer_logs.empty()) {
            sums = std::move(x0);
        } else {
            const double scale = static_cast<double>(fusion.graph->size());
            sums = average_consensus(*fusion.graph, std::move(x0), fusion.iterations, fusion.ledger, Layer::Estimation);
            for (auto& [a, v] : sums) v *= scale;
        }
    }

    std::map<AgentId, ParticleSet> out;
    const Eigen::VectorXd base = predicted.weights().array().log();
    for (auto& [a, v] : sums) {
        Eigen::VectorXd w;
        if (!normalize_log_weights(base + v, w)) {
            if (diverged) *diverged = true;
            out.emplace(a, predicted);
        } else {
            out.emplace(a, predicted.with_weights(std::move(w)));
        }
    }
    return out;
}

// psi_j proportional to belief_j / max(msg_j, floor), computed from log
// message values. The floor is rel_eps times the largest message value, or
// exp(abs_log_floor) if that is larger.
inline Eigen::VectorXd extrinsic_info(const Eigen::VectorXd& belief_w, const Eigen::VectorXd& incoming_log,
                                      double rel_eps = 1e-300,
                                      double abs_log_floor = -std::numeric_limits<double>::infinity()) {
    if (belief_w.size() != incoming_log.size()) throw Error("extrinsic information needs matching sample indexing");
    const double top = incoming_log.maxCoeff();
    const double floor = std::max(std::isfinite(top) ? top + std::log(rel_eps) : abs_log_floor, abs_log_floor);
    Eigen::VectorXd logpsi(belief_w.size());
    for (Eigen::Index j = 0; j < logpsi.size(); ++j) {
        const double m = std::isfinite(floor) ? std::max(incoming_log(j), floor) : incoming_log(j);
        logpsi(j) = std::log(belief_w(j)) - (std::isfinite(m) ? m : 0.0);
    }
    Eigen::VectorXd w;
    if (!normalize_log_weights(logpsi, w)) return belief_w / belief_w.sum();
    return w;
}

struct BeliefTable {
    AgentId owner;
    ParticleSet own;
    std::map<AgentId, ParticleSet> targets;
    std::map<AgentId, Eigen::VectorXd> psi_to_target;    // over own samples
    std::map<AgentId, Eigen::VectorXd> psi_from_target;  // over target samples
    std::size_t iteration = 0;
};

inline bool censored(const ParticleSet& own, double threshold = 10.0) { return cov_trace(own, 2) >= threshold; }
inline bool censored(const BeliefTable& t, double threshold = 10.0) { return censored(t.own, threshold); }

struct SpawnParams {
    std::size_t iterations = 2;
    std::size_t consensus_iterations = 1;
    std::size_t message_samples = 0;  // sender subsample size; 0 sends the whole belief
    double censor_threshold = 10.0;
    bool cooperative_targets = true;  // false: each CA tracks targets alone
};

struct SpawnCa {
    MeasModel meas;
    MotionModel motion = random_walk_model(0.0);
    ParticleSet previous;
    ControlVec control = ControlVec::Zero();
};

struct SpawnInput {
    const Topology* topology = nullptr;
    const CommGraph* graph = nullptr;  // used for target consensus
    std::map<AgentId, SpawnCa> cas;
    std::map<AgentId, MotionModel> target_models;
    std::map<AgentId, std::map<AgentId, ParticleSet>> previous_targets;  // holder -> target -> belief
    MeasurementBundle measurements;
    SpawnParams params;
    std::uint64_t seed = 0, run = 0, time = 0;
    CostLedger* ledger = nullptr;
    std::optional<std::set<AgentId>> censored_override;
};

struct SpawnOutput {
    std::map<AgentId, BeliefTable> tables;
    std::set<AgentId> censored;
    std::map<AgentId, std::size_t> message_evaluations;
    std::size_t divergences = 0;
};

namespace detail {

inline ParticleSet message_subsample(const ParticleSet& sender, const Eigen::VectorXd& weights, std::size_t count,
                                     RngStream rng) {
    ParticleSet weighted = sender.with_weights(weights);
    if (count == 0 || count >= sender.size()) return weighted;
    return systematic_resample(weighted, rng, count);
}

}  // namespace detail

inline SpawnOutput run_spawn(const SpawnInput& in) {
    if (in.topology == nullptr) throw Error("spawn needs a topology");
    if (in.params.iterations < 1) throw Error("spawn needs at least one iteration");
    const Topology& topo = *in.topology;
    const auto& prm = in.params;
    SpawnOutput out;

    // Prediction.
    std::map<AgentId, ParticleSet> own;
    for (const auto& [l, ca] : in.cas) {
        if (topo.kind(l) == AgentKind::AnchorCA) {
            own.emplace(l, ca.previous);
        } else {
            auto rng = RngStream::make(in.seed, in.run, l.index, Purpose::Predict, in.time);
            own.emplace(l, predict_ca(ca.motion, ca.previous, ca.control, rng));
        }
        out.message_evaluations[l] = 0;
    }
    std::map<AgentId, std::map<AgentId, ParticleSet>> tgt;
    for (const auto& [h, sets] : in.previous_targets)
        for (const auto& [m, p] : sets) {
            const std::uint64_t who = prm.cooperative_targets ? kShared : h.index;
            auto rng = RngStream::make(in.seed, in.run, who, Purpose::Predict, in.time, m.index);
            tgt[h].emplace(m, predict_target(in.target_models.at(m), p, rng));
        }

    if (in.censored_override) {
        out.censored = *in.censored_override;
    } else {
        for (const auto& [l, p] : own)
            if (topo.kind(l) == AgentKind::MobileCA && censored(p, prm.censor_threshold)) out.censored.insert(l);
    }
    auto active = [&](AgentId l) { return in.cas.count(l) && !out.censored.count(l); };

    // Iteration-0 state: beliefs are the predictions, psi are prior weights.
    std::map<AgentId, ParticleSet> b = own;
    std::map<AgentId, std::map<AgentId, ParticleSet>> bt = tgt;
    std::map<AgentId, std::map<AgentId, Eigen::VectorXd>> psi_to, psi_from;
    for (const auto& [l, p] : own)
        for (auto m : topo.ca_targets(l)) psi_to[l][m] = p.weights();
    for (const auto& [h, sets] : tgt)
        for (const auto& [m, p] : sets) psi_from[h][m] = p.weights();

    for (std::size_t it = 1; it <= prm.iterations; ++it) {
        // Each active CA broadcasts a (subsampled) belief to CA neighbors.
        std::map<AgentId, ParticleSet> sent;
        for (const auto& [l, p] : b) {
            if (!active(l)) continue;
            auto rng = RngStream::make(in.seed, in.run, l.index, Purpose::MessageSubsample, in.time, it);
            sent.emplace(l, detail::message_subsample(p, p.weights(), prm.message_samples, rng));
            bool has_mobile_receiver = false;
            for (auto k : topo.ca_neighbors(l))
                if (topo.kind(k) == AgentKind::MobileCA && in.cas.count(k)) has_mobile_receiver = true;
            if (in.ledger && has_mobile_receiver)
                in.ledger->add(l, Layer::Estimation, Primitive::Neighbor, sent.at(l).size() * sent.at(l).dim());
        }

        std::map<AgentId, ParticleSet> nb = b;
        std::map<AgentId, std::map<AgentId, Eigen::VectorXd>> incoming_from_target;  // at CA l, over own samples
        for (const auto& [l, pred] : own) {
            if (topo.kind(l) != AgentKind::MobileCA) continue;
            std::vector<Eigen::VectorXd> msgs;
            for (auto k : topo.ca_neighbors(l)) {
                if (!sent.count(k) || !in.measurements.has(l, k)) continue;
                msgs.push_back(log_messages(in.cas.at(l).meas, in.measurements.at(l, k), pred.samples(), sent.at(k)));
                ++out.message_evaluations[l];
            }
            if (active(l) && tgt.count(l)) {
                for (auto m : topo.ca_targets(l)) {
                    if (!in.measurements.has(l, m) || !bt.at(l).count(m)) continue;
                    auto rng = RngStream::make(in.seed, in.run, l.index, Purpose::MessageSubsample, in.time,
                                               it * 1000003ull + m.index);
                    auto from = detail::message_subsample(bt.at(l).at(m), psi_from.at(l).at(m), prm.message_samples, rng);
                    auto msg = log_messages(in.cas.at(l).meas, in.measurements.at(l, m), pred.samples(), from);
                    ++out.message_evaluations[l];
                    incoming_from_target[l][m] = msg;
                    msgs.push_back(std::move(msg));
                }
            }
            bool div = false;
            nb.insert_or_assign(l, bp_update_ca(pred, msgs, &div));
            if (div) ++out.divergences;
        }

        // Target beliefs: observers evaluate messages on their (common) sample sets.
        std::map<AgentId, std::map<AgentId, ParticleSet>> nbt = tgt;
        std::map<AgentId, std::map<AgentId, Eigen::VectorXd>> outgoing;  // outgoing[l][m] over target samples
        for (auto m : topo.targets()) {
            std::map<AgentId, Eigen::VectorXd> logs;
            for (auto l : topo.target_observers(m)) {
                if (!active(l) || !tgt.count(l) || !tgt.at(l).count(m) || !in.measurements.has(l, m)) continue;
                auto rng = RngStream::make(in.seed, in.run, l.index, Purpose::MessageSubsample, in.time,
                                           it * 1000003ull + 500000ull + m.index);
                auto from = detail::message_subsample(b.at(l), psi_to.at(l).at(m), prm.message_samples, rng);
                logs[l] = log_messages(in.cas.at(l).meas, in.measurements.at(l, m), tgt.at(l).at(m).samples(), from);
                ++out.message_evaluations[l];
            }
            for (const auto& [l, v] : logs) outgoing[l][m] = v;

            if (prm.cooperative_targets) {
                const ParticleSet* ref = nullptr;
                for (const auto& [h, sets] : tgt)
                    if (sets.count(m)) { ref = &sets.at(m); break; }
                if (ref == nullptr) continue;
                for (const auto& [h, sets] : tgt)
                    if (sets.count(m) && sets.at(m).samples() != ref->samples())
                        throw Error("target " + to_string(m) + " sample sets differ across CAs");
                TargetFusion fusion{in.graph, prm.consensus_iterations, in.ledger};
                bool div = false;
                auto res = bp_update_target(*ref, logs, fusion, &div);
                if (div) ++out.divergences;
                for (auto& [h, sets] : nbt) {
                    if (!sets.count(m)) continue;
                    auto r = res.find(h);
                    if (r != res.end()) sets.insert_or_assign(m, tgt.at(h).at(m).with_weights(r->second.weights()));
                    else if (!logs.empty() && in.graph == nullptr)
                        sets.insert_or_assign(m, tgt.at(h).at(m).with_weights(res.begin()->second.weights()));
                }
            } else {
                for (auto& [h, sets] : nbt) {
                    if (!sets.count(m)) continue;
                    std::map<AgentId, Eigen::VectorXd> mine;
                    if (logs.count(h)) mine[h] = logs.at(h);
                    if (mine.empty()) continue;
                    bool div = false;
                    auto res = bp_update_target(tgt.at(h).at(m), mine, TargetFusion{}, &div);
                    if (div) ++out.divergences;
                    sets.insert_or_assign(m, res.begin()->second);
                }
            }
        }

        // Extrinsic information for the next iteration.
        for (const auto& [l, ms] : psi_to)
            for (const auto& [m, _] : ms) {
                auto f = incoming_from_target.find(l);
                if (f != incoming_from_target.end() && f->second.count(m))
                    psi_to[l][m] = extrinsic_info(nb.at(l).weights(), f->second.at(m));
                else
                    psi_to[l][m] = nb.at(l).weights();
            }
        for (auto& [h, ms] : psi_from)
            for (auto& [m, w] : ms) {
                auto o = outgoing.find(h);
                if (o != outgoing.end() && o->second.count(m))
                    w = extrinsic_info(nbt.at(h).at(m).weights(), o->second.at(m));
                else
                    w = nbt.at(h).at(m).weights();
            }

        b = std::move(nb);
        bt = std::move(nbt);
    }

    for (const auto& [l, p] : b) {
        BeliefTable t;
        t.owner = l;
        t.own = p;
        if (bt.count(l)) t.targets = bt.at(l);
        if (psi_to.count(l)) t.psi_to_target = psi_to.at(l);
        if (psi_from.count(l)) t.psi_from_target = psi_from.at(l);
        t.iteration = prm.iterations;
        out.tables.emplace(l, std::move(t));
    }
    return out;
}

inline SpawnOutput spawn_local_only(SpawnInput in) {
    in.previous_targets.clear();
    in.target_models.clear();
    return run_spawn(in);
}

struct KnownObserver {
    AgentId id;
    MeasModel meas;
    StateVec state;
    double y = 0.0;
};

struct FilterStep {
    ParticleSet weighted;
    ParticleSet resampled;
};

// Particle filter for one target when every observing CA knows its own
// state exactly.
inline FilterStep target_only_filter(const MotionModel& model, const ParticleSet& previous,
                                     const std::vector<KnownObserver>& observers, const TargetFusion& fusion,
                                     RngStream& predict_rng, RngStream& resample_rng) {
    ParticleSet pred = predict_target(model, previous, predict_rng);
    std::map<AgentId, Eigen::VectorXd> logs;
    for (const auto& o : observers) {
        Eigen::VectorXd v(static_cast<Eigen::Index>(pred.size()));
        const Eigen::Vector2d pos = position_of(o.state);
        for (Eigen::Index j = 0; j < v.size(); ++j) {
            const double d = (pred.samples().col(j).head<2>() - pos).norm();
            v(j) = o.meas.log_likelihood_at(o.y, d);
        }
        logs[o.id] = std::move(v);
    }
    ParticleSet weighted = pred;
    if (!logs.empty()) weighted = bp_update_target(pred, logs, fusion).begin()->second;
    return {weighted, systematic_resample(weighted, resample_rng)};
}

}  // namespace infoseek
