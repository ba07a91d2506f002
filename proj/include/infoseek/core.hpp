#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace infoseek {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

struct AgentId {
    std::size_t index = 0;
    auto operator<=>(const AgentId&) const = default;
};

inline std::string to_string(AgentId id) { return std::to_string(id.index); }

enum class AgentKind { AnchorCA, MobileCA, Target };

inline bool is_ca(AgentKind k) { return k != AgentKind::Target; }

using StateVec = Eigen::VectorXd;
using ControlVec = Eigen::Vector2d;

inline Eigen::Vector2d position_of(const Eigen::Ref<const Eigen::VectorXd>& x) {
    if (x.size() < 2) throw Error("state has no position components");
    return x.head<2>();
}

// Weighted samples of one agent state; column j of samples() is sample j.
class ParticleSet {
public:
    ParticleSet() = default;

    ParticleSet(Eigen::MatrixXd samples, Eigen::VectorXd weights)
        : samples_(std::move(samples)), weights_(std::move(weights)) {
        validate();
    }

    static ParticleSet uniform(Eigen::MatrixXd samples) {
        const auto j = samples.cols();
        if (j == 0) throw Error("particle set needs at least one sample");
        Eigen::VectorXd w = Eigen::VectorXd::Constant(j, 1.0 / static_cast<double>(j));
        return ParticleSet(std::move(samples), std::move(w));
    }

    static ParticleSet point_mass(const StateVec& x) {
        Eigen::MatrixXd s(x.size(), 1);
        s.col(0) = x;
        return uniform(std::move(s));
    }

    std::size_t size() const { return static_cast<std::size_t>(samples_.cols()); }
    std::size_t dim() const { return static_cast<std::size_t>(samples_.rows()); }
    bool empty() const { return samples_.cols() == 0; }

    const Eigen::MatrixXd& samples() const { return samples_; }
    const Eigen::VectorXd& weights() const { return weights_; }
    StateVec sample(std::size_t j) const { return samples_.col(static_cast<Eigen::Index>(j)); }
    double weight(std::size_t j) const { return weights_(static_cast<Eigen::Index>(j)); }

    ParticleSet with_weights(Eigen::VectorXd w) const { return ParticleSet(samples_, std::move(w)); }
    ParticleSet with_samples(Eigen::MatrixXd s) const { return ParticleSet(std::move(s), weights_); }

private:
    void validate() const {
        if (samples_.cols() == 0) throw Error("particle set needs at least one sample");
        if (samples_.cols() != weights_.size())
            throw Error("particle set has " + std::to_string(samples_.cols()) + " samples but " +
                        std::to_string(weights_.size()) + " weights");
        double sum = 0.0;
        for (Eigen::Index j = 0; j < weights_.size(); ++j) {
            const double w = weights_(j);
            if (!(w >= 0.0) || !std::isfinite(w)) throw Error("particle weights must be finite and nonnegative");
            sum += w;
        }
        if (std::abs(sum - 1.0) > 1e-9)
            throw Error("particle weights sum to " + std::to_string(sum) + ", expected 1");
    }

    Eigen::MatrixXd samples_;
    Eigen::VectorXd weights_;
};

// Neighborhood sets of the agent network. Measurement and communication
// relations coincide: CAs that measure each other also talk to each other.
class Topology {
public:
    Topology() = default;

    void add_agent(AgentId id, AgentKind kind) {
        if (kinds_.count(id)) throw Error("duplicate agent id " + to_string(id));
        kinds_[id] = kind;
        if (is_ca(kind)) {
            ca_neighbors_[id];
            ca_targets_[id];
        } else {
            target_observers_[id];
        }
    }

    void link(AgentId a, AgentId b) {
        require_ca(a);
        require_ca(b);
        if (a == b) throw Error("agent " + to_string(a) + " cannot neighbor itself");
        ca_neighbors_[a].insert(b);
        ca_neighbors_[b].insert(a);
    }

    void observe(AgentId ca, AgentId target) {
        require_ca(ca);
        if (kind(target) != AgentKind::Target) throw Error("agent " + to_string(target) + " is not a target");
        if (kind(ca) == AgentKind::AnchorCA) throw Error("anchor " + to_string(ca) + " cannot observe targets");
        ca_targets_[ca].insert(target);
        target_observers_[target].insert(ca);
    }

    static Topology fully_connected(const std::map<AgentId, AgentKind>& agents) {
        Topology t;
        for (const auto& [id, k] : agents) t.add_agent(id, k);
        auto cas = t.cas();
        for (std::size_t i = 0; i < cas.size(); ++i)
            for (std::size_t j = i + 1; j < cas.size(); ++j) t.link(cas[i], cas[j]);
        for (auto l : cas)
            if (t.kind(l) == AgentKind::MobileCA)
                for (auto m : t.targets()) t.observe(l, m);
        return t;
    }

    AgentKind kind(AgentId id) const {
        auto it = kinds_.find(id);
        if (it == kinds_.end()) throw Error("unknown agent id " + to_string(id));
        return it->second;
    }
    bool contains(AgentId id) const { return kinds_.count(id) > 0; }

    std::vector<AgentId> cas() const { return filter([](AgentKind k) { return is_ca(k); }); }
    std::vector<AgentId> mobile_cas() const { return filter([](AgentKind k) { return k == AgentKind::MobileCA; }); }
    std::vector<AgentId> anchors() const { return filter([](AgentKind k) { return k == AgentKind::AnchorCA; }); }
    std::vector<AgentId> targets() const { return filter([](AgentKind k) { return k == AgentKind::Target; }); }
    std::vector<AgentId> agents() const { return filter([](AgentKind) { return true; }); }

    const std::set<AgentId>& ca_neighbors(AgentId l) const {
        require_ca(l);
        return ca_neighbors_.at(l);
    }
    const std::set<AgentId>& ca_targets(AgentId l) const {
        require_ca(l);
        return ca_targets_.at(l);
    }
    const std::set<AgentId>& target_observers(AgentId m) const {
        if (kind(m) != AgentKind::Target) throw Error("agent " + to_string(m) + " is not a target");
        return target_observers_.at(m);
    }

    // Ordered list of (measurer, measured) pairs: every mobile CA measures
    // all of its CA neighbors and observed targets. Anchors never measure.
    std::vector<std::pair<AgentId, AgentId>> measurement_pairs() const {
        std::vector<std::pair<AgentId, AgentId>> out;
        for (auto l : mobile_cas()) {
            for (auto k : ca_neighbors_.at(l)) out.emplace_back(l, k);
            for (auto m : ca_targets_.at(l)) out.emplace_back(l, m);
        }
        return out;
    }

    bool measures(AgentId l, AgentId k) const {
        if (kind(l) != AgentKind::MobileCA) return false;
        return ca_neighbors_.at(l).count(k) || ca_targets_.at(l).count(k);
    }

    // Copy restricted to the given agents (edges outside the set dropped).
    Topology restricted_to(const std::set<AgentId>& keep) const {
        Topology t;
        for (const auto& [id, k] : kinds_)
            if (keep.count(id)) t.add_agent(id, k);
        for (const auto& [l, ns] : ca_neighbors_)
            for (auto k : ns)
                if (keep.count(l) && keep.count(k) && l < k) t.link(l, k);
        for (const auto& [l, ms] : ca_targets_)
            for (auto m : ms)
                if (keep.count(l) && keep.count(m)) t.observe(l, m);
        return t;
    }

private:
    template <class Pred>
    std::vector<AgentId> filter(Pred p) const {
        std::vector<AgentId> out;
        for (const auto& [id, k] : kinds_)
            if (p(k)) out.push_back(id);
        return out;
    }

    void require_ca(AgentId id) const {
        if (!is_ca(kind(id))) throw Error("agent " + to_string(id) + " is a target and has no neighbor sets");
    }

    std::map<AgentId, AgentKind> kinds_;
    std::map<AgentId, std::set<AgentId>> ca_neighbors_;
    std::map<AgentId, std::set<AgentId>> ca_targets_;
    std::map<AgentId, std::set<AgentId>> target_observers_;
};

struct Neighborhood {
    std::set<AgentId> cas;
    std::set<AgentId> targets;

    std::set<AgentId> all() const {
        std::set<AgentId> a = cas;
        a.insert(targets.begin(), targets.end());
        return a;
    }
};

inline Neighborhood neighbors_of(const Topology& topology, AgentId l) {
    return Neighborhood{topology.ca_neighbors(l), topology.ca_targets(l)};
}

struct MeasurementBundle {
    std::map<std::pair<AgentId, AgentId>, double> entries;

    double at(AgentId l, AgentId k) const {
        auto it = entries.find({l, k});
        if (it == entries.end()) throw Error("no measurement from " + to_string(l) + " to " + to_string(k));
        return it->second;
    }
    bool has(AgentId l, AgentId k) const { return entries.count({l, k}) > 0; }
};

inline StateVec stack_joint_sample(std::span<const ParticleSet* const> parts, std::size_t j) {
    if (parts.empty()) throw Error("nothing to stack");
    const std::size_t n = parts.front()->size();
    std::size_t dim = 0;
    for (const auto* p : parts) {
        if (p->size() != n)
            throw Error("cannot stack particle sets of sizes " + std::to_string(n) + " and " + std::to_string(p->size()));
        dim += p->dim();
    }
    if (j >= n) throw Error("sample index " + std::to_string(j) + " out of range for J=" + std::to_string(n));
    StateVec out(static_cast<Eigen::Index>(dim));
    Eigen::Index off = 0;
    for (const auto* p : parts) {
        const auto d = static_cast<Eigen::Index>(p->dim());
        out.segment(off, d) = p->samples().col(static_cast<Eigen::Index>(j));
        off += d;
    }
    return out;
}

inline StateVec stack_joint_sample(std::initializer_list<const ParticleSet*> parts, std::size_t j) {
    return stack_joint_sample(std::span<const ParticleSet* const>(parts.begin(), parts.size()), j);
}

// log(sum(exp(v))) without overflow; -inf for an empty or all -inf input.
inline double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& v) {
    if (v.size() == 0) return -std::numeric_limits<double>::infinity();
    const double m = v.maxCoeff();
    if (!std::isfinite(m)) return m;
    return m + std::log((v.array() - m).exp().sum());
}

// Normalize log-weights into a probability vector. Returns false when every
// entry is -inf or NaN (total weight underflow).
inline bool normalize_log_weights(const Eigen::VectorXd& logw, Eigen::VectorXd& out) {
    const double m = logw.maxCoeff();
    if (!std::isfinite(m)) return false;
    out = (logw.array() - m).exp();
    const double s = out.sum();
    if (!(s > 0.0) || !std::isfinite(s)) return false;
    out /= s;
    return true;
}

}  // namespace infoseek
