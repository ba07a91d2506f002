#pragma once

#include "infoseek/core.hpp"

#include <cstdint>
#include <deque>
#include <tuple>

namespace infoseek {

enum class Layer { Estimation, Control };
enum class Primitive { Neighbor, Flood, Consensus };

inline const char* layer_name(Layer l) { return l == Layer::Estimation ? "estimation" : "control"; }

inline const char* primitive_name(Primitive p) {
    switch (p) {
        case Primitive::Neighbor: return "neighbor";
        case Primitive::Flood: return "flood";
        case Primitive::Consensus: return "consensus";
    }
    return "?";
}

// Counts of real values transmitted, per CA, layer and primitive.
class CostLedger {
public:
    using Key = std::tuple<AgentId, Layer, Primitive>;

    void add(AgentId ca, Layer layer, Primitive prim, std::uint64_t reals) { counts_[{ca, layer, prim}] += reals; }

    std::uint64_t total(AgentId ca, Layer layer) const {
        std::uint64_t t = 0;
        for (const auto& [k, v] : counts_)
            if (std::get<0>(k) == ca && std::get<1>(k) == layer) t += v;
        return t;
    }

    std::uint64_t total(AgentId ca, Layer layer, Primitive prim) const {
        auto it = counts_.find({ca, layer, prim});
        return it == counts_.end() ? 0 : it->second;
    }

    std::uint64_t total_layer(Layer layer) const {
        std::uint64_t t = 0;
        for (const auto& [k, v] : counts_)
            if (std::get<1>(k) == layer) t += v;
        return t;
    }

    const std::map<Key, std::uint64_t>& entries() const { return counts_; }
    void clear() { counts_.clear(); }

private:
    std::map<Key, std::uint64_t> counts_;
};

class CommGraph {
public:
    CommGraph() = default;

    void add_node(AgentId a) { adj_[a]; }

    void add_edge(AgentId a, AgentId b) {
        if (a == b) throw Error("self loop at " + to_string(a));
        adj_[a].insert(b);
        adj_[b].insert(a);
    }

    static CommGraph from_topology(const Topology& t) {
        CommGraph g;
        for (auto l : t.cas()) {
            g.add_node(l);
            for (auto k : t.ca_neighbors(l)) g.add_edge(l, k);
        }
        return g;
    }

    static CommGraph complete(const std::vector<AgentId>& ids) {
        CommGraph g;
        for (auto a : ids) g.add_node(a);
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t j = i + 1; j < ids.size(); ++j) g.add_edge(ids[i], ids[j]);
        return g;
    }

    static CommGraph line(const std::vector<AgentId>& ids) {
        CommGraph g;
        for (auto a : ids) g.add_node(a);
        for (std::size_t i = 0; i + 1 < ids.size(); ++i) g.add_edge(ids[i], ids[i + 1]);
        return g;
    }

    std::vector<AgentId> nodes() const {
        std::vector<AgentId> out;
        for (const auto& [a, _] : adj_) out.push_back(a);
        return out;
    }

    const std::set<AgentId>& neighbors(AgentId a) const {
        auto it = adj_.find(a);
        if (it == adj_.end()) throw Error("agent " + to_string(a) + " is not in the communication graph");
        return it->second;
    }

    std::size_t size() const { return adj_.size(); }
    std::size_t degree(AgentId a) const { return neighbors(a).size(); }

    bool is_complete() const {
        for (const auto& [a, ns] : adj_)
            if (ns.size() + 1 != adj_.size()) return false;
        return true;
    }

    // Hop distances from a source; unreachable nodes are absent.
    std::map<AgentId, std::size_t> hops_from(AgentId src) const {
        std::map<AgentId, std::size_t> dist{{src, 0}};
        std::deque<AgentId> q{src};
        while (!q.empty()) {
            auto a = q.front();
            q.pop_front();
            for (auto b : neighbors(a))
                if (!dist.count(b)) {
                    dist[b] = dist[a] + 1;
                    q.push_back(b);
                }
        }
        return dist;
    }

    std::size_t diameter() const {
        std::size_t d = 0;
        for (const auto& [a, _] : adj_) {
            auto h = hops_from(a);
            if (h.size() != adj_.size()) throw Error("communication graph is disconnected");
            for (const auto& [b, k] : h) d = std::max(d, k);
        }
        return d;
    }

private:
    std::map<AgentId, std::set<AgentId>> adj_;
};

using Payload = std::vector<double>;
using Delivery = std::map<AgentId, std::map<AgentId, Payload>>;

// One broadcast round: each CA sends its payload to all graph neighbors.
inline Delivery neighbor_exchange(const CommGraph& g, const std::map<AgentId, Payload>& payloads, CostLedger* ledger,
                                  Layer layer) {
    Delivery out;
    for (auto a : g.nodes()) {
        auto it = payloads.find(a);
        if (it == payloads.end()) throw Error("no payload for agent " + to_string(a));
        out[a];
        if (ledger) ledger->add(a, layer, Primitive::Neighbor, it->second.size());
    }
    for (auto a : g.nodes())
        for (auto b : g.neighbors(a)) out[b][a] = payloads.at(a);
    return out;
}

struct FloodResult {
    Delivery knowledge;  // knowledge[a][b] = payload of b as held by a (includes a itself)
    std::size_t rounds = 0;
};

// Relay until every CA holds every payload. Each round a CA forwards the
// payloads it learned in the previous round; W is the number of rounds.
inline FloodResult flood(const CommGraph& g, const std::map<AgentId, Payload>& payloads, CostLedger* ledger,
                         Layer layer) {
    FloodResult res;
    std::map<AgentId, std::set<AgentId>> fresh;
    for (auto a : g.nodes()) {
        auto it = payloads.find(a);
        if (it == payloads.end()) throw Error("no payload for agent " + to_string(a));
        res.knowledge[a][a] = it->second;
        fresh[a] = {a};
    }
    const std::size_t n = g.size();
    auto complete = [&] {
        for (const auto& [a, k] : res.knowledge)
            if (k.size() != n) return false;
        return true;
    };
    while (!complete()) {
        std::map<AgentId, std::set<AgentId>> next;
        bool progress = false;
        for (auto a : g.nodes())
            for (auto src : fresh[a])
                for (auto b : g.neighbors(a))
                    if (!res.knowledge[b].count(src)) {
                        res.knowledge[b][src] = payloads.at(src);
                        next[b].insert(src);
                        progress = true;
                    }
        if (!progress) {
            std::string missing;
            for (const auto& [a, k] : res.knowledge)
                if (k.size() != n) missing += (missing.empty() ? "" : ", ") + to_string(a);
            throw Error("flooding cannot reach all CAs; incomplete at: " + missing);
        }
        fresh = std::move(next);
        ++res.rounds;
    }
    if (ledger)
        for (auto a : g.nodes()) ledger->add(a, layer, Primitive::Flood, payloads.at(a).size() * res.rounds);
    return res;
}

enum class ConsensusWeights { Auto, Uniform, Metropolis };

// R synchronous averaging rounds over vector-valued states (each component
// is an independent consensus instance). Uniform weights need a complete graph.
inline std::map<AgentId, Eigen::VectorXd> average_consensus(const CommGraph& g,
                                                            std::map<AgentId, Eigen::VectorXd> x, std::size_t R,
                                                            CostLedger* ledger, Layer layer,
                                                            ConsensusWeights kind = ConsensusWeights::Auto) {
    const auto nodes = g.nodes();
    if (nodes.empty()) return x;
    Eigen::Index len = -1;
    for (auto a : nodes) {
        auto it = x.find(a);
        if (it == x.end()) throw Error("no consensus input for agent " + to_string(a));
        if (len >= 0 && it->second.size() != len) throw Error("consensus inputs differ in length");
        len = it->second.size();
    }
    if (kind == ConsensusWeights::Auto) kind = g.is_complete() ? ConsensusWeights::Uniform : ConsensusWeights::Metropolis;
    if (kind == ConsensusWeights::Uniform && !g.is_complete())
        throw Error("uniform consensus weights require a complete graph");

    for (std::size_t r = 0; r < R; ++r) {
        std::map<AgentId, Eigen::VectorXd> next;
        if (kind == ConsensusWeights::Uniform) {
            Eigen::VectorXd mean = Eigen::VectorXd::Zero(len);
            for (auto a : nodes) mean += x.at(a);
            mean /= static_cast<double>(nodes.size());
            for (auto a : nodes) next[a] = mean;
        } else {
            for (auto a : nodes) {
                const double da = static_cast<double>(g.degree(a));
                Eigen::VectorXd acc = x.at(a);
                for (auto b : g.neighbors(a)) {
                    const double w = 1.0 / (1.0 + std::max(da, static_cast<double>(g.degree(b))));
                    acc += w * (x.at(b) - x.at(a));
                }
                next[a] = std::move(acc);
            }
        }
        if (ledger)
            for (auto a : nodes) ledger->add(a, layer, Primitive::Consensus, static_cast<std::uint64_t>(len) * g.degree(a));
        for (auto a : nodes) x[a] = std::move(next[a]);
    }
    return x;
}

inline std::map<AgentId, Eigen::VectorXd> max_consensus(const CommGraph& g, std::map<AgentId, Eigen::VectorXd> x,
                                                        std::size_t R, CostLedger* ledger, Layer layer) {
    const auto nodes = g.nodes();
    for (std::size_t r = 0; r < R; ++r) {
        std::map<AgentId, Eigen::VectorXd> next;
        for (auto a : nodes) {
            Eigen::VectorXd acc = x.at(a);
            for (auto b : g.neighbors(a)) acc = acc.cwiseMax(x.at(b));
            next[a] = std::move(acc);
        }
        if (ledger)
            for (auto a : nodes) ledger->add(a, layer, Primitive::Consensus, static_cast<std::uint64_t>(x.at(a).size()) * g.degree(a));
        x = std::move(next);
    }
    return x;
}

}  // namespace infoseek
