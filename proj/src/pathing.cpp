#include "sparse_eta/pathing.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <unordered_map>
#include <unordered_set>

namespace sparse_eta::pathing {

using netgraph::RoadNetwork;

namespace {

// Node-indexed view of the network used by the path searches. Node ids are
// mapped onto [0, |V|) so exclusion masks can be flat vectors.
struct SearchGraph {
    const RoadNetwork* net = nullptr;
    std::span<const double> weights;
    std::unordered_map<int64_t, int> node_idx;
    std::vector<int64_t> node_ids;
    std::vector<std::vector<int>> out_segs; // by node index, segment ids sorted ascending

    explicit SearchGraph(const RoadNetwork& n, std::span<const double> w) : net(&n), weights(w) {
        node_ids.reserve(n.num_nodes());
        for (const auto& node : n.nodes()) {
            node_idx.emplace(node.id, static_cast<int>(node_ids.size()));
            node_ids.push_back(node.id);
        }
        out_segs.resize(node_ids.size());
        for (const auto& seg : n.segments()) {
            out_segs[static_cast<size_t>(node_idx.at(seg.from_node))].push_back(seg.id);
        }
        for (auto& v : out_segs) std::sort(v.begin(), v.end());
    }

    int index_of(int64_t node_id) const {
        auto it = node_idx.find(node_id);
        if (it == node_idx.end()) {
            throw ValidationError("node " + std::to_string(node_id) + " not in network");
        }
        return it->second;
    }
};

// Dijkstra from src to dst with optional node/edge exclusions. Returns the
// segment-id sequence of the minimum-weight path, preferring the
// lexicographically smaller sequence on exact weight ties. Empty optional
// when unreachable.
std::optional<std::vector<int>> dijkstra(const SearchGraph& g, int src_idx, int dst_idx,
                                         const std::vector<char>& banned_node,
                                         const std::vector<char>& banned_seg) {
    const size_t n = g.node_ids.size();
    std::vector<double> dist(n, std::numeric_limits<double>::infinity());
    std::vector<int> pred_seg(n, -1);
    std::vector<int> pred_node(n, -1);
    std::vector<char> done(n, 0);

    auto path_to = [&](int v) {
        std::vector<int> segs;
        while (v != src_idx) {
            segs.push_back(pred_seg[static_cast<size_t>(v)]);
            v = pred_node[static_cast<size_t>(v)];
        }
        std::reverse(segs.begin(), segs.end());
        return segs;
    };

    using QE = std::pair<double, int>;
    std::priority_queue<QE, std::vector<QE>, std::greater<QE>> pq;
    dist[static_cast<size_t>(src_idx)] = 0.0;
    pq.emplace(0.0, src_idx);

    while (!pq.empty()) {
        auto [d, u] = pq.top();
        pq.pop();
        if (done[static_cast<size_t>(u)]) continue;
        done[static_cast<size_t>(u)] = 1;
        if (u == dst_idx) break;
        for (int seg_id : g.out_segs[static_cast<size_t>(u)]) {
            if (!banned_seg.empty() && banned_seg[static_cast<size_t>(seg_id)]) continue;
            const auto& seg = g.net->segment(seg_id);
            int v = g.node_idx.at(seg.to_node);
            if (!banned_node.empty() && banned_node[static_cast<size_t>(v)]) continue;
            if (done[static_cast<size_t>(v)]) continue;
            double cand = d + g.weights[static_cast<size_t>(seg_id)];
            if (cand < dist[static_cast<size_t>(v)]) {
                dist[static_cast<size_t>(v)] = cand;
                pred_seg[static_cast<size_t>(v)] = seg_id;
                pred_node[static_cast<size_t>(v)] = u;
                pq.emplace(cand, v);
            } else if (cand == dist[static_cast<size_t>(v)]) {
                // Exact tie: keep the lexicographically smaller sequence.
                auto via_u = path_to(u);
                via_u.push_back(seg_id);
                auto current = path_to(v);
                if (std::lexicographical_compare(via_u.begin(), via_u.end(), current.begin(),
                                                 current.end())) {
                    pred_seg[static_cast<size_t>(v)] = seg_id;
                    pred_node[static_cast<size_t>(v)] = u;
                }
            }
        }
    }
    if (!done[static_cast<size_t>(dst_idx)]) return std::nullopt;
    return path_to(dst_idx);
}

void check_weights(const RoadNetwork& net, std::span<const double> weights) {
    if (weights.size() != net.num_segments()) {
        throw ValidationError("weight table size " + std::to_string(weights.size()) +
                              " does not match segment count " + std::to_string(net.num_segments()));
    }
    for (size_t i = 0; i < weights.size(); ++i) {
        if (!(weights[i] > 0.0)) {
            throw ValidationError("non-positive weight on segment " + std::to_string(i));
        }
    }
}

} // namespace

Route make_route(const RoadNetwork& net, std::span<const double> weights,
                 const std::vector<int>& segment_ids) {
    Route r;
    r.segment_ids = segment_ids;
    for (int id : segment_ids) {
        r.total_length_m += net.segment(id).length_m;
        r.total_weight_s += weights[static_cast<size_t>(id)];
    }
    return r;
}

Route shortest_path(const RoadNetwork& net, std::span<const double> weights, int64_t src,
                    int64_t dst) {
    check_weights(net, weights);
    SearchGraph g(net, weights);
    int s = g.index_of(src), t = g.index_of(dst);
    if (s == t) return Route{};
    auto segs = dijkstra(g, s, t, {}, {});
    if (!segs) {
        throw NoPathError("no path from " + std::to_string(src) + " to " + std::to_string(dst));
    }
    return make_route(net, weights, *segs);
}

std::vector<Route> k_shortest_paths(const RoadNetwork& net, std::span<const double> weights,
                                    int64_t src, int64_t dst, int k) {
    check_weights(net, weights);
    if (k < 1) throw ValidationError("k must be >= 1");
    SearchGraph g(net, weights);
    int s = g.index_of(src), t = g.index_of(dst);
    if (s == t) return {Route{}};

    auto first = dijkstra(g, s, t, {}, {});
    if (!first) {
        throw NoPathError("no path from " + std::to_string(src) + " to " + std::to_string(dst));
    }

    // Candidate pool ordered by (weight, segment sequence); sequences double
    // as the dedupe key.
    auto route_of = [&](const std::vector<int>& segs) { return make_route(net, weights, segs); };
    std::map<std::pair<double, std::vector<int>>, bool> pool;
    std::set<std::vector<int>> known; // selected or pooled

    std::vector<Route> selected;
    selected.push_back(route_of(*first));
    known.insert(*first);

    std::vector<char> banned_node(g.node_ids.size(), 0);
    std::vector<char> banned_seg(net.num_segments(), 0);

    while (static_cast<int>(selected.size()) < k) {
        const auto& prev = selected.back().segment_ids;
        // Node sequence along the previous path.
        std::vector<int> prev_nodes;
        prev_nodes.push_back(s);
        for (int seg_id : prev) {
            prev_nodes.push_back(g.node_idx.at(net.segment(seg_id).to_node));
        }

        for (size_t i = 0; i < prev.size(); ++i) {
            int spur_node = prev_nodes[i];
            std::vector<int> root(prev.begin(), prev.begin() + static_cast<long>(i));

            std::fill(banned_node.begin(), banned_node.end(), 0);
            std::fill(banned_seg.begin(), banned_seg.end(), 0);
            for (const auto& sel : selected) {
                if (sel.segment_ids.size() >= i &&
                    std::equal(root.begin(), root.end(), sel.segment_ids.begin())) {
                    if (sel.segment_ids.size() > i) {
                        banned_seg[static_cast<size_t>(sel.segment_ids[i])] = 1;
                    }
                }
            }
            for (size_t j = 0; j < i; ++j) {
                banned_node[static_cast<size_t>(prev_nodes[j])] = 1;
            }

            auto spur = dijkstra(g, spur_node, t, banned_node, banned_seg);
            if (!spur) continue;
            std::vector<int> full = root;
            full.insert(full.end(), spur->begin(), spur->end());
            if (known.count(full)) continue;
            known.insert(full);
            Route cand = route_of(full);
            pool.emplace(std::make_pair(cand.total_weight_s, std::move(full)), true);
        }

        if (pool.empty()) break;
        auto it = pool.begin();
        selected.push_back(route_of(it->first.second));
        pool.erase(it);
    }
    return selected;
}

double weighted_jaccard(const RoadNetwork& net, const Route& r1, const Route& r2) {
    if (r1.empty() && r2.empty()) return 1.0;
    std::unordered_set<int> s1(r1.segment_ids.begin(), r1.segment_ids.end());
    std::unordered_set<int> s2(r2.segment_ids.begin(), r2.segment_ids.end());
    double inter = 0.0, uni = 0.0;
    for (int id : s1) {
        double len = net.segment(id).length_m;
        uni += len;
        if (s2.count(id)) inter += len;
    }
    for (int id : s2) {
        if (!s1.count(id)) uni += net.segment(id).length_m;
    }
    return uni == 0.0 ? 1.0 : inter / uni;
}

CandidateSet candidate_set(const RoadNetwork& net, std::span<const double> weights, int64_t src,
                           int64_t dst, int m, double tau) {
    if (m < 1) throw ValidationError("m must be >= 1");
    if (!(tau > 0.0 && tau <= 1.0)) throw ValidationError("tau must be in (0, 1]");
    auto paths = k_shortest_paths(net, weights, src, dst, 4 * m);

    CandidateSet cs;
    cs.origin_node = src;
    cs.dest_node = dst;
    for (auto& p : paths) {
        bool diverse = true;
        for (const auto& kept : cs.routes) {
            if (weighted_jaccard(net, p, kept) > tau) {
                diverse = false;
                break;
            }
        }
        if (diverse) {
            cs.routes.push_back(std::move(p));
            if (static_cast<int>(cs.routes.size()) == m) break;
        }
    }
    cs.assigned_index = 0;
    return cs;
}

std::vector<double> base_time_weights(const RoadNetwork& net) {
    std::vector<double> w;
    w.reserve(net.num_segments());
    for (const auto& seg : net.segments()) {
        w.push_back(netgraph::segment_base_time(seg));
    }
    return w;
}

} // namespace sparse_eta::pathing
