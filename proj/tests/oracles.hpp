#pragma once

// Shared brute-force reference implementations for the test suite. Everything
// here trades efficiency for obviousness so the production code can be checked
// against independently derived answers.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "sparse_eta/netgraph.hpp"
#include "sparse_eta/pathing.hpp"
#include "sparse_eta/random.hpp"
#include "sparse_eta/stmodel.hpp"

namespace oracles {

using sparse_eta::RandomStream;
namespace netgraph = sparse_eta::netgraph;
namespace pathing = sparse_eta::pathing;
namespace stmodel = sparse_eta::stmodel;

inline double rel_err(double got, double want) {
    double denom = std::max({std::abs(got), std::abs(want), 1e-300});
    return std::abs(got - want) / denom;
}

// Every simple path src->dst by exhaustive DFS, sorted by (total weight,
// segment-id sequence) like the production ranking.
inline std::vector<pathing::Route> all_simple_paths(const netgraph::RoadNetwork& net,
                                                    const std::vector<double>& weights,
                                                    int64_t src, int64_t dst) {
    std::vector<pathing::Route> out;
    std::vector<int> stack_segments;
    std::map<int64_t, bool> visited;
    std::function<void(int64_t)> dfs = [&](int64_t node) {
        if (node == dst) {
            out.push_back(pathing::make_route(net, weights, stack_segments));
            return;
        }
        visited[node] = true;
        for (int seg_id : net.outgoing(node)) {
            const auto& seg = net.segment(seg_id);
            if (visited[seg.to_node]) continue;
            stack_segments.push_back(seg_id);
            dfs(seg.to_node);
            stack_segments.pop_back();
        }
        visited[node] = false;
    };
    dfs(src);
    std::sort(out.begin(), out.end(), [](const pathing::Route& a, const pathing::Route& b) {
        if (a.total_weight_s != b.total_weight_s) return a.total_weight_s < b.total_weight_s;
        return a.segment_ids < b.segment_ids;
    });
    return out;
}

// Random digraph as a road network: `n` nodes, each ordered pair keeps an edge
// with probability `p` (as a oneway segment), positive random weights encoded
// through the length at a fixed 1 m/s limit.
inline netgraph::RoadNetwork random_digraph(int n, double p, RandomStream& rng) {
    std::vector<netgraph::Node> nodes;
    for (int i = 0; i < n; ++i) {
        nodes.push_back({i, 0.001 * i, 0.0005 * i});
    }
    std::vector<netgraph::RoadNetwork::SegmentRecord> records;
    static const char* classes[] = {"primary", "secondary", "tertiary", "trunk"};
    int64_t next_id = 0;
    for (int a = 0; a < n; ++a) {
        for (int b = 0; b < n; ++b) {
            if (a == b || rng.uniform() >= p) continue;
            netgraph::RoadNetwork::SegmentRecord rec;
            rec.id = next_id++;
            rec.from = a;
            rec.to = b;
            rec.length_m = 1.0 + 99.0 * rng.uniform(); // weight under a 1 m/s limit
            rec.road_class = classes[rng.uniform_index(4)];
            rec.lanes = 1 + static_cast<int>(rng.uniform_index(4));
            rec.oneway = true;
            rec.speed_limit_kph = 3.6; // 1 m/s
            records.push_back(rec);
        }
    }
    return netgraph::RoadNetwork::build(std::move(nodes), records);
}

// Small two-row lattice with mixed classes; enough structure to activate
// several relation types.
inline netgraph::RoadNetwork tiny_lattice(int cols) {
    std::vector<netgraph::Node> nodes;
    for (int r = 0; r < 2; ++r) {
        for (int c = 0; c < cols; ++c) {
            nodes.push_back({r * cols + c, 0.002 * c, 0.002 * r});
        }
    }
    std::vector<netgraph::RoadNetwork::SegmentRecord> records;
    static const char* classes[] = {"primary", "secondary", "tertiary"};
    int64_t next_id = 0;
    auto add = [&](int64_t a, int64_t b, int pick) {
        netgraph::RoadNetwork::SegmentRecord rec;
        rec.id = next_id;
        rec.from = a;
        rec.to = b;
        rec.length_m = 150.0 + 50.0 * static_cast<double>(next_id % 3);
        rec.road_class = classes[pick % 3];
        rec.lanes = 1 + static_cast<int>(next_id % 4);
        rec.oneway = false;
        rec.speed_limit_kph = 30.0 + 10.0 * static_cast<double>(pick % 3);
        records.push_back(rec);
        ++next_id;
    };
    for (int r = 0; r < 2; ++r) {
        for (int c = 0; c + 1 < cols; ++c) add(r * cols + c, r * cols + c + 1, r + c);
    }
    for (int c = 0; c < cols; ++c) add(c, cols + c, c);
    return netgraph::RoadNetwork::build(std::move(nodes), records);
}

// Central finite difference of `loss` with respect to every parameter entry.
inline stmodel::ModelGrads fd_gradients(stmodel::ModelParams params,
                                        const std::function<double(const stmodel::ModelParams&)>& loss,
                                        double eps) {
    stmodel::ModelGrads out = stmodel::ModelGrads::zeros_like(params);
    for (int mi = 0; mi < stmodel::ModelParams::kNumMats; ++mi) {
        auto& mat = params.at(mi);
        for (size_t k = 0; k < mat.a.size(); ++k) {
            double keep = mat.a[k];
            mat.a[k] = keep + eps;
            double up = loss(params);
            mat.a[k] = keep - eps;
            double down = loss(params);
            mat.a[k] = keep;
            out.g[static_cast<size_t>(mi)].a[k] = (up - down) / (2.0 * eps);
        }
    }
    return out;
}

// Finite difference restricted to entries where the analytic gradient is
// already known to be material; returns the worst relative error over them.
inline double fd_check_material(stmodel::ModelParams params,
                                const std::function<double(const stmodel::ModelParams&)>& loss,
                                const stmodel::ModelGrads& analytic, double eps,
                                double grad_floor) {
    double worst = 0.0;
    for (int mi = 0; mi < stmodel::ModelParams::kNumMats; ++mi) {
        auto& mat = params.at(mi);
        const auto& g = analytic.g[static_cast<size_t>(mi)];
        for (size_t k = 0; k < mat.a.size(); ++k) {
            if (std::abs(g.a[k]) <= grad_floor) continue;
            double keep = mat.a[k];
            mat.a[k] = keep + eps;
            double up = loss(params);
            mat.a[k] = keep - eps;
            double down = loss(params);
            mat.a[k] = keep;
            double fd = (up - down) / (2.0 * eps);
            worst = std::max(worst, std::abs(fd - g.a[k]) /
                                        std::max({std::abs(fd), std::abs(g.a[k]), 1e-12}));
        }
    }
    return worst;
}

} // namespace oracles
