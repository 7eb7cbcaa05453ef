#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sparse_eta/netgraph.hpp"

namespace sparse_eta::pathing {

struct Route {
    std::vector<int> segment_ids;
    double total_length_m = 0.0;
    double total_weight_s = 0.0;

    bool empty() const { return segment_ids.empty(); }
};

// Builds a Route from a segment-id sequence, accumulating length and weight
// left-to-right so equal sequences always produce bit-identical totals.
Route make_route(const netgraph::RoadNetwork& net, std::span<const double> weights,
                 const std::vector<int>& segment_ids);

struct CandidateSet {
    int64_t origin_node = 0;
    int64_t dest_node = 0;
    std::vector<Route> routes;
    int assigned_index = 0;
};

// Minimum-weight simple path; ties broken by lexicographically smaller
// segment-id sequence. Throws NoPathError when dst is unreachable.
Route shortest_path(const netgraph::RoadNetwork& net, std::span<const double> weights,
                    int64_t src, int64_t dst);

// Up to k loopless paths in nondecreasing (weight, segment-sequence) order,
// exactly the k smallest over all simple paths. Throws NoPathError when no
// path exists.
std::vector<Route> k_shortest_paths(const netgraph::RoadNetwork& net,
                                    std::span<const double> weights, int64_t src, int64_t dst,
                                    int k);

// Length-weighted intersection-over-union of the two routes' segment sets.
// Both routes empty is defined as 1.0.
double weighted_jaccard(const netgraph::RoadNetwork& net, const Route& r1, const Route& r2);

// Greedy diversity filter over 4*m oversampled shortest paths: a path is
// accepted iff its wJCD with every already-accepted path is <= tau.
CandidateSet candidate_set(const netgraph::RoadNetwork& net, std::span<const double> weights,
                           int64_t src, int64_t dst, int m, double tau);

// Free-flow weights, one entry per segment.
std::vector<double> base_time_weights(const netgraph::RoadNetwork& net);

} // namespace sparse_eta::pathing
