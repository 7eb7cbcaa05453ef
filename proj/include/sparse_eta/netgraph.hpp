#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "sparse_eta/common.hpp"

namespace sparse_eta::netgraph {

// The nine road classes carried by the network format.
enum class RoadClass : int {
    Trunk = 0,
    TrunkLink,
    FreewayLink,
    Primary,
    PrimaryLink,
    Secondary,
    SecondaryLink,
    Tertiary,
    TertiaryLink,
};

inline constexpr int kNumRoadClasses = 9;

const std::string& road_class_name(RoadClass c);

// Parses a class name; unknown names map to Tertiary and set `known` false.
RoadClass road_class_from_name(const std::string& name, bool* known = nullptr);

struct Node {
    int64_t id = 0;
    double lon = 0.0; // degrees
    double lat = 0.0; // degrees
};

struct RoadSegment {
    int id = 0;          // dense internal id in [0, |E|)
    int64_t logical_id = 0; // file record id; shared by the two directions of a two-way road
    int64_t from_node = 0;
    int64_t to_node = 0;
    double length_m = 0.0;
    RoadClass road_class = RoadClass::Tertiary;
    int lanes = 1;
    bool oneway = true; // as declared in the file record
    double speed_limit_mps = 0.0;
};

class RoadNetwork {
public:
    const std::vector<Node>& nodes() const { return nodes_; }
    const std::vector<RoadSegment>& segments() const { return segments_; }
    const RoadSegment& segment(int id) const { return segments_[static_cast<size_t>(id)]; }
    size_t num_nodes() const { return nodes_.size(); }
    size_t num_segments() const { return segments_.size(); }

    bool has_node(int64_t id) const { return node_index_.count(id) > 0; }
    const Node& node(int64_t id) const { return nodes_[node_index_.at(id)]; }

    // Outgoing segment ids of a node, in segment-id order.
    const std::vector<int>& outgoing(int64_t node_id) const;

    // Warnings collected during construction (e.g. unknown road classes).
    const std::vector<std::string>& warnings() const { return warnings_; }

    // Builds a network from raw parts, assigning dense segment ids in input
    // order and expanding oneway=false records into directed twins.
    struct SegmentRecord {
        int64_t id = 0;
        int64_t from = 0;
        int64_t to = 0;
        double length_m = 0.0;
        std::string road_class;
        int lanes = 1;
        bool oneway = true;
        double speed_limit_kph = 0.0;
    };
    static RoadNetwork build(std::vector<Node> nodes, const std::vector<SegmentRecord>& records);

private:
    std::vector<Node> nodes_;
    std::vector<RoadSegment> segments_;
    std::unordered_map<int64_t, size_t> node_index_;
    std::unordered_map<int64_t, std::vector<int>> outgoing_;
    std::vector<std::string> warnings_;
};

// Per relation type (keyed on the neighbor's road class), the neighbor list of
// every segment-vertex and its normalization constant.
class RelationalAdjacency {
public:
    explicit RelationalAdjacency(size_t num_segments = 0) : neighbors_(num_segments) {}

    const std::vector<int>& neighbors(int seg_id, int relation) const {
        return neighbors_[static_cast<size_t>(seg_id)][static_cast<size_t>(relation)];
    }
    double norm_const(int seg_id, int relation) const {
        size_t n = neighbors_[static_cast<size_t>(seg_id)][static_cast<size_t>(relation)].size();
        return n == 0 ? 0.0 : static_cast<double>(n);
    }
    size_t num_vertices() const { return neighbors_.size(); }

    std::array<std::vector<int>, kNumRoadClasses>& mutable_row(int seg_id) {
        return neighbors_[static_cast<size_t>(seg_id)];
    }

private:
    std::vector<std::array<std::vector<int>, kNumRoadClasses>> neighbors_;
};

RoadNetwork load_network(const std::string& path);
void write_network(const RoadNetwork& net, const std::string& path);

RelationalAdjacency build_relational_adjacency(const RoadNetwork& net);

// Nearest node within `max_dist_m`; ties broken by smallest node id.
// Throws NoNodeInRange when the nearest node is farther than the radius.
int64_t snap_point(const RoadNetwork& net, double lon, double lat, double max_dist_m = 100.0);

// Free-flow traversal time, length / speed limit.
double segment_base_time(const RoadSegment& seg);

// Great-circle distance in meters between two WGS84 points.
double haversine_m(double lon1, double lat1, double lon2, double lat2);

} // namespace sparse_eta::netgraph
