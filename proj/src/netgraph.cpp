#include "sparse_eta/netgraph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace sparse_eta::netgraph {

using nlohmann::json;

namespace {

const std::array<std::string, kNumRoadClasses> kClassNames = {
    "trunk",         "trunk_link",     "freeway_link",
    "primary",       "primary_link",   "secondary",
    "secondary_link", "tertiary",      "tertiary_link",
};

const std::vector<int> kEmptyOutgoing;

} // namespace

const std::string& road_class_name(RoadClass c) {
    return kClassNames[static_cast<size_t>(c)];
}

RoadClass road_class_from_name(const std::string& name, bool* known) {
    for (int i = 0; i < kNumRoadClasses; ++i) {
        if (kClassNames[static_cast<size_t>(i)] == name) {
            if (known) *known = true;
            return static_cast<RoadClass>(i);
        }
    }
    if (known) *known = false;
    return RoadClass::Tertiary;
}

const std::vector<int>& RoadNetwork::outgoing(int64_t node_id) const {
    auto it = outgoing_.find(node_id);
    return it == outgoing_.end() ? kEmptyOutgoing : it->second;
}

RoadNetwork RoadNetwork::build(std::vector<Node> nodes, const std::vector<SegmentRecord>& records) {
    RoadNetwork net;
    net.nodes_ = std::move(nodes);
    for (size_t i = 0; i < net.nodes_.size(); ++i) {
        if (!net.node_index_.emplace(net.nodes_[i].id, i).second) {
            throw ValidationError("duplicate node id " + std::to_string(net.nodes_[i].id));
        }
    }

    std::vector<std::string> dangling;
    for (const auto& rec : records) {
        for (int64_t endpoint : {rec.from, rec.to}) {
            if (!net.node_index_.count(endpoint)) {
                dangling.push_back("segment " + std::to_string(rec.id) +
                                   " references missing node " + std::to_string(endpoint));
            }
        }
    }
    if (!dangling.empty()) {
        std::string msg = "dangling node references:";
        for (const auto& d : dangling) msg += "\n  " + d;
        throw ValidationError(msg);
    }

    for (const auto& rec : records) {
        if (!(rec.length_m > 0.0)) {
            throw ValidationError("segment " + std::to_string(rec.id) + " has non-positive length");
        }
        if (!(rec.speed_limit_kph > 0.0)) {
            throw ValidationError("segment " + std::to_string(rec.id) + " has non-positive speed limit");
        }
        if (rec.lanes < 1) {
            throw ValidationError("segment " + std::to_string(rec.id) + " has non-positive lanes");
        }
        bool known = true;
        RoadClass cls = road_class_from_name(rec.road_class, &known);
        if (!known) {
            net.warnings_.push_back("segment " + std::to_string(rec.id) + ": unknown road class \"" +
                                    rec.road_class + "\" mapped to tertiary");
        }

        RoadSegment seg;
        seg.logical_id = rec.id;
        seg.from_node = rec.from;
        seg.to_node = rec.to;
        seg.length_m = rec.length_m;
        seg.road_class = cls;
        seg.lanes = rec.lanes;
        seg.oneway = rec.oneway;
        seg.speed_limit_mps = rec.speed_limit_kph * kKphToMps;

        seg.id = static_cast<int>(net.segments_.size());
        net.segments_.push_back(seg);
        if (!rec.oneway) {
            RoadSegment rev = seg;
            rev.id = static_cast<int>(net.segments_.size());
            rev.from_node = seg.to_node;
            rev.to_node = seg.from_node;
            net.segments_.push_back(rev);
        }
    }

    for (const auto& seg : net.segments_) {
        net.outgoing_[seg.from_node].push_back(seg.id);
    }
    for (auto& [node, segs] : net.outgoing_) {
        std::sort(segs.begin(), segs.end());
    }
    return net;
}

RoadNetwork load_network(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open network file: " + path);
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError("network file " + path + ": " + e.what());
    }

    std::vector<Node> nodes;
    std::vector<RoadNetwork::SegmentRecord> records;
    try {
        for (const auto& jn : doc.at("nodes")) {
            Node n;
            n.id = jn.at("id").get<int64_t>();
            n.lon = jn.at("lon").get<double>();
            n.lat = jn.at("lat").get<double>();
            nodes.push_back(n);
        }
        size_t rec_no = 0;
        for (const auto& js : doc.at("segments")) {
            RoadNetwork::SegmentRecord rec;
            try {
                rec.id = js.at("id").get<int64_t>();
                rec.from = js.at("from").get<int64_t>();
                rec.to = js.at("to").get<int64_t>();
                rec.length_m = js.at("length_m").get<double>();
                rec.road_class = js.at("class").get<std::string>();
                rec.lanes = js.at("lanes").get<int>();
                rec.oneway = js.at("oneway").get<bool>();
                rec.speed_limit_kph = js.at("speed_limit_kph").get<double>();
            } catch (const json::exception& e) {
                throw ParseError("network file " + path + ", segment record " +
                                 std::to_string(rec_no) + ": " + e.what());
            }
            records.push_back(rec);
            ++rec_no;
        }
    } catch (const json::exception& e) {
        throw ParseError("network file " + path + ": " + e.what());
    }
    return RoadNetwork::build(std::move(nodes), records);
}

void write_network(const RoadNetwork& net, const std::string& path) {
    json jnodes = json::array();
    for (const auto& n : net.nodes()) {
        jnodes.push_back({{"id", n.id}, {"lon", n.lon}, {"lat", n.lat}});
    }
    // Re-group directed twins into their file records. A reverse twin is the
    // segment that immediately follows its forward partner and shares its
    // logical id.
    json jsegs = json::array();
    const auto& segs = net.segments();
    for (size_t i = 0; i < segs.size(); ++i) {
        const auto& seg = segs[i];
        if (!seg.oneway && i > 0 && segs[i - 1].logical_id == seg.logical_id) {
            continue; // reverse twin, folded into the previous record
        }
        jsegs.push_back({{"id", seg.logical_id},
                         {"from", seg.from_node},
                         {"to", seg.to_node},
                         {"length_m", seg.length_m},
                         {"class", road_class_name(seg.road_class)},
                         {"lanes", seg.lanes},
                         {"oneway", seg.oneway},
                         {"speed_limit_kph", seg.speed_limit_mps / kKphToMps}});
    }
    json doc = {{"nodes", jnodes}, {"segments", jsegs}};
    std::ofstream out(path);
    if (!out) throw ParseError("cannot write network file: " + path);
    out << doc.dump(1) << "\n";
}

RelationalAdjacency build_relational_adjacency(const RoadNetwork& net) {
    // Segments touching each junction, from either end.
    std::unordered_map<int64_t, std::vector<int>> touching;
    for (const auto& seg : net.segments()) {
        touching[seg.from_node].push_back(seg.id);
        touching[seg.to_node].push_back(seg.id);
    }

    RelationalAdjacency adj(net.num_segments());
    std::vector<char> seen(net.num_segments(), 0);
    for (const auto& seg : net.segments()) {
        auto& row = adj.mutable_row(seg.id);
        std::vector<int> marked;
        for (int64_t endpoint : {seg.from_node, seg.to_node}) {
            for (int other : touching[endpoint]) {
                if (other == seg.id || seen[static_cast<size_t>(other)]) continue;
                seen[static_cast<size_t>(other)] = 1;
                marked.push_back(other);
                int rel = static_cast<int>(net.segment(other).road_class);
                row[static_cast<size_t>(rel)].push_back(other);
            }
        }
        for (int m : marked) seen[static_cast<size_t>(m)] = 0;
        for (auto& lst : row) std::sort(lst.begin(), lst.end());
    }
    return adj;
}

double haversine_m(double lon1, double lat1, double lon2, double lat2) {
    constexpr double kEarthRadiusM = 6371000.0;
    constexpr double kDeg = M_PI / 180.0;
    double dlat = (lat2 - lat1) * kDeg;
    double dlon = (lon2 - lon1) * kDeg;
    double a = std::sin(dlat / 2) * std::sin(dlat / 2) +
               std::cos(lat1 * kDeg) * std::cos(lat2 * kDeg) * std::sin(dlon / 2) * std::sin(dlon / 2);
    return 2.0 * kEarthRadiusM * std::asin(std::min(1.0, std::sqrt(a)));
}

int64_t snap_point(const RoadNetwork& net, double lon, double lat, double max_dist_m) {
    if (net.num_nodes() == 0) throw NoNodeInRange("snap_point on empty network");
    double best = std::numeric_limits<double>::infinity();
    int64_t best_id = 0;
    for (const auto& n : net.nodes()) {
        double d = haversine_m(lon, lat, n.lon, n.lat);
        if (d < best || (d == best && n.id < best_id)) {
            best = d;
            best_id = n.id;
        }
    }
    if (best > max_dist_m) {
        std::ostringstream os;
        os << "no node within " << max_dist_m << " m of (" << lon << ", " << lat
           << "); nearest is " << best << " m away";
        throw NoNodeInRange(os.str());
    }
    return best_id;
}

double segment_base_time(const RoadSegment& seg) {
    return seg.length_m / seg.speed_limit_mps;
}

} // namespace sparse_eta::netgraph
