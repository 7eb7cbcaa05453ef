#include "sparse_eta/simkit.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <unordered_map>

#include "json.hpp"
#include "sparse_eta/serialize.hpp"

namespace sparse_eta::simkit {

namespace {

constexpr double kMetersPerDegLat = 111320.0;

void require(bool cond, const std::string& what) {
    if (!cond) throw ValidationError("simkit: " + what);
}

// Node ids of a segment chain, front node first; validates contiguity.
std::vector<int64_t> chain_nodes(const netgraph::RoadNetwork& net, const std::vector<int>& ids) {
    require(!ids.empty(), "route has no segments");
    std::vector<int64_t> nodes;
    nodes.reserve(ids.size() + 1);
    nodes.push_back(net.segment(ids[0]).from_node);
    for (size_t i = 0; i < ids.size(); ++i) {
        const auto& seg = net.segment(ids[i]);
        require(seg.from_node == nodes.back(), "route segments are not contiguous");
        nodes.push_back(seg.to_node);
    }
    return nodes;
}

} // namespace

netgraph::RoadNetwork gen_grid_network(int rows, int cols, double spacing_m,
                                       const GridClassPlan& plan, uint64_t seed) {
    (void)seed;
    require(rows >= 2 && cols >= 2, "grid needs at least 2x2 nodes");
    require(spacing_m > 0.0, "grid spacing must be positive");
    require(plan.artery_stride >= 1, "artery stride must be >= 1");

    std::vector<netgraph::Node> nodes;
    nodes.reserve(static_cast<size_t>(rows) * static_cast<size_t>(cols));
    double lat0 = plan.origin_lat;
    double dlat = spacing_m / kMetersPerDegLat;
    double dlon = spacing_m / (kMetersPerDegLat * std::cos(lat0 * M_PI / 180.0));
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            netgraph::Node n;
            n.id = static_cast<int64_t>(r) * cols + c;
            n.lon = plan.origin_lon + c * dlon;
            n.lat = lat0 + r * dlat;
            nodes.push_back(n);
        }
    }

    std::vector<netgraph::RoadNetwork::SegmentRecord> records;
    int64_t next_id = 0;
    auto add = [&](int64_t from, int64_t to, bool artery) {
        netgraph::RoadNetwork::SegmentRecord rec;
        rec.id = next_id++;
        rec.from = from;
        rec.to = to;
        rec.length_m = spacing_m;
        rec.road_class = artery ? "primary" : "tertiary";
        rec.lanes = artery ? plan.artery_lanes : plan.local_lanes;
        rec.oneway = false;
        rec.speed_limit_kph = artery ? plan.artery_kph : plan.local_kph;
        records.push_back(rec);
    };
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c + 1 < cols; ++c) {
            add(static_cast<int64_t>(r) * cols + c, static_cast<int64_t>(r) * cols + c + 1,
                r % plan.artery_stride == 0);
        }
    }
    for (int r = 0; r + 1 < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            add(static_cast<int64_t>(r) * cols + c, static_cast<int64_t>(r + 1) * cols + c, false);
        }
    }
    return netgraph::RoadNetwork::build(std::move(nodes), records);
}

double congestion_multiplier(const RushProfile& profile, double peak, double sod) {
    auto window = [&](double start, double end) -> double {
        if (sod >= start && sod <= end) return peak;
        if (sod >= start - profile.ramp_s && sod < start) {
            return 1.0 + (peak - 1.0) * (sod - (start - profile.ramp_s)) / profile.ramp_s;
        }
        if (sod > end && sod <= end + profile.ramp_s) {
            return 1.0 + (peak - 1.0) * (end + profile.ramp_s - sod) / profile.ramp_s;
        }
        return 1.0;
    };
    return std::max(window(profile.morning_start_s, profile.morning_end_s),
                    window(profile.evening_start_s, profile.evening_end_s));
}

double class_peak(const RushProfile& profile, netgraph::RoadClass c) {
    switch (c) {
        case netgraph::RoadClass::Trunk:
        case netgraph::RoadClass::TrunkLink:
        case netgraph::RoadClass::FreewayLink:
        case netgraph::RoadClass::Primary:
        case netgraph::RoadClass::PrimaryLink:
            return profile.artery_peak;
        default:
            return profile.local_peak;
    }
}

GroundTruth gen_ground_truth(const netgraph::RoadNetwork& net, const RushProfile& profile,
                             uint64_t seed) {
    require(profile.artery_peak >= 1.0 && profile.local_peak >= 1.0, "peak multipliers must be >= 1");
    require(profile.cv >= 0.0, "cv must be nonnegative");
    require(profile.ramp_s > 0.0, "ramp must be positive");

    int n = static_cast<int>(net.num_segments());
    GroundTruth truth;
    truth.seed = seed;
    truth.true_mu = Mat(n, kTimeSteps);
    truth.true_sigma = Mat(n, kTimeSteps);
    truth.profile_artery.resize(kTimeSteps);
    truth.profile_local.resize(kTimeSteps);
    for (int ts = 0; ts < kTimeSteps; ++ts) {
        double sod = static_cast<double>(ts) * kSecondsPerStep;
        truth.profile_artery[static_cast<size_t>(ts)] =
            congestion_multiplier(profile, profile.artery_peak, sod);
        truth.profile_local[static_cast<size_t>(ts)] =
            congestion_multiplier(profile, profile.local_peak, sod);
    }

    RandomStream rng(seed);
    for (int i = 0; i < n; ++i) {
        const auto& seg = net.segment(i);
        double base = netgraph::segment_base_time(seg);
        double peak = class_peak(profile, seg.road_class);
        double noise = profile.segment_noise > 0.0 ? std::exp(rng.normal(0.0, profile.segment_noise)) : 1.0;
        for (int ts = 0; ts < kTimeSteps; ++ts) {
            double sod = static_cast<double>(ts) * kSecondsPerStep;
            double mu = base * congestion_multiplier(profile, peak, sod) * noise;
            truth.true_mu.at(i, ts) = mu;
            truth.true_sigma.at(i, ts) = profile.cv * mu;
        }
    }
    return truth;
}

std::pair<double, double> to_lognormal(double mu, double sigma) {
    if (!(mu > 0.0)) throw ValidationError("to_lognormal: mu must be positive");
    if (sigma < 0.0) throw ValidationError("to_lognormal: sigma must be nonnegative");
    if (sigma == 0.0) return {std::log(mu), 0.0};
    double log_var = std::log1p(sigma * sigma / (mu * mu));
    return {std::log(mu) - 0.5 * log_var, std::sqrt(log_var)};
}

double sample_travel_time(double mu, double sigma, RandomStream& rng) {
    if (sigma == 0.0) return mu;
    auto [lm, ls] = to_lognormal(mu, sigma);
    double lo = 0.25 * mu;
    double hi = 4.0 * mu;
    for (int tries = 0; tries < 1000; ++tries) {
        double x = std::exp(rng.normal(lm, ls));
        if (x >= lo && x <= hi) return x;
    }
    // The acceptance region covers nearly all mass at any sane cv; landing
    // here means a degenerate configuration, so fall back to the mean.
    return mu;
}

std::pair<int64_t, int64_t> sample_od(const netgraph::RoadNetwork& net, int min_hops,
                                      RandomStream& rng) {
    require(min_hops >= 1, "min_hops must be >= 1");
    const auto& nodes = net.nodes();
    require(nodes.size() >= 2, "need at least two nodes");
    for (int tries = 0; tries < 10000; ++tries) {
        int64_t a = nodes[rng.uniform_index(nodes.size())].id;
        int64_t b = nodes[rng.uniform_index(nodes.size())].id;
        if (a == b) continue;
        // Unweighted hop distance by breadth-first search.
        std::unordered_map<int64_t, int> dist;
        std::deque<int64_t> queue;
        dist[a] = 0;
        queue.push_back(a);
        int found = -1;
        while (!queue.empty() && found < 0) {
            int64_t u = queue.front();
            queue.pop_front();
            for (int sid : net.outgoing(u)) {
                int64_t v = net.segment(sid).to_node;
                if (dist.count(v)) continue;
                dist[v] = dist[u] + 1;
                if (v == b) {
                    found = dist[v];
                    break;
                }
                queue.push_back(v);
            }
        }
        if (found >= min_hops) return {a, b};
    }
    throw ValidationError("simkit: no node pair at distance >= " + std::to_string(min_hops) +
                          " found after 10000 tries");
}

DenseTrajectory gen_trip(const netgraph::RoadNetwork& net, const GroundTruth& truth,
                         const TripSpec& spec, int64_t trajectory_id, RandomStream& rng) {
    int depart_ts = time_step_of(spec.departure_unix);
    std::vector<double> weights(net.num_segments());
    for (size_t i = 0; i < weights.size(); ++i) {
        weights[i] = truth.true_mu.at(static_cast<int>(i), depart_ts);
    }
    std::vector<pathing::Route> top =
        pathing::k_shortest_paths(net, weights, spec.origin_node, spec.dest_node, 3);

    double total = 0.0;
    for (size_t i = 0; i < top.size(); ++i) total += spec.route_probs[i];
    require(total > 0.0, "route choice probabilities sum to zero");
    double u = rng.uniform() * total;
    size_t rank = 0;
    double acc = 0.0;
    for (size_t i = 0; i < top.size(); ++i) {
        acc += spec.route_probs[i];
        if (u < acc) {
            rank = i;
            break;
        }
        rank = i;
    }

    DenseTrajectory out;
    out.trajectory_id = trajectory_id;
    out.route = top[rank];
    out.route_rank = static_cast<int>(rank);
    out.nodes = chain_nodes(net, out.route.segment_ids);
    out.context.time_step = depart_ts;
    out.context.day_of_week = day_of_week_of(spec.departure_unix);
    out.context.weather_id = spec.weather_id;
    out.context.holiday_id = spec.holiday_id;

    double t = spec.departure_unix;
    out.node_times.push_back(t);
    for (int sid : out.route.segment_ids) {
        int ts = time_step_of(t);
        double mu = truth.true_mu.at(sid, ts);
        double sigma = truth.true_sigma.at(sid, ts);
        t += sample_travel_time(mu, sigma, rng);
        out.node_times.push_back(t);
    }
    return out;
}

SparseTrajectory sparsify(const netgraph::RoadNetwork& net, const DenseTrajectory& dense,
                          double keep_ratio, double jitter_m, RandomStream* rng) {
    require(keep_ratio > 0.0 && keep_ratio <= 1.0, "keep_ratio must be in (0, 1]");
    require(dense.node_times.size() == dense.nodes.size(), "dense trajectory shape mismatch");
    require(dense.nodes.size() >= 2, "dense trajectory too short");

    int stride = std::max(1, static_cast<int>(std::lround(1.0 / keep_ratio)));
    double t0 = dense.node_times.front();
    double t_end = dense.node_times.back();

    // Nearest route node for the position at time `t`: the from-node while
    // less than halfway through the current segment, the to-node after.
    size_t cursor = 0;
    auto node_index_at = [&](double t) -> size_t {
        while (cursor + 2 < dense.node_times.size() && dense.node_times[cursor + 1] <= t) ++cursor;
        double a = dense.node_times[cursor];
        double b = dense.node_times[cursor + 1];
        if (t >= b) return cursor + 1;
        double frac = b > a ? (t - a) / (b - a) : 1.0;
        return frac < 0.5 ? cursor : cursor + 1;
    };

    std::vector<size_t> kept;
    auto push_node = [&](size_t idx) {
        if (!kept.empty() && kept.back() == idx) return;
        kept.push_back(idx);
    };
    push_node(node_index_at(t0));
    for (int j = stride;; j += stride) {
        double t = t0 + kTickSeconds * static_cast<double>(j);
        if (t >= t_end) break;
        push_node(node_index_at(t));
    }
    push_node(dense.nodes.size() - 1);
    if (kept.size() < 2) {
        kept = {0, dense.nodes.size() - 1};
    }

    SparseTrajectory out;
    out.trajectory_id = dense.trajectory_id;
    out.source_dense_id = dense.trajectory_id;
    out.weather_id = dense.context.weather_id;
    out.holiday_id = dense.context.holiday_id;
    out.fixes.reserve(kept.size());
    for (size_t idx : kept) {
        const auto& node = net.node(dense.nodes[idx]);
        GpsFix fix;
        fix.lon = node.lon;
        fix.lat = node.lat;
        fix.unix_ts = dense.node_times[idx];
        if (jitter_m > 0.0 && rng != nullptr) {
            fix.lat += rng->normal(0.0, jitter_m / kMetersPerDegLat);
            fix.lon += rng->normal(0.0, jitter_m / (kMetersPerDegLat * std::cos(node.lat * M_PI / 180.0)));
        }
        out.fixes.push_back(fix);
    }
    return out;
}

void write_sparse_trajectories(const std::vector<SparseTrajectory>& trajs, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot open " + path + " for writing");
    for (const auto& tr : trajs) {
        nlohmann::json fixes = nlohmann::json::array();
        for (const auto& f : tr.fixes) {
            fixes.push_back(nlohmann::json::array({f.lon, f.lat, f.unix_ts}));
        }
        nlohmann::json rec{{"id", tr.trajectory_id},
                           {"fixes", fixes},
                           {"weather_id", tr.weather_id},
                           {"holiday_id", tr.holiday_id}};
        out << rec.dump() << "\n";
    }
    if (!out) throw ValidationError("failed writing " + path);
}

std::vector<SparseTrajectory> load_sparse_trajectories(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open " + path);
    std::vector<SparseTrajectory> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        SparseTrajectory tr;
        tr.trajectory_id = rec.at("id").get<int64_t>();
        tr.weather_id = rec.value("weather_id", 0);
        tr.holiday_id = rec.value("holiday_id", 0);
        for (const auto& f : rec.at("fixes")) {
            if (!f.is_array() || f.size() != 3) {
                throw ParseError(path + ":" + std::to_string(lineno) + ": fix must be [lon, lat, ts]");
            }
            tr.fixes.push_back({f[0].get<double>(), f[1].get<double>(), f[2].get<double>()});
        }
        if (tr.fixes.size() < 2) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": trajectory needs >= 2 fixes");
        }
        for (size_t i = 1; i < tr.fixes.size(); ++i) {
            if (!(tr.fixes[i].unix_ts > tr.fixes[i - 1].unix_ts)) {
                throw ParseError(path + ":" + std::to_string(lineno) +
                                 ": timestamps must be strictly increasing");
            }
        }
        out.push_back(std::move(tr));
    }
    return out;
}

void write_dense_sidecar(const std::vector<DenseTrajectory>& trajs, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot open " + path + " for writing");
    for (const auto& tr : trajs) {
        nlohmann::json rec{{"id", tr.trajectory_id},
                           {"segment_ids", tr.route.segment_ids},
                           {"node_times", tr.node_times},
                           {"route_rank", tr.route_rank},
                           {"weather_id", tr.context.weather_id},
                           {"holiday_id", tr.context.holiday_id}};
        out << rec.dump() << "\n";
    }
    if (!out) throw ValidationError("failed writing " + path);
}

std::vector<DenseTrajectory> load_dense_sidecar(const std::string& path,
                                                const netgraph::RoadNetwork& net) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open " + path);
    std::vector<DenseTrajectory> out;
    std::vector<double> base = pathing::base_time_weights(net);
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        DenseTrajectory tr;
        tr.trajectory_id = rec.at("id").get<int64_t>();
        std::vector<int> ids = rec.at("segment_ids").get<std::vector<int>>();
        tr.node_times = rec.at("node_times").get<std::vector<double>>();
        tr.route_rank = rec.value("route_rank", 0);
        tr.context.weather_id = rec.value("weather_id", 0);
        tr.context.holiday_id = rec.value("holiday_id", 0);
        tr.route = pathing::make_route(net, base, ids);
        tr.nodes = chain_nodes(net, ids);
        if (tr.node_times.size() != tr.nodes.size()) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": node_times/route mismatch");
        }
        tr.context.time_step = time_step_of(tr.node_times.front());
        tr.context.day_of_week = day_of_week_of(tr.node_times.front());
        out.push_back(std::move(tr));
    }
    return out;
}

void write_ground_truth(const GroundTruth& truth, const RushProfile& profile,
                        const std::string& path) {
    nlohmann::json j{
        {"seed", truth.seed},
        {"true_mu", serialize::mat_to_json(truth.true_mu)},
        {"true_sigma", serialize::mat_to_json(truth.true_sigma)},
        {"profile_artery", truth.profile_artery},
        {"profile_local", truth.profile_local},
        {"cv", profile.cv},
        {"segment_noise", profile.segment_noise},
    };
    serialize::write_json_file(j, path);
}

GroundTruth load_ground_truth(const std::string& path) {
    nlohmann::json j = serialize::read_json_file(path);
    GroundTruth truth;
    truth.seed = j.at("seed").get<uint64_t>();
    truth.true_mu = serialize::mat_from_json(j.at("true_mu"));
    truth.true_sigma = serialize::mat_from_json(j.at("true_sigma"));
    truth.profile_artery = j.at("profile_artery").get<std::vector<double>>();
    truth.profile_local = j.at("profile_local").get<std::vector<double>>();
    return truth;
}

} // namespace sparse_eta::simkit
