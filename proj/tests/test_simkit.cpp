#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <queue>
#include <set>

#include "oracles.hpp"
#include "sparse_eta/simkit.hpp"

using namespace sparse_eta;
using namespace sparse_eta::simkit;

namespace {

// BFS hop distance in the directed segment graph.
int hop_distance(const netgraph::RoadNetwork& net, int64_t src, int64_t dst) {
    std::map<int64_t, int> dist{{src, 0}};
    std::queue<int64_t> q;
    q.push(src);
    while (!q.empty()) {
        int64_t u = q.front();
        q.pop();
        if (u == dst) return dist[u];
        for (int sid : net.outgoing(u)) {
            int64_t v = net.segment(sid).to_node;
            if (!dist.count(v)) {
                dist[v] = dist[u] + 1;
                q.push(v);
            }
        }
    }
    return -1;
}

GroundTruth flat_truth(const netgraph::RoadNetwork& net) {
    RushProfile p;
    p.cv = 0.0;
    p.segment_noise = 0.0;
    p.artery_peak = 1.0;
    p.local_peak = 1.0;
    return gen_ground_truth(net, p, 1);
}

} // namespace

TEST_CASE("lattice has the expected node and segment counts") {
    GridClassPlan plan;
    auto net = gen_grid_network(8, 8, 500.0, plan, 1);
    CHECK(net.num_nodes() == 64);
    // 2 * (rows*(cols-1) + cols*(rows-1)) directed segments.
    CHECK(net.num_segments() == 224);
    auto small = gen_grid_network(2, 2, 400.0, plan, 9);
    CHECK(small.num_nodes() == 4);
    CHECK(small.num_segments() == 8);
    CHECK_THROWS_AS(gen_grid_network(1, 5, 500.0, plan, 1), ValidationError);
}

TEST_CASE("lattice class plan marks artery rows and leaves locals residential") {
    GridClassPlan plan; // stride 2: rows 0, 2, 4, ...
    auto net = gen_grid_network(4, 4, 500.0, plan, 1);
    int artery = 0, local = 0;
    for (size_t e = 0; e < net.num_segments(); ++e) {
        const auto& s = net.segment(static_cast<int>(e));
        CHECK(s.length_m == 500.0);
        if (s.road_class == netgraph::RoadClass::Primary) {
            ++artery;
            CHECK(s.lanes == plan.artery_lanes);
            CHECK(s.speed_limit_mps == doctest::Approx(plan.artery_kph / 3.6).epsilon(1e-15));
            // Horizontal: same latitude at both endpoints.
            CHECK(net.node(s.from_node).lat == net.node(s.to_node).lat);
        } else {
            ++local;
            CHECK(s.road_class == netgraph::RoadClass::Tertiary);
            CHECK(s.lanes == plan.local_lanes);
            CHECK(s.speed_limit_mps == doctest::Approx(plan.local_kph / 3.6).epsilon(1e-15));
        }
    }
    // Rows 0 and 2 are arteries: 2 rows * 3 horizontal edges * 2 directions.
    CHECK(artery == 12);
    CHECK(artery + local == static_cast<int>(net.num_segments()));
}

TEST_CASE("congestion curve hits the plateau, ramps linearly, and rests at one") {
    RushProfile p;
    CHECK(congestion_multiplier(p, 2.5, 3 * 3600.0) == 1.0);
    CHECK(congestion_multiplier(p, 2.5, 8.0 * 3600) == 2.5);
    CHECK(congestion_multiplier(p, 2.5, 9.5 * 3600) == 2.5);
    CHECK(congestion_multiplier(p, 2.5, 8.75 * 3600) == 2.5);
    // Mid-ramp: 15 min before the morning plateau.
    double mid = congestion_multiplier(p, 2.5, 8.0 * 3600 - 900.0);
    CHECK(mid == doctest::Approx(1.0 + 1.5 * 0.5).epsilon(1e-12));
    // Just outside the ramps.
    CHECK(congestion_multiplier(p, 2.5, 8.0 * 3600 - 1801.0) == 1.0);
    CHECK(congestion_multiplier(p, 2.5, 9.5 * 3600 + 1801.0) == 1.0);
    // Evening peak with the local level.
    CHECK(congestion_multiplier(p, 1.5, 17.5 * 3600) == 1.5);
    CHECK(class_peak(p, netgraph::RoadClass::Trunk) == p.artery_peak);
    CHECK(class_peak(p, netgraph::RoadClass::Primary) == p.artery_peak);
    CHECK(class_peak(p, netgraph::RoadClass::Secondary) == p.local_peak);
    CHECK(class_peak(p, netgraph::RoadClass::Tertiary) == p.local_peak);
}

TEST_CASE("ground truth scales base times by the slot-start multiplier") {
    GridClassPlan plan;
    auto net = gen_grid_network(3, 3, 500.0, plan, 1);
    RushProfile p;
    p.segment_noise = 0.0; // exact check without the lognormal factor
    auto truth = gen_ground_truth(net, p, 42);
    REQUIRE(truth.true_mu.rows == static_cast<int>(net.num_segments()));
    REQUIRE(truth.true_mu.cols == kTimeSteps);
    for (int e = 0; e < truth.true_mu.rows; ++e) {
        const auto& seg = net.segment(e);
        double base = netgraph::segment_base_time(seg);
        double peak = class_peak(p, seg.road_class);
        for (int ts = 0; ts < kTimeSteps; ++ts) {
            double want = base * congestion_multiplier(p, peak, ts * 1800.0);
            CHECK(truth.true_mu.at(e, ts) == doctest::Approx(want).epsilon(1e-12));
            CHECK(truth.true_sigma.at(e, ts) ==
                  doctest::Approx(p.cv * truth.true_mu.at(e, ts)).epsilon(1e-12));
        }
    }
    CHECK(truth.profile_artery[16] == 2.5); // 08:00
    CHECK(truth.profile_local[35] == 1.5);  // 17:30
    CHECK(truth.profile_artery[0] == 1.0);
}

TEST_CASE("per-segment noise perturbs mu but is shared across time steps") {
    GridClassPlan plan;
    auto net = gen_grid_network(3, 3, 500.0, plan, 1);
    RushProfile p;
    p.segment_noise = 0.2;
    auto truth = gen_ground_truth(net, p, 7);
    auto clean = flat_truth(net);
    int differing = 0;
    for (int e = 0; e < truth.true_mu.rows; ++e) {
        double base = netgraph::segment_base_time(net.segment(e));
        // Off-peak slot 0: mu = base * noise_factor, so the factor is recoverable.
        double factor = truth.true_mu.at(e, 0) / base;
        if (std::abs(factor - 1.0) > 1e-9) ++differing;
        double peak = class_peak(p, net.segment(e).road_class);
        for (int ts = 0; ts < kTimeSteps; ++ts) {
            double mult = congestion_multiplier(p, peak, ts * 1800.0);
            CHECK(truth.true_mu.at(e, ts) == doctest::Approx(base * mult * factor).epsilon(1e-10));
        }
    }
    CHECK(differing == truth.true_mu.rows); // noise with stddev 0.2 never lands on exactly 1
    CHECK(clean.true_mu.at(0, 0) == netgraph::segment_base_time(net.segment(0)));
    // Same seed reproduces the same table.
    auto again = gen_ground_truth(net, p, 7);
    CHECK(again.true_mu.a == truth.true_mu.a);
}

TEST_CASE("lognormal moment matching round-trips mean and standard deviation") {
    RandomStream rng(5);
    double worst = 0.0;
    for (int i = 0; i < 10000; ++i) {
        double mu = rng.uniform(1.0, 2000.0);
        double sigma = rng.uniform(1e-3, 0.8) * mu;
        auto [m, s] = to_lognormal(mu, sigma);
        double var = std::expm1(s * s) * std::exp(2 * m + s * s);
        double mean = std::exp(m + 0.5 * s * s);
        worst = std::max(worst, oracles::rel_err(mean, mu));
        worst = std::max(worst, oracles::rel_err(std::sqrt(var), sigma));
    }
    CHECK(worst <= 1e-10);
    CHECK_THROWS_AS(to_lognormal(-5.0, 1.0), ValidationError);
    CHECK_THROWS_AS(to_lognormal(10.0, -1.0), ValidationError);
}

TEST_CASE("travel-time draws are truncated and approximately unbiased") {
    RandomStream rng(99);
    double mu = 120.0, sigma = 24.0;
    double acc = 0.0;
    int n = 20000;
    for (int i = 0; i < n; ++i) {
        double d = sample_travel_time(mu, sigma, rng);
        CHECK(d >= 0.25 * mu);
        CHECK(d <= 4.0 * mu);
        acc += d;
    }
    // The [0.25 mu, 4 mu] window clips almost no mass at cv = 0.2, so the
    // sample mean stays close to mu.
    CHECK(acc / n == doctest::Approx(mu).epsilon(0.01));
    // sigma = 0 degenerates to the mean exactly.
    CHECK(sample_travel_time(50.0, 0.0, rng) == 50.0);
}

TEST_CASE("od sampling respects the minimum hop distance") {
    GridClassPlan plan;
    auto net = gen_grid_network(4, 4, 500.0, plan, 1);
    RandomStream rng(3);
    std::set<std::pair<int64_t, int64_t>> seen;
    for (int i = 0; i < 200; ++i) {
        auto [o, d] = sample_od(net, 4, rng);
        CHECK(o != d);
        CHECK(hop_distance(net, o, d) >= 4);
        seen.insert({o, d});
    }
    CHECK(seen.size() > 20); // draws cover many distinct pairs
    // Impossible requirement: max hop distance on a 2x2 lattice is 2.
    auto tiny = gen_grid_network(2, 2, 500.0, plan, 1);
    CHECK_THROWS_AS(sample_od(tiny, 10, rng), ValidationError);
}

TEST_CASE("generated trips ride one of the three fastest truth routes") {
    GridClassPlan plan;
    auto net = gen_grid_network(4, 4, 500.0, plan, 1);
    RushProfile prof;
    prof.segment_noise = 0.1;
    auto truth = gen_ground_truth(net, prof, 11);
    RandomStream rng(17);
    TripSpec spec;
    spec.origin_node = 0;
    spec.dest_node = 15;
    spec.departure_unix = 1767571200.0 + 12 * 1800.0; // 06:00 local
    int step = 12;
    // Oracle: three fastest simple paths under true_mu at the departure step.
    std::vector<double> w(net.num_segments());
    for (size_t e = 0; e < w.size(); ++e) w[e] = truth.true_mu.at(static_cast<int>(e), step);
    auto ranked = pathing::k_shortest_paths(net, w, spec.origin_node, spec.dest_node, 3);
    REQUIRE(!ranked.empty());
    std::array<int, 3> rank_counts{0, 0, 0};
    for (int i = 0; i < 300; ++i) {
        auto dense = gen_trip(net, truth, spec, i, rng);
        REQUIRE(dense.route_rank >= 0);
        REQUIRE(dense.route_rank < static_cast<int>(ranked.size()));
        CHECK(dense.route.segment_ids == ranked[static_cast<size_t>(dense.route_rank)].segment_ids);
        rank_counts[static_cast<size_t>(dense.route_rank)]++;
        // Node bookkeeping: |nodes| == |route|+1, times strictly increasing,
        // starting at the departure.
        REQUIRE(dense.nodes.size() == dense.route.segment_ids.size() + 1);
        REQUIRE(dense.node_times.size() == dense.nodes.size());
        CHECK(dense.node_times.front() == spec.departure_unix);
        CHECK(dense.nodes.front() == spec.origin_node);
        CHECK(dense.nodes.back() == spec.dest_node);
        for (size_t k = 0; k + 1 < dense.node_times.size(); ++k) {
            CHECK(dense.node_times[k + 1] > dense.node_times[k]);
            const auto& seg = net.segment(dense.route.segment_ids[k]);
            CHECK(seg.from_node == dense.nodes[k]);
            CHECK(seg.to_node == dense.nodes[k + 1]);
            // Every hop's duration obeys the truncation window of its cell.
            double gap = dense.node_times[k + 1] - dense.node_times[k];
            double cell_mu = truth.true_mu.at(dense.route.segment_ids[k], step);
            CHECK(gap >= 0.25 * cell_mu - 1e-9);
            CHECK(gap <= 4.0 * cell_mu + 1e-9);
        }
        CHECK(dense.context.time_step == step);
        CHECK(dense.context.day_of_week == 0); // 2026-01-05 is a Monday
    }
    // With probs (0.7, 0.2, 0.1) all ranks appear over 300 draws.
    CHECK(rank_counts[0] > rank_counts[1]);
    CHECK(rank_counts[1] > 0);
    CHECK(rank_counts[2] > 0);
}

TEST_CASE("trip segment durations use the truth cell of their entry step") {
    // A trip that crosses a slot boundary must pick up the new multiplier.
    GridClassPlan plan;
    auto net = gen_grid_network(2, 5, 500.0, plan, 1);
    auto truth = flat_truth(net); // deterministic: sigma = 0, no noise
    RushProfile prof; // defaults, with cv 0.15 — but flat_truth above kills variation
    (void)prof;
    RandomStream rng(1);
    TripSpec spec;
    spec.origin_node = 0;
    spec.dest_node = 4;
    spec.departure_unix = 1767571200.0 + 1770.0; // 30 s before the slot-1 boundary
    spec.route_probs = {1.0, 0.0, 0.0};
    auto dense = gen_trip(net, truth, spec, 0, rng);
    // With sigma = 0 every hop is exactly the cell mu of its entry time step.
    for (size_t k = 0; k + 1 < dense.node_times.size(); ++k) {
        double enter = dense.node_times[k];
        int step = static_cast<int>(std::fmod(enter - 1767571200.0, 86400.0) / 1800.0);
        double want = truth.true_mu.at(dense.route.segment_ids[k], step);
        CHECK(dense.node_times[k + 1] - dense.node_times[k] ==
              doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("sparsify keeps endpoints, strides ticks, and stamps node passage times") {
    GridClassPlan plan;
    auto net = gen_grid_network(4, 4, 500.0, plan, 1);
    auto truth = flat_truth(net);
    RandomStream rng(23);
    TripSpec spec;
    spec.origin_node = 0;
    spec.dest_node = 15;
    spec.departure_unix = 1767571200.0 + 6 * 3600.0;
    auto dense = gen_trip(net, truth, spec, 5, rng);
    for (double keep : {0.125, 0.0625, 0.03125}) {
        auto sparse = sparsify(net, dense, keep);
        CHECK(sparse.trajectory_id == dense.trajectory_id);
        CHECK(sparse.source_dense_id == dense.trajectory_id);
        REQUIRE(sparse.fixes.size() >= 2);
        CHECK(sparse.fixes.front().unix_ts == dense.node_times.front());
        CHECK(sparse.fixes.back().unix_ts == dense.node_times.back());
        for (size_t i = 0; i + 1 < sparse.fixes.size(); ++i) {
            CHECK(sparse.fixes[i + 1].unix_ts > sparse.fixes[i].unix_ts);
        }
        // Every fix sits exactly on a route node (no jitter) with that node's
        // exact passage time, so inter-fix gaps equal sums of dense segment
        // durations.
        for (const auto& fix : sparse.fixes) {
            bool matched = false;
            for (size_t k = 0; k < dense.nodes.size(); ++k) {
                const auto& nd = net.node(dense.nodes[k]);
                if (fix.unix_ts == dense.node_times[k] && fix.lon == nd.lon && fix.lat == nd.lat) {
                    matched = true;
                    break;
                }
            }
            CHECK(matched);
        }
        // Lower keep ratios keep no more fixes than higher ones.
        if (keep < 0.125) {
            CHECK(sparse.fixes.size() <= sparsify(net, dense, 0.125).fixes.size());
        }
    }
    CHECK_THROWS_AS(sparsify(net, dense, 0.0), ValidationError);
    CHECK_THROWS_AS(sparsify(net, dense, 1.5), ValidationError);
}

TEST_CASE("sparsify stride matches round(1 / keep_ratio) on the tick grid") {
    GridClassPlan plan;
    auto net = gen_grid_network(2, 8, 500.0, plan, 1);
    auto truth = flat_truth(net);
    RandomStream rng(31);
    TripSpec spec;
    spec.origin_node = 0;
    spec.dest_node = 7; // straight east along an artery row
    spec.departure_unix = 1767571200.0 + 6 * 3600.0;
    spec.route_probs = {1.0, 0.0, 0.0};
    auto dense = gen_trip(net, truth, spec, 0, rng);
    // Artery hop = 500 m at 60 kph = 30 s, so ticks land on nodes exactly.
    auto sparse = sparsify(net, dense, 0.5); // stride 2 -> every other 15 s tick
    std::vector<double> times;
    for (const auto& f : sparse.fixes) times.push_back(f.unix_ts);
    std::vector<double> want;
    for (size_t k = 0; k < dense.node_times.size(); ++k) want.push_back(dense.node_times[k]);
    // stride 2 over 30 s hops keeps every node: times == all node times.
    CHECK(times == want);
    // Stride 4 over 30 s hops: ticks at 0, 60, 120, 180 s -> nodes 0, 2, 4, 6,
    // plus the always-kept final fix at node 7 (210 s).
    auto sparse4 = sparsify(net, dense, 0.25);
    REQUIRE(dense.nodes.size() == 8);
    CHECK(sparse4.fixes.size() == 5);
    CHECK(sparse4.fixes.back().unix_ts == dense.node_times.back());
    CHECK(sparse4.fixes[3].unix_ts == dense.node_times[6]);
}

TEST_CASE("jittered fixes move but timestamps stay exact") {
    GridClassPlan plan;
    auto net = gen_grid_network(3, 3, 500.0, plan, 1);
    auto truth = flat_truth(net);
    RandomStream rng(41);
    TripSpec spec;
    spec.origin_node = 0;
    spec.dest_node = 8;
    spec.departure_unix = 1767571200.0 + 6 * 3600.0;
    auto dense = gen_trip(net, truth, spec, 0, rng);
    RandomStream jit(77);
    auto noisy = sparsify(net, dense, 0.125, 20.0, &jit);
    auto clean = sparsify(net, dense, 0.125);
    REQUIRE(noisy.fixes.size() == clean.fixes.size());
    int moved = 0;
    for (size_t i = 0; i < noisy.fixes.size(); ++i) {
        CHECK(noisy.fixes[i].unix_ts == clean.fixes[i].unix_ts);
        if (noisy.fixes[i].lon != clean.fixes[i].lon || noisy.fixes[i].lat != clean.fixes[i].lat)
            ++moved;
        // 20 m of noise stays well within a 500 m cell: the nearest-node snap
        // still recovers the original node.
        auto snapped = netgraph::snap_point(net, noisy.fixes[i].lon, noisy.fixes[i].lat, 100.0);
        auto truth_node = netgraph::snap_point(net, clean.fixes[i].lon, clean.fixes[i].lat, 1.0);
        CHECK(snapped == truth_node);
    }
    CHECK(moved == static_cast<int>(noisy.fixes.size()));
}

TEST_CASE("corpus files round-trip trajectories and contexts") {
    namespace fs = std::filesystem;
    auto dir = fs::temp_directory_path() / "sparse_eta_simkit_test";
    fs::create_directories(dir);
    GridClassPlan plan;
    auto net = gen_grid_network(3, 3, 500.0, plan, 1);
    RushProfile prof;
    auto truth = gen_ground_truth(net, prof, 2);
    RandomStream rng(55);
    std::vector<DenseTrajectory> dense;
    std::vector<SparseTrajectory> sparse;
    for (int i = 0; i < 5; ++i) {
        TripSpec spec;
        auto [o, d] = sample_od(net, 2, rng);
        spec.origin_node = o;
        spec.dest_node = d;
        spec.departure_unix = 1767571200.0 + 6 * 3600.0 + 600.0 * i;
        spec.weather_id = i % 3;
        spec.holiday_id = i % 2;
        dense.push_back(gen_trip(net, truth, spec, i, rng));
        auto s = sparsify(net, dense.back(), 0.25);
        s.weather_id = spec.weather_id;
        s.holiday_id = spec.holiday_id;
        sparse.push_back(std::move(s));
    }
    auto sparse_path = (dir / "sparse.jsonl").string();
    auto dense_path = (dir / "dense.jsonl").string();
    write_sparse_trajectories(sparse, sparse_path);
    write_dense_sidecar(dense, dense_path);
    auto sparse2 = load_sparse_trajectories(sparse_path);
    auto dense2 = load_dense_sidecar(dense_path, net);
    REQUIRE(sparse2.size() == sparse.size());
    REQUIRE(dense2.size() == dense.size());
    for (size_t i = 0; i < sparse.size(); ++i) {
        CHECK(sparse2[i].trajectory_id == sparse[i].trajectory_id);
        CHECK(sparse2[i].weather_id == sparse[i].weather_id);
        CHECK(sparse2[i].holiday_id == sparse[i].holiday_id);
        REQUIRE(sparse2[i].fixes.size() == sparse[i].fixes.size());
        for (size_t k = 0; k < sparse[i].fixes.size(); ++k) {
            CHECK(sparse2[i].fixes[k].lon == sparse[i].fixes[k].lon);
            CHECK(sparse2[i].fixes[k].lat == sparse[i].fixes[k].lat);
            CHECK(sparse2[i].fixes[k].unix_ts == sparse[i].fixes[k].unix_ts);
        }
        CHECK(dense2[i].route.segment_ids == dense[i].route.segment_ids);
        CHECK(dense2[i].node_times == dense[i].node_times);
        CHECK(dense2[i].nodes == dense[i].nodes);
        CHECK(dense2[i].route_rank == dense[i].route_rank);
        CHECK(dense2[i].context.time_step == dense[i].context.time_step);
    }
    auto truth_path = (dir / "truth.json").string();
    write_ground_truth(truth, prof, truth_path);
    auto truth2 = load_ground_truth(truth_path);
    CHECK(truth2.true_mu.a == truth.true_mu.a);
    CHECK(truth2.true_sigma.a == truth.true_sigma.a);
    CHECK(truth2.profile_artery == truth.profile_artery);
    CHECK(truth2.profile_local == truth.profile_local);
    fs::remove_all(dir);
}
