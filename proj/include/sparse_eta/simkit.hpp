#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sparse_eta/netgraph.hpp"
#include "sparse_eta/pathing.hpp"
#include "sparse_eta/random.hpp"
#include "sparse_eta/stmodel.hpp"
#include "sparse_eta/tape.hpp"

namespace sparse_eta::simkit {

using autodiff::Mat;

// Class layout of the generated lattice: horizontal edges of every
// `artery_stride`-th row are arteries, everything else is residential.
struct GridClassPlan {
    int artery_stride = 2;
    double artery_kph = 60.0;
    double local_kph = 30.0;
    int artery_lanes = 3;
    int local_lanes = 1;
    double origin_lon = 108.90;
    double origin_lat = 34.20;
};

// rows x cols lattice of two-way streets; all segments get exact lattice
// lengths so free-flow times are clean ratios. The seed is accepted for
// interface symmetry with the other generators; the lattice is deterministic.
netgraph::RoadNetwork gen_grid_network(int rows, int cols, double spacing_m,
                                       const GridClassPlan& plan, uint64_t seed);

// Piecewise-linear rush-hour curve and per-segment noise model for the truth
// tables. Windows are seconds since local midnight; each peak plateaus between
// start and end with linear ramps of `ramp_s` on both sides.
struct RushProfile {
    double artery_peak = 2.5;
    double local_peak = 1.5;
    double morning_start_s = 8.0 * 3600;
    double morning_end_s = 9.5 * 3600;
    double evening_start_s = 17.0 * 3600;
    double evening_end_s = 18.5 * 3600;
    double ramp_s = 1800.0;
    double cv = 0.15;            // sigma = cv * mu
    double segment_noise = 0.05; // stddev of the per-segment log-factor; 0 disables
};

struct GroundTruth {
    Mat true_mu;    // [|E| x 48] seconds
    Mat true_sigma; // [|E| x 48] seconds
    std::vector<double> profile_artery; // multiplier per time step
    std::vector<double> profile_local;
    uint64_t seed = 0;
};

// Multiplier of the curve evaluated at time-of-day `sod` seconds.
double congestion_multiplier(const RushProfile& profile, double peak, double sod);

// Peak level used for a road class: artery classes ride the artery curve.
double class_peak(const RushProfile& profile, netgraph::RoadClass c);

GroundTruth gen_ground_truth(const netgraph::RoadNetwork& net, const RushProfile& profile,
                             uint64_t seed);

// Moment matching onto the log scale: the lognormal with these log-space
// parameters has mean `mu` and standard deviation `sigma`.
std::pair<double, double> to_lognormal(double mu, double sigma);

// One draw from the matched lognormal truncated to [0.25 mu, 4 mu].
double sample_travel_time(double mu, double sigma, RandomStream& rng);

struct DenseTrajectory {
    int64_t trajectory_id = 0;
    pathing::Route route;
    std::vector<int64_t> nodes;      // |route| + 1 node ids
    std::vector<double> node_times;  // unix seconds at every node
    stmodel::TemporalContext context; // at departure
    int route_rank = 0;               // which of the top-3 truth routes was taken
};

struct TripSpec {
    int64_t origin_node = 0;
    int64_t dest_node = 0;
    double departure_unix = 0.0;
    int weather_id = 0;
    int holiday_id = 0;
    // Truth-route choice: probability of ranks 1..3 of the fastest routes
    // under true_mu at the departure step.
    std::array<double, 3> route_probs{0.7, 0.2, 0.1};
};

DenseTrajectory gen_trip(const netgraph::RoadNetwork& net, const GroundTruth& truth,
                         const TripSpec& spec, int64_t trajectory_id, RandomStream& rng);

// Uniform over node pairs at least `min_hops` segments apart.
std::pair<int64_t, int64_t> sample_od(const netgraph::RoadNetwork& net, int min_hops,
                                      RandomStream& rng);

struct GpsFix {
    double lon = 0.0;
    double lat = 0.0;
    double unix_ts = 0.0;
};

struct SparseTrajectory {
    int64_t trajectory_id = 0;
    std::vector<GpsFix> fixes;
    int weather_id = 0;
    int holiday_id = 0;
    int64_t source_dense_id = -1;
};

// Resamples the dense trajectory to 15 s ticks, keeps the first fix, the last
// fix, and every round(1/keep_ratio)-th tick; each kept tick is mapped to the
// nearest route node and stamped with that node's exact passage time, and
// consecutive duplicates collapse. `jitter_m` adds Gaussian position noise.
SparseTrajectory sparsify(const netgraph::RoadNetwork& net, const DenseTrajectory& dense,
                          double keep_ratio, double jitter_m = 0.0, RandomStream* rng = nullptr);

inline constexpr double kTickSeconds = 15.0;

// JSON-lines trajectory corpus.
void write_sparse_trajectories(const std::vector<SparseTrajectory>& trajs, const std::string& path);
std::vector<SparseTrajectory> load_sparse_trajectories(const std::string& path);

// Dense sidecar (route + node passage times), for evaluation only.
void write_dense_sidecar(const std::vector<DenseTrajectory>& trajs, const std::string& path);
std::vector<DenseTrajectory> load_dense_sidecar(const std::string& path,
                                                const netgraph::RoadNetwork& net);

void write_ground_truth(const GroundTruth& truth, const RushProfile& profile,
                        const std::string& path);
GroundTruth load_ground_truth(const std::string& path);

} // namespace sparse_eta::simkit
