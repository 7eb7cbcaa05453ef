#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sparse_eta/netgraph.hpp"
#include "sparse_eta/pathing.hpp"
#include "sparse_eta/simkit.hpp"
#include "sparse_eta/stmodel.hpp"
#include "sparse_eta/tape.hpp"

namespace sparse_eta::evalkit {

struct TteMetrics {
    double rmse_min = 0.0;
    double mae_min = 0.0;
    double mape_pct = 0.0;
    int64_t n = 0;
};

// Overall travel-time error plus a per-sampling-interval breakdown.
struct TteReport {
    TteMetrics overall;
    std::vector<std::pair<std::string, TteMetrics>> breakdown;
};

// RMSE and MAE in minutes; MAPE in percent over truths > 0.
TteMetrics tte_metrics(std::span<const double> pred_seconds, std::span<const double> true_seconds);

// Length of the segment intersection divided by the longer route's length.
// Both empty -> 1, exactly one empty -> 0. With undirected_overlap, segments
// match on their logical (two-way) id instead of the directed id.
double route_accuracy(const netgraph::RoadNetwork& net, std::span<const int> truth,
                      std::span<const int> inferred, bool undirected_overlap = false);
double route_accuracy(const netgraph::RoadNetwork& net, const pathing::Route& truth,
                      const pathing::Route& inferred, bool undirected_overlap = false);

// Daily-divergence view: 32 half-hour bins covering 06:00-22:00.
inline constexpr int kRouteBins = 32;
inline constexpr int kRouteBinFirstStep = 12; // 06:00

struct RouteBin {
    double accuracy = 0.0;
    int64_t n = 0;
};

struct RouteReport {
    double mean_accuracy = 0.0;
    int64_t n = 0;
    std::array<RouteBin, kRouteBins> bins{};
};

// Aggregates (time_step, accuracy) samples. The mean covers every sample; the
// bins cover only the 06:00-22:00 window.
RouteReport route_report(const std::vector<std::pair<int, double>>& samples);

enum class SpeedState : int {
    VeryCongested = 0,
    Congested = 1,
    Slow = 2,
    Unblocked = 3,
};

const std::string& speed_state_name(SpeedState s);

// Quartile of the speed limit, right-open bins; at or above the limit is
// unblocked. For a 60 kph limit: [0,15) [15,30) [30,45) [45,inf).
SpeedState classify_speed_state(double speed_kph, double limit_kph);

struct SegmentCondition {
    int segment_id = 0;
    double speed_kph = 0.0;
    SpeedState state = SpeedState::Unblocked;
    bool no_data = false;
};

// Speed of every segment at one time step, 3.6 * length_m / mu. Segments with
// a zero traversal total are forced to unblocked and flagged no_data;
// pass an empty span to treat every segment as covered.
std::vector<SegmentCondition> condition_map(const stmodel::TravelTimeTable& table,
                                            const netgraph::RoadNetwork& net, int time_step,
                                            std::span<const int64_t> traversal_totals = {});

// Per-segment totals of a row-major [num_segments x 48] traversal-count matrix.
std::vector<int64_t> segment_totals(std::span<const int64_t> traversal_counts,
                                    size_t num_segments);

// Segment ids a dense trajectory traversed between two of its node-passage
// timestamps (both must appear in node_times exactly).
std::vector<int> truth_subroute(const simkit::DenseTrajectory& dense, double t_a, double t_b);

// Error of the learned table against a known truth table, over the
// (segment, time step) cells traversed at least min_count times in training.
struct MuRecovery {
    double mape_pct = 0.0;
    int64_t cells = 0;
};

MuRecovery mu_recovery_mape(const stmodel::TravelTimeTable& table, const autodiff::Mat& true_mu,
                            std::span<const int64_t> traversal_counts, int64_t min_count);

struct EvalReport {
    TteReport tte;
    std::vector<std::pair<std::string, RouteReport>> route; // per sampling-interval label
    std::vector<std::pair<std::string, MuRecovery>> mu_recovery;
    // Mean assigned-route accuracy of the first and last EM assignment
    // snapshots, per sampling-interval label; empty without a dense sidecar.
    std::vector<std::pair<std::string, std::pair<double, double>>> assignment_gain;
};

void write_eval_report_json(const EvalReport& rep, const std::string& path);
// Long-format table keyed (metric, sampling_interval, time_bin).
void write_eval_report_csv(const EvalReport& rep, const std::string& path);

void write_condition_geojson(const std::vector<SegmentCondition>& conds,
                             const netgraph::RoadNetwork& net, int time_step,
                             const std::string& path);

} // namespace sparse_eta::evalkit
