#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sparse_eta/netgraph.hpp"
#include "sparse_eta/pathing.hpp"
#include "sparse_eta/random.hpp"
#include "sparse_eta/simkit.hpp"
#include "sparse_eta/stmodel.hpp"

namespace sparse_eta::emtrain {

// One weak label: the observed time gap between two consecutive fixes and the
// candidate routes that could explain it.
struct PairSample {
    int64_t pair_id = 0;
    int64_t trajectory_id = 0;
    int position = 0; // index of the pair within its trajectory
    int64_t origin_node = 0;
    int64_t dest_node = 0;
    double t_obs = 0.0;
    stmodel::TemporalContext ctx; // at the pair's departure fix
    pathing::CandidateSet candidates;
};

struct BuildPairsStats {
    int64_t kept = 0;
    int64_t dropped_snap = 0;
    int64_t dropped_same_node = 0;
    int64_t dropped_nonpositive = 0;
    int64_t dropped_no_path = 0;
};

// Splits every trajectory into consecutive fix pairs, snaps endpoints, and
// builds frozen free-flow candidate sets. Degenerate pairs are dropped and
// counted, never errors.
std::vector<PairSample> build_pairs(const netgraph::RoadNetwork& net,
                                    const std::vector<simkit::SparseTrajectory>& trajectories,
                                    int m, double tau, double snap_radius_m,
                                    BuildPairsStats* stats = nullptr);

struct EmConfig {
    int max_em_iters = 10;
    int epochs = 20;
    double lr = 1e-4;
    double lr_decay = 1.0; // learning-rate multiplier per EM iteration
    int batch_size = 1024;
    int threads = 1;
    int m = 5;
    double tau = 0.8;
    double snap_radius_m = 100.0;
    double delta_mu_tol_s = 1.0;
    double val_fraction = 0.1;
    int early_stop_patience = 0; // 0 disables early stopping
    bool use_nll_assignment = false;
    bool refresh_candidates = false;
    uint64_t seed = 0;
    stmodel::ModelConfig model;
    // Context the table is materialized under; -1 picks the first pair's.
    int table_day_of_week = -1;
    int table_weather_id = -1;
    int table_holiday_id = -1;
};

// Read-only per-network precomputation shared by all EM phases.
struct EmContext {
    const netgraph::RoadNetwork* net = nullptr;
    stmodel::SegmentFeatures feats;
    netgraph::RelationalAdjacency adj;
    std::vector<double> base_weights;
};
EmContext make_context(const netgraph::RoadNetwork& net);

struct EmState {
    int iteration = 0;
    stmodel::ModelParams model;
    stmodel::AdamState adam;
    stmodel::TravelTimeTable table;
    std::vector<PairSample> pairs;
    double delta_mu_max = 0.0;
    int64_t reassigned_count = 0;
    std::vector<double> nll_history;
    std::vector<double> delta_mu_history;
    std::vector<int64_t> reassigned_history;
    // Assigned candidate index per pair, snapshot after every M step
    // (index 0 = the pre-training free-flow assignment).
    std::vector<std::vector<int>> assignment_history;
    RandomStream rng;
    bool converged = false;
    std::string stop_reason;

    std::vector<int> assignments() const;
    stmodel::TemporalContext table_context(const EmConfig& cfg) const;
};

// Fits the model to the observed gaps under the current assignments with
// `epochs` x Adam over seeded-shuffled minibatches, then refreshes the table.
// Returns the mean training NLL of the retained epoch.
double e_step(const EmContext& ctx, EmState& state, const EmConfig& cfg, double lr);

// Reassigns every pair to its discrepancy-minimizing candidate; returns the
// number of changed assignments.
int64_t m_step(const EmContext& ctx, EmState& state, const EmConfig& cfg);

EmState run_em(const EmContext& ctx, const std::vector<simkit::SparseTrajectory>& trajectories,
               const EmConfig& cfg);

// Continues the EM loop of a loaded state until a stop condition holds.
void resume_em(const EmContext& ctx, EmState& state, const EmConfig& cfg);

struct InferPairResult {
    int64_t origin_node = -1;
    int64_t dest_node = -1;
    int time_step = 0;
    std::vector<int> route;
    double mu_s = 0.0;
    double sigma_s = 0.0;
    bool ok = false;
    std::string error;
};

struct InferResult {
    double total_s = 0.0;
    double total_sigma_s = 0.0;
    int pairs_ok = 0;
    int pairs_total = 0;
    bool full_coverage = true;
    std::vector<InferPairResult> pairs;
};

// Gap-by-gap travel-time estimate along a sparse trajectory. The observed gap
// is never consulted: each pair takes its fastest-believed candidate route.
InferResult infer_trajectory(const EmContext& ctx, const stmodel::TravelTimeTable& table,
                             const simkit::SparseTrajectory& traj, int m, double tau,
                             double snap_radius_m);

// Row-major [|E| x 48] counts of (segment, time step) traversals by the
// currently assigned routes.
std::vector<int64_t> traversal_counts(const EmState& state, size_t num_segments);

void save_checkpoint(const EmState& state, const EmConfig& cfg, const std::string& path);

struct LoadedCheckpoint {
    EmConfig config;
    EmState state; // pairs empty until attach_pairs
    std::vector<int64_t> traversal; // [|E| x 48]
    std::vector<int> pending_assignments; // applied by attach_pairs
    size_t pair_count = 0;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

// Rebuilds the pair list from the training corpus and restores assignments;
// required before resume_em.
void attach_pairs(LoadedCheckpoint& ckpt, const EmContext& ctx,
                  const std::vector<simkit::SparseTrajectory>& trajectories);

} // namespace sparse_eta::emtrain
