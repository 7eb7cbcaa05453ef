#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sparse_eta/emtrain.hpp"
#include "sparse_eta/simkit.hpp"
#include "sparse_eta/stmodel.hpp"

namespace sparse_eta::config {

// Minimal TOML-style document: [section] headers, key = value lines, values
// are bools, numbers, quoted strings, or (nested) arrays. Returns a flat
// "section.key" -> JSON-value map.
std::map<std::string, nlohmann::json> parse_kv_document(const std::string& text,
                                                        const std::string& origin);

struct ExperimentConfig {
    // [run]
    std::string out_dir = "out";
    uint64_t seed = 0;
    bool seed_set = false; // a run without an explicit seed is refused
    int threads = 1;
    std::string network_path; // empty -> generate the grid below

    // [grid]
    int grid_rows = 8;
    int grid_cols = 8;
    double grid_spacing_m = 500.0;
    simkit::GridClassPlan grid_plan;

    // [truth]
    simkit::RushProfile truth;

    // [trips]
    int trip_count = 2000;
    int days = 1;
    int64_t base_unix = 1767571200; // Monday 2026-01-05 00:00 UTC
    int min_hops = 6;
    int weather_id = 0;
    int holiday_id = 0;
    std::array<double, 3> route_probs{0.7, 0.2, 0.1};
    // Departure windows in seconds since local midnight, sampled
    // length-weighted; default covers the 06:00-22:00 evaluation window.
    std::vector<std::pair<double, double>> departure_windows{{21600.0, 79200.0}};

    // [sparsify]
    std::vector<double> keep_ratios{0.125, 0.0625, 0.03125};
    double jitter_m = 0.0;

    // [model]
    stmodel::ModelConfig model;

    // [train]
    std::vector<double> train_keep_ratios; // empty -> keep_ratios
    int max_em_iters = 10;
    int epochs = 20;
    double lr = 1e-4;
    double lr_decay = 1.0;
    int batch_size = 1024;
    int m = 5;
    double tau = 0.8;
    double snap_radius_m = 100.0;
    double delta_mu_tol_s = 1.0;
    double val_fraction = 0.1;
    int early_stop_patience = 0;
    bool use_nll_assignment = false;
    bool refresh_candidates = false;
    int table_day_of_week = -1;
    int table_weather_id = -1;
    int table_holiday_id = -1;

    // [eval]
    double test_fraction = 0.2;
    std::vector<double> eval_keep_ratios; // empty -> train list
    bool undirected_overlap = false;
    std::vector<int> condition_steps{12, 34}; // 06:00 and 17:00

    std::vector<double> resolved_train_ratios() const {
        return train_keep_ratios.empty() ? keep_ratios : train_keep_ratios;
    }
    std::vector<double> resolved_eval_ratios() const {
        return eval_keep_ratios.empty() ? resolved_train_ratios() : eval_keep_ratios;
    }

    emtrain::EmConfig em_config() const;
    nlohmann::json to_json() const; // canonical resolved echo
};

ExperimentConfig load_config(const std::string& path);
ExperimentConfig config_from_values(const std::map<std::string, nlohmann::json>& values,
                                    const std::string& origin);

// Corpus label of a keep ratio: the nominal fix gap, e.g. 0.125 -> "120s".
std::string interval_label(double keep_ratio);

// Deterministic held-out membership of a trajectory.
bool is_test_trajectory(uint64_t seed, int64_t trajectory_id, double test_fraction);

} // namespace sparse_eta::config
