#pragma once

#include <cstdint>
#include <string>

#include "sparse_eta/config.hpp"

namespace sparse_eta::cli {

// Subcommand bodies; each writes its artifacts under cfg.out_dir and returns
// 0, throwing on any failure. main() maps exceptions to a nonzero exit.
int cmd_gen(const config::ExperimentConfig& cfg);
int cmd_train(const config::ExperimentConfig& cfg);
int cmd_eval(const config::ExperimentConfig& cfg);
// keep_ratio <= 0 selects the first configured training ratio.
int cmd_infer(const config::ExperimentConfig& cfg, int64_t trajectory_id, double keep_ratio);
int cmd_export_conditions(const config::ExperimentConfig& cfg, double keep_ratio);

// Output-file naming shared with the tests.
std::string network_file(const config::ExperimentConfig& cfg);
std::string truth_file(const config::ExperimentConfig& cfg);
std::string dense_file(const config::ExperimentConfig& cfg);
std::string manifest_file(const config::ExperimentConfig& cfg);
std::string corpus_file(const config::ExperimentConfig& cfg, double keep_ratio);
std::string checkpoint_file(const config::ExperimentConfig& cfg, double keep_ratio);
std::string report_json_file(const config::ExperimentConfig& cfg);
std::string report_csv_file(const config::ExperimentConfig& cfg);
std::string conditions_file(const config::ExperimentConfig& cfg, double keep_ratio, int time_step);

} // namespace sparse_eta::cli
