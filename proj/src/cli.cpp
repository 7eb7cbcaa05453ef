#include "sparse_eta/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <unordered_map>

#include "sparse_eta/emtrain.hpp"
#include "sparse_eta/evalkit.hpp"
#include "sparse_eta/serialize.hpp"
#include "sparse_eta/simkit.hpp"

namespace sparse_eta::cli {

namespace fs = std::filesystem;

namespace {

// Traversal threshold below which a learned cell is not scored against truth.
constexpr int64_t kMuRecoveryMinCount = 30;

std::string join(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

std::string step_hhmm(int time_step) {
    int minutes = time_step * 30;
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%02d%02d", minutes / 60, minutes % 60);
    return buf;
}

void require_seed(const config::ExperimentConfig& cfg) {
    if (!cfg.seed_set) {
        throw ValidationError("a seed is required: set run.seed or pass --seed");
    }
}

void echo_config(const config::ExperimentConfig& cfg, const std::string& command) {
    fs::create_directories(cfg.out_dir);
    serialize::write_json_file(cfg.to_json(), join(cfg.out_dir, "config_" + command + ".json"));
}

netgraph::RoadNetwork load_run_network(const config::ExperimentConfig& cfg) {
    std::string path = network_file(cfg);
    if (!fs::exists(path)) {
        throw ValidationError("missing " + path + "; run the gen command first");
    }
    return netgraph::load_network(path);
}

std::vector<simkit::SparseTrajectory> load_corpus(const config::ExperimentConfig& cfg,
                                                  double ratio) {
    std::string path = corpus_file(cfg, ratio);
    if (!fs::exists(path)) {
        throw ValidationError("missing corpus " + path + "; run the gen command first");
    }
    return simkit::load_sparse_trajectories(path);
}

// test_fraction == 0 disables the split: training and evaluation both see the
// whole corpus (closed-loop debugging mode).
std::vector<simkit::SparseTrajectory> split_corpus(
    const config::ExperimentConfig& cfg, const std::vector<simkit::SparseTrajectory>& corpus,
    bool want_test) {
    if (cfg.test_fraction <= 0.0) return corpus;
    std::vector<simkit::SparseTrajectory> out;
    for (const auto& tr : corpus) {
        bool is_test = config::is_test_trajectory(cfg.seed, tr.trajectory_id, cfg.test_fraction);
        if (is_test == want_test) out.push_back(tr);
    }
    return out;
}

double sample_departure_sod(const config::ExperimentConfig& cfg, RandomStream& rng) {
    double total = 0.0;
    for (const auto& [a, b] : cfg.departure_windows) total += b - a;
    double x = rng.uniform(0.0, total);
    for (const auto& [a, b] : cfg.departure_windows) {
        if (x < b - a) return a + x;
        x -= b - a;
    }
    return cfg.departure_windows.back().second;
}

// Mean assigned-route accuracy of one assignment snapshot against the dense
// sidecar truth.
double assignment_accuracy(const netgraph::RoadNetwork& net,
                           const std::vector<emtrain::PairSample>& pairs,
                           const std::vector<int>& assignment,
                           const std::unordered_map<int64_t, const simkit::SparseTrajectory*>& sparse_by_id,
                           const std::unordered_map<int64_t, const simkit::DenseTrajectory*>& dense_by_id,
                           bool undirected) {
    if (pairs.size() != assignment.size()) {
        throw ValidationError("assignment snapshot does not match the pair list");
    }
    double sum = 0.0;
    int64_t n = 0;
    for (size_t i = 0; i < pairs.size(); ++i) {
        const auto& p = pairs[i];
        const auto* sp = sparse_by_id.at(p.trajectory_id);
        const auto* dn = dense_by_id.at(p.trajectory_id);
        double t_a = sp->fixes[static_cast<size_t>(p.position)].unix_ts;
        double t_b = sp->fixes[static_cast<size_t>(p.position) + 1].unix_ts;
        std::vector<int> truth = evalkit::truth_subroute(*dn, t_a, t_b);
        const auto& inferred =
            p.candidates.routes[static_cast<size_t>(assignment[i])].segment_ids;
        sum += evalkit::route_accuracy(net, truth, inferred, undirected);
        ++n;
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

} // namespace

std::string network_file(const config::ExperimentConfig& cfg) {
    return join(cfg.out_dir, "network.json");
}
std::string truth_file(const config::ExperimentConfig& cfg) {
    return join(cfg.out_dir, "truth.json");
}
std::string dense_file(const config::ExperimentConfig& cfg) {
    return join(cfg.out_dir, "dense.jsonl");
}
std::string manifest_file(const config::ExperimentConfig& cfg) {
    return join(cfg.out_dir, "manifest.json");
}
std::string corpus_file(const config::ExperimentConfig& cfg, double keep_ratio) {
    return join(cfg.out_dir, "sparse_" + config::interval_label(keep_ratio) + ".jsonl");
}
std::string checkpoint_file(const config::ExperimentConfig& cfg, double keep_ratio) {
    return join(cfg.out_dir, "checkpoint_" + config::interval_label(keep_ratio) + ".json");
}
std::string report_json_file(const config::ExperimentConfig& cfg) {
    return join(cfg.out_dir, "report.json");
}
std::string report_csv_file(const config::ExperimentConfig& cfg) {
    return join(cfg.out_dir, "report.csv");
}
std::string conditions_file(const config::ExperimentConfig& cfg, double keep_ratio,
                            int time_step) {
    return join(cfg.out_dir, "conditions_" + config::interval_label(keep_ratio) + "_" +
                                 step_hhmm(time_step) + ".geojson");
}

int cmd_gen(const config::ExperimentConfig& cfg) {
    require_seed(cfg);
    echo_config(cfg, "gen");

    netgraph::RoadNetwork net =
        cfg.network_path.empty()
            ? simkit::gen_grid_network(cfg.grid_rows, cfg.grid_cols, cfg.grid_spacing_m,
                                       cfg.grid_plan, mix_seed(cfg.seed, 10))
            : netgraph::load_network(cfg.network_path);
    netgraph::write_network(net, network_file(cfg));

    simkit::GroundTruth truth = simkit::gen_ground_truth(net, cfg.truth, mix_seed(cfg.seed, 11));
    simkit::write_ground_truth(truth, cfg.truth, truth_file(cfg));

    RandomStream trip_rng(mix_seed(cfg.seed, 12));
    std::vector<simkit::DenseTrajectory> dense;
    dense.reserve(static_cast<size_t>(cfg.trip_count));
    for (int i = 0; i < cfg.trip_count; ++i) {
        auto [origin, dest] = simkit::sample_od(net, cfg.min_hops, trip_rng);
        int day = cfg.days == 1 ? 0 : static_cast<int>(trip_rng.uniform_index(
                                          static_cast<uint64_t>(cfg.days)));
        double sod = sample_departure_sod(cfg, trip_rng);
        simkit::TripSpec spec;
        spec.origin_node = origin;
        spec.dest_node = dest;
        spec.departure_unix = static_cast<double>(cfg.base_unix) + day * 86400.0 + sod;
        spec.weather_id = cfg.weather_id;
        spec.holiday_id = cfg.holiday_id;
        spec.route_probs = cfg.route_probs;
        dense.push_back(simkit::gen_trip(net, truth, spec, i, trip_rng));
    }
    simkit::write_dense_sidecar(dense, dense_file(cfg));

    nlohmann::json corpora = nlohmann::json::array();
    for (size_t ri = 0; ri < cfg.keep_ratios.size(); ++ri) {
        double ratio = cfg.keep_ratios[ri];
        RandomStream jitter_rng(mix_seed(cfg.seed, 20 + ri));
        std::vector<simkit::SparseTrajectory> sparse;
        sparse.reserve(dense.size());
        for (const auto& d : dense) {
            sparse.push_back(simkit::sparsify(net, d, ratio, cfg.jitter_m,
                                              cfg.jitter_m > 0.0 ? &jitter_rng : nullptr));
        }
        std::string path = corpus_file(cfg, ratio);
        simkit::write_sparse_trajectories(sparse, path);
        corpora.push_back({{"label", config::interval_label(ratio)},
                           {"keep_ratio", ratio},
                           {"path", fs::path(path).filename().string()},
                           {"trajectories", sparse.size()}});
    }

    nlohmann::json manifest{
        {"format", "sparse-eta-manifest-v1"},
        {"seed", cfg.seed},
        {"trips", cfg.trip_count},
        {"days", cfg.days},
        {"network", "network.json"},
        {"truth", "truth.json"},
        {"dense", "dense.jsonl"},
        {"nodes", net.num_nodes()},
        {"segments", net.num_segments()},
        {"corpora", corpora},
    };
    serialize::write_json_file(manifest, manifest_file(cfg));
    log_info("gen: wrote " + std::to_string(cfg.keep_ratios.size()) + " corpora of " +
             std::to_string(cfg.trip_count) + " trips to " + cfg.out_dir);
    return 0;
}

int cmd_train(const config::ExperimentConfig& cfg) {
    require_seed(cfg);
    echo_config(cfg, "train");
    netgraph::RoadNetwork net = load_run_network(cfg);
    emtrain::EmContext ctx = emtrain::make_context(net);
    for (double ratio : cfg.resolved_train_ratios()) {
        std::vector<simkit::SparseTrajectory> corpus = load_corpus(cfg, ratio);
        std::vector<simkit::SparseTrajectory> train = split_corpus(cfg, corpus, false);
        log_info("train[" + config::interval_label(ratio) + "]: " + std::to_string(train.size()) +
                 " of " + std::to_string(corpus.size()) + " trajectories");
        emtrain::EmConfig emcfg = cfg.em_config();
        emtrain::EmState state = emtrain::run_em(ctx, train, emcfg);
        emtrain::save_checkpoint(state, emcfg, checkpoint_file(cfg, ratio));
        log_info("train[" + config::interval_label(ratio) + "]: stopped after iteration " +
                 std::to_string(state.iteration) + " (" + state.stop_reason + ")");
    }
    return 0;
}

int cmd_eval(const config::ExperimentConfig& cfg) {
    require_seed(cfg);
    echo_config(cfg, "eval");
    netgraph::RoadNetwork net = load_run_network(cfg);
    emtrain::EmContext ctx = emtrain::make_context(net);

    bool have_truth = fs::exists(truth_file(cfg));
    simkit::GroundTruth truth;
    if (have_truth) truth = simkit::load_ground_truth(truth_file(cfg));

    bool have_dense = fs::exists(dense_file(cfg));
    std::vector<simkit::DenseTrajectory> dense;
    std::unordered_map<int64_t, const simkit::DenseTrajectory*> dense_by_id;
    if (have_dense) {
        dense = simkit::load_dense_sidecar(dense_file(cfg), net);
        for (const auto& d : dense) dense_by_id[d.trajectory_id] = &d;
    } else {
        log_warn("eval: no dense sidecar at " + dense_file(cfg) + "; route metrics skipped");
    }

    evalkit::EvalReport rep;
    std::vector<double> all_pred;
    std::vector<double> all_true;

    for (double ratio : cfg.resolved_eval_ratios()) {
        std::string label = config::interval_label(ratio);
        std::string ckpt_path = checkpoint_file(cfg, ratio);
        if (!fs::exists(ckpt_path)) {
            throw ValidationError("missing checkpoint " + ckpt_path + "; run the train command");
        }
        emtrain::LoadedCheckpoint ckpt = emtrain::load_checkpoint(ckpt_path);
        std::vector<simkit::SparseTrajectory> corpus = load_corpus(cfg, ratio);
        std::vector<simkit::SparseTrajectory> test = split_corpus(cfg, corpus, true);

        std::vector<double> pred;
        std::vector<double> truth_s;
        std::vector<std::pair<int, double>> route_samples;
        int skipped = 0;
        for (const auto& traj : test) {
            emtrain::InferResult res =
                emtrain::infer_trajectory(ctx, ckpt.state.table, traj, ckpt.config.m,
                                          ckpt.config.tau, ckpt.config.snap_radius_m);
            if (!res.full_coverage) {
                ++skipped;
                continue;
            }
            pred.push_back(res.total_s);
            truth_s.push_back(traj.fixes.back().unix_ts - traj.fixes.front().unix_ts);
            if (have_dense) {
                const auto* dn = dense_by_id.at(traj.trajectory_id);
                for (const auto& pr : res.pairs) {
                    size_t k = static_cast<size_t>(&pr - res.pairs.data());
                    double t_a = traj.fixes[k].unix_ts;
                    double t_b = traj.fixes[k + 1].unix_ts;
                    std::vector<int> truth_segs = evalkit::truth_subroute(*dn, t_a, t_b);
                    route_samples.emplace_back(
                        pr.time_step,
                        evalkit::route_accuracy(net, truth_segs, pr.route, cfg.undirected_overlap));
                }
            }
        }
        if (skipped > 0) {
            log_warn("eval[" + label + "]: skipped " + std::to_string(skipped) +
                     " trajectories without full route coverage");
        }
        if (pred.empty()) {
            log_warn("eval[" + label + "]: no evaluable trajectories");
            continue;
        }
        rep.tte.breakdown.emplace_back(label, evalkit::tte_metrics(pred, truth_s));
        all_pred.insert(all_pred.end(), pred.begin(), pred.end());
        all_true.insert(all_true.end(), truth_s.begin(), truth_s.end());
        if (have_dense) rep.route.emplace_back(label, evalkit::route_report(route_samples));

        if (have_truth) {
            rep.mu_recovery.emplace_back(
                label, evalkit::mu_recovery_mape(ckpt.state.table, truth.true_mu, ckpt.traversal,
                                                 kMuRecoveryMinCount));
        }

        if (have_dense && ckpt.state.assignment_history.size() >= 2) {
            std::vector<simkit::SparseTrajectory> train = split_corpus(cfg, corpus, false);
            emtrain::attach_pairs(ckpt, ctx, train);
            std::unordered_map<int64_t, const simkit::SparseTrajectory*> sparse_by_id;
            for (const auto& tr : train) sparse_by_id[tr.trajectory_id] = &tr;
            double acc0 = assignment_accuracy(net, ckpt.state.pairs,
                                              ckpt.state.assignment_history.front(), sparse_by_id,
                                              dense_by_id, cfg.undirected_overlap);
            double acc_final = assignment_accuracy(net, ckpt.state.pairs,
                                                   ckpt.state.assignment_history.back(),
                                                   sparse_by_id, dense_by_id,
                                                   cfg.undirected_overlap);
            rep.assignment_gain.emplace_back(label, std::make_pair(acc0, acc_final));
        }

        std::vector<int64_t> totals =
            evalkit::segment_totals(ckpt.traversal, net.num_segments());
        for (int step : cfg.condition_steps) {
            auto conds = evalkit::condition_map(ckpt.state.table, net, step, totals);
            evalkit::write_condition_geojson(conds, net, step, conditions_file(cfg, ratio, step));
        }
    }

    if (all_pred.empty()) {
        throw ValidationError("eval produced no trajectory estimates; nothing to report");
    }
    rep.tte.overall = evalkit::tte_metrics(all_pred, all_true);
    evalkit::write_eval_report_json(rep, report_json_file(cfg));
    evalkit::write_eval_report_csv(rep, report_csv_file(cfg));
    log_info("eval: overall MAPE " + std::to_string(rep.tte.overall.mape_pct) + "% over " +
             std::to_string(rep.tte.overall.n) + " trajectories");
    return 0;
}

int cmd_infer(const config::ExperimentConfig& cfg, int64_t trajectory_id, double keep_ratio) {
    require_seed(cfg);
    echo_config(cfg, "infer");
    double ratio = keep_ratio > 0.0 ? keep_ratio : cfg.resolved_train_ratios().front();
    std::string label = config::interval_label(ratio);
    netgraph::RoadNetwork net = load_run_network(cfg);
    emtrain::EmContext ctx = emtrain::make_context(net);
    emtrain::LoadedCheckpoint ckpt = emtrain::load_checkpoint(checkpoint_file(cfg, ratio));
    std::vector<simkit::SparseTrajectory> corpus = load_corpus(cfg, ratio);
    const simkit::SparseTrajectory* traj = nullptr;
    for (const auto& tr : corpus) {
        if (tr.trajectory_id == trajectory_id) {
            traj = &tr;
            break;
        }
    }
    if (traj == nullptr) {
        throw ValidationError("trajectory " + std::to_string(trajectory_id) + " not in " +
                              corpus_file(cfg, ratio));
    }
    emtrain::InferResult res = emtrain::infer_trajectory(
        ctx, ckpt.state.table, *traj, ckpt.config.m, ckpt.config.tau, ckpt.config.snap_radius_m);
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& pr : res.pairs) {
        pairs.push_back({{"origin_node", pr.origin_node},
                         {"dest_node", pr.dest_node},
                         {"time_step", pr.time_step},
                         {"route", pr.route},
                         {"mu_s", pr.mu_s},
                         {"sigma_s", pr.sigma_s},
                         {"ok", pr.ok},
                         {"error", pr.error}});
    }
    nlohmann::json j{{"trajectory_id", trajectory_id},
                     {"interval", label},
                     {"total_s", res.total_s},
                     {"total_sigma_s", res.total_sigma_s},
                     {"pairs_ok", res.pairs_ok},
                     {"pairs_total", res.pairs_total},
                     {"full_coverage", res.full_coverage},
                     {"pairs", pairs}};
    std::string path =
        join(cfg.out_dir, "infer_" + label + "_" + std::to_string(trajectory_id) + ".json");
    serialize::write_json_file(j, path);
    log_info("infer: wrote " + path);
    return 0;
}

int cmd_export_conditions(const config::ExperimentConfig& cfg, double keep_ratio) {
    require_seed(cfg);
    echo_config(cfg, "export-conditions");
    double ratio = keep_ratio > 0.0 ? keep_ratio : cfg.resolved_train_ratios().front();
    netgraph::RoadNetwork net = load_run_network(cfg);
    emtrain::LoadedCheckpoint ckpt = emtrain::load_checkpoint(checkpoint_file(cfg, ratio));
    std::vector<int64_t> totals = evalkit::segment_totals(ckpt.traversal, net.num_segments());
    for (int step : cfg.condition_steps) {
        auto conds = evalkit::condition_map(ckpt.state.table, net, step, totals);
        evalkit::write_condition_geojson(conds, net, step, conditions_file(cfg, ratio, step));
        log_info("export-conditions: wrote " + conditions_file(cfg, ratio, step));
    }
    return 0;
}

} // namespace sparse_eta::cli
