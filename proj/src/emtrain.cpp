#include "sparse_eta/emtrain.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "sparse_eta/serialize.hpp"

namespace sparse_eta::emtrain {

namespace {

void require(bool cond, const std::string& what) {
    if (!cond) throw ValidationError("emtrain: " + what);
}

// Lexicographic tie-break shared by the M step and inference: prefer the
// shorter route, then the smaller segment-id sequence.
bool tie_prefers(const pathing::Route& challenger, const pathing::Route& incumbent) {
    if (challenger.total_length_m != incumbent.total_length_m) {
        return challenger.total_length_m < incumbent.total_length_m;
    }
    return challenger.segment_ids < incumbent.segment_ids;
}

nlohmann::json em_config_to_json(const EmConfig& c) {
    return nlohmann::json{
        {"max_em_iters", c.max_em_iters},
        {"epochs", c.epochs},
        {"lr", c.lr},
        {"lr_decay", c.lr_decay},
        {"batch_size", c.batch_size},
        {"threads", c.threads},
        {"m", c.m},
        {"tau", c.tau},
        {"snap_radius_m", c.snap_radius_m},
        {"delta_mu_tol_s", c.delta_mu_tol_s},
        {"val_fraction", c.val_fraction},
        {"early_stop_patience", c.early_stop_patience},
        {"use_nll_assignment", c.use_nll_assignment},
        {"refresh_candidates", c.refresh_candidates},
        {"seed", c.seed},
        {"model", serialize::model_config_to_json(c.model)},
        {"table_day_of_week", c.table_day_of_week},
        {"table_weather_id", c.table_weather_id},
        {"table_holiday_id", c.table_holiday_id},
    };
}

EmConfig em_config_from_json(const nlohmann::json& j) {
    EmConfig c;
    c.max_em_iters = j.at("max_em_iters").get<int>();
    c.epochs = j.at("epochs").get<int>();
    c.lr = j.at("lr").get<double>();
    c.lr_decay = j.at("lr_decay").get<double>();
    c.batch_size = j.at("batch_size").get<int>();
    c.threads = j.at("threads").get<int>();
    c.m = j.at("m").get<int>();
    c.tau = j.at("tau").get<double>();
    c.snap_radius_m = j.at("snap_radius_m").get<double>();
    c.delta_mu_tol_s = j.at("delta_mu_tol_s").get<double>();
    c.val_fraction = j.at("val_fraction").get<double>();
    c.early_stop_patience = j.at("early_stop_patience").get<int>();
    c.use_nll_assignment = j.at("use_nll_assignment").get<bool>();
    c.refresh_candidates = j.at("refresh_candidates").get<bool>();
    c.seed = j.at("seed").get<uint64_t>();
    c.model = serialize::model_config_from_json(j.at("model"));
    c.table_day_of_week = j.at("table_day_of_week").get<int>();
    c.table_weather_id = j.at("table_weather_id").get<int>();
    c.table_holiday_id = j.at("table_holiday_id").get<int>();
    return c;
}

// Deterministic trajectory-level validation membership.
bool in_val_split(uint64_t seed, int64_t trajectory_id, double val_fraction) {
    uint64_t h = mix_seed(seed ^ 0x76616c73706c6974ULL, static_cast<uint64_t>(trajectory_id));
    return static_cast<double>(h % 1000000ULL) < val_fraction * 1e6;
}

} // namespace

std::vector<int> EmState::assignments() const {
    std::vector<int> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) out.push_back(p.candidates.assigned_index);
    return out;
}

stmodel::TemporalContext EmState::table_context(const EmConfig& cfg) const {
    stmodel::TemporalContext ctx;
    if (!pairs.empty()) ctx = pairs.front().ctx;
    ctx.time_step = 0;
    if (cfg.table_day_of_week >= 0) ctx.day_of_week = cfg.table_day_of_week;
    if (cfg.table_weather_id >= 0) ctx.weather_id = cfg.table_weather_id;
    if (cfg.table_holiday_id >= 0) ctx.holiday_id = cfg.table_holiday_id;
    return ctx;
}

EmContext make_context(const netgraph::RoadNetwork& net) {
    EmContext ctx;
    ctx.net = &net;
    ctx.feats = stmodel::segment_features(net);
    ctx.adj = netgraph::build_relational_adjacency(net);
    ctx.base_weights = pathing::base_time_weights(net);
    return ctx;
}

std::vector<PairSample> build_pairs(const netgraph::RoadNetwork& net,
                                    const std::vector<simkit::SparseTrajectory>& trajectories,
                                    int m, double tau, double snap_radius_m,
                                    BuildPairsStats* stats) {
    std::vector<double> base = pathing::base_time_weights(net);
    std::vector<PairSample> out;
    BuildPairsStats st;
    for (const auto& traj : trajectories) {
        for (size_t i = 0; i + 1 < traj.fixes.size(); ++i) {
            const auto& a = traj.fixes[i];
            const auto& b = traj.fixes[i + 1];
            int64_t na = 0;
            int64_t nb = 0;
            try {
                na = netgraph::snap_point(net, a.lon, a.lat, snap_radius_m);
                nb = netgraph::snap_point(net, b.lon, b.lat, snap_radius_m);
            } catch (const NoNodeInRange&) {
                ++st.dropped_snap;
                continue;
            }
            if (na == nb) {
                ++st.dropped_same_node;
                continue;
            }
            double t_obs = b.unix_ts - a.unix_ts;
            if (!(t_obs > 0.0)) {
                ++st.dropped_nonpositive;
                continue;
            }
            PairSample p;
            try {
                p.candidates = pathing::candidate_set(net, base, na, nb, m, tau);
            } catch (const NoPathError&) {
                ++st.dropped_no_path;
                continue;
            }
            p.pair_id = static_cast<int64_t>(out.size());
            p.trajectory_id = traj.trajectory_id;
            p.position = static_cast<int>(i);
            p.origin_node = na;
            p.dest_node = nb;
            p.t_obs = t_obs;
            p.ctx.time_step = time_step_of(a.unix_ts);
            p.ctx.day_of_week = day_of_week_of(a.unix_ts);
            p.ctx.weather_id = traj.weather_id;
            p.ctx.holiday_id = traj.holiday_id;
            ++st.kept;
            out.push_back(std::move(p));
        }
    }
    log_info("build_pairs: kept=" + std::to_string(st.kept) +
             " dropped_snap=" + std::to_string(st.dropped_snap) +
             " dropped_same_node=" + std::to_string(st.dropped_same_node) +
             " dropped_nonpositive=" + std::to_string(st.dropped_nonpositive) +
             " dropped_no_path=" + std::to_string(st.dropped_no_path));
    if (stats != nullptr) *stats = st;
    return out;
}

double e_step(const EmContext& ctx, EmState& state, const EmConfig& cfg, double lr) {
    if (state.pairs.empty()) {
        state.table.revision += 1;
        return 0.0;
    }
    require(cfg.epochs >= 1, "epochs must be >= 1");
    require(cfg.batch_size >= 1, "batch_size must be >= 1");

    bool use_val = cfg.early_stop_patience > 0 && cfg.val_fraction > 0.0;
    std::vector<stmodel::TrainSample> train;
    std::vector<stmodel::TrainSample> val;
    train.reserve(state.pairs.size());
    for (const auto& p : state.pairs) {
        stmodel::TrainSample s;
        s.route = p.candidates.routes[static_cast<size_t>(p.candidates.assigned_index)].segment_ids;
        s.t_obs = p.t_obs;
        s.ctx = p.ctx;
        s.pair_id = p.pair_id;
        if (use_val && in_val_split(cfg.seed, p.trajectory_id, cfg.val_fraction)) {
            val.push_back(std::move(s));
        } else {
            train.push_back(std::move(s));
        }
    }
    if (train.empty()) {
        train = std::move(val);
        val.clear();
        use_val = false;
    }

    double best_val = std::numeric_limits<double>::infinity();
    double kept_train_nll = 0.0;
    stmodel::ModelParams best_model = state.model;
    stmodel::AdamState best_adam = state.adam;
    int bad_epochs = 0;
    double epoch_nll = 0.0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        state.rng.shuffle(train);
        double loss_sum = 0.0;
        size_t n_done = 0;
        for (size_t start = 0; start < train.size(); start += static_cast<size_t>(cfg.batch_size)) {
            size_t count = std::min(static_cast<size_t>(cfg.batch_size), train.size() - start);
            std::span<const stmodel::TrainSample> batch(train.data() + start, count);
            stmodel::ModelGrads grads = stmodel::ModelGrads::zeros_like(state.model);
            double loss = stmodel::batch_nll(state.model, ctx.feats, ctx.adj, batch, cfg.threads, &grads);
            stmodel::adam_step(state.model, grads, state.adam, lr);
            loss_sum += loss * static_cast<double>(count);
            n_done += count;
        }
        epoch_nll = loss_sum / static_cast<double>(n_done);
        if (use_val) {
            double val_nll = stmodel::batch_nll(state.model, ctx.feats, ctx.adj,
                                                std::span<const stmodel::TrainSample>(val),
                                                cfg.threads, nullptr);
            log_debug("e_step epoch=" + std::to_string(epoch) + " train_nll=" + std::to_string(epoch_nll) +
                      " val_nll=" + std::to_string(val_nll));
            if (val_nll < best_val - 1e-9) {
                best_val = val_nll;
                best_model = state.model;
                best_adam = state.adam;
                kept_train_nll = epoch_nll;
                bad_epochs = 0;
            } else if (++bad_epochs > cfg.early_stop_patience) {
                state.model = std::move(best_model);
                state.adam = std::move(best_adam);
                epoch_nll = kept_train_nll;
                log_debug("e_step early stop at epoch " + std::to_string(epoch));
                break;
            }
        } else {
            log_debug("e_step epoch=" + std::to_string(epoch) + " train_nll=" + std::to_string(epoch_nll));
        }
    }
    if (use_val && bad_epochs <= cfg.early_stop_patience && std::isfinite(best_val)) {
        // Training ran out of epochs; keep the best validation snapshot.
        state.model = std::move(best_model);
        state.adam = std::move(best_adam);
        epoch_nll = kept_train_nll;
    }

    int64_t revision = state.table.revision + 1;
    state.table = stmodel::materialize_table(state.model, ctx.feats, ctx.adj,
                                             state.table_context(cfg), cfg.threads);
    state.table.revision = revision;
    return epoch_nll;
}

int64_t m_step(const EmContext& ctx, EmState& state, const EmConfig& cfg) {
    (void)ctx;
    int64_t reassigned = 0;
    int n = static_cast<int>(state.pairs.size());
#ifdef _OPENMP
#pragma omp parallel for num_threads(std::max(1, cfg.threads)) schedule(static) \
    reduction(+ : reassigned) if (cfg.threads > 1)
#endif
    for (int i = 0; i < n; ++i) {
        PairSample& p = state.pairs[static_cast<size_t>(i)];
        const auto& routes = p.candidates.routes;
        int best = -1;
        double best_metric = 0.0;
        for (size_t c = 0; c < routes.size(); ++c) {
            auto [mu, sigma] = stmodel::aggregate_route(routes[c].segment_ids, state.table, p.ctx.time_step);
            double metric = cfg.use_nll_assignment ? stmodel::pair_nll(mu, sigma, p.t_obs)
                                                   : std::abs(p.t_obs - mu);
            if (best < 0 || metric < best_metric ||
                (metric == best_metric && tie_prefers(routes[c], routes[static_cast<size_t>(best)]))) {
                best = static_cast<int>(c);
                best_metric = metric;
            }
        }
        if (best != p.candidates.assigned_index) {
            p.candidates.assigned_index = best;
            reassigned += 1;
        }
    }
    state.reassigned_count = reassigned;
    return reassigned;
}

namespace {

void refresh_candidate_sets(const EmContext& ctx, EmState& state, const EmConfig& cfg) {
    std::vector<double> weights(ctx.feats.base_times.size());
    for (auto& p : state.pairs) {
        for (size_t e = 0; e < weights.size(); ++e) {
            weights[e] = state.table.mu.at(static_cast<int>(e), p.ctx.time_step);
        }
        try {
            pathing::CandidateSet fresh =
                pathing::candidate_set(*ctx.net, weights, p.origin_node, p.dest_node, cfg.m, cfg.tau);
            fresh.assigned_index = 0;
            p.candidates = std::move(fresh);
        } catch (const NoPathError&) {
            // Keep the previous candidate set; weights are positive so this
            // cannot actually happen unless the network changed.
        }
    }
}

// Shared EM loop body used by both a fresh run and a resumed one.
void run_loop(const EmContext& ctx, EmState& state, const EmConfig& cfg) {
    while (state.iteration < cfg.max_em_iters) {
        int iter = state.iteration + 1;
        double lr = cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(state.iteration));
        autodiff::Mat prev_mu = state.table.mu;

        double nll = e_step(ctx, state, cfg, lr);

        double delta = 0.0;
        for (size_t k = 0; k < prev_mu.size(); ++k) {
            delta = std::max(delta, std::abs(state.table.mu.a[k] - prev_mu.a[k]));
        }
        if (cfg.refresh_candidates) refresh_candidate_sets(ctx, state, cfg);
        int64_t reassigned = m_step(ctx, state, cfg);

        state.iteration = iter;
        state.delta_mu_max = delta;
        state.nll_history.push_back(nll);
        state.delta_mu_history.push_back(delta);
        state.reassigned_history.push_back(reassigned);
        state.assignment_history.push_back(state.assignments());
        log_info("em iter=" + std::to_string(iter) + " nll=" + std::to_string(nll) +
                 " delta_mu_max=" + std::to_string(delta) + " reassigned=" + std::to_string(reassigned));

        if (delta < cfg.delta_mu_tol_s) {
            state.converged = true;
            state.stop_reason = "delta_mu_below_tolerance";
            return;
        }
        if (reassigned == 0) {
            state.converged = true;
            state.stop_reason = "assignments_stable";
            return;
        }
    }
    state.stop_reason = "max_iterations";
}

} // namespace

EmState run_em(const EmContext& ctx, const std::vector<simkit::SparseTrajectory>& trajectories,
               const EmConfig& cfg) {
    require(cfg.max_em_iters >= 0, "max_em_iters must be >= 0");
    EmState state;
    state.model = stmodel::ModelParams::init(cfg.model, mix_seed(cfg.seed, 1));
    state.adam = stmodel::AdamState::zeros_like(state.model);
    state.rng = RandomStream(mix_seed(cfg.seed, 2));
    state.pairs = build_pairs(*ctx.net, trajectories, cfg.m, cfg.tau, cfg.snap_radius_m);
    state.table = stmodel::materialize_table(state.model, ctx.feats, ctx.adj,
                                             state.table_context(cfg), cfg.threads);
    state.table.revision = 0;
    // Assignment under the free-flow table; recorded as the iteration-0
    // baseline every later iteration is compared against.
    m_step(ctx, state, cfg);
    state.assignment_history.push_back(state.assignments());
    run_loop(ctx, state, cfg);
    return state;
}

void resume_em(const EmContext& ctx, EmState& state, const EmConfig& cfg) {
    run_loop(ctx, state, cfg);
}

InferResult infer_trajectory(const EmContext& ctx, const stmodel::TravelTimeTable& table,
                             const simkit::SparseTrajectory& traj, int m, double tau,
                             double snap_radius_m) {
    InferResult out;
    double total_var = 0.0;
    for (size_t i = 0; i + 1 < traj.fixes.size(); ++i) {
        const auto& a = traj.fixes[i];
        const auto& b = traj.fixes[i + 1];
        InferPairResult pr;
        pr.time_step = time_step_of(a.unix_ts);
        ++out.pairs_total;
        try {
            pr.origin_node = netgraph::snap_point(*ctx.net, a.lon, a.lat, snap_radius_m);
            pr.dest_node = netgraph::snap_point(*ctx.net, b.lon, b.lat, snap_radius_m);
            if (pr.origin_node == pr.dest_node) {
                pr.ok = true; // no displacement, contributes zero time
            } else {
                pathing::CandidateSet cands = pathing::candidate_set(
                    *ctx.net, ctx.base_weights, pr.origin_node, pr.dest_node, m, tau);
                int best = -1;
                double best_mu = 0.0;
                double best_var = 0.0;
                for (size_t c = 0; c < cands.routes.size(); ++c) {
                    auto [mu, sigma] =
                        stmodel::aggregate_route(cands.routes[c].segment_ids, table, pr.time_step);
                    if (best < 0 || mu < best_mu ||
                        (mu == best_mu &&
                         tie_prefers(cands.routes[c], cands.routes[static_cast<size_t>(best)]))) {
                        best = static_cast<int>(c);
                        best_mu = mu;
                        best_var = sigma * sigma;
                    }
                }
                pr.route = cands.routes[static_cast<size_t>(best)].segment_ids;
                pr.mu_s = best_mu;
                pr.sigma_s = std::sqrt(best_var);
                pr.ok = true;
            }
        } catch (const NoNodeInRange& e) {
            pr.error = e.what();
        } catch (const NoPathError& e) {
            pr.error = e.what();
        }
        if (pr.ok) {
            out.total_s += pr.mu_s;
            total_var += pr.sigma_s * pr.sigma_s;
            ++out.pairs_ok;
        } else {
            out.full_coverage = false;
        }
        out.pairs.push_back(std::move(pr));
    }
    out.total_sigma_s = std::sqrt(total_var);
    return out;
}

std::vector<int64_t> traversal_counts(const EmState& state, size_t num_segments) {
    std::vector<int64_t> counts(num_segments * kTimeSteps, 0);
    for (const auto& p : state.pairs) {
        const auto& route =
            p.candidates.routes[static_cast<size_t>(p.candidates.assigned_index)].segment_ids;
        for (int id : route) {
            counts[static_cast<size_t>(id) * kTimeSteps + static_cast<size_t>(p.ctx.time_step)] += 1;
        }
    }
    return counts;
}

void save_checkpoint(const EmState& state, const EmConfig& cfg, const std::string& path) {
    size_t num_segments = static_cast<size_t>(state.table.mu.rows);
    nlohmann::json hist_assign = nlohmann::json::array();
    for (const auto& a : state.assignment_history) hist_assign.push_back(a);
    nlohmann::json j{
        {"format", "sparse-eta-checkpoint-v1"},
        {"config", em_config_to_json(cfg)},
        {"iteration", state.iteration},
        {"converged", state.converged},
        {"stop_reason", state.stop_reason},
        {"model", serialize::params_to_json(state.model)},
        {"adam", serialize::adam_to_json(state.adam)},
        {"table", serialize::table_to_json(state.table)},
        {"rng", state.rng.serialize()},
        {"pair_count", state.pairs.size()},
        {"assignments", state.assignments()},
        {"assignment_history", hist_assign},
        {"nll_history", state.nll_history},
        {"delta_mu_history", state.delta_mu_history},
        {"reassigned_history", state.reassigned_history},
        {"delta_mu_max", state.delta_mu_max},
        {"reassigned_count", state.reassigned_count},
        {"traversal_counts", serialize::i64s_to_b64(traversal_counts(state, num_segments))},
    };
    serialize::write_json_file(j, path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    nlohmann::json j = serialize::read_json_file(path);
    if (j.value("format", "") != "sparse-eta-checkpoint-v1") {
        throw ParseError(path + ": not a checkpoint file");
    }
    LoadedCheckpoint out;
    out.config = em_config_from_json(j.at("config"));
    out.state.iteration = j.at("iteration").get<int>();
    out.state.converged = j.at("converged").get<bool>();
    out.state.stop_reason = j.at("stop_reason").get<std::string>();
    out.state.model = serialize::params_from_json(j.at("model"));
    out.state.adam = serialize::adam_from_json(j.at("adam"), out.state.model);
    out.state.table = serialize::table_from_json(j.at("table"));
    out.state.rng.deserialize(j.at("rng").get<std::string>());
    out.state.nll_history = j.at("nll_history").get<std::vector<double>>();
    out.state.delta_mu_history = j.at("delta_mu_history").get<std::vector<double>>();
    out.state.reassigned_history = j.at("reassigned_history").get<std::vector<int64_t>>();
    for (const auto& a : j.at("assignment_history")) {
        out.state.assignment_history.push_back(a.get<std::vector<int>>());
    }
    out.state.delta_mu_max = j.at("delta_mu_max").get<double>();
    out.state.reassigned_count = j.at("reassigned_count").get<int64_t>();
    out.traversal = serialize::b64_to_i64s(j.at("traversal_counts").get<std::string>());
    out.pending_assignments = j.at("assignments").get<std::vector<int>>();
    out.pair_count = j.at("pair_count").get<size_t>();
    return out;
}

void attach_pairs(LoadedCheckpoint& ckpt, const EmContext& ctx,
                  const std::vector<simkit::SparseTrajectory>& trajectories) {
    ckpt.state.pairs = build_pairs(*ctx.net, trajectories, ckpt.config.m, ckpt.config.tau,
                                   ckpt.config.snap_radius_m);
    require(ckpt.state.pairs.size() == ckpt.pair_count,
            "corpus does not reproduce the checkpoint's pair count (" +
                std::to_string(ckpt.state.pairs.size()) + " vs " + std::to_string(ckpt.pair_count) + ")");
    require(ckpt.pending_assignments.size() == ckpt.state.pairs.size(),
            "checkpoint assignment vector has the wrong length");
    for (size_t i = 0; i < ckpt.state.pairs.size(); ++i) {
        int idx = ckpt.pending_assignments[i];
        auto& cands = ckpt.state.pairs[i].candidates;
        require(idx >= 0 && static_cast<size_t>(idx) < cands.routes.size(),
                "checkpoint assignment index out of range");
        cands.assigned_index = idx;
    }
}

} // namespace sparse_eta::emtrain
