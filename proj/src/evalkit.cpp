#include "sparse_eta/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"
#include "sparse_eta/serialize.hpp"

namespace sparse_eta::evalkit {

namespace {

std::string fmt_num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

std::string bin_label(int bin) {
    int start_min = (kRouteBinFirstStep + bin) * 30;
    int end_min = start_min + 30;
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%02d:%02d-%02d:%02d", start_min / 60, start_min % 60,
                  end_min / 60, end_min % 60);
    return buf;
}

nlohmann::json tte_metrics_json(const TteMetrics& m) {
    return nlohmann::json{
        {"rmse_min", m.rmse_min}, {"mae_min", m.mae_min}, {"mape_pct", m.mape_pct}, {"n", m.n}};
}

} // namespace

TteMetrics tte_metrics(std::span<const double> pred_seconds, std::span<const double> true_seconds) {
    if (pred_seconds.size() != true_seconds.size()) {
        throw ValidationError("tte_metrics: prediction and truth lengths differ (" +
                              std::to_string(pred_seconds.size()) + " vs " +
                              std::to_string(true_seconds.size()) + ")");
    }
    if (pred_seconds.empty()) throw ValidationError("tte_metrics: empty input");
    double sq_sum = 0.0;
    double abs_sum = 0.0;
    double ape_sum = 0.0;
    int64_t n_pos = 0;
    int64_t n = static_cast<int64_t>(pred_seconds.size());
    for (size_t i = 0; i < pred_seconds.size(); ++i) {
        double err = pred_seconds[i] - true_seconds[i];
        sq_sum += err * err;
        abs_sum += std::abs(err);
        if (true_seconds[i] > 0.0) {
            ape_sum += std::abs(err) / true_seconds[i];
            ++n_pos;
        }
    }
    TteMetrics out;
    out.rmse_min = std::sqrt(sq_sum / static_cast<double>(n)) / 60.0;
    out.mae_min = abs_sum / static_cast<double>(n) / 60.0;
    out.mape_pct = n_pos == 0 ? 0.0 : 100.0 * ape_sum / static_cast<double>(n_pos);
    out.n = n;
    return out;
}

double route_accuracy(const netgraph::RoadNetwork& net, std::span<const int> truth,
                      std::span<const int> inferred, bool undirected_overlap) {
    if (truth.empty() && inferred.empty()) return 1.0;
    if (truth.empty() || inferred.empty()) return 0.0;
    auto key_of = [&](int seg_id) -> int64_t {
        return undirected_overlap ? net.segment(seg_id).logical_id
                                  : static_cast<int64_t>(seg_id);
    };
    double len_truth = 0.0;
    std::unordered_map<int64_t, double> truth_len;
    for (int id : truth) {
        double len = net.segment(id).length_m;
        len_truth += len;
        truth_len.emplace(key_of(id), len);
    }
    double len_inf = 0.0;
    double overlap = 0.0;
    for (int id : inferred) {
        len_inf += net.segment(id).length_m;
        auto it = truth_len.find(key_of(id));
        if (it != truth_len.end()) {
            overlap += it->second;
            truth_len.erase(it); // a segment counts once
        }
    }
    return overlap / std::max(len_truth, len_inf);
}

double route_accuracy(const netgraph::RoadNetwork& net, const pathing::Route& truth,
                      const pathing::Route& inferred, bool undirected_overlap) {
    return route_accuracy(net, std::span<const int>(truth.segment_ids),
                          std::span<const int>(inferred.segment_ids), undirected_overlap);
}

RouteReport route_report(const std::vector<std::pair<int, double>>& samples) {
    RouteReport rep;
    std::array<double, kRouteBins> sums{};
    double total = 0.0;
    for (const auto& [step, acc] : samples) {
        total += acc;
        ++rep.n;
        int bin = step - kRouteBinFirstStep;
        if (bin >= 0 && bin < kRouteBins) {
            sums[static_cast<size_t>(bin)] += acc;
            ++rep.bins[static_cast<size_t>(bin)].n;
        }
    }
    rep.mean_accuracy = rep.n == 0 ? 0.0 : total / static_cast<double>(rep.n);
    for (int b = 0; b < kRouteBins; ++b) {
        auto& bin = rep.bins[static_cast<size_t>(b)];
        bin.accuracy = bin.n == 0 ? 0.0 : sums[static_cast<size_t>(b)] / static_cast<double>(bin.n);
    }
    return rep;
}

const std::string& speed_state_name(SpeedState s) {
    static const std::string names[4] = {"very_congested", "congested", "slow", "unblocked"};
    return names[static_cast<size_t>(s)];
}

SpeedState classify_speed_state(double speed_kph, double limit_kph) {
    if (!(limit_kph > 0.0)) throw ValidationError("classify_speed_state: limit must be positive");
    if (speed_kph < 0.0) throw ValidationError("classify_speed_state: negative speed");
    int q = static_cast<int>(std::floor(4.0 * speed_kph / limit_kph));
    q = std::clamp(q, 0, 3);
    return static_cast<SpeedState>(q);
}

std::vector<SegmentCondition> condition_map(const stmodel::TravelTimeTable& table,
                                            const netgraph::RoadNetwork& net, int time_step,
                                            std::span<const int64_t> traversal_totals) {
    if (time_step < 0 || time_step >= kTimeSteps) {
        throw ValidationError("condition_map: time_step out of range");
    }
    if (static_cast<size_t>(table.mu.rows) != net.num_segments()) {
        throw ValidationError("condition_map: table does not cover the network");
    }
    if (!traversal_totals.empty() && traversal_totals.size() != net.num_segments()) {
        throw ValidationError("condition_map: traversal totals have the wrong length");
    }
    std::vector<SegmentCondition> out;
    out.reserve(net.num_segments());
    for (size_t e = 0; e < net.num_segments(); ++e) {
        const auto& seg = net.segment(static_cast<int>(e));
        SegmentCondition c;
        c.segment_id = static_cast<int>(e);
        double mu = table.mu.at(static_cast<int>(e), time_step);
        c.speed_kph = 3.6 * seg.length_m / mu;
        if (!traversal_totals.empty() && traversal_totals[e] == 0) {
            c.no_data = true;
            c.state = SpeedState::Unblocked;
        } else {
            c.state = classify_speed_state(c.speed_kph, seg.speed_limit_mps * 3.6);
        }
        out.push_back(c);
    }
    return out;
}

std::vector<int64_t> segment_totals(std::span<const int64_t> traversal_counts,
                                    size_t num_segments) {
    if (traversal_counts.size() != num_segments * kTimeSteps) {
        throw ValidationError("segment_totals: count matrix has the wrong size");
    }
    std::vector<int64_t> out(num_segments, 0);
    for (size_t e = 0; e < num_segments; ++e) {
        for (int t = 0; t < kTimeSteps; ++t) {
            out[e] += traversal_counts[e * kTimeSteps + static_cast<size_t>(t)];
        }
    }
    return out;
}

std::vector<int> truth_subroute(const simkit::DenseTrajectory& dense, double t_a, double t_b) {
    auto find_time = [&](double t, size_t from) -> size_t {
        for (size_t i = from; i < dense.node_times.size(); ++i) {
            if (dense.node_times[i] == t) return i;
        }
        throw ValidationError("truth_subroute: timestamp not on trajectory " +
                              std::to_string(dense.trajectory_id));
    };
    size_t ia = find_time(t_a, 0);
    size_t ib = find_time(t_b, ia);
    return {dense.route.segment_ids.begin() + static_cast<std::ptrdiff_t>(ia),
            dense.route.segment_ids.begin() + static_cast<std::ptrdiff_t>(ib)};
}

MuRecovery mu_recovery_mape(const stmodel::TravelTimeTable& table, const autodiff::Mat& true_mu,
                            std::span<const int64_t> traversal_counts, int64_t min_count) {
    if (table.mu.rows != true_mu.rows || table.mu.cols != true_mu.cols) {
        throw ValidationError("mu_recovery_mape: table and truth shapes differ");
    }
    size_t num_segments = static_cast<size_t>(table.mu.rows);
    if (traversal_counts.size() != num_segments * kTimeSteps) {
        throw ValidationError("mu_recovery_mape: count matrix has the wrong size");
    }
    MuRecovery out;
    double ape_sum = 0.0;
    for (size_t e = 0; e < num_segments; ++e) {
        for (int t = 0; t < kTimeSteps; ++t) {
            if (traversal_counts[e * kTimeSteps + static_cast<size_t>(t)] < min_count) continue;
            double truth = true_mu.at(static_cast<int>(e), t);
            if (!(truth > 0.0)) continue;
            ape_sum += std::abs(table.mu.at(static_cast<int>(e), t) - truth) / truth;
            ++out.cells;
        }
    }
    out.mape_pct = out.cells == 0 ? 0.0 : 100.0 * ape_sum / static_cast<double>(out.cells);
    return out;
}

void write_eval_report_json(const EvalReport& rep, const std::string& path) {
    nlohmann::json breakdown = nlohmann::json::object();
    for (const auto& [label, m] : rep.tte.breakdown) breakdown[label] = tte_metrics_json(m);
    nlohmann::json route = nlohmann::json::object();
    for (const auto& [label, rr] : rep.route) {
        nlohmann::json bins = nlohmann::json::array();
        for (int b = 0; b < kRouteBins; ++b) {
            const auto& bin = rr.bins[static_cast<size_t>(b)];
            bins.push_back({{"time_bin", bin_label(b)}, {"accuracy", bin.accuracy}, {"n", bin.n}});
        }
        route[label] = {{"mean_accuracy", rr.mean_accuracy}, {"n", rr.n}, {"bins", bins}};
    }
    nlohmann::json mu_rec = nlohmann::json::object();
    for (const auto& [label, m] : rep.mu_recovery) {
        mu_rec[label] = {{"mape_pct", m.mape_pct}, {"cells", m.cells}};
    }
    nlohmann::json gain = nlohmann::json::object();
    for (const auto& [label, g] : rep.assignment_gain) {
        gain[label] = {{"iteration0_accuracy", g.first}, {"final_accuracy", g.second}};
    }
    nlohmann::json j{
        {"tte", {{"overall", tte_metrics_json(rep.tte.overall)}, {"by_interval", breakdown}}},
        {"route", route},
        {"mu_recovery", mu_rec},
        {"assignment_gain", gain},
    };
    serialize::write_json_file(j, path);
}

void write_eval_report_csv(const EvalReport& rep, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValidationError("cannot write " + path);
    os << "metric,sampling_interval,time_bin,value,n\n";
    auto tte_rows = [&](const std::string& label, const TteMetrics& m) {
        os << "tte_rmse_min," << label << ",all," << fmt_num(m.rmse_min) << "," << m.n << "\n";
        os << "tte_mae_min," << label << ",all," << fmt_num(m.mae_min) << "," << m.n << "\n";
        os << "tte_mape_pct," << label << ",all," << fmt_num(m.mape_pct) << "," << m.n << "\n";
    };
    tte_rows("all", rep.tte.overall);
    for (const auto& [label, m] : rep.tte.breakdown) tte_rows(label, m);
    for (const auto& [label, rr] : rep.route) {
        os << "route_accuracy," << label << ",all," << fmt_num(rr.mean_accuracy) << "," << rr.n
           << "\n";
        for (int b = 0; b < kRouteBins; ++b) {
            const auto& bin = rr.bins[static_cast<size_t>(b)];
            os << "route_accuracy," << label << "," << bin_label(b) << "," << fmt_num(bin.accuracy)
               << "," << bin.n << "\n";
        }
    }
    for (const auto& [label, m] : rep.mu_recovery) {
        os << "mu_mape_pct," << label << ",all," << fmt_num(m.mape_pct) << "," << m.cells << "\n";
    }
    for (const auto& [label, g] : rep.assignment_gain) {
        os << "assignment_accuracy_iter0," << label << ",all," << fmt_num(g.first) << ",\n";
        os << "assignment_accuracy_final," << label << ",all," << fmt_num(g.second) << ",\n";
    }
    if (!os.good()) throw ValidationError("short write to " + path);
}

void write_condition_geojson(const std::vector<SegmentCondition>& conds,
                             const netgraph::RoadNetwork& net, int time_step,
                             const std::string& path) {
    nlohmann::json features = nlohmann::json::array();
    for (const auto& c : conds) {
        const auto& seg = net.segment(c.segment_id);
        const auto& a = net.node(seg.from_node);
        const auto& b = net.node(seg.to_node);
        features.push_back({
            {"type", "Feature"},
            {"geometry",
             {{"type", "LineString"},
              {"coordinates", {{a.lon, a.lat}, {b.lon, b.lat}}}}},
            {"properties",
             {{"segment_id", c.segment_id},
              {"logical_id", seg.logical_id},
              {"road_class", netgraph::road_class_name(seg.road_class)},
              {"length_m", seg.length_m},
              {"speed_limit_kph", seg.speed_limit_mps * 3.6},
              {"speed_kph", c.speed_kph},
              {"state", speed_state_name(c.state)},
              {"no_data", c.no_data},
              {"time_step", time_step}}},
        });
    }
    nlohmann::json j{{"type", "FeatureCollection"}, {"features", features}};
    serialize::write_json_file(j, path);
}

} // namespace sparse_eta::evalkit
