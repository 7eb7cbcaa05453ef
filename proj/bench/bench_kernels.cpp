// Times the three hot kernels at several thread counts against the serial
// reference path. Build target `bench_kernels`; not part of the test suite.
#include <chrono>
#include <cstdio>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "sparse_eta/emtrain.hpp"

using namespace sparse_eta;
using namespace sparse_eta::emtrain;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<simkit::SparseTrajectory> make_corpus(const netgraph::RoadNetwork& net, int trips) {
    simkit::RushProfile prof;
    auto truth = simkit::gen_ground_truth(net, prof, 1);
    RandomStream rng(2);
    std::vector<simkit::SparseTrajectory> out;
    for (int i = 0; i < trips; ++i) {
        simkit::TripSpec spec;
        auto [o, d] = simkit::sample_od(net, 6, rng);
        spec.origin_node = o;
        spec.dest_node = d;
        spec.departure_unix = 1767571200.0 + 6.0 * 3600 + rng.uniform(0.0, 12.0 * 3600);
        auto dense = simkit::gen_trip(net, truth, spec, i, rng);
        out.push_back(simkit::sparsify(net, dense, 0.125));
    }
    return out;
}

struct Timing {
    double best = 1e300;
    int reps = 0;
};

template <typename F>
Timing time_best(F&& fn, int reps) {
    Timing t;
    t.reps = reps;
    for (int i = 0; i < reps; ++i) {
        auto t0 = Clock::now();
        fn();
        t.best = std::min(t.best, seconds_since(t0));
    }
    return t;
}

} // namespace

int main() {
#ifdef _OPENMP
    int max_threads = omp_get_max_threads();
#else
    int max_threads = 1;
    std::printf("built without OpenMP: every path below is the serial reference\n");
#endif
    std::vector<int> counts{1};
    for (int t = 2; t <= max_threads && t <= 8; t *= 2) counts.push_back(t);

    simkit::GridClassPlan plan;
    auto net = simkit::gen_grid_network(8, 8, 500.0, plan, 1);
    auto ctx = make_context(net);
    auto corpus = make_corpus(net, 600);
    auto pairs = build_pairs(net, corpus, 5, 0.8, 100.0);

    stmodel::ModelConfig mc; // production dimensions
    auto params = stmodel::ModelParams::init(mc, 7);
    std::vector<stmodel::TrainSample> samples;
    for (const auto& p : pairs) {
        stmodel::TrainSample s;
        s.route = p.candidates.routes[static_cast<size_t>(p.candidates.assigned_index)].segment_ids;
        s.t_obs = p.t_obs;
        s.ctx = p.ctx;
        s.pair_id = p.pair_id;
        samples.push_back(std::move(s));
    }
    std::printf("lattice 8x8, %zu segments, %zu pairs, hidden_dim %d\n", net.num_segments(),
                samples.size(), mc.hidden_dim);

    EmState state;
    state.model = params;
    state.pairs = pairs;
    state.table = stmodel::materialize_table(params, ctx.feats, ctx.adj,
                                             stmodel::TemporalContext{}, 1);

    std::printf("%-20s %8s %12s %10s\n", "kernel", "threads", "best_ms", "speedup");
    for (const char* kernel : {"batch_nll", "materialize_table", "m_step"}) {
        double serial_best = 0.0;
        for (int threads : counts) {
            Timing t;
            if (std::string(kernel) == "batch_nll") {
                auto grads = stmodel::ModelGrads::zeros_like(params);
                t = time_best(
                    [&] {
                        stmodel::batch_nll(params, ctx.feats, ctx.adj, samples, threads, &grads);
                    },
                    3);
            } else if (std::string(kernel) == "materialize_table") {
                t = time_best(
                    [&] {
                        auto tab = stmodel::materialize_table(params, ctx.feats, ctx.adj,
                                                              stmodel::TemporalContext{}, threads);
                    },
                    5);
            } else {
                EmConfig cfg;
                cfg.threads = threads;
                t = time_best(
                    [&] {
                        for (auto& p : state.pairs) p.candidates.assigned_index = 0;
                        m_step(ctx, state, cfg);
                    },
                    5);
            }
            if (threads == 1) serial_best = t.best;
            std::printf("%-20s %8d %12.2f %9.2fx\n", kernel, threads, t.best * 1e3,
                        serial_best / t.best);
        }
    }
    return 0;
}
