#include <cstdint>
#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"
#include "sparse_eta/cli.hpp"
#include "sparse_eta/common.hpp"
#include "sparse_eta/config.hpp"

namespace {

struct CommonFlags {
    std::string config_path;
    int64_t seed = -1;
    int threads = 0;
    std::string out_dir;
};

void add_common(CLI::App* sub, CommonFlags& f) {
    sub->add_option("--config", f.config_path, "Experiment config file (TOML-style)");
    sub->add_option("--seed", f.seed, "Master seed; overrides run.seed");
    sub->add_option("--threads", f.threads, "Worker threads; overrides run.threads");
    sub->add_option("--out", f.out_dir, "Output directory; overrides run.out_dir");
}

sparse_eta::config::ExperimentConfig resolve(const CommonFlags& f) {
    sparse_eta::config::ExperimentConfig cfg;
    if (!f.config_path.empty()) cfg = sparse_eta::config::load_config(f.config_path);
    if (f.seed >= 0) {
        cfg.seed = static_cast<uint64_t>(f.seed);
        cfg.seed_set = true;
    }
    if (f.threads > 0) cfg.threads = f.threads;
    if (!f.out_dir.empty()) cfg.out_dir = f.out_dir;
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Travel-time estimation and route recovery from sparse GPS trajectories"};
    app.require_subcommand(1);

    CommonFlags gen_f, train_f, eval_f, infer_f, cond_f;
    CLI::App* gen = app.add_subcommand("gen", "Generate network, ground truth, and corpora");
    add_common(gen, gen_f);
    CLI::App* train = app.add_subcommand("train", "Train a model per corpus with the EM loop");
    add_common(train, train_f);
    CLI::App* eval = app.add_subcommand("eval", "Evaluate checkpoints against held-out data");
    add_common(eval, eval_f);

    CLI::App* infer = app.add_subcommand("infer", "Infer routes and times for one trajectory");
    add_common(infer, infer_f);
    int64_t trajectory_id = -1;
    double infer_ratio = 0.0;
    infer->add_option("--trajectory", trajectory_id, "Trajectory id to infer")->required();
    infer->add_option("--ratio", infer_ratio, "Keep ratio selecting corpus and checkpoint");

    CLI::App* cond = app.add_subcommand("export-conditions", "Export road-condition GeoJSON maps");
    add_common(cond, cond_f);
    double cond_ratio = 0.0;
    cond->add_option("--ratio", cond_ratio, "Keep ratio selecting the checkpoint");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return sparse_eta::cli::cmd_gen(resolve(gen_f));
        if (train->parsed()) return sparse_eta::cli::cmd_train(resolve(train_f));
        if (eval->parsed()) return sparse_eta::cli::cmd_eval(resolve(eval_f));
        if (infer->parsed()) {
            return sparse_eta::cli::cmd_infer(resolve(infer_f), trajectory_id, infer_ratio);
        }
        if (cond->parsed()) {
            return sparse_eta::cli::cmd_export_conditions(resolve(cond_f), cond_ratio);
        }
    } catch (const std::exception& e) {
        sparse_eta::log_error(e.what());
        return 1;
    }
    return 1;
}
