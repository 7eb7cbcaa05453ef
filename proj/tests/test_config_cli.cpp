#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "sparse_eta/cli.hpp"
#include "sparse_eta/serialize.hpp"

using namespace sparse_eta;
using config::ExperimentConfig;

namespace {

namespace fs = std::filesystem;

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

ExperimentConfig parse_text(const std::string& text) {
    return config::config_from_values(config::parse_kv_document(text, "<test>"), "<test>");
}

// A complete tiny experiment: 3x3 grid, a handful of trips, one ratio.
std::string tiny_toml(const fs::path& out_dir, int trips = 12) {
    std::ostringstream ss;
    ss << "[run]\n"
       << "out_dir = \"" << out_dir.string() << "\"\n"
       << "seed = 42\n"
       << "[grid]\n"
       << "rows = 3\ncols = 3\nspacing_m = 500.0\n"
       << "[trips]\n"
       << "count = " << trips << "\nmin_hops = 2\n"
       << "departure_windows = [[21600.0, 36000.0]]\n"
       << "[sparsify]\n"
       << "keep_ratios = [0.25]\n"
       << "[model]\n"
       << "hidden_dim = 8\nhead_hidden_dim = 8\n"
       << "[train]\n"
       << "max_em_iters = 1\nepochs = 1\nlr = 0.001\nbatch_size = 32\nm = 3\n"
       << "[eval]\n"
       << "test_fraction = 0.3\n";
    return ss.str();
}

ExperimentConfig write_and_load(const fs::path& dir, const std::string& text) {
    fs::create_directories(dir);
    auto cfg_path = dir / "exp.toml";
    std::ofstream(cfg_path) << text;
    return config::load_config(cfg_path.string());
}

} // namespace

TEST_CASE("kv parser handles sections, scalars, strings, and nested arrays") {
    auto vals = config::parse_kv_document("# comment\n"
                                          "[run]\n"
                                          "seed = 7\n"
                                          "out_dir = \"a b/c\" # trailing comment\n"
                                          "threads = 4\n"
                                          "\n"
                                          "[truth]\n"
                                          "cv = 0.15\n"
                                          "flag = true\n"
                                          "off = false\n"
                                          "[trips]\n"
                                          "route_probs = [1.0, 0.0, 0.0]\n"
                                          "departure_windows = [[100, 200], [300, 400]]\n",
                                          "<t>");
    CHECK(vals.at("run.seed").get<int64_t>() == 7);
    CHECK(vals.at("run.out_dir").get<std::string>() == "a b/c");
    CHECK(vals.at("run.threads").get<int64_t>() == 4);
    CHECK(vals.at("truth.cv").get<double>() == 0.15);
    CHECK(vals.at("truth.cv").is_number_float());
    CHECK(vals.at("run.seed").is_number_integer());
    CHECK(vals.at("truth.flag").get<bool>() == true);
    CHECK(vals.at("truth.off").get<bool>() == false);
    auto probs = vals.at("trips.route_probs");
    REQUIRE(probs.is_array());
    CHECK(probs[0].get<double>() == 1.0);
    auto windows = vals.at("trips.departure_windows");
    REQUIRE(windows.is_array());
    CHECK(windows[1][0].get<double>() == 300.0);
    // A '#' inside a quoted string is not a comment.
    auto vals2 = config::parse_kv_document("[run]\nout_dir = \"has#hash\"\n", "<t>");
    CHECK(vals2.at("run.out_dir").get<std::string>() == "has#hash");
}

TEST_CASE("kv parser rejects malformed documents") {
    CHECK_THROWS_AS(config::parse_kv_document("seed = 1\n", "<t>"), ParseError); // outside a section
    CHECK_THROWS_AS(config::parse_kv_document("[run]\nseed = 1\nseed = 2\n", "<t>"), ParseError);
    CHECK_THROWS_AS(config::parse_kv_document("[run]\nseed\n", "<t>"), ParseError);
    CHECK_THROWS_AS(config::parse_kv_document("[run]\nseed = \n", "<t>"), ParseError);
    CHECK_THROWS_AS(config::parse_kv_document("[run]\nseed = 1 2\n", "<t>"), ParseError);
    CHECK_THROWS_AS(config::parse_kv_document("[run\nseed = 1\n", "<t>"), ParseError);
    CHECK_THROWS_AS(config::parse_kv_document("[run]\nx = [1, \n", "<t>"), ParseError);
    CHECK_THROWS_AS(config::parse_kv_document("[run]\nx = \"unterminated\n", "<t>"), ParseError);
}

TEST_CASE("config binding applies defaults and rejects unknown keys") {
    auto cfg = parse_text("[run]\nseed = 5\n");
    CHECK(cfg.seed == 5);
    CHECK(cfg.seed_set);
    CHECK(cfg.out_dir == "out");
    CHECK(cfg.grid_rows == 8);
    CHECK(cfg.grid_cols == 8);
    CHECK(cfg.trip_count == 2000);
    CHECK(cfg.keep_ratios == std::vector<double>{0.125, 0.0625, 0.03125});
    CHECK(cfg.model.hidden_dim == 32);
    CHECK(cfg.max_em_iters == 10);
    CHECK(cfg.test_fraction == 0.2);
    CHECK(cfg.condition_steps == std::vector<int>{12, 34});
    CHECK(cfg.resolved_train_ratios() == cfg.keep_ratios);
    CHECK(cfg.resolved_eval_ratios() == cfg.keep_ratios);

    auto full = parse_text("[run]\nseed = 1\n[train]\nkeep_ratios = [0.125]\nlr = 0.01\n"
                           "[eval]\nkeep_ratios = [0.0625]\n");
    CHECK(full.resolved_train_ratios() == std::vector<double>{0.125});
    CHECK(full.resolved_eval_ratios() == std::vector<double>{0.0625});
    CHECK(full.lr == 0.01);

    CHECK_THROWS_AS(parse_text("[run]\nseed = 1\nbogus = 2\n"), ParseError);
    CHECK_THROWS_AS(parse_text("[run]\nseed = 1\n[bogus]\nx = 1\n"), ParseError);
}

TEST_CASE("config validation catches out-of-range values") {
    // Type and shape problems are parse errors; range problems are
    // validation errors.
    CHECK_THROWS_AS(parse_text("[run]\nseed = -3\n"), ParseError);
    CHECK_THROWS_AS(parse_text("[run]\nseed = 1\n[grid]\nrows = 1\n"), ValidationError);
    CHECK_THROWS_AS(parse_text("[run]\nseed = 1\n[sparsify]\nkeep_ratios = [0.0]\n"),
                    ValidationError);
    CHECK_THROWS_AS(parse_text("[run]\nseed = 1\n[sparsify]\nkeep_ratios = [1.5]\n"),
                    ValidationError);
    CHECK_THROWS_AS(parse_text("[run]\nseed = 1\n[eval]\ntest_fraction = 1.0\n"), ValidationError);
    CHECK_THROWS_AS(parse_text("[run]\nseed = 1\n[eval]\ncondition_steps = [48]\n"),
                    ValidationError);
    CHECK_THROWS_AS(parse_text("[run]\nseed = 1\n[trips]\nroute_probs = [0.5, 0.5]\n"), ParseError);
    CHECK_THROWS_AS(parse_text("[run]\nseed = 1\n[trips]\ndeparture_windows = [[200, 100]]\n"),
                    ValidationError);
    CHECK_THROWS_AS(parse_text("[run]\nseed = 1\n[trips]\ndeparture_windows = [[0, 90000]]\n"),
                    ValidationError);
    // Booleans and numbers are type-checked.
    CHECK_THROWS_AS(parse_text("[run]\nseed = 1\n[train]\nuse_nll_assignment = 3\n"), ParseError);
    CHECK_THROWS_AS(parse_text("[run]\nseed = \"x\"\n"), ParseError);
}

TEST_CASE("em_config carries the training fields over") {
    auto cfg = parse_text("[run]\nseed = 9\nthreads = 3\n"
                          "[train]\nmax_em_iters = 4\nepochs = 7\nlr = 0.02\nlr_decay = 0.5\n"
                          "batch_size = 256\nm = 4\ntau = 0.7\nsnap_radius_m = 80.0\n"
                          "delta_mu_tol_s = 2.0\nval_fraction = 0.15\nearly_stop_patience = 3\n"
                          "use_nll_assignment = true\nrefresh_candidates = true\n"
                          "table_weather_id = 5\n"
                          "[model]\nhidden_dim = 16\n");
    auto em = cfg.em_config();
    CHECK(em.max_em_iters == 4);
    CHECK(em.epochs == 7);
    CHECK(em.lr == 0.02);
    CHECK(em.lr_decay == 0.5);
    CHECK(em.batch_size == 256);
    CHECK(em.threads == 3);
    CHECK(em.m == 4);
    CHECK(em.tau == 0.7);
    CHECK(em.snap_radius_m == 80.0);
    CHECK(em.delta_mu_tol_s == 2.0);
    CHECK(em.val_fraction == 0.15);
    CHECK(em.early_stop_patience == 3);
    CHECK(em.use_nll_assignment);
    CHECK(em.refresh_candidates);
    CHECK(em.seed == 9);
    CHECK(em.model.hidden_dim == 16);
    CHECK(em.table_weather_id == 5);
    CHECK(em.table_day_of_week == -1);
}

TEST_CASE("config echo is canonical json with every resolved value") {
    auto cfg = parse_text("[run]\nseed = 3\n[truth]\ncv = 0.2\n");
    auto j = cfg.to_json();
    CHECK(j.at("run").at("seed").get<uint64_t>() == 3);
    CHECK(j.at("truth").at("cv").get<double>() == 0.2);
    CHECK(j.at("grid").at("rows").get<int>() == 8);
    CHECK(j.at("model").at("hidden_dim").get<int>() == 32);
    CHECK(j.at("train").at("max_em_iters").get<int>() == 10);
    CHECK(j.at("eval").at("test_fraction").get<double>() == 0.2);
    CHECK(j.at("trips").at("route_probs").size() == 3);
}

TEST_CASE("interval labels name the nominal fix gap") {
    CHECK(config::interval_label(0.125) == "120s");
    CHECK(config::interval_label(0.0625) == "240s");
    CHECK(config::interval_label(0.03125) == "480s");
    CHECK(config::interval_label(1.0) == "15s");
    CHECK(config::interval_label(0.5) == "30s");
}

TEST_CASE("test-split membership is deterministic and tracks the fraction") {
    int in_test = 0;
    const int n = 20000;
    for (int64_t id = 0; id < n; ++id) {
        bool a = config::is_test_trajectory(77, id, 0.2);
        bool b = config::is_test_trajectory(77, id, 0.2);
        CHECK(a == b);
        if (a) ++in_test;
    }
    CHECK(in_test > n * 0.2 * 0.9);
    CHECK(in_test < n * 0.2 * 1.1);
    // Fraction zero disables the split entirely.
    for (int64_t id = 0; id < 100; ++id) {
        CHECK(!config::is_test_trajectory(77, id, 0.0));
    }
    // Different seeds pick different subsets.
    int diff = 0;
    for (int64_t id = 0; id < 1000; ++id) {
        if (config::is_test_trajectory(1, id, 0.2) != config::is_test_trajectory(2, id, 0.2)) ++diff;
    }
    CHECK(diff > 100);
}

TEST_CASE("gen writes a manifest, corpora, and deterministic artifacts") {
    auto dir = fs::temp_directory_path() / "sparse_eta_cli_gen";
    fs::remove_all(dir);
    auto cfg = write_and_load(dir, tiny_toml(dir / "out"));
    REQUIRE(cli::cmd_gen(cfg) == 0);

    CHECK(fs::exists(cli::network_file(cfg)));
    CHECK(fs::exists(cli::truth_file(cfg)));
    CHECK(fs::exists(cli::dense_file(cfg)));
    CHECK(fs::exists(cli::corpus_file(cfg, 0.25)));
    auto manifest = nlohmann::json::parse(slurp(cli::manifest_file(cfg)));
    CHECK(manifest.at("format") == "sparse-eta-manifest-v1");
    CHECK(manifest.at("seed").get<uint64_t>() == 42);
    CHECK(manifest.at("trips").get<int>() == 12);
    CHECK(manifest.at("nodes").get<int>() == 9);
    CHECK(manifest.at("segments").get<int>() == 24);
    REQUIRE(manifest.at("corpora").size() == 1);
    CHECK(manifest.at("corpora")[0].at("label") == "60s");
    CHECK(manifest.at("corpora")[0].at("trajectories").get<int>() == 12);

    auto corpus = simkit::load_sparse_trajectories(cli::corpus_file(cfg, 0.25));
    CHECK(corpus.size() == 12);
    auto net = netgraph::load_network(cli::network_file(cfg));
    CHECK(net.num_nodes() == 9);

    // Second run over the same config reproduces every artifact byte.
    auto before = slurp(cli::corpus_file(cfg, 0.25));
    auto manifest_before = slurp(cli::manifest_file(cfg));
    REQUIRE(cli::cmd_gen(cfg) == 0);
    CHECK(slurp(cli::corpus_file(cfg, 0.25)) == before);
    CHECK(slurp(cli::manifest_file(cfg)) == manifest_before);
    fs::remove_all(dir);
}

TEST_CASE("gen with zero trips still writes valid empty corpora") {
    auto dir = fs::temp_directory_path() / "sparse_eta_cli_gen0";
    fs::remove_all(dir);
    auto cfg = write_and_load(dir, tiny_toml(dir / "out", 0));
    REQUIRE(cli::cmd_gen(cfg) == 0);
    auto corpus = simkit::load_sparse_trajectories(cli::corpus_file(cfg, 0.25));
    CHECK(corpus.empty());
    auto manifest = nlohmann::json::parse(slurp(cli::manifest_file(cfg)));
    CHECK(manifest.at("trips").get<int>() == 0);
    fs::remove_all(dir);
}

TEST_CASE("train and eval run the pipeline end to end") {
    auto dir = fs::temp_directory_path() / "sparse_eta_cli_pipe";
    fs::remove_all(dir);
    auto cfg = write_and_load(dir, tiny_toml(dir / "out", 25));
    REQUIRE(cli::cmd_gen(cfg) == 0);
    REQUIRE(cli::cmd_train(cfg) == 0);
    auto ckpt_path = cli::checkpoint_file(cfg, 0.25);
    REQUIRE(fs::exists(ckpt_path));
    auto ckpt = emtrain::load_checkpoint(ckpt_path);
    CHECK(ckpt.state.iteration >= 1);
    CHECK(!ckpt.state.nll_history.empty());
    // The training split excludes the held-out trajectories.
    auto corpus = simkit::load_sparse_trajectories(cli::corpus_file(cfg, 0.25));
    size_t train_n = 0;
    for (const auto& t : corpus) {
        if (!config::is_test_trajectory(cfg.seed, t.trajectory_id, cfg.test_fraction)) ++train_n;
    }
    CHECK(train_n < corpus.size()); // some trajectories actually held out
    CHECK(ckpt.pair_count > 0);

    REQUIRE(cli::cmd_eval(cfg) == 0);
    auto rep = nlohmann::json::parse(slurp(cli::report_json_file(cfg)));
    CHECK(rep.at("tte").at("overall").at("n").get<int64_t>() > 0);
    CHECK(rep.at("route").contains("60s"));
    CHECK(rep.at("mu_recovery").contains("60s"));
    CHECK(rep.at("assignment_gain").contains("60s"));
    auto csv = slurp(cli::report_csv_file(cfg));
    CHECK(csv.find("tte_mape_pct,all,all,") != std::string::npos);
    for (int step : cfg.condition_steps) {
        CHECK(fs::exists(cli::conditions_file(cfg, 0.25, step)));
    }

    // Single-trajectory inference against an id present in the corpus.
    REQUIRE(cli::cmd_infer(cfg, corpus.front().trajectory_id, 0.25) == 0);
    auto infer_path = (fs::path(cfg.out_dir) /
                       ("infer_60s_" + std::to_string(corpus.front().trajectory_id) + ".json"))
                          .string();
    REQUIRE(fs::exists(infer_path));
    auto inf = nlohmann::json::parse(slurp(infer_path));
    CHECK(inf.at("trajectory_id").get<int64_t>() == corpus.front().trajectory_id);
    CHECK(inf.at("total_s").get<double>() > 0.0);
    CHECK(inf.at("pairs").is_array());

    REQUIRE(cli::cmd_export_conditions(cfg, 0.25) == 0);
    fs::remove_all(dir);
}

TEST_CASE("eval without a checkpoint and train without a network fail cleanly") {
    auto dir = fs::temp_directory_path() / "sparse_eta_cli_err";
    fs::remove_all(dir);
    auto cfg = write_and_load(dir, tiny_toml(dir / "out"));
    CHECK_THROWS(cli::cmd_train(cfg)); // nothing generated yet
    REQUIRE(cli::cmd_gen(cfg) == 0);
    CHECK_THROWS_AS(cli::cmd_eval(cfg), ValidationError); // no checkpoint yet
    CHECK_THROWS(cli::cmd_infer(cfg, 999999, 0.25)); // unknown trajectory id
    fs::remove_all(dir);
}

TEST_CASE("config file loading reports the failing line") {
    auto dir = fs::temp_directory_path() / "sparse_eta_cli_cfg";
    fs::create_directories(dir);
    auto path = dir / "bad.toml";
    std::ofstream(path) << "[run]\nseed = 1\n[grid]\nrows = \"no\"\n";
    try {
        config::load_config(path.string());
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        std::string msg = e.what();
        CHECK(msg.find("rows") != std::string::npos);
    }
    CHECK_THROWS_AS(config::load_config((dir / "absent.toml").string()), ParseError);
    fs::remove_all(dir);
}
