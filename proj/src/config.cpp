#include "sparse_eta/config.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "sparse_eta/common.hpp"
#include "sparse_eta/serialize.hpp"

namespace sparse_eta::config {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

// Removes a trailing # comment, respecting quoted strings.
std::string strip_comment(const std::string& line) {
    bool in_str = false;
    for (size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (c == '"') in_str = !in_str;
        if (c == '#' && !in_str) return line.substr(0, i);
    }
    return line;
}

[[noreturn]] void fail_at(const std::string& origin, int lineno, const std::string& what) {
    throw ParseError(origin + ":" + std::to_string(lineno) + ": " + what);
}

nlohmann::json parse_value(const std::string& s, size_t& pos, const std::string& origin,
                           int lineno) {
    while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
    if (pos >= s.size()) fail_at(origin, lineno, "missing value");
    char c = s[pos];
    if (c == '[') {
        ++pos;
        nlohmann::json arr = nlohmann::json::array();
        while (true) {
            while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
            if (pos >= s.size()) fail_at(origin, lineno, "unterminated array");
            if (s[pos] == ']') {
                ++pos;
                return arr;
            }
            arr.push_back(parse_value(s, pos, origin, lineno));
            while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
            if (pos < s.size() && s[pos] == ',') {
                ++pos;
            } else if (pos < s.size() && s[pos] == ']') {
                ++pos;
                return arr;
            } else {
                fail_at(origin, lineno, "expected ',' or ']' in array");
            }
        }
    }
    if (c == '"') {
        ++pos;
        std::string out;
        while (pos < s.size() && s[pos] != '"') {
            out.push_back(s[pos]);
            ++pos;
        }
        if (pos >= s.size()) fail_at(origin, lineno, "unterminated string");
        ++pos;
        return out;
    }
    // bare token: bool or number
    size_t end = pos;
    while (end < s.size() && s[end] != ',' && s[end] != ']' && s[end] != ' ' && s[end] != '\t') {
        ++end;
    }
    std::string tok = s.substr(pos, end - pos);
    pos = end;
    if (tok == "true") return true;
    if (tok == "false") return false;
    try {
        size_t used = 0;
        if (tok.find_first_of(".eE") == std::string::npos) {
            int64_t v = std::stoll(tok, &used);
            if (used == tok.size()) return v;
        } else {
            double v = std::stod(tok, &used);
            if (used == tok.size()) return v;
        }
    } catch (const std::exception&) {
    }
    fail_at(origin, lineno, "cannot parse value '" + tok + "'");
}

// Binds "section.key" values with consumed-key tracking so leftovers are
// reported as unknown keys.
class Binder {
public:
    Binder(const std::map<std::string, nlohmann::json>& values, std::string origin)
        : values_(values), origin_(std::move(origin)) {}

    bool has(const std::string& key) {
        auto it = values_.find(key);
        if (it == values_.end()) return false;
        used_.insert(key);
        return true;
    }

    template <typename T>
    void number(const std::string& key, T& out) {
        if (!has(key)) return;
        const auto& v = values_.at(key);
        if (!v.is_number()) type_error(key, "a number");
        out = v.get<T>();
    }

    void boolean(const std::string& key, bool& out) {
        if (!has(key)) return;
        const auto& v = values_.at(key);
        if (!v.is_boolean()) type_error(key, "a bool");
        out = v.get<bool>();
    }

    void string(const std::string& key, std::string& out) {
        if (!has(key)) return;
        const auto& v = values_.at(key);
        if (!v.is_string()) type_error(key, "a string");
        out = v.get<std::string>();
    }

    template <typename T>
    void number_list(const std::string& key, std::vector<T>& out) {
        if (!has(key)) return;
        const auto& v = values_.at(key);
        if (!v.is_array()) type_error(key, "an array of numbers");
        std::vector<T> parsed;
        for (const auto& e : v) {
            if (!e.is_number()) type_error(key, "an array of numbers");
            parsed.push_back(e.get<T>());
        }
        out = std::move(parsed);
    }

    void windows(const std::string& key, std::vector<std::pair<double, double>>& out) {
        if (!has(key)) return;
        const auto& v = values_.at(key);
        if (!v.is_array()) type_error(key, "an array of [start, end] pairs");
        std::vector<std::pair<double, double>> parsed;
        for (const auto& e : v) {
            if (!e.is_array() || e.size() != 2 || !e[0].is_number() || !e[1].is_number()) {
                type_error(key, "an array of [start, end] pairs");
            }
            parsed.emplace_back(e[0].get<double>(), e[1].get<double>());
        }
        out = std::move(parsed);
    }

    void triple(const std::string& key, std::array<double, 3>& out) {
        if (!has(key)) return;
        const auto& v = values_.at(key);
        if (!v.is_array() || v.size() != 3) type_error(key, "an array of 3 numbers");
        for (size_t i = 0; i < 3; ++i) {
            if (!v[i].is_number()) type_error(key, "an array of 3 numbers");
            out[i] = v[i].get<double>();
        }
    }

    void finish() const {
        std::string unknown;
        for (const auto& [key, _] : values_) {
            if (used_.count(key) == 0) unknown += (unknown.empty() ? "" : ", ") + key;
        }
        if (!unknown.empty()) {
            throw ParseError(origin_ + ": unknown config key(s): " + unknown);
        }
    }

private:
    [[noreturn]] void type_error(const std::string& key, const std::string& expected) const {
        throw ParseError(origin_ + ": key '" + key + "' must be " + expected);
    }

    const std::map<std::string, nlohmann::json>& values_;
    std::set<std::string> used_;
    std::string origin_;
};

} // namespace

std::map<std::string, nlohmann::json> parse_kv_document(const std::string& text,
                                                        const std::string& origin) {
    std::map<std::string, nlohmann::json> out;
    std::istringstream is(text);
    std::string raw;
    std::string section;
    int lineno = 0;
    while (std::getline(is, raw)) {
        ++lineno;
        std::string line = trim(strip_comment(raw));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']' || line.size() < 3) {
                fail_at(origin, lineno, "malformed section header '" + line + "'");
            }
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty()) fail_at(origin, lineno, "empty section name");
            continue;
        }
        size_t eq = line.find('=');
        if (eq == std::string::npos) fail_at(origin, lineno, "expected key = value");
        std::string key = trim(line.substr(0, eq));
        if (key.empty()) fail_at(origin, lineno, "empty key");
        if (section.empty()) fail_at(origin, lineno, "key '" + key + "' outside any [section]");
        std::string full = section + "." + key;
        if (out.count(full)) fail_at(origin, lineno, "duplicate key '" + full + "'");
        std::string rest = line.substr(eq + 1);
        size_t pos = 0;
        nlohmann::json value = parse_value(rest, pos, origin, lineno);
        while (pos < rest.size() && (rest[pos] == ' ' || rest[pos] == '\t')) ++pos;
        if (pos != rest.size()) fail_at(origin, lineno, "trailing characters after value");
        out.emplace(std::move(full), std::move(value));
    }
    return out;
}

ExperimentConfig config_from_values(const std::map<std::string, nlohmann::json>& values,
                                    const std::string& origin) {
    ExperimentConfig c;
    Binder b(values, origin);

    b.string("run.out_dir", c.out_dir);
    if (b.has("run.seed")) {
        const auto& v = values.at("run.seed");
        if (!v.is_number_integer() || v.get<int64_t>() < 0) {
            throw ParseError(origin + ": run.seed must be a nonnegative integer");
        }
        c.seed = v.get<uint64_t>();
        c.seed_set = true;
    }
    b.number("run.threads", c.threads);
    b.string("run.network_path", c.network_path);

    b.number("grid.rows", c.grid_rows);
    b.number("grid.cols", c.grid_cols);
    b.number("grid.spacing_m", c.grid_spacing_m);
    b.number("grid.artery_stride", c.grid_plan.artery_stride);
    b.number("grid.artery_kph", c.grid_plan.artery_kph);
    b.number("grid.local_kph", c.grid_plan.local_kph);
    b.number("grid.artery_lanes", c.grid_plan.artery_lanes);
    b.number("grid.local_lanes", c.grid_plan.local_lanes);
    b.number("grid.origin_lon", c.grid_plan.origin_lon);
    b.number("grid.origin_lat", c.grid_plan.origin_lat);

    b.number("truth.artery_peak", c.truth.artery_peak);
    b.number("truth.local_peak", c.truth.local_peak);
    b.number("truth.morning_start_s", c.truth.morning_start_s);
    b.number("truth.morning_end_s", c.truth.morning_end_s);
    b.number("truth.evening_start_s", c.truth.evening_start_s);
    b.number("truth.evening_end_s", c.truth.evening_end_s);
    b.number("truth.ramp_s", c.truth.ramp_s);
    b.number("truth.cv", c.truth.cv);
    b.number("truth.segment_noise", c.truth.segment_noise);

    b.number("trips.count", c.trip_count);
    b.number("trips.days", c.days);
    b.number("trips.base_unix", c.base_unix);
    b.number("trips.min_hops", c.min_hops);
    b.number("trips.weather_id", c.weather_id);
    b.number("trips.holiday_id", c.holiday_id);
    b.triple("trips.route_probs", c.route_probs);
    b.windows("trips.departure_windows", c.departure_windows);

    b.number_list("sparsify.keep_ratios", c.keep_ratios);
    b.number("sparsify.jitter_m", c.jitter_m);

    b.number("model.hidden_dim", c.model.hidden_dim);
    b.number("model.head_hidden_dim", c.model.head_hidden_dim);
    b.number("model.weather_vocab", c.model.weather_vocab);
    b.number("model.holiday_vocab", c.model.holiday_vocab);
    b.number("model.mu_log_clamp", c.model.mu_log_clamp);
    b.number("model.sigma_min_s", c.model.sigma_min_s);
    b.number("model.sigma_init_s", c.model.sigma_init_s);

    b.number_list("train.keep_ratios", c.train_keep_ratios);
    b.number("train.max_em_iters", c.max_em_iters);
    b.number("train.epochs", c.epochs);
    b.number("train.lr", c.lr);
    b.number("train.lr_decay", c.lr_decay);
    b.number("train.batch_size", c.batch_size);
    b.number("train.m", c.m);
    b.number("train.tau", c.tau);
    b.number("train.snap_radius_m", c.snap_radius_m);
    b.number("train.delta_mu_tol_s", c.delta_mu_tol_s);
    b.number("train.val_fraction", c.val_fraction);
    b.number("train.early_stop_patience", c.early_stop_patience);
    b.boolean("train.use_nll_assignment", c.use_nll_assignment);
    b.boolean("train.refresh_candidates", c.refresh_candidates);
    b.number("train.table_day_of_week", c.table_day_of_week);
    b.number("train.table_weather_id", c.table_weather_id);
    b.number("train.table_holiday_id", c.table_holiday_id);

    b.number("eval.test_fraction", c.test_fraction);
    b.number_list("eval.keep_ratios", c.eval_keep_ratios);
    b.boolean("eval.undirected_overlap", c.undirected_overlap);
    b.number_list("eval.condition_steps", c.condition_steps);

    b.finish();

    if (c.grid_rows < 2 || c.grid_cols < 2) throw ValidationError("grid must be at least 2x2");
    if (c.trip_count < 0) throw ValidationError("trips.count must be >= 0");
    if (c.days < 1) throw ValidationError("trips.days must be >= 1");
    if (c.keep_ratios.empty()) throw ValidationError("sparsify.keep_ratios must be nonempty");
    for (double r : c.keep_ratios) {
        if (!(r > 0.0 && r <= 1.0)) throw ValidationError("keep ratios must lie in (0, 1]");
    }
    if (!(c.test_fraction >= 0.0 && c.test_fraction < 1.0)) {
        throw ValidationError("eval.test_fraction must lie in [0, 1)");
    }
    for (int s : c.condition_steps) {
        if (s < 0 || s >= kTimeSteps) throw ValidationError("eval.condition_steps out of range");
    }
    if (c.departure_windows.empty()) {
        throw ValidationError("trips.departure_windows must be nonempty");
    }
    for (const auto& [a, e] : c.departure_windows) {
        if (!(a >= 0.0 && e > a && e <= kSecondsPerDay)) {
            throw ValidationError("departure windows must satisfy 0 <= start < end <= 86400");
        }
    }
    return c;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("cannot read config file " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return config_from_values(parse_kv_document(buf.str(), path), path);
}

emtrain::EmConfig ExperimentConfig::em_config() const {
    emtrain::EmConfig e;
    e.max_em_iters = max_em_iters;
    e.epochs = epochs;
    e.lr = lr;
    e.lr_decay = lr_decay;
    e.batch_size = batch_size;
    e.threads = threads;
    e.m = m;
    e.tau = tau;
    e.snap_radius_m = snap_radius_m;
    e.delta_mu_tol_s = delta_mu_tol_s;
    e.val_fraction = val_fraction;
    e.early_stop_patience = early_stop_patience;
    e.use_nll_assignment = use_nll_assignment;
    e.refresh_candidates = refresh_candidates;
    e.seed = seed;
    e.model = model;
    e.table_day_of_week = table_day_of_week;
    e.table_weather_id = table_weather_id;
    e.table_holiday_id = table_holiday_id;
    return e;
}

nlohmann::json ExperimentConfig::to_json() const {
    nlohmann::json windows = nlohmann::json::array();
    for (const auto& [a, e] : departure_windows) windows.push_back({a, e});
    return nlohmann::json{
        {"run",
         {{"out_dir", out_dir},
          {"seed", seed},
          {"threads", threads},
          {"network_path", network_path}}},
        {"grid",
         {{"rows", grid_rows},
          {"cols", grid_cols},
          {"spacing_m", grid_spacing_m},
          {"artery_stride", grid_plan.artery_stride},
          {"artery_kph", grid_plan.artery_kph},
          {"local_kph", grid_plan.local_kph},
          {"artery_lanes", grid_plan.artery_lanes},
          {"local_lanes", grid_plan.local_lanes},
          {"origin_lon", grid_plan.origin_lon},
          {"origin_lat", grid_plan.origin_lat}}},
        {"truth",
         {{"artery_peak", truth.artery_peak},
          {"local_peak", truth.local_peak},
          {"morning_start_s", truth.morning_start_s},
          {"morning_end_s", truth.morning_end_s},
          {"evening_start_s", truth.evening_start_s},
          {"evening_end_s", truth.evening_end_s},
          {"ramp_s", truth.ramp_s},
          {"cv", truth.cv},
          {"segment_noise", truth.segment_noise}}},
        {"trips",
         {{"count", trip_count},
          {"days", days},
          {"base_unix", base_unix},
          {"min_hops", min_hops},
          {"weather_id", weather_id},
          {"holiday_id", holiday_id},
          {"route_probs", route_probs},
          {"departure_windows", windows}}},
        {"sparsify", {{"keep_ratios", keep_ratios}, {"jitter_m", jitter_m}}},
        {"model", serialize::model_config_to_json(model)},
        {"train",
         {{"keep_ratios", resolved_train_ratios()},
          {"max_em_iters", max_em_iters},
          {"epochs", epochs},
          {"lr", lr},
          {"lr_decay", lr_decay},
          {"batch_size", batch_size},
          {"m", m},
          {"tau", tau},
          {"snap_radius_m", snap_radius_m},
          {"delta_mu_tol_s", delta_mu_tol_s},
          {"val_fraction", val_fraction},
          {"early_stop_patience", early_stop_patience},
          {"use_nll_assignment", use_nll_assignment},
          {"refresh_candidates", refresh_candidates},
          {"table_day_of_week", table_day_of_week},
          {"table_weather_id", table_weather_id},
          {"table_holiday_id", table_holiday_id}}},
        {"eval",
         {{"test_fraction", test_fraction},
          {"keep_ratios", resolved_eval_ratios()},
          {"undirected_overlap", undirected_overlap},
          {"condition_steps", condition_steps}}},
    };
}

std::string interval_label(double keep_ratio) {
    long stride = std::lround(1.0 / keep_ratio);
    if (stride < 1) stride = 1;
    long gap = stride * static_cast<long>(simkit::kTickSeconds);
    return std::to_string(gap) + "s";
}

bool is_test_trajectory(uint64_t seed, int64_t trajectory_id, double test_fraction) {
    uint64_t h = mix_seed(seed ^ 0x6576616c73706c74ULL, static_cast<uint64_t>(trajectory_id));
    return static_cast<double>(h % 1000000ULL) < test_fraction * 1e6;
}

} // namespace sparse_eta::config
