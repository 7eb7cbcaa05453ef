#include "sparse_eta/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "sparse_eta/common.hpp"

static_assert(std::endian::native == std::endian::little,
              "matrix payloads are written as little-endian doubles");

namespace sparse_eta::serialize {

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int decode_char(char c) {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
}

} // namespace

std::string base64_encode(const uint8_t* data, size_t n) {
    std::string out;
    out.reserve((n + 2) / 3 * 4);
    for (size_t i = 0; i < n; i += 3) {
        uint32_t v = static_cast<uint32_t>(data[i]) << 16;
        if (i + 1 < n) v |= static_cast<uint32_t>(data[i + 1]) << 8;
        if (i + 2 < n) v |= static_cast<uint32_t>(data[i + 2]);
        out.push_back(kAlphabet[(v >> 18) & 63]);
        out.push_back(kAlphabet[(v >> 12) & 63]);
        out.push_back(i + 1 < n ? kAlphabet[(v >> 6) & 63] : '=');
        out.push_back(i + 2 < n ? kAlphabet[v & 63] : '=');
    }
    return out;
}

std::vector<uint8_t> base64_decode(const std::string& s) {
    if (s.size() % 4 != 0) throw ParseError("base64 payload length not a multiple of 4");
    std::vector<uint8_t> out;
    out.reserve(s.size() / 4 * 3);
    for (size_t i = 0; i < s.size(); i += 4) {
        uint32_t v = 0;
        int pad = 0;
        for (size_t k = 0; k < 4; ++k) {
            char c = s[i + k];
            if (c == '=') {
                if (i + 4 != s.size() || k < 2) throw ParseError("base64 misplaced padding");
                ++pad;
                v <<= 6;
                continue;
            }
            if (pad > 0) throw ParseError("base64 data after padding");
            int d = decode_char(c);
            if (d < 0) throw ParseError("base64 invalid character");
            v = (v << 6) | static_cast<uint32_t>(d);
        }
        out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
        if (pad < 2) out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
        if (pad < 1) out.push_back(static_cast<uint8_t>(v & 0xff));
    }
    return out;
}

std::string doubles_to_b64(const std::vector<double>& v) {
    return base64_encode(reinterpret_cast<const uint8_t*>(v.data()), v.size() * sizeof(double));
}

std::vector<double> b64_to_doubles(const std::string& s) {
    std::vector<uint8_t> bytes = base64_decode(s);
    if (bytes.size() % sizeof(double) != 0) throw ParseError("binary payload is not a double array");
    std::vector<double> out(bytes.size() / sizeof(double));
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

std::string i64s_to_b64(const std::vector<int64_t>& v) {
    return base64_encode(reinterpret_cast<const uint8_t*>(v.data()), v.size() * sizeof(int64_t));
}

std::vector<int64_t> b64_to_i64s(const std::string& s) {
    std::vector<uint8_t> bytes = base64_decode(s);
    if (bytes.size() % sizeof(int64_t) != 0) throw ParseError("binary payload is not an int64 array");
    std::vector<int64_t> out(bytes.size() / sizeof(int64_t));
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

nlohmann::json mat_to_json(const autodiff::Mat& m) {
    return nlohmann::json{{"rows", m.rows}, {"cols", m.cols}, {"b64", doubles_to_b64(m.a)}};
}

autodiff::Mat mat_from_json(const nlohmann::json& j) {
    autodiff::Mat m;
    m.rows = j.at("rows").get<int>();
    m.cols = j.at("cols").get<int>();
    m.a = b64_to_doubles(j.at("b64").get<std::string>());
    if (m.rows < 0 || m.cols < 0 ||
        m.a.size() != static_cast<size_t>(m.rows) * static_cast<size_t>(m.cols)) {
        throw ParseError("matrix payload size does not match its shape");
    }
    return m;
}

nlohmann::json model_config_to_json(const stmodel::ModelConfig& cfg) {
    return nlohmann::json{
        {"hidden_dim", cfg.hidden_dim},
        {"class_embed_dim", cfg.class_embed_dim},
        {"lanes_embed_dim", cfg.lanes_embed_dim},
        {"oneway_embed_dim", cfg.oneway_embed_dim},
        {"weather_embed_dim", cfg.weather_embed_dim},
        {"holiday_embed_dim", cfg.holiday_embed_dim},
        {"weather_vocab", cfg.weather_vocab},
        {"holiday_vocab", cfg.holiday_vocab},
        {"head_hidden_dim", cfg.head_hidden_dim},
        {"mu_log_clamp", cfg.mu_log_clamp},
        {"sigma_min_s", cfg.sigma_min_s},
        {"sigma_init_s", cfg.sigma_init_s},
    };
}

stmodel::ModelConfig model_config_from_json(const nlohmann::json& j) {
    stmodel::ModelConfig cfg;
    cfg.hidden_dim = j.at("hidden_dim").get<int>();
    cfg.class_embed_dim = j.at("class_embed_dim").get<int>();
    cfg.lanes_embed_dim = j.at("lanes_embed_dim").get<int>();
    cfg.oneway_embed_dim = j.at("oneway_embed_dim").get<int>();
    cfg.weather_embed_dim = j.at("weather_embed_dim").get<int>();
    cfg.holiday_embed_dim = j.at("holiday_embed_dim").get<int>();
    cfg.weather_vocab = j.at("weather_vocab").get<int>();
    cfg.holiday_vocab = j.at("holiday_vocab").get<int>();
    cfg.head_hidden_dim = j.at("head_hidden_dim").get<int>();
    cfg.mu_log_clamp = j.at("mu_log_clamp").get<double>();
    cfg.sigma_min_s = j.at("sigma_min_s").get<double>();
    cfg.sigma_init_s = j.at("sigma_init_s").get<double>();
    return cfg;
}

nlohmann::json params_to_json(const stmodel::ModelParams& p) {
    nlohmann::json mats;
    const auto& names = stmodel::ModelParams::mat_names();
    for (size_t i = 0; i < p.mats.size(); ++i) mats[names[i]] = mat_to_json(p.mats[i]);
    return nlohmann::json{{"config", model_config_to_json(p.cfg)}, {"mats", mats}};
}

stmodel::ModelParams params_from_json(const nlohmann::json& j) {
    stmodel::ModelParams ref = stmodel::ModelParams::init(model_config_from_json(j.at("config")), 0);
    const auto& names = stmodel::ModelParams::mat_names();
    const nlohmann::json& mats = j.at("mats");
    for (size_t i = 0; i < ref.mats.size(); ++i) {
        autodiff::Mat m = mat_from_json(mats.at(names[i]));
        if (m.rows != ref.mats[i].rows || m.cols != ref.mats[i].cols) {
            throw ParseError("checkpoint matrix " + names[i] + " has an unexpected shape");
        }
        ref.mats[i] = std::move(m);
    }
    return ref;
}

nlohmann::json adam_to_json(const stmodel::AdamState& s) {
    nlohmann::json m = nlohmann::json::array();
    nlohmann::json v = nlohmann::json::array();
    for (const auto& x : s.m) m.push_back(mat_to_json(x));
    for (const auto& x : s.v) v.push_back(mat_to_json(x));
    return nlohmann::json{{"t", s.t}, {"m", m}, {"v", v}};
}

stmodel::AdamState adam_from_json(const nlohmann::json& j, const stmodel::ModelParams& p) {
    stmodel::AdamState s = stmodel::AdamState::zeros_like(p);
    s.t = j.at("t").get<int64_t>();
    const nlohmann::json& m = j.at("m");
    const nlohmann::json& v = j.at("v");
    if (m.size() != s.m.size() || v.size() != s.v.size()) {
        throw ParseError("optimizer state size does not match the model");
    }
    for (size_t i = 0; i < s.m.size(); ++i) {
        s.m[i] = mat_from_json(m[i]);
        s.v[i] = mat_from_json(v[i]);
    }
    return s;
}

nlohmann::json table_to_json(const stmodel::TravelTimeTable& t) {
    return nlohmann::json{
        {"revision", t.revision}, {"mu", mat_to_json(t.mu)}, {"sigma", mat_to_json(t.sigma)}};
}

stmodel::TravelTimeTable table_from_json(const nlohmann::json& j) {
    stmodel::TravelTimeTable t;
    t.revision = j.at("revision").get<int64_t>();
    t.mu = mat_from_json(j.at("mu"));
    t.sigma = mat_from_json(j.at("sigma"));
    return t;
}

void write_json_file(const nlohmann::json& j, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot open " + path + " for writing");
    out << j.dump(1) << "\n";
    if (!out) throw ValidationError("failed writing " + path);
}

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path + ": " + e.what());
    }
}

} // namespace sparse_eta::serialize
