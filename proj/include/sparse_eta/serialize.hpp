#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "sparse_eta/stmodel.hpp"
#include "sparse_eta/tape.hpp"

namespace sparse_eta::serialize {

// Raw little-endian bytes <-> base64. Matrix payloads in checkpoint files use
// this so numeric round-trips are exact and byte-stable.
std::string base64_encode(const uint8_t* data, size_t n);
std::vector<uint8_t> base64_decode(const std::string& s);

std::string doubles_to_b64(const std::vector<double>& v);
std::vector<double> b64_to_doubles(const std::string& s);

std::string i64s_to_b64(const std::vector<int64_t>& v);
std::vector<int64_t> b64_to_i64s(const std::string& s);

nlohmann::json mat_to_json(const autodiff::Mat& m);
autodiff::Mat mat_from_json(const nlohmann::json& j);

nlohmann::json model_config_to_json(const stmodel::ModelConfig& cfg);
stmodel::ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::json params_to_json(const stmodel::ModelParams& p);
stmodel::ModelParams params_from_json(const nlohmann::json& j);

nlohmann::json adam_to_json(const stmodel::AdamState& s);
stmodel::AdamState adam_from_json(const nlohmann::json& j, const stmodel::ModelParams& p);

nlohmann::json table_to_json(const stmodel::TravelTimeTable& t);
stmodel::TravelTimeTable table_from_json(const nlohmann::json& j);

// Canonical file writer: sorted keys, one-space indent, trailing newline.
void write_json_file(const nlohmann::json& j, const std::string& path);
nlohmann::json read_json_file(const std::string& path);

} // namespace sparse_eta::serialize
