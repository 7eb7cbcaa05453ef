#include "sparse_eta/common.hpp"

#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace sparse_eta {

namespace {

LogLevel parse_env_level() {
    const char* env = std::getenv("SPARSE_ETA_LOG");
    if (!env) return LogLevel::Warn;
    if (std::strcmp(env, "debug") == 0) return LogLevel::Debug;
    if (std::strcmp(env, "info") == 0) return LogLevel::Info;
    if (std::strcmp(env, "warn") == 0) return LogLevel::Warn;
    if (std::strcmp(env, "error") == 0) return LogLevel::Error;
    if (std::strcmp(env, "off") == 0) return LogLevel::Off;
    return LogLevel::Warn;
}

LogLevel g_level = parse_env_level();

const char* level_tag(LogLevel lvl) {
    switch (lvl) {
        case LogLevel::Debug: return "debug";
        case LogLevel::Info: return "info";
        case LogLevel::Warn: return "warn";
        case LogLevel::Error: return "error";
        default: return "?";
    }
}

} // namespace

LogLevel log_level() { return g_level; }

void set_log_level(LogLevel lvl) { g_level = lvl; }

void log_line(LogLevel lvl, const std::string& msg) {
    if (static_cast<int>(lvl) < static_cast<int>(g_level)) return;
    std::fprintf(stderr, "[%s] %s\n", level_tag(lvl), msg.c_str());
}

} // namespace sparse_eta
